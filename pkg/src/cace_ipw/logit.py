"""Arm-specific logistic models for service receipt.

Each randomized arm gets its own receipt model, fit by damped Newton-Raphson
on the unweighted Bernoulli log-likelihood. Predictions from one arm's model
are applied to the other arm's rows downstream, which is why cluster fixed
effects are not supported here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from cace_ipw.data import Dataset

MAX_ITERATIONS = 100
SCORE_TOLERANCE = 1e-8
COEF_DIVERGENCE_BOUND = 30.0
SEPARATION_RESIDUAL_LIMIT = 1e-6
MAX_STEP_HALVINGS = 40
HESSIAN_CONDITION_LIMIT = 1e12

ARM_TREATMENT = "treatment"
ARM_CONTROL = "control"


class FitError(RuntimeError):
    """Propensity model fitting failure (separation, singularity, or no convergence)."""

    def __init__(self, message: str, *, reason: str):
        self.reason = reason
        super().__init__(message)


@dataclass(frozen=True)
class LogitFit:
    """Fitted receipt model for one arm.

    `coefficients` aligns with `covariate_names`; `loglik_path` records the
    accepted log-likelihood after each Newton step (non-decreasing).
    """

    arm: str
    covariate_names: tuple[str, ...]
    intercept: float
    coefficients: np.ndarray
    converged: bool
    iterations: int
    max_abs_score: float
    loglik: float
    loglik_path: tuple[float, ...] = ()

    @property
    def k(self) -> int:
        return len(self.covariate_names)

    def params(self) -> np.ndarray:
        return np.concatenate(([self.intercept], self.coefficients))

    def summary(self) -> str:
        lines = [
            f"receipt model, {self.arm} arm",
            f"  converged: {self.converged} after {self.iterations} iterations (max |score| {self.max_abs_score:.3e})",
            f"  log-likelihood: {self.loglik:.6f}",
            f"  intercept: {self.intercept:+.6f}",
        ]
        for name, value in zip(self.covariate_names, self.coefficients):
            lines.append(f"  {name}: {value:+.6f}")
        return "\n".join(lines)


@dataclass(frozen=True)
class PropensityVector:
    values: np.ndarray
    group_of_model: str


def _log_likelihood(z: np.ndarray, r: np.ndarray) -> float:
    # sum r*z - log(1 + exp(z)), computed stably
    return float(np.sum(r * z - np.logaddexp(0.0, z)))


def newton_logit(design: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, int, float, list[float]]:
    """Maximize the Bernoulli log-likelihood over `design @ params`.

    Returns (params, iterations, max_abs_score, loglik_path). Raises FitError
    on separation (diverging coefficients, singular Hessian, or a perfectly
    classified sample) or when the score tolerance is not met within
    MAX_ITERATIONS.
    """
    n, p = design.shape
    params = np.zeros(p)
    z = design @ params
    ll = _log_likelihood(z, r)
    path = [ll]
    for iteration in range(1, MAX_ITERATIONS + 1):
        prob = expit(z)
        score = design.T @ (r - prob)
        max_score = float(np.max(np.abs(score))) if p else 0.0
        if max_score <= SCORE_TOLERANCE:
            # A vanishing score with every probability at its label is the
            # signature of complete separation: the likelihood climbs along
            # a ray and the iterate is an artifact of the tolerance.
            if float(np.max(np.abs(r - prob))) < SEPARATION_RESIDUAL_LIMIT:
                raise FitError(
                    "the receipt model classifies every row perfectly; "
                    "the data are separated",
                    reason="separation",
                )
            return params, iteration - 1, max_score, path
        info = design.T @ (design * (prob * (1.0 - prob))[:, None])
        try:
            cond = np.linalg.cond(info)
        except np.linalg.LinAlgError:
            cond = np.inf
        if not np.isfinite(cond) or cond > HESSIAN_CONDITION_LIMIT:
            raise FitError(
                "singular information matrix while fitting the receipt model, "
                "typically caused by separated or collinear covariates",
                reason="separation",
            )
        step = np.linalg.solve(info, score)
        scale = 1.0
        # Accept any step that does not measurably hurt the likelihood. The
        # slack covers summation rounding, which otherwise rejects the final
        # (quadratic-phase) Newton steps whose true gain is below precision.
        slack = 1e-10 * (1.0 + abs(ll))
        for _ in range(MAX_STEP_HALVINGS):
            candidate = params + scale * step
            z_new = design @ candidate
            ll_new = _log_likelihood(z_new, r)
            if ll_new >= ll - slack:
                break
            scale *= 0.5
        else:
            raise FitError("step-halving failed to improve the likelihood", reason="nonconvergence")
        params, z, ll = candidate, z_new, ll_new
        path.append(ll)
        if float(np.max(np.abs(params))) > COEF_DIVERGENCE_BOUND:
            raise FitError(
                "receipt model coefficients diverged past "
                f"{COEF_DIVERGENCE_BOUND:g}; the data are (quasi-)separated",
                reason="separation",
            )
    prob = expit(z)
    score = design.T @ (r - prob)
    raise FitError(
        f"receipt model did not converge in {MAX_ITERATIONS} iterations "
        f"(max |score| {float(np.max(np.abs(score))):.3e})",
        reason="nonconvergence",
    )


def fit_logit(d: Dataset, arm: str, covariate_names: tuple[str, ...] | None = None) -> LogitFit:
    """Fit the receipt model for one arm by maximum likelihood.

    Parameters
    ----------
    d : Dataset
    arm : {"treatment", "control"}
    covariate_names : optional override of the dataset's per-arm role list.

    Raises
    ------
    FitError
        If the arm has only one receipt class, or the solver detects
        separation or fails to converge.
    """
    if arm == ARM_TREATMENT:
        mask = d.treat == 1
        names = d.covariate_names_logit_t if covariate_names is None else tuple(covariate_names)
    elif arm == ARM_CONTROL:
        mask = d.treat == 0
        names = d.covariate_names_logit_c if covariate_names is None else tuple(covariate_names)
    else:
        raise ValueError(f"unknown arm {arm!r}")
    r = d.receipt[mask].astype(np.float64)
    if r.size == 0:
        raise FitError(f"no rows in the {arm} arm", reason="degenerate")
    if r.min() == r.max():
        raise FitError(
            f"every {arm}-arm row has receipt={int(r[0])}; an intercept cannot be estimated",
            reason="degenerate",
        )
    x = d.matrix(names)[mask]
    design = np.column_stack([np.ones(r.size), x])
    params, iterations, max_score, path = newton_logit(design, r)
    return LogitFit(
        arm=arm,
        covariate_names=names,
        intercept=float(params[0]),
        coefficients=params[1:].copy(),
        converged=True,
        iterations=iterations,
        max_abs_score=max_score,
        loglik=path[-1],
        loglik_path=tuple(path),
    )


def predict_propensity(f: LogitFit, rows: np.ndarray) -> PropensityVector:
    """Evaluate the fitted model on a covariate matrix aligned with `f.covariate_names`."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[1] != f.k:
        raise ValueError(f"covariate matrix has {rows.shape[1]} columns, model expects {f.k}")
    z = f.intercept + rows @ f.coefficients
    return PropensityVector(values=expit(z), group_of_model=f.arm)


def predict_for_dataset(f: LogitFit, d: Dataset) -> np.ndarray:
    """Propensities for every dataset row under `f`, in dataset row order."""
    return predict_propensity(f, d.matrix(f.covariate_names)).values


def logit_residuals(f: LogitFit, d: Dataset) -> np.ndarray:
    """Residuals r - e over the fit's own arm rows, in dataset row order."""
    if not f.converged:
        raise FitError("residuals requested from an unconverged fit", reason="nonconvergence")
    mask = d.treat == (1 if f.arm == ARM_TREATMENT else 0)
    e = predict_propensity(f, d.matrix(f.covariate_names)[mask]).values
    return d.receipt[mask].astype(np.float64) - e
