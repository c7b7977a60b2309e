"""Weighted least squares in the two-group-mean parameterization.

The outcome model is y = t*mu_t + (1-t)*mu_c + x @ beta with no intercept, so
the treatment effect is the plain contrast mu_t - mu_c and the normal
equations coincide with the first rows of the stacked estimating equations
used for the sandwich variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cace_ipw.data import Dataset
from cace_ipw.weights import WeightVector

CONDITION_LIMIT = 1e12


class RankDeficiencyError(ValueError):
    def __init__(self, message: str, columns: tuple[str, ...] = ()):
        self.columns = columns
        super().__init__(message)


@dataclass(frozen=True)
class WlsFit:
    """Weighted least-squares solution and the pieces the variance stage needs."""

    covariate_names: tuple[str, ...]
    mu_t: float
    mu_c: float
    beta: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    xbar_w_t: np.ndarray
    xbar_w_c: np.ndarray
    ybar_w_t: float
    ybar_w_c: float

    @property
    def k(self) -> int:
        return len(self.covariate_names)


def fit_wls(d: Dataset, w: WeightVector, covariates: tuple[str, ...]) -> WlsFit:
    """Solve the weighted normal equations for (mu_t, mu_c, beta).

    The design is [t, 1-t, X]. The solve is SVD-based; a relative condition
    estimate above 1e12 raises RankDeficiencyError naming the columns with
    the largest loadings in the near-null direction.
    """
    covariates = tuple(covariates)
    t = d.treat.astype(np.float64)
    x = d.matrix(covariates)
    design = np.column_stack([t, 1.0 - t, x])
    wv = w.values
    wt_t = float(wv[d.treat == 1].sum())
    wt_c = float(wv[d.treat == 0].sum())
    if wt_t <= 0.0 or wt_c <= 0.0:
        raise RankDeficiencyError("zero total weight in one arm; group means are undefined")
    normal = design.T @ (design * wv[:, None])
    rhs = design.T @ (wv * d.outcome)
    u, s, vt = np.linalg.svd(normal)
    if s[0] <= 0.0 or s[-1] <= 0.0 or s[0] / s[-1] > CONDITION_LIMIT:
        null_dir = np.abs(vt[-1])
        labels = ("treatment mean", "control mean", *covariates)
        offenders = tuple(labels[i] for i in np.nonzero(null_dir > 0.5 * null_dir.max())[0])
        raise RankDeficiencyError(
            "weighted design is rank deficient (condition above "
            f"{CONDITION_LIMIT:.0e}); offending columns: {', '.join(offenders)}",
            columns=offenders,
        )
    params = vt.T @ ((u.T @ rhs) / s)
    fitted = design @ params
    residuals = d.outcome - fitted
    t_mask = d.treat == 1
    xbar_t = (x[t_mask] * wv[t_mask, None]).sum(axis=0) / wt_t
    xbar_c = (x[~t_mask] * wv[~t_mask, None]).sum(axis=0) / wt_c
    return WlsFit(
        covariate_names=covariates,
        mu_t=float(params[0]),
        mu_c=float(params[1]),
        beta=params[2:].copy(),
        residuals=residuals,
        fitted=fitted,
        xbar_w_t=xbar_t,
        xbar_w_c=xbar_c,
        ybar_w_t=float((wv[t_mask] * d.outcome[t_mask]).sum() / wt_t),
        ybar_w_c=float((wv[~t_mask] * d.outcome[~t_mask]).sum() / wt_c),
    )


def wls_treatment_effect(f: WlsFit) -> float:
    """The fitted contrast mu_t - mu_c.

    Algebraically identical to the weighted outcome-mean difference minus
    the weighted covariate-mean difference times beta.
    """
    return f.mu_t - f.mu_c
