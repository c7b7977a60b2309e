"""Independent reference implementations used to cross-check the library.

Everything here is written against the estimators' mathematical definitions
with deliberately different numerics (dense grid search, explicit normal
equations, finite differences) so that agreement with the library is
evidence rather than tautology. Nothing in this module calls into
cace_ipw's solvers; it only consumes plain arrays and the public dataclass
fields needed to assemble parameter vectors.
"""

from __future__ import annotations

import math

import numpy as np

from cace_ipw.weights import SHARE_FROM_C, SHARE_FROM_T, EstimandKind


class OracleBoundaryError(RuntimeError):
    """Grid maximizer ended on the search boundary: no interior MLE found."""


# ---------------------------------------------------------------------------
# logistic regression by dense grid search


def _grid_loglik(design: np.ndarray, r: np.ndarray, params: np.ndarray) -> float:
    z = design @ params
    # log(expit(z)) = -log1p(exp(-z)), computed stably on both tails
    pos = -np.logaddexp(0.0, -z)
    neg = -np.logaddexp(0.0, z)
    return float(np.sum(np.where(r == 1, pos, neg)))


def grid_logit_mle(
    design: np.ndarray,
    r: np.ndarray,
    half_width: float = 8.0,
    points: int = 21,
    stages: int = 6,
) -> np.ndarray:
    """Maximize the logistic log likelihood over a refined dense grid.

    Each stage lays a `points`-per-axis lattice centered on the current
    best point and then shrinks the span. A best point that keeps landing
    on the lattice boundary after the widen-once retry means the
    likelihood climbs toward infinity along some direction (separated
    data); that raises OracleBoundaryError rather than returning a
    boundary artifact.
    """
    design = np.asarray(design, dtype=np.float64)
    r = np.asarray(r)
    p = design.shape[1]
    center = np.zeros(p)
    span = half_width
    widened = False
    for stage in range(stages):
        axes = [np.linspace(center[j] - span, center[j] + span, points) for j in range(p)]
        mesh = np.meshgrid(*axes, indexing="ij")
        flat = np.stack([m.ravel() for m in mesh], axis=1)
        lls = np.array([_grid_loglik(design, r, row) for row in flat])
        best = flat[int(np.argmax(lls))]
        on_edge = any(
            math.isclose(best[j], axes[j][0]) or math.isclose(best[j], axes[j][-1])
            for j in range(p)
        )
        if stage == 0 and on_edge:
            if widened:
                raise OracleBoundaryError("grid maximizer stuck on the boundary")
            # one widen-and-retry before declaring the MLE unbounded
            span = half_width * 4
            widened = True
            stage0 = [np.linspace(-span, span, points) for _ in range(p)]
            mesh = np.meshgrid(*stage0, indexing="ij")
            flat = np.stack([m.ravel() for m in mesh], axis=1)
            lls = np.array([_grid_loglik(design, r, row) for row in flat])
            best = flat[int(np.argmax(lls))]
            if any(
                math.isclose(best[j], stage0[j][0]) or math.isclose(best[j], stage0[j][-1])
                for j in range(p)
            ):
                raise OracleBoundaryError("grid maximizer stuck on the boundary")
        center = best
        # next lattice spans a few current cells in each direction
        span = span * 2.5 / (points - 1)
    return center


# ---------------------------------------------------------------------------
# weighted least squares by explicit normal equations


def normal_equations_wls(
    t: np.ndarray, x: np.ndarray, y: np.ndarray, w: np.ndarray
) -> np.ndarray:
    """Solve the two-mean-plus-covariates regression by brute force.

    Returns the stacked coefficient vector (mu_t, mu_c, beta...). The
    design is [T, 1-T, X] with no intercept.
    """
    t = np.asarray(t, dtype=np.float64)
    design = np.column_stack([t, 1.0 - t, np.asarray(x, dtype=np.float64)])
    ww = np.asarray(w, dtype=np.float64)
    xtwx = design.T @ (design * ww[:, None])
    xtwy = design.T @ (ww * np.asarray(y, dtype=np.float64))
    return np.linalg.inv(xtwx) @ xtwy


# ---------------------------------------------------------------------------
# closed-form latent-stratum shares under independent receipt draws


def closed_form_shares(rate_t: float, rate_c: float) -> dict[str, float]:
    return {
        "11": rate_t * rate_c,
        "10": rate_t * (1.0 - rate_c),
        "01": (1.0 - rate_t) * rate_c,
        "00": (1.0 - rate_t) * (1.0 - rate_c),
    }


# ---------------------------------------------------------------------------
# quantiles by sorting (linear interpolation on order statistics)


def sort_quantile(values, q: float) -> float:
    s = sorted(float(v) for v in values)
    n = len(s)
    if n == 1:
        return s[0]
    h = (n - 1) * q
    lo = int(math.floor(h))
    if lo >= n - 1:
        return s[-1]
    return s[lo] + (h - lo) * (s[lo + 1] - s[lo])


# ---------------------------------------------------------------------------
# stacked estimating equations: mean score and finite-difference Jacobian


def _expit(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


class ScoreOracle:
    """Mean estimating function for one estimator, as a function of the
    free parameter vector.

    The parameter vector concatenates, in the library's block order:
    outcome means (mu_t, mu_c), outcome covariate coefficients, then the
    receipt-model coefficient blocks the estimator depends on, then (for
    the ratio and IV forms) the recipient share and the effect itself.
    Weights are recomputed from the receipt-model blocks inside every
    call, so differentiating this function picks up the feedback of the
    receipt models on the weighted outcome equations.
    """

    def __init__(self, kind: EstimandKind, d, share_variant: str = SHARE_FROM_T):
        self.kind = kind
        self.share_variant = share_variant
        self.t = d.treat.astype(np.float64)
        self.r = d.receipt.astype(np.float64)
        self.y = d.outcome.astype(np.float64)
        self.x = d.matrix(d.covariate_names_wls)
        self.design_t = np.column_stack(
            [np.ones(d.n), d.matrix(d.covariate_names_logit_t)]
        )
        self.design_c = np.column_stack(
            [np.ones(d.n), d.matrix(d.covariate_names_logit_c)]
        )
        self.k = self.x.shape[1]
        self.k_t = self.design_t.shape[1] - 1
        self.k_c = self.design_c.shape[1] - 1
        starts = d.cluster_starts
        self.slices = [slice(int(starts[j]), int(starts[j + 1])) for j in range(d.m)]
        self.m = d.m
        # unit-weight arm covariate means: fixed data constants in the
        # covariate-standardized effect used by the ratio and IV forms
        tm = self.t == 1.0
        self.xbar_t = self.x[tm].mean(axis=0) if self.k else np.zeros(0)
        self.xbar_c = self.x[~tm].mean(axis=0) if self.k else np.zeros(0)

        uses_t = kind in (EstimandKind.CACE_T, EstimandKind.CACE_TC_IPW, EstimandKind.TAU_11) or (
            kind is EstimandKind.CACE_TC_RATIO and share_variant == SHARE_FROM_C
        )
        uses_c = kind in (EstimandKind.CACE_TC_IPW, EstimandKind.TAU_11) or (
            kind is EstimandKind.CACE_TC_RATIO and share_variant == SHARE_FROM_T
        )
        self.n_alpha_t = (1 + self.k_t) if uses_t else 0
        self.n_alpha_c = (1 + self.k_c) if uses_c else 0
        self.has_pi = kind is EstimandKind.CACE_TC_RATIO
        self.has_tau = kind in (EstimandKind.CACE_TC_RATIO, EstimandKind.CACE_T_IV)
        self.dim = (
            2 + self.k + self.n_alpha_t + self.n_alpha_c + int(self.has_pi) + int(self.has_tau)
        )

    def split(self, xi: np.ndarray) -> dict:
        xi = np.asarray(xi, dtype=np.float64)
        if xi.shape != (self.dim,):
            raise ValueError(f"expected parameter vector of length {self.dim}")
        pos = 2 + self.k
        parts = {"mu_t": xi[0], "mu_c": xi[1], "beta": xi[2:pos]}
        if self.n_alpha_t:
            parts["alpha_t"] = xi[pos:pos + self.n_alpha_t]
            pos += self.n_alpha_t
        if self.n_alpha_c:
            parts["alpha_c"] = xi[pos:pos + self.n_alpha_c]
            pos += self.n_alpha_c
        if self.has_pi:
            parts["pi"] = xi[pos]
            pos += 1
        if self.has_tau:
            parts["tau"] = xi[pos]
            pos += 1
        return parts

    def assemble(self, wls, fit_t=None, fit_c=None, pi=None, tau=None) -> np.ndarray:
        xi = [wls.mu_t, wls.mu_c, *np.asarray(wls.beta, dtype=np.float64)]
        if self.n_alpha_t:
            xi += [fit_t.intercept, *np.asarray(fit_t.coefficients, dtype=np.float64)]
        if self.n_alpha_c:
            xi += [fit_c.intercept, *np.asarray(fit_c.coefficients, dtype=np.float64)]
        if self.has_pi:
            xi.append(float(pi))
        if self.has_tau:
            xi.append(float(tau))
        return np.array(xi, dtype=np.float64)

    def _weights(self, parts: dict) -> np.ndarray:
        t, r = self.t, self.r
        e_t = _expit(self.design_t @ parts["alpha_t"]) if self.n_alpha_t else None
        e_c = _expit(self.design_c @ parts["alpha_c"]) if self.n_alpha_c else None
        kind = self.kind
        if kind is EstimandKind.CACE_T:
            return t * r + (1.0 - t) * e_t
        if kind is EstimandKind.CACE_TC_IPW:
            return r + (1.0 - r) * (t * e_c + (1.0 - t) * e_t)
        if kind is EstimandKind.TAU_11:
            return r * (t * e_c + (1.0 - t) * e_t)
        return np.ones_like(t)

    def per_cluster(self, xi: np.ndarray) -> np.ndarray:
        """(m, dim) matrix of summed per-cluster estimating functions."""
        parts = self.split(xi)
        t, r, y = self.t, self.r, self.y
        w = self._weights(parts)
        u = y - t * parts["mu_t"] - (1.0 - t) * parts["mu_c"] - self.x @ parts["beta"]
        cols = [t * w * u, (1.0 - t) * w * u]
        cols += [self.x[:, j] * w * u for j in range(self.k)]
        if self.n_alpha_t:
            e_t = _expit(self.design_t @ parts["alpha_t"])
            cols += [self.design_t[:, j] * t * (r - e_t) for j in range(1 + self.k_t)]
        if self.n_alpha_c:
            e_c = _expit(self.design_c @ parts["alpha_c"])
            cols += [self.design_c[:, j] * (1.0 - t) * (r - e_c) for j in range(1 + self.k_c)]
        if self.has_pi:
            if self.share_variant == SHARE_FROM_T:
                e_c = _expit(self.design_c @ parts["alpha_c"])
                cols.append(t * (parts["pi"] - (r + (1.0 - r) * e_c)))
            else:
                e_t = _expit(self.design_t @ parts["alpha_t"])
                cols.append((1.0 - t) * (parts["pi"] - (r + (1.0 - r) * e_t)))
        tau_itt_x = (
            parts["mu_t"] - parts["mu_c"] - float((self.xbar_t - self.xbar_c) @ parts["beta"])
        )
        if self.kind is EstimandKind.CACE_T_IV:
            cols.append(t * (tau_itt_x - parts["tau"] * r))
        per_row = np.stack(cols, axis=1)
        per_cluster = np.stack([per_row[sl].sum(axis=0) for sl in self.slices])
        if self.kind is EstimandKind.CACE_TC_RATIO:
            const = np.full(self.m, tau_itt_x - parts["tau"] * parts["pi"])
            per_cluster = np.column_stack([per_cluster, const])
        return per_cluster

    def mean_score(self, xi: np.ndarray) -> np.ndarray:
        return self.per_cluster(xi).mean(axis=0)


def stack_solution_xi(oracle: ScoreOracle, d, wls, fit_t=None, fit_c=None) -> np.ndarray:
    """Assemble the parameter vector that zeroes the stacked equations.

    The share and the effect entry are recomputed here from scratch: the
    share as the source arm's mean of (receipt, else the other arm's
    propensity), the effect as the covariate-standardized arm-mean
    difference divided by that share (receipt rate for the IV form). The
    library's reported ratio/IV point divides the plain mean difference
    instead; the two coincide exactly when there are no outcome covariates
    and differ by the stack's own definition otherwise, so the stack is
    checked at its own solution.
    """
    pi = tau = None
    if oracle.has_tau:
        t, r = oracle.t, oracle.r
        tau_itt_x = wls.mu_t - wls.mu_c - float((oracle.xbar_t - oracle.xbar_c) @ wls.beta)
        if oracle.kind is EstimandKind.CACE_T_IV:
            pi_val = float(r[t == 1.0].mean())
        elif oracle.share_variant == SHARE_FROM_T:
            e_c = _expit(oracle.design_c @ np.concatenate([[fit_c.intercept], fit_c.coefficients]))
            pi_val = float((r + (1.0 - r) * e_c)[t == 1.0].mean())
            pi = pi_val
        else:
            e_t = _expit(oracle.design_t @ np.concatenate([[fit_t.intercept], fit_t.coefficients]))
            pi_val = float((r + (1.0 - r) * e_t)[t == 0.0].mean())
            pi = pi_val
        tau = tau_itt_x / pi_val
    return oracle.assemble(wls, fit_t=fit_t, fit_c=fit_c, pi=pi, tau=tau)


def fd_jacobian_gamma(oracle: ScoreOracle, xi: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Minus the Jacobian of the mean estimating function, by central
    differences: the quantity the library's analytic Gamma-hat estimates."""
    xi = np.asarray(xi, dtype=np.float64)
    dim = xi.shape[0]
    out = np.empty((dim, dim))
    for v in range(dim):
        step = np.zeros(dim)
        step[v] = h
        hi = oracle.mean_score(xi + step)
        lo = oracle.mean_score(xi - step)
        out[:, v] = -(hi - lo) / (2.0 * h)
    return out


def matrix_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Largest entrywise gap, relative to the larger matrix's scale."""
    scale = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / scale


# ---------------------------------------------------------------------------
# the known-weights variance, written as plain loops


def loop_known_weights_variance(d, w_values, covariates: tuple[str, ...], wls) -> float:
    """Appendix-style cluster-total variance computed with python loops.

    Mirrors the published formula directly: weighted residual cluster
    totals, arm-specific normalization by (m_arm - k * weighted treatment
    share - 1) and the squared mean weight, then the two arm terms are
    divided by their cluster counts and summed.
    """
    x = d.matrix(covariates)
    fitted = []
    for i in range(d.n):
        mean = wls.mu_t if d.treat[i] == 1 else wls.mu_c
        fitted.append(mean + sum(x[i, j] * wls.beta[j] for j in range(x.shape[1])))
    resid = [float(d.outcome[i]) - fitted[i] for i in range(d.n)]

    starts = d.cluster_starts
    totals = []
    cluster_weight = []
    cluster_arm = []
    for jc in range(d.m):
        sl = slice(int(starts[jc]), int(starts[jc + 1]))
        totals.append(sum(w_values[i] * resid[i] for i in range(sl.start, sl.stop)))
        cluster_weight.append(sum(w_values[i] for i in range(sl.start, sl.stop)))
        cluster_arm.append(int(d.treat[sl.start]))

    k = x.shape[1]
    total_weight = sum(cluster_weight)
    p_w = sum(cw for cw, arm in zip(cluster_weight, cluster_arm) if arm == 1) / total_weight

    out = 0.0
    for arm in (1, 0):
        idx = [j for j in range(d.m) if cluster_arm[j] == arm]
        m_arm = len(idx)
        wbar = sum(cluster_weight[j] for j in idx) / m_arm
        share = p_w if arm == 1 else 1.0 - p_w
        dof = m_arm - k * share - 1.0
        s2 = sum(totals[j] ** 2 for j in idx) / (dof * wbar * wbar)
        out += s2 / m_arm
    return out
