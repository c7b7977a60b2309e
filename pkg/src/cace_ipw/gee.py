"""Stacked estimating-equation sandwich variances.

The analysis weights are estimated, so the outcome contrast's variance must
account for the receipt-model estimation error. This module stacks the
cluster-level first-order conditions of the outcome regression, the receipt
models, and (for ratio-type estimators) the share and ratio equations, and
computes the empirical sandwich

    V(xi) = Gamma^-1 Delta Gamma^-T,   Var(lambda xi) = lambda V lambda' / m

with Gamma the averaged per-cluster negative score Jacobian (assembled
analytically) and Delta the averaged per-cluster score outer product. The
known-weights variance, which ignores that estimation error, is also here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from cace_ipw.data import Dataset
from cace_ipw.logit import LogitFit, predict_for_dataset
from cace_ipw.weights import SHARE_FROM_C, SHARE_FROM_T, EstimandKind, WeightVector
from cace_ipw.wls import WlsFit

GAMMA_CONDITION_LIMIT = 1e12

BLOCK_MU_T = "mu_t"
BLOCK_MU_C = "mu_c"
BLOCK_BETA = "beta"
BLOCK_ALPHA_T = "alpha_t"
BLOCK_ALPHA_C = "alpha_c"
BLOCK_PI = "pi"
BLOCK_TAU = "tau"


class VarianceError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeeLayout:
    """Ordered parameter blocks of one estimator's stacked equations."""

    kind: EstimandKind
    blocks: tuple[tuple[str, int], ...]
    share_variant: str | None = None

    @property
    def dim(self) -> int:
        return sum(size for _, size in self.blocks)

    def sl(self, name: str) -> slice:
        offset = 0
        for block, size in self.blocks:
            if block == name:
                return slice(offset, offset + size)
            offset += size
        raise KeyError(f"layout for {self.kind} has no block {name!r}")

    def has(self, name: str) -> bool:
        return any(block == name for block, _ in self.blocks)

    def contrast(self) -> np.ndarray:
        """The vector extracting the treatment effect from the stack."""
        lam = np.zeros(self.dim)
        if self.has(BLOCK_TAU):
            lam[self.sl(BLOCK_TAU)] = 1.0
        else:
            lam[self.sl(BLOCK_MU_T)] = 1.0
            lam[self.sl(BLOCK_MU_C)] = -1.0
        return lam


@dataclass(frozen=True)
class ParamVector:
    layout: GeeLayout
    values: np.ndarray

    def block(self, name: str) -> np.ndarray:
        return self.values[self.layout.sl(name)]


@dataclass(frozen=True)
class ScoreMatrix:
    """Per-cluster score vectors, one row per cluster in dataset cluster order."""

    layout: GeeLayout
    values: np.ndarray

    def column_sum_excess(self) -> float:
        """max over columns of |column sum| / max(1, sum |entries|)."""
        totals = np.abs(self.values.sum(axis=0))
        scales = np.maximum(1.0, np.abs(self.values).sum(axis=0))
        return float(np.max(totals / scales)) if self.values.size else 0.0


@dataclass(frozen=True)
class SandwichVariance:
    layout: GeeLayout
    gamma_hat: np.ndarray
    delta_hat: np.ndarray
    v_hat: np.ndarray
    contrast: np.ndarray
    variance_of_contrast: float
    g_correction: float | None = None
    df_factor: float | None = None

    @property
    def se_of_contrast(self) -> float:
        return float(np.sqrt(self.variance_of_contrast))


@dataclass(frozen=True)
class InferenceRecord:
    t_stat: float
    p_value: float
    ci_low: float
    ci_high: float


def layout_for(kind: EstimandKind, k: int, k_t: int, k_c: int, share_variant: str = SHARE_FROM_T) -> GeeLayout:
    """Parameter layout of the stacked equations for one estimand kind."""
    wls_blocks = ((BLOCK_MU_T, 1), (BLOCK_MU_C, 1), (BLOCK_BETA, k))
    if kind is EstimandKind.CACE_T:
        return GeeLayout(kind, (*wls_blocks, (BLOCK_ALPHA_T, 1 + k_t)))
    if kind in (EstimandKind.CACE_TC_IPW, EstimandKind.TAU_11):
        return GeeLayout(kind, (*wls_blocks, (BLOCK_ALPHA_T, 1 + k_t), (BLOCK_ALPHA_C, 1 + k_c)))
    if kind is EstimandKind.CACE_TC_RATIO:
        if share_variant == SHARE_FROM_T:
            logit_block = (BLOCK_ALPHA_C, 1 + k_c)
        elif share_variant == SHARE_FROM_C:
            logit_block = (BLOCK_ALPHA_T, 1 + k_t)
        else:
            raise ValueError(f"unknown share variant {share_variant!r}")
        return GeeLayout(kind, (*wls_blocks, logit_block, (BLOCK_PI, 1), (BLOCK_TAU, 1)), share_variant)
    if kind is EstimandKind.CACE_T_IV:
        return GeeLayout(kind, (*wls_blocks, (BLOCK_TAU, 1)))
    raise ValueError(f"no stacked-equation layout for {kind}")


@dataclass(frozen=True)
class _StackPieces:
    """Shared per-row quantities for score and Jacobian assembly."""

    layout: GeeLayout
    t: np.ndarray
    r: np.ndarray
    u: np.ndarray
    w: np.ndarray
    x: np.ndarray
    design_t: np.ndarray | None  # [1, X_t] over all rows
    design_c: np.ndarray | None
    e_t: np.ndarray | None
    e_c: np.ndarray | None
    dfac_t_rows: np.ndarray | None  # d w / d (alpha_c linear predictor) on treatment rows
    dfac_c_rows: np.ndarray | None  # d w / d (alpha_t linear predictor) on control rows
    pi_hat: float | None
    tau_stack: float | None
    tau_itt_x: float | None
    share_row: np.ndarray | None  # per-row share weights for the pi equation


def _pieces(
    kind: EstimandKind,
    d: Dataset,
    wls: WlsFit,
    fit_t: LogitFit | None,
    fit_c: LogitFit | None,
    w: WeightVector,
    share_variant: str = SHARE_FROM_T,
) -> _StackPieces:
    t = d.treat.astype(np.float64)
    r = d.receipt.astype(np.float64)
    u = wls.residuals
    x = d.matrix(wls.covariate_names)
    layout = layout_for(kind, wls.k, fit_t.k if fit_t else 0, fit_c.k if fit_c else 0, share_variant)

    e_t = predict_for_dataset(fit_t, d) if fit_t is not None else None
    e_c = predict_for_dataset(fit_c, d) if fit_c is not None else None
    design_t = np.column_stack([np.ones(d.n), d.matrix(fit_t.covariate_names)]) if fit_t is not None else None
    design_c = np.column_stack([np.ones(d.n), d.matrix(fit_c.covariate_names)]) if fit_c is not None else None

    dfac_t_rows = dfac_c_rows = None
    if kind is EstimandKind.CACE_T:
        dfac_c_rows = e_t * (1.0 - e_t)
    elif kind is EstimandKind.CACE_TC_IPW:
        dfac_t_rows = (1.0 - r) * e_c * (1.0 - e_c)
        dfac_c_rows = (1.0 - r) * e_t * (1.0 - e_t)
    elif kind is EstimandKind.TAU_11:
        dfac_t_rows = r * e_c * (1.0 - e_c)
        dfac_c_rows = r * e_t * (1.0 - e_t)

    pi_hat = tau_stack = tau_itt_x = None
    share_row = None
    if kind in (EstimandKind.CACE_TC_RATIO, EstimandKind.CACE_T_IV):
        tau_itt_x = (wls.mu_t - wls.mu_c) - float((wls.xbar_w_t - wls.xbar_w_c) @ wls.beta)
        if kind is EstimandKind.CACE_T_IV:
            pi_hat = float((t * r).sum() / t.sum())
        elif share_variant == SHARE_FROM_T:
            share_row = r + (1.0 - r) * e_c
            pi_hat = float((share_row * t).sum() / t.sum())
        else:
            share_row = r + (1.0 - r) * e_t
            pi_hat = float((share_row * (1.0 - t)).sum() / (1.0 - t).sum())
        if pi_hat <= 0.0:
            raise VarianceError(f"nonpositive estimated share {pi_hat:g} in the {kind} stack")
        tau_stack = tau_itt_x / pi_hat

    return _StackPieces(
        layout=layout,
        t=t,
        r=r,
        u=u,
        w=w.values,
        x=x,
        design_t=design_t,
        design_c=design_c,
        e_t=e_t,
        e_c=e_c,
        dfac_t_rows=dfac_t_rows,
        dfac_c_rows=dfac_c_rows,
        pi_hat=pi_hat,
        tau_stack=tau_stack,
        tau_itt_x=tau_itt_x,
        share_row=share_row,
    )


def build_scores(
    kind: EstimandKind,
    d: Dataset,
    wls: WlsFit,
    fit_t: LogitFit | None = None,
    fit_c: LogitFit | None = None,
    w: WeightVector | None = None,
    share_variant: str = SHARE_FROM_T,
) -> ScoreMatrix:
    """Per-cluster stacked scores evaluated at the fitted solution.

    Rows follow the dataset's cluster order; columns follow `layout_for`.
    Column sums vanish at the solution because every block is a solved
    first-order condition.
    """
    if w is None:
        raise ValueError("a weight vector is required")
    p = _pieces(kind, d, wls, fit_t, fit_c, w, share_variant)
    layout = p.layout
    per_row = np.zeros((d.n, layout.dim))
    wu = p.w * p.u
    per_row[:, layout.sl(BLOCK_MU_T)] = (p.t * wu)[:, None]
    per_row[:, layout.sl(BLOCK_MU_C)] = ((1.0 - p.t) * wu)[:, None]
    if wls.k:
        per_row[:, layout.sl(BLOCK_BETA)] = p.x * wu[:, None]
    if layout.has(BLOCK_ALPHA_T):
        eta = p.r - p.e_t
        per_row[:, layout.sl(BLOCK_ALPHA_T)] = p.design_t * (p.t * eta)[:, None]
    if layout.has(BLOCK_ALPHA_C):
        eta = p.r - p.e_c
        per_row[:, layout.sl(BLOCK_ALPHA_C)] = p.design_c * ((1.0 - p.t) * eta)[:, None]
    if layout.has(BLOCK_PI):
        arm = p.t if layout.share_variant == SHARE_FROM_T else (1.0 - p.t)
        per_row[:, layout.sl(BLOCK_PI)] = (arm * (p.pi_hat - p.share_row))[:, None]
    if kind is EstimandKind.CACE_T_IV:
        per_row[:, layout.sl(BLOCK_TAU)] = (p.t * (p.tau_itt_x - p.tau_stack * p.r))[:, None]

    scores = np.add.reduceat(per_row, d.cluster_starts[:-1], axis=0)
    if kind is EstimandKind.CACE_TC_RATIO:
        # The ratio equation is a per-cluster constant, zero at the solution.
        scores[:, layout.sl(BLOCK_TAU)] = p.tau_itt_x - p.tau_stack * p.pi_hat
    return ScoreMatrix(layout=layout, values=scores)


def gamma_hat(
    kind: EstimandKind,
    d: Dataset,
    wls: WlsFit,
    fit_t: LogitFit | None = None,
    fit_c: LogitFit | None = None,
    w: WeightVector | None = None,
    share_variant: str = SHARE_FROM_T,
) -> np.ndarray:
    """Averaged negative Jacobian of the stacked scores, assembled analytically.

    Block structure: the outcome block is the weighted normal matrix; the
    outcome-by-receipt-model block carries the residual-weighted propensity
    derivatives (this is where weight-estimation error enters); receipt-model
    blocks are their information matrices; ratio/share rows add the
    derivative rows of the share and ratio equations.
    """
    if w is None:
        raise ValueError("a weight vector is required")
    p = _pieces(kind, d, wls, fit_t, fit_c, w, share_variant)
    layout = p.layout
    m = d.m
    gamma = np.zeros((layout.dim, layout.dim))
    t, r, u = p.t, p.r, p.u

    # Outcome rows by outcome parameters: the weighted normal matrix.
    design_wls = np.column_stack([t, 1.0 - t, p.x])
    wls_sl = slice(0, 2 + wls.k)
    gamma[wls_sl, wls_sl] = design_wls.T @ (design_wls * p.w[:, None])

    # Outcome rows by receipt-model parameters: residual couplings through the weights.
    if p.dfac_c_rows is not None and layout.has(BLOCK_ALPHA_T):
        coef = (1.0 - t) * u * p.dfac_c_rows
        block = -(design_wls * coef[:, None]).T @ p.design_t
        gamma[wls_sl, layout.sl(BLOCK_ALPHA_T)] = block
    if p.dfac_t_rows is not None and layout.has(BLOCK_ALPHA_C):
        coef = t * u * p.dfac_t_rows
        block = -(design_wls * coef[:, None]).T @ p.design_c
        gamma[wls_sl, layout.sl(BLOCK_ALPHA_C)] = block

    # Receipt-model information blocks.
    if layout.has(BLOCK_ALPHA_T):
        fac = t * p.e_t * (1.0 - p.e_t)
        sl = layout.sl(BLOCK_ALPHA_T)
        gamma[sl, sl] = p.design_t.T @ (p.design_t * fac[:, None])
    if layout.has(BLOCK_ALPHA_C):
        fac = (1.0 - t) * p.e_c * (1.0 - p.e_c)
        sl = layout.sl(BLOCK_ALPHA_C)
        gamma[sl, sl] = p.design_c.T @ (p.design_c * fac[:, None])

    xdiff = wls.xbar_w_t - wls.xbar_w_c
    if kind is EstimandKind.CACE_TC_RATIO:
        pi_sl, tau_sl = layout.sl(BLOCK_PI), layout.sl(BLOCK_TAU)
        arm = t if layout.share_variant == SHARE_FROM_T else (1.0 - t)
        logit_sl = layout.sl(BLOCK_ALPHA_C if layout.share_variant == SHARE_FROM_T else BLOCK_ALPHA_T)
        design = p.design_c if layout.share_variant == SHARE_FROM_T else p.design_t
        e = p.e_c if layout.share_variant == SHARE_FROM_T else p.e_t
        fac = arm * (1.0 - r) * e * (1.0 - e)
        gamma[pi_sl, logit_sl] = (design * fac[:, None]).sum(axis=0)
        gamma[pi_sl, pi_sl] = -arm.sum()
        gamma[tau_sl, layout.sl(BLOCK_MU_T)] = -1.0 * m
        gamma[tau_sl, layout.sl(BLOCK_MU_C)] = 1.0 * m
        if wls.k:
            gamma[tau_sl, layout.sl(BLOCK_BETA)] = xdiff * m
        gamma[tau_sl, pi_sl] = p.tau_stack * m
        gamma[tau_sl, tau_sl] = p.pi_hat * m
    elif kind is EstimandKind.CACE_T_IV:
        tau_sl = layout.sl(BLOCK_TAU)
        n_t = t.sum()
        gamma[tau_sl, layout.sl(BLOCK_MU_T)] = -n_t
        gamma[tau_sl, layout.sl(BLOCK_MU_C)] = n_t
        if wls.k:
            gamma[tau_sl, layout.sl(BLOCK_BETA)] = xdiff * n_t
        gamma[tau_sl, tau_sl] = (t * r).sum()

    return gamma / m


def sandwich(
    kind: EstimandKind,
    scores: ScoreMatrix,
    gamma: np.ndarray,
    g_correction: bool = False,
    n_individuals: int | None = None,
    outcome_params: int | None = None,
) -> SandwichVariance:
    """Empirical sandwich variance of the estimand contrast.

    `outcome_params` is the number of outcome-model parameters (two group
    means plus the regression slopes). When given, the variance matrix is
    scaled by m / (m - outcome_params): the raw sandwich uses residuals from
    a fit that consumed that many degrees of freedom, and without the factor
    it runs well below the known-weights estimator (whose denominators
    already remove those degrees of freedom) once clusters are few. The
    factor makes the two reported SEs comparable at any m.

    With `g_correction`, the result is additionally multiplied by
    (m/(m-1)) * ((n-1)/(n-2)), a common small-sample inflation; off by
    default.
    """
    layout = scores.layout
    m = scores.values.shape[0]
    delta = scores.values.T @ scores.values / m
    cond = np.linalg.cond(gamma)
    if not np.isfinite(cond) or cond > GAMMA_CONDITION_LIMIT:
        raise VarianceError(
            "stacked-equation Jacobian is numerically singular (condition "
            f"{cond:.2e}); consider dropping covariates from the outcome or receipt models"
        )
    ginv = np.linalg.solve(gamma, np.eye(layout.dim))
    v_hat = ginv @ delta @ ginv.T
    df_factor: float | None = None
    if outcome_params is not None:
        if m <= outcome_params:
            raise VarianceError(
                f"{m} clusters cannot support {outcome_params} outcome-model parameters"
            )
        df_factor = m / (m - float(outcome_params))
        v_hat = v_hat * df_factor
    g_value: float | None = None
    if g_correction:
        if n_individuals is None:
            raise ValueError("g correction requires the individual count")
        if m < 2 or n_individuals < 3:
            raise VarianceError("g correction undefined for fewer than 2 clusters or 3 individuals")
        g_value = (m / (m - 1.0)) * ((n_individuals - 1.0) / (n_individuals - 2.0))
        v_hat = v_hat * g_value
    lam = layout.contrast()
    variance = float(lam @ v_hat @ lam) / m
    if variance < 0.0:
        raise VarianceError(f"negative contrast variance {variance:g}")
    return SandwichVariance(
        layout=layout,
        gamma_hat=gamma,
        delta_hat=delta,
        v_hat=v_hat,
        contrast=lam,
        variance_of_contrast=variance,
        g_correction=g_value,
        df_factor=df_factor,
    )


def fixed_weight_mean_variance(d: Dataset, wls: WlsFit, w: WeightVector) -> float:
    """Sandwich variance of the weighted mean difference with weights held fixed.

    Stacks only the two group-mean equations (no covariates, no receipt
    models), so the weights enter as constants. Used to connect the sandwich
    machinery to the known-weights formula, which it matches up to per-arm
    (m_t - 1) / m_t factors when the outcome model has no covariates.
    """
    if wls.k:
        raise ValueError("fixed-weight mean variance is defined for the no-covariate fit")
    starts = d.cluster_starts[:-1]
    cluster_w = np.add.reduceat(w.values, starts)
    cluster_wu = np.add.reduceat(w.values * wls.residuals, starts)
    is_t = d.cluster_treat == 1
    m = d.m
    gamma = np.diag([cluster_w[is_t].sum() / m, cluster_w[~is_t].sum() / m])
    scores = np.zeros((m, 2))
    scores[is_t, 0] = cluster_wu[is_t]
    scores[~is_t, 1] = cluster_wu[~is_t]
    delta = scores.T @ scores / m
    ginv = np.linalg.solve(gamma, np.eye(2))
    v_hat = ginv @ delta @ ginv.T
    lam = np.array([1.0, -1.0])
    return float(lam @ v_hat @ lam) / m


def known_weights_variance(d: Dataset, wls: WlsFit, w: WeightVector) -> float:
    """Variance of the contrast treating the weights as known constants.

    Cluster-level weighted residual sums are combined per arm with a design
    correction for the covariate count, then scaled by squared mean cluster
    weights; no receipt-model terms enter.
    """
    starts = d.cluster_starts[:-1]
    cluster_w = np.add.reduceat(w.values, starts)
    cluster_wu = np.add.reduceat(w.values * wls.residuals, starts)
    is_t = d.cluster_treat == 1
    m_t = int(is_t.sum())
    m_c = int((~is_t).sum())
    total_w = float(cluster_w.sum())
    if total_w <= 0.0:
        raise VarianceError("zero total weight")
    p_w = float(cluster_w[is_t].sum()) / total_w
    wbar_t = float(cluster_w[is_t].mean()) if m_t else 0.0
    wbar_c = float(cluster_w[~is_t].mean()) if m_c else 0.0
    k = wls.k
    df_t = m_t - k * p_w - 1.0
    df_c = m_c - k * (1.0 - p_w) - 1.0
    if df_t <= 0.0 or df_c <= 0.0 or wbar_t <= 0.0 or wbar_c <= 0.0:
        raise VarianceError(
            "too few clusters for the known-weights variance "
            f"(effective degrees of freedom {df_t:.2f} treatment, {df_c:.2f} control)"
        )
    s2_t = float((cluster_wu[is_t] ** 2).sum()) / (df_t * wbar_t**2)
    s2_c = float((cluster_wu[~is_t] ** 2).sum()) / (df_c * wbar_c**2)
    return s2_t / m_t + s2_c / m_c


def known_weights_components(d: Dataset, wls: WlsFit, w: WeightVector) -> tuple[float, float, int, int]:
    """Per-arm terms of the known-weights variance, plus cluster counts.

    Returns (v_t, v_c, m_t, m_c) with known_weights_variance == v_t + v_c;
    each v is the arm's df-corrected dispersion of cluster-level weighted
    residual sums divided by that arm's cluster count.
    """
    starts = d.cluster_starts[:-1]
    cluster_w = np.add.reduceat(w.values, starts)
    cluster_wu = np.add.reduceat(w.values * wls.residuals, starts)
    is_t = d.cluster_treat == 1
    m_t = int(is_t.sum())
    m_c = int((~is_t).sum())
    p_w = float(cluster_w[is_t].sum()) / float(cluster_w.sum())
    wbar_t = float(cluster_w[is_t].mean())
    wbar_c = float(cluster_w[~is_t].mean())
    k = wls.k
    s2_t = float((cluster_wu[is_t] ** 2).sum()) / ((m_t - k * p_w - 1.0) * wbar_t**2)
    s2_c = float((cluster_wu[~is_t] ** 2).sum()) / ((m_c - k * (1.0 - p_w) - 1.0) * wbar_c**2)
    return s2_t / m_t, s2_c / m_c, m_t, m_c


def inference(point: float, variance: float, df: float, level: float = 0.95) -> InferenceRecord:
    """Two-sided t test of zero and a t interval at the given level."""
    if variance <= 0.0:
        raise VarianceError(f"nonpositive variance {variance:g}")
    if df < 1:
        raise VarianceError(f"degrees of freedom {df} below 1")
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level {level} outside (0, 1)")
    se = float(np.sqrt(variance))
    t_stat = point / se
    p_value = 2.0 * float(stats.t.sf(abs(t_stat), df))
    crit = float(stats.t.ppf(0.5 + level / 2.0, df))
    return InferenceRecord(
        t_stat=t_stat,
        p_value=p_value,
        ci_low=point - crit * se,
        ci_high=point + crit * se,
    )
