"""Specification checks for the receipt propensity models.

Three complementary views: covariate balance between an actual receipt group
and its weighted counterpart in the other arm, a density identity that holds
for correctly specified propensities within one arm, and mean-weight
equality across arms. An overlap summary flags propensities near 0 or 1.
None of these prove the models correct; they surface the failures that
matter for the weighted estimators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from cace_ipw.data import Dataset
from cace_ipw.logit import LogitFit, PropensityVector, predict_for_dataset
from cace_ipw.weights import WeightVector

DIRECTION_T_VS_WEIGHTED_C = "t_vs_weighted_c"
DIRECTION_C_VS_WEIGHTED_T = "c_vs_weighted_t"

STD_DIFF_FLAG_MODERATE = 0.10
STD_DIFF_FLAG_LARGE = 0.25

DENSITY_BINS_DEFAULT = 20

OVERLAP_LOW = 0.01
OVERLAP_HIGH = 0.99
OVERLAP_QUANTILE_LEVELS = (0.0, 0.01, 0.05, 0.25, 0.50, 0.75, 0.95, 0.99, 1.0)


class DiagnosticsError(RuntimeError):
    pass


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    actual_mean: float
    weighted_mean: float
    std_diff: float
    flag: str  # "", "moderate", "large", or "undefined"


@dataclass(frozen=True)
class BalanceTable:
    """Weighted covariate balance, standardized by the actual group's SD.

    Binary covariates use the sqrt(p(1-p)) shortcut with p the actual-group
    rate; zero-variance covariates get NaN with the "undefined" flag.
    """

    direction: str
    rows: tuple[BalanceRow, ...]

    def max_abs_std_diff(self) -> float:
        finite = [abs(r.std_diff) for r in self.rows if math.isfinite(r.std_diff)]
        return max(finite) if finite else math.nan

    def to_delimited(self, delimiter: str = ",") -> str:
        lines = [delimiter.join(("covariate", "actual_mean", "weighted_mean", "std_diff", "flag"))]
        for r in self.rows:
            lines.append(
                delimiter.join(
                    (r.covariate, format(r.actual_mean, ".12g"), format(r.weighted_mean, ".12g"),
                     format(r.std_diff, ".12g"), r.flag)
                )
            )
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class DensityCheck:
    """Binned within-arm density identity for one propensity model.

    `lhs_density` is the binned density of scores among recipients;
    `rhs_density` is the non-recipient density transformed by
    omega_hat * q/(1-q), with q the within-bin mean non-recipient score (bin
    center for empty bins). Under correct specification the two agree up to
    binning and sampling error.
    """

    arm: str
    bin_edges: np.ndarray
    lhs_density: np.ndarray
    rhs_density: np.ndarray
    omega_hat: float
    max_abs_gap: float
    l1_gap: float
    n_recipients: int
    n_nonrecipients: int

    def to_delimited(self, delimiter: str = ",") -> str:
        lines = [delimiter.join(("bin_low", "bin_high", "recipient_density", "transformed_nonrecipient_density"))]
        for k in range(len(self.lhs_density)):
            lines.append(
                delimiter.join(
                    (format(self.bin_edges[k], ".12g"), format(self.bin_edges[k + 1], ".12g"),
                     format(self.lhs_density[k], ".12g"), format(self.rhs_density[k], ".12g"))
                )
            )
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class MeanWeightEquality:
    mean_t: float
    mean_c: float

    @property
    def diff(self) -> float:
        return self.mean_t - self.mean_c


@dataclass(frozen=True)
class OverlapSummary:
    quantile_levels: tuple[float, ...]
    quantiles_t: tuple[float, ...]
    quantiles_c: tuple[float, ...]
    n_below: int
    n_above: int
    minimum: float
    maximum: float
    warnings: tuple[str, ...]


def _weighted_mean(values: np.ndarray, weights: np.ndarray) -> float:
    total = weights.sum()
    if total <= 0.0:
        raise DiagnosticsError("zero weight mass in one comparison group")
    return float((values * weights).sum() / total)


def _weighted_sd(values: np.ndarray, weights: np.ndarray, mean: float) -> float:
    total = weights.sum()
    return float(np.sqrt(((values - mean) ** 2 * weights).sum() / total))


def _is_binary(values: np.ndarray) -> bool:
    return bool(np.isin(values, (0.0, 1.0)).all())


def balance_table(
    d: Dataset,
    w: WeightVector,
    covariates: tuple[str, ...] | list[str],
    direction: str = DIRECTION_T_VS_WEIGHTED_C,
) -> BalanceTable:
    """Compare the actual group with the weighted other arm, covariate by covariate.

    Both sides apply `w` within their own arm; for receipt-indicator weights
    the actual side reduces to the observed recipients. The standardized
    difference divides by the actual group's SD (binary: sqrt(p(1-p))).
    """
    if direction == DIRECTION_T_VS_WEIGHTED_C:
        actual_mask = d.treat == 1
    elif direction == DIRECTION_C_VS_WEIGHTED_T:
        actual_mask = d.treat == 0
    else:
        raise DiagnosticsError(f"unknown balance direction {direction!r}")
    other_mask = ~actual_mask
    rows = []
    for name in covariates:
        values = d.matrix((name,))[:, 0]
        actual_mean = _weighted_mean(values[actual_mask], w.values[actual_mask])
        weighted_mean = _weighted_mean(values[other_mask], w.values[other_mask])
        if _is_binary(values):
            sd = math.sqrt(actual_mean * (1.0 - actual_mean))
        else:
            sd = _weighted_sd(values[actual_mask], w.values[actual_mask], actual_mean)
        if sd <= 0.0:
            std_diff, flag = math.nan, "undefined"
        else:
            std_diff = (actual_mean - weighted_mean) / sd
            if abs(std_diff) >= STD_DIFF_FLAG_LARGE:
                flag = "large"
            elif abs(std_diff) >= STD_DIFF_FLAG_MODERATE:
                flag = "moderate"
            else:
                flag = ""
        rows.append(BalanceRow(name, actual_mean, weighted_mean, std_diff, flag))
    return BalanceTable(direction=direction, rows=tuple(rows))


def receipt_matching_weights(d: Dataset, fit_c: LogitFit) -> WeightVector:
    """Weights for checking the control-arm model: receipt on control rows,
    the control model's prediction on treatment rows."""
    t = d.treat.astype(np.float64)
    r = d.receipt.astype(np.float64)
    e_c = predict_for_dataset(fit_c, d)
    values = (1.0 - t) * r + t * e_c
    return WeightVector(
        kind="receipt_matching",
        values=values,
        sum_t=float(values[d.treat == 1].sum()),
        sum_c=float(values[d.treat == 0].sum()),
    )


def shaikh_density_check(fit: LogitFit, d: Dataset, bins: int = DENSITY_BINS_DEFAULT) -> DensityCheck:
    """Within-arm density identity for one fitted propensity model.

    For the model's own arm, the recipient score density should equal
    omega_hat * q/(1-q) times the non-recipient score density, with
    omega_hat the non-recipient to recipient count ratio. Histograms use
    equal-width bins over the combined score support; the multiplier is
    evaluated at the within-bin mean non-recipient score, so the identity
    is exact in the constant-propensity case.
    """
    arm_value = 1 if fit.arm == "treatment" else 0
    mask = d.treat == arm_value
    e = predict_for_dataset(fit, d)[mask]
    r = d.receipt[mask]
    q1 = e[r == 1]
    q0 = e[r == 0]
    if q1.size == 0 or q0.size == 0:
        raise DiagnosticsError(f"empty receipt subgroup in the {fit.arm} arm")
    lo = float(min(q1.min(), q0.min()))
    hi = float(max(q1.max(), q0.max()))
    if hi - lo < 1e-12:
        lo, hi = lo - 1e-6, hi + 1e-6
    edges = np.linspace(lo, hi, bins + 1)
    width = edges[1] - edges[0]
    counts1, _ = np.histogram(q1, bins=edges)
    counts0, _ = np.histogram(q0, bins=edges)
    lhs = counts1 / (q1.size * width)
    f0 = counts0 / (q0.size * width)
    # Multiplier q/(1-q) at each bin's mean non-recipient score.
    q_at = 0.5 * (edges[:-1] + edges[1:])
    idx = np.clip(np.digitize(q0, edges) - 1, 0, bins - 1)
    sums = np.bincount(idx, weights=q0, minlength=bins)
    with np.errstate(invalid="ignore"):
        means = np.where(counts0 > 0, sums / np.maximum(counts0, 1), q_at)
    omega_hat = q0.size / q1.size
    rhs = omega_hat * (means / (1.0 - means)) * f0
    gaps = np.abs(lhs - rhs)
    return DensityCheck(
        arm=fit.arm,
        bin_edges=edges,
        lhs_density=lhs,
        rhs_density=rhs,
        omega_hat=float(omega_hat),
        max_abs_gap=float(gaps.max()),
        l1_gap=float((gaps * width).sum()),
        n_recipients=int(q1.size),
        n_nonrecipients=int(q0.size),
    )


def mean_weight_equality(w: WeightVector, d: Dataset) -> MeanWeightEquality:
    """Arm means of the weights; equal in expectation under correct models.

    For the union-stratum IPW weights these are the two arm-specific
    estimates of the would-be-recipient share.
    """
    t_mask = d.treat == 1
    return MeanWeightEquality(
        mean_t=float(w.values[t_mask].mean()),
        mean_c=float(w.values[~t_mask].mean()),
    )


def overlap_summary(p: PropensityVector, d: Dataset) -> OverlapSummary:
    """Quantiles and near-boundary counts of predicted propensities by arm."""
    values = np.asarray(p.values, dtype=np.float64)
    if values.shape != (d.n,):
        raise DiagnosticsError("propensity vector does not cover every row")
    t_mask = d.treat == 1
    q_t = tuple(float(v) for v in np.quantile(values[t_mask], OVERLAP_QUANTILE_LEVELS))
    q_c = tuple(float(v) for v in np.quantile(values[~t_mask], OVERLAP_QUANTILE_LEVELS))
    n_below = int((values < OVERLAP_LOW).sum())
    n_above = int((values > OVERLAP_HIGH).sum())
    warnings = []
    if n_below:
        warnings.append(f"{n_below} propensity values below {OVERLAP_LOW}")
    if n_above:
        warnings.append(f"{n_above} propensity values above {OVERLAP_HIGH}")
    return OverlapSummary(
        quantile_levels=OVERLAP_QUANTILE_LEVELS,
        quantiles_t=q_t,
        quantiles_c=q_c,
        n_below=n_below,
        n_above=n_above,
        minimum=float(values.min()),
        maximum=float(values.max()),
        warnings=tuple(warnings),
    )
