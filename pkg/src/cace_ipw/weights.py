"""Per-row analysis weights for each estimand, and strata-share estimation.

Each estimand kind maps to one weight rule. Weights are probabilities or
indicators, so they always lie in [0, 1]; receipt-defined subpopulations in
one arm are matched by weighting the other arm with predicted receipt
probabilities from its counterpart model.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import IO

import numpy as np

from cace_ipw.data import ColumnSchema, Dataset, save_dataset
from cace_ipw.logit import LogitFit, predict_for_dataset

SHARE_FROM_T = "from_t"
SHARE_FROM_C = "from_c"
SHARE_AVERAGE = "average"

SHARE_SUM_TOLERANCE = 1e-10


class EstimandKind(enum.Enum):
    """The six supported estimands. Each maps to exactly one weight rule."""

    ITT = "itt"
    CACE_T = "cace_t"
    CACE_T_IV = "cace_t_iv"
    CACE_TC_RATIO = "cace_tc_ratio"
    CACE_TC_IPW = "cace_tc_ipw"
    TAU_11 = "tau_11"

    def __str__(self) -> str:  # friendly for tables and CLI output
        return self.value


@dataclass(frozen=True)
class WeightVector:
    """Per-row weights plus their arm totals.

    `kind` is the estimand the rule came from, or a plain string tag for
    special-purpose vectors (diagnostics) that match no estimand.
    """

    kind: EstimandKind | str
    values: np.ndarray
    sum_t: float
    sum_c: float


@dataclass(frozen=True)
class StrataShares:
    """Estimated receipt-strata shares.

    `pi_cace_t` is the treatment-arm receipt rate. `pi_cace_tc_from_t` and
    `pi_cace_tc_from_c` are the two arm-specific estimates of the combined
    complier share; `variant` records which fed the derived four-way split.
    Derived shares sum to 1 exactly; slightly negative values are possible
    from sampling noise and are flagged in `warnings`, never clamped.
    """

    pi_cace_t: float
    pi_cace_tc_from_t: float
    pi_cace_tc_from_c: float
    pi_11: float
    pi_10: float
    pi_01: float
    pi_00: float
    variant: str
    warnings: tuple[str, ...] = ()

    @property
    def pi_cace_tc(self) -> float:
        if self.variant == SHARE_FROM_T:
            return self.pi_cace_tc_from_t
        if self.variant == SHARE_FROM_C:
            return self.pi_cace_tc_from_c
        return 0.5 * (self.pi_cace_tc_from_t + self.pi_cace_tc_from_c)


@dataclass(frozen=True)
class WeightBalance:
    mean_t: float
    mean_c: float

    @property
    def diff(self) -> float:
        return self.mean_t - self.mean_c


def _require(fit: LogitFit | None, label: str, kind: EstimandKind) -> LogitFit:
    if fit is None:
        raise ValueError(f"{kind} weights require the {label} receipt model")
    if not fit.converged:
        raise ValueError(f"{kind} weights require a converged {label} receipt model")
    return fit


def build_weights(
    kind: EstimandKind,
    d: Dataset,
    fit_t: LogitFit | None = None,
    fit_c: LogitFit | None = None,
    share_variant: str = SHARE_FROM_T,
) -> WeightVector:
    """Construct the per-row weight vector for an estimand.

    Rules (t is the row's arm indicator, r its receipt):

    - ITT and CACE_T_IV: w = 1 (the IV denominator is handled by its
      estimator from the receipt indicator directly).
    - CACE_T: w = t*r + (1-t)*e1, where e1 comes from the treatment-arm model.
    - CACE_TC_IPW: w = r + (1-r) * (t*e0 + (1-t)*e1).
    - TAU_11: w = r * (t*e0 + (1-t)*e1).
    - CACE_TC_RATIO: the share-estimation weights for the chosen variant,
      t*(r + (1-r)*e0) for `from_t` (zero on control rows) or
      (1-t)*(r + (1-r)*e1) for `from_c`; its outcome regression runs
      unweighted, like ITT.
    """
    t = d.treat.astype(np.float64)
    r = d.receipt.astype(np.float64)
    if kind in (EstimandKind.ITT, EstimandKind.CACE_T_IV):
        values = np.ones(d.n)
    elif kind is EstimandKind.CACE_T:
        e1 = predict_for_dataset(_require(fit_t, "treatment-arm", kind), d)
        values = t * r + (1.0 - t) * e1
    elif kind is EstimandKind.CACE_TC_IPW:
        e1 = predict_for_dataset(_require(fit_t, "treatment-arm", kind), d)
        e0 = predict_for_dataset(_require(fit_c, "control-arm", kind), d)
        values = r + (1.0 - r) * (t * e0 + (1.0 - t) * e1)
    elif kind is EstimandKind.TAU_11:
        e1 = predict_for_dataset(_require(fit_t, "treatment-arm", kind), d)
        e0 = predict_for_dataset(_require(fit_c, "control-arm", kind), d)
        values = r * (t * e0 + (1.0 - t) * e1)
    elif kind is EstimandKind.CACE_TC_RATIO:
        if share_variant == SHARE_FROM_T:
            e0 = predict_for_dataset(_require(fit_c, "control-arm", kind), d)
            values = t * (r + (1.0 - r) * e0)
        elif share_variant == SHARE_FROM_C:
            e1 = predict_for_dataset(_require(fit_t, "treatment-arm", kind), d)
            values = (1.0 - t) * (r + (1.0 - r) * e1)
        else:
            raise ValueError(f"unknown share variant {share_variant!r}")
    else:
        raise ValueError(f"unknown estimand kind {kind!r}")

    sum_t = float(values[d.treat == 1].sum())
    sum_c = float(values[d.treat == 0].sum())
    needs_both_arms = kind in (EstimandKind.ITT, EstimandKind.CACE_T, EstimandKind.CACE_TC_IPW, EstimandKind.TAU_11)
    if needs_both_arms and (sum_t <= 0.0 or sum_c <= 0.0):
        raise ValueError(f"{kind} weights have zero total mass in one arm")
    return WeightVector(kind=kind, values=values, sum_t=sum_t, sum_c=sum_c)


def estimate_strata_shares(
    d: Dataset,
    fit_t: LogitFit,
    fit_c: LogitFit,
    variant: str = SHARE_FROM_T,
) -> StrataShares:
    """Estimate the four receipt-strata shares.

    The treatment-receipt share is the observed treatment-arm receipt rate.
    The combined complier share has two arm-specific estimates: the
    treatment-arm mean of r + (1-r)*e0 and the control-arm mean of
    r + (1-r)*e1. The four-way split backs out the remaining shares from the
    chosen estimate and the control-arm receipt rate; the four always sum
    to 1 by construction.
    """
    _require(fit_t, "treatment-arm", EstimandKind.CACE_TC_IPW)
    _require(fit_c, "control-arm", EstimandKind.CACE_TC_IPW)
    t_rows = d.treat == 1
    r = d.receipt.astype(np.float64)
    e1 = predict_for_dataset(fit_t, d)
    e0 = predict_for_dataset(fit_c, d)
    pi_cace_t = float(r[t_rows].mean())
    pi_from_t = float((r + (1.0 - r) * e0)[t_rows].mean())
    pi_from_c = float((r + (1.0 - r) * e1)[~t_rows].mean())
    if variant == SHARE_FROM_T:
        pi_tc = pi_from_t
    elif variant == SHARE_FROM_C:
        pi_tc = pi_from_c
    elif variant == SHARE_AVERAGE:
        pi_tc = 0.5 * (pi_from_t + pi_from_c)
    else:
        raise ValueError(f"unknown share variant {variant!r}")
    rbar_c = float(r[~t_rows].mean())
    pi_00 = 1.0 - pi_tc
    pi_01 = pi_tc - pi_cace_t
    pi_11 = rbar_c - pi_01
    pi_10 = pi_cace_t - pi_11
    warnings = tuple(
        f"derived share {name} = {value:.6f} outside [0, 1]; possible receipt-model misspecification"
        for name, value in (("pi_11", pi_11), ("pi_10", pi_10), ("pi_01", pi_01), ("pi_00", pi_00))
        if value < 0.0 or value > 1.0
    )
    return StrataShares(
        pi_cace_t=pi_cace_t,
        pi_cace_tc_from_t=pi_from_t,
        pi_cace_tc_from_c=pi_from_c,
        pi_11=pi_11,
        pi_10=pi_10,
        pi_01=pi_01,
        pi_00=pi_00,
        variant=variant,
        warnings=warnings,
    )


def weight_balance_summary(w: WeightVector, d: Dataset) -> WeightBalance:
    """Per-arm mean weights, the basis of the mean-weight specification check."""
    t_rows = d.treat == 1
    return WeightBalance(
        mean_t=float(w.values[t_rows].mean()),
        mean_c=float(w.values[~t_rows].mean()),
    )


def export_weights(d: Dataset, w: WeightVector, dest: str | IO[str], schema: ColumnSchema, column: str = "weight") -> None:
    """Write the input data with the weight vector appended as a column."""
    save_dataset(d, dest, schema, extra_columns={column: w.values})
