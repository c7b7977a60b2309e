"""Point estimators for treatment effects under noncompliance.

Six estimators share one pipeline: fit the receipt propensity models the
estimand needs, build its weights, run the weighted two-group-mean
regression, then attach two standard errors. The adjusted SE comes from the
stacked-equation sandwich and accounts for the weights being estimated; the
unadjusted SE treats the weights (and, for ratio-type estimators, the
compliance share) as known constants. Degrees of freedom equal the cluster
count minus the number of stacked parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from cace_ipw.data import Dataset
from cace_ipw.gee import (
    build_scores,
    gamma_hat,
    inference,
    known_weights_variance,
    layout_for,
    sandwich,
)
from cace_ipw.logit import ARM_CONTROL, ARM_TREATMENT, LogitFit, fit_logit, predict_for_dataset
from cace_ipw.weights import (
    SHARE_FROM_C,
    SHARE_FROM_T,
    EstimandKind,
    StrataShares,
    build_weights,
    estimate_strata_shares,
)
from cace_ipw.wls import WlsFit, fit_wls, wls_treatment_effect

SE_ADJUSTED = "adjusted"
SE_UNADJUSTED = "unadjusted"

SHARE_FLOOR_DEFAULT = 1e-3

KIND_LABELS = {
    EstimandKind.ITT: "ITT",
    EstimandKind.CACE_T: "CACE-T",
    EstimandKind.CACE_T_IV: "CACE-T (IV)",
    EstimandKind.CACE_TC_RATIO: "CACE-TC (ratio)",
    EstimandKind.CACE_TC_IPW: "CACE-TC (IPW)",
    EstimandKind.TAU_11: "tau_11",
}


class EstimationError(RuntimeError):
    """An estimator's preconditions failed on this dataset."""


@dataclass(frozen=True)
class EstimateResult:
    """One estimator's output: point, both SEs, and t-based inference."""

    kind: EstimandKind
    point: float
    se_adjusted: float | None
    se_unadjusted: float
    df: int
    level: float
    t_stat: float
    p_value: float
    ci_low: float
    ci_high: float
    se_basis: str
    m: int
    m_t: int
    m_c: int
    n: int
    covariates_wls: tuple[str, ...]
    covariates_logit_t: tuple[str, ...] | None = None
    covariates_logit_c: tuple[str, ...] | None = None
    share_variant: str | None = None
    denominator_share: float | None = None
    g_correction: float | None = None
    shares: StrataShares | None = None
    diagnostics_ref: str | None = None

    @property
    def label(self) -> str:
        return KIND_LABELS[self.kind]

    def with_diagnostics_ref(self, ref: str) -> "EstimateResult":
        return replace(self, diagnostics_ref=ref)


@dataclass(frozen=True)
class StrataEffects:
    """Back-computed effects for the four receipt strata.

    Strata with shares below the floor get NaN effects and a flag naming
    them; the reconstruction identity (share-weighted effects summing to the
    ITT estimate) holds whenever no stratum is flagged.
    """

    tau_11: float
    tau_10: float
    tau_01: float
    tau_00: float
    floor: float
    non_identifiable: tuple[str, ...] = ()


def _resolve_wls_covariates(d: Dataset, covariates: tuple[str, ...] | list[str] | None) -> tuple[str, ...]:
    names = tuple(covariates) if covariates is not None else tuple(d.covariate_names_wls)
    for name in names:
        if name not in d.covariates:
            raise EstimationError(f"unknown outcome covariate {name!r}")
    return names


def _logit_fit(
    d: Dataset,
    arm: str,
    covariates: tuple[str, ...] | list[str] | None,
    injected: LogitFit | None,
) -> LogitFit:
    if injected is not None:
        return injected
    return fit_logit(d, arm, covariate_names=tuple(covariates) if covariates is not None else None)


def _check_df(df: int, kind: EstimandKind, m: int, n_params: int) -> None:
    if df < 1:
        raise EstimationError(
            f"{KIND_LABELS[kind]} needs at least {n_params + 1} clusters for inference; dataset has {m}"
        )


def _assemble(
    kind: EstimandKind,
    d: Dataset,
    wls: WlsFit,
    point: float,
    var_adjusted: float | None,
    var_unadjusted: float,
    df: int,
    level: float,
    se_basis: str,
    g_value: float | None,
    covariates_logit_t: tuple[str, ...] | None = None,
    covariates_logit_c: tuple[str, ...] | None = None,
    share_variant: str | None = None,
    denominator_share: float | None = None,
    shares: StrataShares | None = None,
) -> EstimateResult:
    if se_basis == SE_ADJUSTED and var_adjusted is None:
        se_basis = SE_UNADJUSTED
    variance = var_adjusted if se_basis == SE_ADJUSTED else var_unadjusted
    inf = inference(point, variance, df, level)
    return EstimateResult(
        kind=kind,
        point=point,
        se_adjusted=math.sqrt(var_adjusted) if var_adjusted is not None else None,
        se_unadjusted=math.sqrt(var_unadjusted),
        df=df,
        level=level,
        t_stat=inf.t_stat,
        p_value=inf.p_value,
        ci_low=inf.ci_low,
        ci_high=inf.ci_high,
        se_basis=se_basis,
        m=d.m,
        m_t=d.m_t,
        m_c=d.m_c,
        n=d.n,
        covariates_wls=wls.covariate_names,
        covariates_logit_t=covariates_logit_t,
        covariates_logit_c=covariates_logit_c,
        share_variant=share_variant,
        denominator_share=denominator_share,
        g_correction=g_value,
        shares=shares,
    )


def estimate_itt(
    d: Dataset,
    covariates: tuple[str, ...] | list[str] | None = None,
    *,
    level: float = 0.95,
) -> EstimateResult:
    """Unit-weight difference in adjusted group means over everyone.

    No receipt model is involved, so only the known-weights SE is defined;
    the adjusted SE is reported as not applicable.
    """
    names = _resolve_wls_covariates(d, covariates)
    w = build_weights(EstimandKind.ITT, d)
    wls = fit_wls(d, w, names)
    df = d.m - 2 - wls.k
    _check_df(df, EstimandKind.ITT, d.m, 2 + wls.k)
    var_unadj = known_weights_variance(d, wls, w)
    return _assemble(
        EstimandKind.ITT,
        d,
        wls,
        wls_treatment_effect(wls),
        None,
        var_unadj,
        df,
        level,
        SE_UNADJUSTED,
        None,
    )


def _weighted_mean_estimate(
    kind: EstimandKind,
    d: Dataset,
    covariates: tuple[str, ...] | list[str] | None,
    logit_covariates_t: tuple[str, ...] | list[str] | None,
    logit_covariates_c: tuple[str, ...] | list[str] | None,
    fit_t: LogitFit | None,
    fit_c: LogitFit | None,
    level: float,
    g_correction: bool,
    se_basis: str,
    attach_shares: bool,
) -> EstimateResult:
    """Shared pipeline for the directly weighted kinds (CACE-T, IPW, tau_11)."""
    names = _resolve_wls_covariates(d, covariates)
    needs_c = kind in (EstimandKind.CACE_TC_IPW, EstimandKind.TAU_11)
    ft = _logit_fit(d, ARM_TREATMENT, logit_covariates_t, fit_t)
    fc = _logit_fit(d, ARM_CONTROL, logit_covariates_c, fit_c) if needs_c else None
    w = build_weights(kind, d, fit_t=ft, fit_c=fc)
    wls = fit_wls(d, w, names)
    n_params = layout_for(kind, wls.k, ft.k, fc.k if fc else 0).dim
    df = d.m - n_params
    _check_df(df, kind, d.m, n_params)
    scores = build_scores(kind, d, wls, fit_t=ft, fit_c=fc, w=w)
    gamma = gamma_hat(kind, d, wls, fit_t=ft, fit_c=fc, w=w)
    sw = sandwich(kind, scores, gamma, g_correction=g_correction, n_individuals=d.n,
                  outcome_params=wls.k + 2)
    var_unadj = known_weights_variance(d, wls, w)
    shares = estimate_strata_shares(d, ft, fc) if attach_shares and fc is not None else None
    return _assemble(
        kind,
        d,
        wls,
        wls_treatment_effect(wls),
        sw.variance_of_contrast,
        var_unadj,
        df,
        level,
        se_basis,
        sw.g_correction,
        covariates_logit_t=ft.covariate_names,
        covariates_logit_c=fc.covariate_names if fc else None,
        shares=shares,
    )


def estimate_cace_t(
    d: Dataset,
    covariates: tuple[str, ...] | list[str] | None = None,
    *,
    logit_covariates: tuple[str, ...] | list[str] | None = None,
    fit_t: LogitFit | None = None,
    level: float = 0.95,
    g_correction: bool = False,
    se_basis: str = SE_ADJUSTED,
) -> EstimateResult:
    """Effect on everyone who would receive services under treatment.

    Treatment-arm rows are weighted by observed receipt; control-arm rows by
    the treatment-arm propensity model evaluated on their covariates.
    """
    return _weighted_mean_estimate(
        EstimandKind.CACE_T, d, covariates, logit_covariates, None, fit_t, None,
        level, g_correction, se_basis, attach_shares=False,
    )


def estimate_cace_tc_ipw(
    d: Dataset,
    covariates: tuple[str, ...] | list[str] | None = None,
    *,
    logit_covariates_t: tuple[str, ...] | list[str] | None = None,
    logit_covariates_c: tuple[str, ...] | list[str] | None = None,
    fit_t: LogitFit | None = None,
    fit_c: LogitFit | None = None,
    level: float = 0.95,
    g_correction: bool = False,
    se_basis: str = SE_ADJUSTED,
) -> EstimateResult:
    """Directly weighted effect on would-be recipients of either arm.

    Recipients keep weight one; non-recipients are weighted by the opposite
    arm's propensity model, so each arm reweights toward the union stratum.
    """
    return _weighted_mean_estimate(
        EstimandKind.CACE_TC_IPW, d, covariates, logit_covariates_t, logit_covariates_c,
        fit_t, fit_c, level, g_correction, se_basis, attach_shares=True,
    )


def estimate_tau11(
    d: Dataset,
    covariates: tuple[str, ...] | list[str] | None = None,
    *,
    logit_covariates_t: tuple[str, ...] | list[str] | None = None,
    logit_covariates_c: tuple[str, ...] | list[str] | None = None,
    fit_t: LogitFit | None = None,
    fit_c: LogitFit | None = None,
    level: float = 0.95,
    g_correction: bool = False,
    se_basis: str = SE_ADJUSTED,
) -> EstimateResult:
    """Effect on always-recipients, from the observed-recipient subsample.

    Only rows with receipt are weighted (by the opposite arm's propensity),
    so both arms must contain recipients.
    """
    r_t = d.receipt[d.treat == 1]
    r_c = d.receipt[d.treat == 0]
    if not r_t.any() or not r_c.any():
        raise EstimationError("recipient subsample is empty in one arm; the always-recipient effect is undefined")
    return _weighted_mean_estimate(
        EstimandKind.TAU_11, d, covariates, logit_covariates_t, logit_covariates_c,
        fit_t, fit_c, level, g_correction, se_basis, attach_shares=True,
    )


def estimate_cace_t_iv(
    d: Dataset,
    covariates: tuple[str, ...] | list[str] | None = None,
    *,
    level: float = 0.95,
    g_correction: bool = False,
    se_basis: str = SE_ADJUSTED,
) -> EstimateResult:
    """ITT effect scaled by the treatment-arm receipt rate.

    No propensity model enters; the stack treats receipt as data, and the
    unadjusted SE additionally holds the receipt rate fixed.
    """
    names = _resolve_wls_covariates(d, covariates)
    t_mask = d.treat == 1
    pi_hat = float(d.receipt[t_mask].mean())
    if pi_hat <= 0.0:
        raise EstimationError("zero receipt rate in the treatment arm")
    w = build_weights(EstimandKind.CACE_T_IV, d)
    wls = fit_wls(d, w, names)
    n_params = layout_for(EstimandKind.CACE_T_IV, wls.k, 0, 0).dim
    df = d.m - n_params
    _check_df(df, EstimandKind.CACE_T_IV, d.m, n_params)
    point = wls_treatment_effect(wls) / pi_hat
    scores = build_scores(EstimandKind.CACE_T_IV, d, wls, w=w)
    gamma = gamma_hat(EstimandKind.CACE_T_IV, d, wls, w=w)
    sw = sandwich(EstimandKind.CACE_T_IV, scores, gamma, g_correction=g_correction, n_individuals=d.n,
                  outcome_params=wls.k + 2)
    var_unadj = known_weights_variance(d, wls, w) / pi_hat**2
    return _assemble(
        EstimandKind.CACE_T_IV,
        d,
        wls,
        point,
        sw.variance_of_contrast,
        var_unadj,
        df,
        level,
        se_basis,
        sw.g_correction,
        denominator_share=pi_hat,
    )


def estimate_cace_tc_ratio(
    d: Dataset,
    covariates: tuple[str, ...] | list[str] | None = None,
    share_variant: str = SHARE_FROM_T,
    *,
    logit_covariates: tuple[str, ...] | list[str] | None = None,
    fit_t: LogitFit | None = None,
    fit_c: LogitFit | None = None,
    level: float = 0.95,
    g_correction: bool = False,
    se_basis: str = SE_ADJUSTED,
) -> EstimateResult:
    """ITT effect scaled by the estimated would-be-recipient share.

    The share comes from one arm: its own receipt plus the opposite arm's
    propensity model on its non-recipients. The outcome regression itself is
    unweighted; the stack carries the share and ratio equations.
    """
    names = _resolve_wls_covariates(d, covariates)
    if share_variant == SHARE_FROM_T:
        fc = _logit_fit(d, ARM_CONTROL, logit_covariates, fit_c)
        ft = None
        e_other = predict_for_dataset(fc, d)
        arm_mask = d.treat == 1
    elif share_variant == SHARE_FROM_C:
        ft = _logit_fit(d, ARM_TREATMENT, logit_covariates, fit_t)
        fc = None
        e_other = predict_for_dataset(ft, d)
        arm_mask = d.treat == 0
    else:
        raise EstimationError(f"unknown share variant {share_variant!r}")
    r = d.receipt.astype(float)
    pi_hat = float((r + (1.0 - r) * e_other)[arm_mask].mean())
    if pi_hat <= 0.0:
        raise EstimationError(f"nonpositive estimated recipient share {pi_hat:g}")

    # The outcome regression is unweighted; only the share equation sees the
    # receipt-based weights.
    w = build_weights(EstimandKind.ITT, d)
    wls = fit_wls(d, w, names)
    k_fit = (fc or ft).k
    k_t = k_fit if share_variant == SHARE_FROM_C else 0
    k_c = k_fit if share_variant == SHARE_FROM_T else 0
    n_params = layout_for(EstimandKind.CACE_TC_RATIO, wls.k, k_t, k_c, share_variant).dim
    df = d.m - n_params
    _check_df(df, EstimandKind.CACE_TC_RATIO, d.m, n_params)
    point = wls_treatment_effect(wls) / pi_hat
    scores = build_scores(EstimandKind.CACE_TC_RATIO, d, wls, fit_t=ft, fit_c=fc, w=w, share_variant=share_variant)
    gamma = gamma_hat(EstimandKind.CACE_TC_RATIO, d, wls, fit_t=ft, fit_c=fc, w=w, share_variant=share_variant)
    sw = sandwich(EstimandKind.CACE_TC_RATIO, scores, gamma, g_correction=g_correction, n_individuals=d.n,
                  outcome_params=wls.k + 2)
    var_unadj = known_weights_variance(d, wls, w) / pi_hat**2
    return _assemble(
        EstimandKind.CACE_TC_RATIO,
        d,
        wls,
        point,
        sw.variance_of_contrast,
        var_unadj,
        df,
        level,
        se_basis,
        sw.g_correction,
        covariates_logit_t=ft.covariate_names if ft else None,
        covariates_logit_c=fc.covariate_names if fc else None,
        share_variant=share_variant,
        denominator_share=pi_hat,
    )


def _stratum_effect(numerator: float, share: float, name: str, floor: float, flags: list[str]) -> float:
    if abs(share) < floor:
        flags.append(name)
        return math.nan
    return numerator / share


def decompose_strata_effects(
    results: dict[EstimandKind, EstimateResult],
    shares: StrataShares,
    floor: float = SHARE_FLOOR_DEFAULT,
) -> StrataEffects:
    """Back out the four stratum effects from the fitted estimators.

    Needs ITT, CACE-T, tau_11, and one CACE-TC result (ratio preferred when
    both are present). Each stratum effect is the residual share-weighted
    numerator divided by its stratum share; shares under the floor make that
    stratum non-identifiable.
    """
    try:
        itt = results[EstimandKind.ITT]
        cace_t = results[EstimandKind.CACE_T]
        tau11 = results[EstimandKind.TAU_11]
    except KeyError as missing:
        raise EstimationError(f"decomposition needs estimator {missing.args[0]}") from None
    cace_tc = results.get(EstimandKind.CACE_TC_RATIO) or results.get(EstimandKind.CACE_TC_IPW)
    if cace_tc is None:
        raise EstimationError("decomposition needs a CACE-TC estimate (ratio or IPW)")

    pi_t = shares.pi_cace_t
    pi_tc = shares.pi_cace_tc
    flags: list[str] = []
    tau_10 = _stratum_effect(
        cace_t.point * pi_t - tau11.point * shares.pi_11, shares.pi_10, "tau_10", floor, flags
    )
    tau_01 = _stratum_effect(
        cace_tc.point * pi_tc - cace_t.point * pi_t, shares.pi_01, "tau_01", floor, flags
    )
    tau_00 = _stratum_effect(
        itt.point - cace_tc.point * pi_tc, shares.pi_00, "tau_00", floor, flags
    )
    return StrataEffects(
        tau_11=tau11.point,
        tau_10=tau_10,
        tau_01=tau_01,
        tau_00=tau_00,
        floor=floor,
        non_identifiable=tuple(flags),
    )


def result_record(res: EstimateResult) -> dict:
    """JSON-ready dictionary for one estimate."""
    record = {
        "kind": str(res.kind),
        "label": res.label,
        "point": res.point,
        "se_adjusted": res.se_adjusted,
        "se_unadjusted": res.se_unadjusted,
        "se_basis": res.se_basis,
        "df": res.df,
        "level": res.level,
        "t_stat": res.t_stat,
        "p_value": res.p_value,
        "ci_low": res.ci_low,
        "ci_high": res.ci_high,
        "m": res.m,
        "m_t": res.m_t,
        "m_c": res.m_c,
        "n": res.n,
        "covariates_wls": list(res.covariates_wls),
        "covariates_logit_t": list(res.covariates_logit_t) if res.covariates_logit_t is not None else None,
        "covariates_logit_c": list(res.covariates_logit_c) if res.covariates_logit_c is not None else None,
        "share_variant": res.share_variant,
        "denominator_share": res.denominator_share,
        "g_correction": res.g_correction,
        "diagnostics_ref": res.diagnostics_ref,
    }
    if res.shares is not None:
        s = res.shares
        record["shares"] = {
            "pi_cace_t": s.pi_cace_t,
            "pi_cace_tc_from_t": s.pi_cace_tc_from_t,
            "pi_cace_tc_from_c": s.pi_cace_tc_from_c,
            "pi_11": s.pi_11,
            "pi_10": s.pi_10,
            "pi_01": s.pi_01,
            "pi_00": s.pi_00,
            "variant": s.variant,
            "warnings": list(s.warnings),
        }
    else:
        record["shares"] = None
    return record


def format_results_table(results: list[EstimateResult]) -> str:
    """Human-readable table: estimator, point, adjusted SE, unadjusted SE."""
    header = f"{'Estimator':<18} {'Estimate':>10} {'SE (adj)':>10} {'SE (unadj)':>11}"
    lines = [header, "-" * len(header)]
    for res in results:
        adj = f"{res.se_adjusted:.3f}" if res.se_adjusted is not None else "NA"
        lines.append(
            f"{res.label:<18} {res.point:>10.3f} {adj:>10} {res.se_unadjusted:>11.3f}"
        )
    return "\n".join(lines)
