"""Synthetic clustered-trial generator and the Monte Carlo study runner.

A Scenario pins the design knobs: cluster counts and sizes, target receipt
rates per arm, covariate strength on receipt, outcome-variance composition,
and the four stratum effects in control-SD units. Calibration turns those
into model parameters; generation draws latent potential receipts and
outcomes and reveals one arm per cluster; the study runner replicates the
whole pipeline and aggregates estimator metrics.

Randomness contract: every draw comes from numpy's default 64-bit generator
(PCG64). A study derives one child SeedSequence per replication by spawning
from the master seed, so replication i's data never depends on thread count
or execution order, and metrics aggregate in replication order. Within one
trial the draw order is fixed: cluster sizes, treated-cluster choice,
cluster-level covariate means, individual covariate deviations, receipt
uniforms (treatment arm first), cluster outcome effects, heterogeneity
effects, and finally individual outcome noise.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from cace_ipw.data import DataError, Dataset
from cace_ipw.estimators import (
    EstimateResult,
    EstimationError,
    estimate_cace_t,
    estimate_cace_t_iv,
    estimate_cace_tc_ipw,
    estimate_cace_tc_ratio,
    estimate_itt,
    estimate_tau11,
)
from cace_ipw.gee import VarianceError
from cace_ipw.logit import FitError
from cace_ipw.weights import EstimandKind
from cace_ipw.wls import RankDeficiencyError

SLOPE_FORM_MARGINAL = "marginal"
SLOPE_FORM_LITERAL = "literal"

COUPLING_INDEPENDENT = "independent"
COUPLING_SHARED = "shared"

CLUSTER_EFFECTS_SHARED = "shared"
CLUSTER_EFFECTS_PER_STRATUM = "per_stratum"

WLS_COVARIATES_NONE = "none"
WLS_COVARIATES_BOTH = "both"

OUTCOME_LEVELS_RECEIPT = "receipt_based"
OUTCOME_LEVELS_STRATUM = "stratum_based"

BETWEEN_CLUSTER_COVARIATE_SHARE = 0.30

TRUE_ESTIMAND_DRAWS = 1_000_000

DEFAULT_STUDY_KINDS = (
    EstimandKind.CACE_T,
    EstimandKind.CACE_TC_RATIO,
    EstimandKind.CACE_TC_IPW,
    EstimandKind.TAU_11,
)

# Stratum codes: 2*R(1) + R(0). Effects tuples are ordered (11, 10, 01, 00).
STRATUM_LABELS = {3: "11", 2: "10", 1: "01", 0: "00"}
_EFFECT_INDEX_BY_CODE = {3: 0, 2: 1, 1: 2, 0: 3}


class CalibrationError(ValueError):
    pass


class StudyError(RuntimeError):
    """Study-level failure. When aggregation completed before the error
    (the failure-rate check), the finished table rides along in `table`."""

    def __init__(self, message: str, table: "MetricsTable | None" = None):
        super().__init__(message)
        self.table = table


@dataclass(frozen=True)
class Scenario:
    """Design parameters of one simulated trial family.

    Stratum effects are (tau_11, tau_10, tau_01, tau_00) in control-SD units;
    the last must be zero unless `enforce_exclusion` is turned off.
    `covariate_strength_*` is the per-SD receipt probability shift (0.05 or
    0.10 in the shipped configs). `var_ux`/`var_ex` optionally pin the
    between/within split of the covariate variance; left unset, 30% of it is
    between clusters.

    `outcome_levels` picks how stratum means are realized. The default
    `receipt_based` keys each arm's outcome level to the receipt realized in
    that arm, which satisfies the ignorability conditions the weighting
    estimators rely on (and requires tau_11 + tau_00 == tau_10 + tau_01).
    `stratum_based` gives each stratum its own constant, deliberately
    breaking those conditions for sensitivity runs.
    """

    m: int = 80
    p: float = 0.6
    n_range: tuple[int, int] = (40, 80)
    rbar_t: float = 0.70
    rbar_c: float = 0.50
    covariate_strength_t: float = 0.10
    covariate_strength_c: float = 0.05
    icc0: float = 0.10
    r_squared: float = 0.30
    f_ratio: float = 0.10
    sigma_y0_sq: float = 1.0
    stratum_effects: tuple[float, float, float, float] = (0.20, 0.30, -0.10, 0.0)
    var_ux: float | None = None
    var_ex: float | None = None
    slope_form: str = SLOPE_FORM_MARGINAL
    receipt_coupling: str = COUPLING_INDEPENDENT
    cluster_effects: str = CLUSTER_EFFECTS_SHARED
    outcome_levels: str = OUTCOME_LEVELS_RECEIPT
    enforce_exclusion: bool = True

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise CalibrationError(f"assignment probability {self.p} outside (0, 1)")
        if not 0.0 < self.rbar_c <= self.rbar_t < 1.0:
            raise CalibrationError(
                f"receipt rates must satisfy 0 < rbar_c <= rbar_t < 1, got ({self.rbar_t}, {self.rbar_c})"
            )
        if self.m < 2:
            raise CalibrationError("at least two clusters are required")
        if self.n_range[0] < 1 or self.n_range[1] < self.n_range[0]:
            raise CalibrationError(f"invalid cluster size range {self.n_range}")
        for label, value in (
            ("icc0", self.icc0), ("r_squared", self.r_squared),
            ("f_ratio", self.f_ratio), ("sigma_y0_sq", self.sigma_y0_sq),
        ):
            if value < 0.0:
                raise CalibrationError(f"{label} must be nonnegative, got {value}")
        if len(self.stratum_effects) != 4:
            raise CalibrationError("stratum_effects must be (tau_11, tau_10, tau_01, tau_00)")
        if self.enforce_exclusion and self.stratum_effects[3] != 0.0:
            raise CalibrationError(
                "tau_00 must be 0 (never-recipients see no services in either arm); "
                "set enforce_exclusion=False to override"
            )
        if self.slope_form not in (SLOPE_FORM_MARGINAL, SLOPE_FORM_LITERAL):
            raise CalibrationError(f"unknown slope_form {self.slope_form!r}")
        if self.receipt_coupling not in (COUPLING_INDEPENDENT, COUPLING_SHARED):
            raise CalibrationError(f"unknown receipt_coupling {self.receipt_coupling!r}")
        if self.cluster_effects not in (CLUSTER_EFFECTS_SHARED, CLUSTER_EFFECTS_PER_STRATUM):
            raise CalibrationError(f"unknown cluster_effects {self.cluster_effects!r}")
        if self.outcome_levels not in (OUTCOME_LEVELS_RECEIPT, OUTCOME_LEVELS_STRATUM):
            raise CalibrationError(f"unknown outcome_levels {self.outcome_levels!r}")
        if self.outcome_levels == OUTCOME_LEVELS_RECEIPT:
            t11, t10, t01, t00 = self.stratum_effects
            if abs(t11 - t10 - t01 + t00) > 1e-12:
                raise CalibrationError(
                    "receipt_based outcome levels require tau_11 + tau_00 == tau_10 + tau_01 "
                    "(the four effects must be differences of per-arm receipt levels); "
                    "use outcome_levels='stratum_based' for unrestricted effects"
                )


@dataclass(frozen=True)
class CalibratedParams:
    alpha0_t: float
    alpha0_c: float
    slope_t: float
    slope_c: float
    sigma2_x: float
    var_ux: float
    var_ex: float
    sigma2_y0_star: float
    sigma2_u: float
    sigma2_theta: float
    sigma2_eps: float


@dataclass(frozen=True)
class SimulatedTrial:
    """One generated trial: the observed Dataset plus its latent state."""

    observed: Dataset
    receipt_if_treated: np.ndarray
    receipt_if_control: np.ndarray
    stratum: np.ndarray  # codes 2*R(1) + R(0); labels in STRATUM_LABELS
    outcome_if_treated: np.ndarray
    outcome_if_control: np.ndarray


@dataclass(frozen=True)
class TrueEffects:
    tau_itt: float
    tau_cace_t: float
    tau_cace_tc: float
    tau_11: float
    tau_iv_plim: float
    pi_11: float
    pi_10: float
    pi_01: float
    pi_00: float

    def for_kind(self, kind: EstimandKind) -> float:
        return {
            EstimandKind.ITT: self.tau_itt,
            EstimandKind.CACE_T: self.tau_cace_t,
            EstimandKind.CACE_T_IV: self.tau_iv_plim,
            EstimandKind.CACE_TC_RATIO: self.tau_cace_tc,
            EstimandKind.CACE_TC_IPW: self.tau_cace_tc,
            EstimandKind.TAU_11: self.tau_11,
        }[kind]


@dataclass(frozen=True)
class MetricsRow:
    kind: EstimandKind
    true_effect: float
    mean_estimate: float
    true_se: float
    mean_se_adjusted: float
    mean_se_unadjusted: float
    coverage: float
    n_used: int
    n_failures: int


@dataclass(frozen=True)
class MetricsTable:
    rows: tuple[MetricsRow, ...]
    replications: int
    failed_replications: int
    master_seed: int
    wls_covariates: str
    scenario: Scenario
    truths: TrueEffects

    def row_for(self, kind: EstimandKind) -> MetricsRow:
        for row in self.rows:
            if row.kind is kind:
                return row
        raise KeyError(f"no metrics row for {kind}")

    def to_delimited(self, delimiter: str = ",") -> str:
        header = (
            "estimator", "true_effect", "mean_estimate", "true_se",
            "mean_se_adjusted", "mean_se_unadjusted", "coverage", "n_used", "n_failures",
        )
        lines = [delimiter.join(header)]
        for r in self.rows:
            lines.append(delimiter.join((
                str(r.kind),
                format(r.true_effect, ".12g"),
                format(r.mean_estimate, ".12g"),
                format(r.true_se, ".12g"),
                format(r.mean_se_adjusted, ".12g"),
                format(r.mean_se_unadjusted, ".12g"),
                format(r.coverage, ".12g"),
                str(r.n_used),
                str(r.n_failures),
            )))
        return "\n".join(lines) + "\n"


def calibrate_scenario(s: Scenario) -> CalibratedParams:
    """Resolve variance components, receipt intercepts, and receipt slopes.

    The covariate block absorbs r_squared of the control-arm outcome
    variance, split equally over the two covariates; the remainder is split
    between cluster and individual noise by icc0, with heterogeneity scaled
    by f_ratio. Receipt intercepts are the log odds of the target rates.
    Slopes translate the per-SD probability shift through the logistic
    density at the target rate; `slope_form="literal"` instead multiplies
    the shift by the covariate SD (a printed variant kept for comparison).
    """
    sigma2_x = s.r_squared * s.sigma_y0_sq / 2.0
    sigma2_y0_star = s.sigma_y0_sq - 2.0 * sigma2_x
    if sigma2_y0_star <= 0.0:
        raise CalibrationError(
            f"covariates absorb the whole outcome variance (r_squared={s.r_squared}); nothing is left for noise"
        )
    if (s.var_ux is None) != (s.var_ex is None):
        raise CalibrationError("set both var_ux and var_ex or neither")
    if s.var_ux is None:
        var_ux = BETWEEN_CLUSTER_COVARIATE_SHARE * sigma2_x
        var_ex = sigma2_x - var_ux
    else:
        var_ux, var_ex = float(s.var_ux), float(s.var_ex)
        if var_ux < 0.0 or var_ex < 0.0:
            raise CalibrationError("covariate variance components must be nonnegative")
        if abs(var_ux + var_ex - sigma2_x) > 1e-9:
            raise CalibrationError(
                f"var_ux + var_ex = {var_ux + var_ex:g} must equal sigma2_x = {sigma2_x:g}"
            )
    sigma_x = math.sqrt(sigma2_x)

    def slope(delta: float, rbar: float) -> float:
        if s.slope_form == SLOPE_FORM_LITERAL:
            return sigma_x * delta / (rbar * (1.0 - rbar))
        return delta / (sigma_x * rbar * (1.0 - rbar))

    return CalibratedParams(
        alpha0_t=math.log(s.rbar_t / (1.0 - s.rbar_t)),
        alpha0_c=math.log(s.rbar_c / (1.0 - s.rbar_c)),
        slope_t=slope(s.covariate_strength_t, s.rbar_t),
        slope_c=slope(s.covariate_strength_c, s.rbar_c),
        sigma2_x=sigma2_x,
        var_ux=var_ux,
        var_ex=var_ex,
        sigma2_y0_star=sigma2_y0_star,
        sigma2_u=sigma2_y0_star * s.icc0,
        sigma2_theta=s.f_ratio * sigma2_y0_star * s.icc0,
        sigma2_eps=sigma2_y0_star * (1.0 - s.icc0),
    )


def _expit(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def generate_trial(s: Scenario, seed) -> SimulatedTrial:
    """Draw one complete trial: latent receipts and outcomes, then reveal one arm.

    `seed` is anything numpy's default_rng accepts (int, SeedSequence,
    Generator). See the module docstring for the fixed draw order.
    """
    cal = calibrate_scenario(s)
    rng = np.random.default_rng(seed)

    sizes = rng.integers(s.n_range[0], s.n_range[1] + 1, size=s.m)
    n = int(sizes.sum())
    row_cluster = np.repeat(np.arange(s.m), sizes)

    m_treated = int(round(s.m * s.p))
    treated_clusters = rng.choice(s.m, size=m_treated, replace=False)
    cluster_t = np.zeros(s.m, dtype=np.int8)
    cluster_t[treated_clusters] = 1

    cluster_x_means = rng.normal(0.0, math.sqrt(cal.var_ux), size=(s.m, 2))
    x_dev = rng.normal(0.0, math.sqrt(cal.var_ex), size=(n, 2))
    x = cluster_x_means[row_cluster] + x_dev
    x_sum = x[:, 0] + x[:, 1]

    e_t = _expit(cal.alpha0_t + cal.slope_t * x_sum)
    e_c = _expit(cal.alpha0_c + cal.slope_c * x_sum)
    u_receipt_t = rng.random(n)
    if s.receipt_coupling == COUPLING_SHARED:
        u_receipt_c = u_receipt_t
    else:
        u_receipt_c = rng.random(n)
    r1 = (e_t >= u_receipt_t).astype(np.int8)
    r0 = (e_c >= u_receipt_c).astype(np.int8)
    stratum = (2 * r1 + r0).astype(np.int8)

    if s.cluster_effects == CLUSTER_EFFECTS_PER_STRATUM:
        u_cluster = rng.normal(0.0, math.sqrt(cal.sigma2_u), size=(s.m, 4))
        theta_cluster = rng.normal(0.0, math.sqrt(cal.sigma2_theta), size=(s.m, 4))
        u_row = u_cluster[row_cluster, stratum]
        theta_row = theta_cluster[row_cluster, stratum]
    else:
        u_cluster = rng.normal(0.0, math.sqrt(cal.sigma2_u), size=s.m)
        theta_cluster = rng.normal(0.0, math.sqrt(cal.sigma2_theta), size=s.m)
        u_row = u_cluster[row_cluster]
        theta_row = theta_cluster[row_cluster]
    eps = rng.normal(0.0, math.sqrt(cal.sigma2_eps), size=n)

    base = x_sum + u_row + eps
    t11, t10, t01, t00 = (float(v) for v in s.stratum_effects)
    if s.outcome_levels == OUTCOME_LEVELS_RECEIPT:
        # Outcome levels keyed to the receipt realized in one's own arm:
        # mu1 depends on R(1) only and mu0 on R(0) only, so conditioning on
        # the covariates and own-arm receipt screens off the other arm's
        # receipt. The four stratum effects are the level differences, which
        # is what pins tau_00 = tau_10 + tau_01 - tau_11.
        mu1_rec, mu1_non = t10, t10 - t11 + t01
        mu0_rec, mu0_non = t10 - t11, 0.0
        y1 = np.where(r1 == 1, mu1_rec, mu1_non) + base + theta_row
        y0 = np.where(r0 == 1, mu0_rec, mu0_non) + base
    else:
        # One constant per stratum: the control level is zero and the treated
        # level is the stratum effect. Within-arm outcome means then differ
        # across latent strata at fixed covariates, which the reweighting
        # estimators cannot remove; useful for studying that failure mode.
        effects = np.asarray(s.stratum_effects)
        effects_by_code = effects[np.array([_EFFECT_INDEX_BY_CODE[c] for c in range(4)])]
        y1 = effects_by_code[stratum] + base + theta_row
        y0 = base.copy()

    t_row = cluster_t[row_cluster]
    y = np.where(t_row == 1, y1, y0)
    r = np.where(t_row == 1, r1, r0).astype(np.int8)

    starts = np.concatenate(([0], np.cumsum(sizes)))
    observed = Dataset(
        cluster_ids=tuple(f"c{j + 1:04d}" for j in range(s.m)),
        cluster_starts=starts,
        treat=t_row.astype(np.int8),
        receipt=r,
        outcome=y.astype(np.float64),
        covariates={"x1": x[:, 0].copy(), "x2": x[:, 1].copy()},
        covariate_names_wls=("x1", "x2"),
        covariate_names_logit_t=("x1", "x2"),
        covariate_names_logit_c=("x1", "x2"),
    )
    return SimulatedTrial(
        observed=observed,
        receipt_if_treated=r1,
        receipt_if_control=r0,
        stratum=stratum,
        outcome_if_treated=y1,
        outcome_if_control=y0,
    )


def true_estimands(s: Scenario, n_population: int = TRUE_ESTIMAND_DRAWS, seed=2_000_003) -> TrueEffects:
    """Monte Carlo truths: strata shares and share-weighted effects.

    Shares depend on the covariates only through their marginal distribution,
    so a flat draw of that marginal suffices; no clusters are needed. The
    always-recipient effect is the configured constant. The IV truth is the
    probability limit (ITT over the treatment-arm receipt share), which is
    what the IV estimator converges to when defiers exist.
    """
    cal = calibrate_scenario(s)
    rng = np.random.default_rng(seed)
    x_sum = rng.normal(0.0, math.sqrt(cal.sigma2_x), size=(n_population, 2)).sum(axis=1)
    e_t = _expit(cal.alpha0_t + cal.slope_t * x_sum)
    e_c = _expit(cal.alpha0_c + cal.slope_c * x_sum)
    if s.receipt_coupling == COUPLING_SHARED:
        # One uniform drives both arms, so joint receipt is the pointwise
        # minimum of the two propensities rather than their product.
        pi_11 = float(np.minimum(e_t, e_c).mean())
        pi_10 = float(np.maximum(e_t - e_c, 0.0).mean())
        pi_01 = float(np.maximum(e_c - e_t, 0.0).mean())
    else:
        pi_11 = float((e_t * e_c).mean())
        pi_10 = float((e_t * (1.0 - e_c)).mean())
        pi_01 = float(((1.0 - e_t) * e_c).mean())
    pi_00 = 1.0 - pi_11 - pi_10 - pi_01
    t11, t10, t01, t00 = s.stratum_effects
    tau_itt = pi_11 * t11 + pi_10 * t10 + pi_01 * t01 + pi_00 * t00
    pi_t = pi_11 + pi_10
    pi_tc = pi_t + pi_01
    return TrueEffects(
        tau_itt=tau_itt,
        tau_cace_t=(pi_11 * t11 + pi_10 * t10) / pi_t,
        tau_cace_tc=(pi_11 * t11 + pi_10 * t10 + pi_01 * t01) / pi_tc,
        tau_11=t11,
        tau_iv_plim=tau_itt / pi_t,
        pi_11=pi_11,
        pi_10=pi_10,
        pi_01=pi_01,
        pi_00=pi_00,
    )


def _run_estimator(kind: EstimandKind, d: Dataset, names: tuple[str, ...], level: float, g: bool) -> EstimateResult:
    if kind is EstimandKind.ITT:
        return estimate_itt(d, names, level=level)
    if kind is EstimandKind.CACE_T:
        return estimate_cace_t(d, names, level=level, g_correction=g)
    if kind is EstimandKind.CACE_T_IV:
        return estimate_cace_t_iv(d, names, level=level, g_correction=g)
    if kind is EstimandKind.CACE_TC_RATIO:
        return estimate_cace_tc_ratio(d, names, level=level, g_correction=g)
    if kind is EstimandKind.CACE_TC_IPW:
        return estimate_cace_tc_ipw(d, names, level=level, g_correction=g)
    if kind is EstimandKind.TAU_11:
        return estimate_tau11(d, names, level=level, g_correction=g)
    raise ValueError(f"unknown estimand kind {kind}")


_FAILURE_TYPES = (
    EstimationError, FitError, RankDeficiencyError, VarianceError, DataError, np.linalg.LinAlgError,
)


def _replicate_one(args) -> dict:
    """One replication: generate, estimate every kind, record outcomes."""
    scenario, kinds, names, child_seed, level, g = args
    trial = generate_trial(scenario, child_seed)
    out: dict = {}
    for kind in kinds:
        try:
            res = _run_estimator(kind, trial.observed, names, level, g)
        except _FAILURE_TYPES as exc:
            out[kind] = ("error", f"{type(exc).__name__}: {exc}")
        else:
            out[kind] = (
                "ok",
                (res.point,
                 math.nan if res.se_adjusted is None else res.se_adjusted,
                 res.se_unadjusted,
                 res.ci_low,
                 res.ci_high),
            )
    return out


def run_study(
    s: Scenario,
    kinds: tuple[EstimandKind, ...] = DEFAULT_STUDY_KINDS,
    replications: int = 1000,
    master_seed: int = 1,
    wls_covariates: str = WLS_COVARIATES_BOTH,
    threads: int = 1,
    level: float = 0.95,
    g_correction: bool = False,
    truths: TrueEffects | None = None,
) -> MetricsTable:
    """Replicate the scenario and aggregate per-estimator metrics.

    Coverage counts confidence intervals (built on each estimator's default
    SE basis) containing the scenario truth. Results are identical for any
    `threads` value: replication seeds are spawned up front and aggregation
    runs in replication order. Raises StudyError if more than 1% of
    replications fail.
    """
    if replications < 2:
        raise StudyError("at least 2 replications are required")
    if wls_covariates == WLS_COVARIATES_NONE:
        names: tuple[str, ...] = ()
    elif wls_covariates == WLS_COVARIATES_BOTH:
        names = ("x1", "x2")
    else:
        raise StudyError(f"unknown wls_covariates option {wls_covariates!r}")
    if truths is None:
        truths = true_estimands(s)

    child_seeds = np.random.SeedSequence(master_seed).spawn(replications)
    job_args = [(s, tuple(kinds), names, child_seeds[i], level, g_correction) for i in range(replications)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunk = max(1, replications // (threads * 8))
            records = list(pool.map(_replicate_one, job_args, chunksize=chunk))
    else:
        records = [_replicate_one(a) for a in job_args]

    failed_reps = sum(1 for rec in records if any(v[0] == "error" for v in rec.values()))
    rows = []
    for kind in kinds:
        oks = [rec[kind][1] for rec in records if rec[kind][0] == "ok"]
        n_fail = replications - len(oks)
        if len(oks) < 2:
            raise StudyError(f"estimator {kind} succeeded in fewer than 2 replications")
        arr = np.asarray(oks)
        truth = truths.for_kind(kind)
        covered = (arr[:, 3] <= truth) & (truth <= arr[:, 4])
        rows.append(MetricsRow(
            kind=kind,
            true_effect=truth,
            mean_estimate=float(arr[:, 0].mean()),
            true_se=float(arr[:, 0].std(ddof=1)),
            mean_se_adjusted=float(arr[:, 1].mean()),
            mean_se_unadjusted=float(arr[:, 2].mean()),
            coverage=float(covered.mean()),
            n_used=len(oks),
            n_failures=n_fail,
        ))
    table = MetricsTable(
        rows=tuple(rows),
        replications=replications,
        failed_replications=failed_reps,
        master_seed=master_seed,
        wls_covariates=wls_covariates,
        scenario=s,
        truths=truths,
    )
    if failed_reps > 0.01 * replications:
        raise StudyError(
            f"{failed_reps} of {replications} replications failed (>1%); "
            "the scenario is too fragile for these estimators",
            table=table,
        )
    return table
