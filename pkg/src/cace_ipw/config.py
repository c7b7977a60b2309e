"""Run configuration files: INI-style sections parsed into typed configs.

One config file describes one run; command-line flags may override a few
fields (seed, threads, level, SE basis, g-correction). Covariate lists are
whitespace- or comma-separated. Every loader validates eagerly so a bad
config fails before any data is touched.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace

from cace_ipw.data import ColumnSchema
from cace_ipw.simulation import (
    CalibrationError,
    DEFAULT_STUDY_KINDS,
    Scenario,
    WLS_COVARIATES_BOTH,
    WLS_COVARIATES_NONE,
    calibrate_scenario,
)
from cace_ipw.weights import SHARE_FROM_C, SHARE_FROM_T, EstimandKind

SE_CHOICE_ADJUSTED = "adjusted"
SE_CHOICE_UNADJUSTED = "unadjusted"
SE_CHOICE_BOTH = "both"
SE_CHOICES = (SE_CHOICE_ADJUSTED, SE_CHOICE_UNADJUSTED, SE_CHOICE_BOTH)

KIND_ORDER = (
    EstimandKind.ITT,
    EstimandKind.CACE_T,
    EstimandKind.CACE_T_IV,
    EstimandKind.CACE_TC_RATIO,
    EstimandKind.CACE_TC_IPW,
    EstimandKind.TAU_11,
)
_KIND_BY_TOKEN = {str(k): k for k in KIND_ORDER}

_NEEDS_LOGIT_T = {EstimandKind.CACE_T, EstimandKind.CACE_TC_IPW, EstimandKind.TAU_11}
_NEEDS_LOGIT_C = {EstimandKind.CACE_TC_IPW, EstimandKind.TAU_11}

_SHARE_VARIANTS = {
    "from_t": SHARE_FROM_T,
    "from_c": SHARE_FROM_C,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EstimateConfig:
    path: str
    schema: ColumnSchema
    kinds: tuple[EstimandKind, ...]
    level: float = 0.95
    se_choice: str = SE_CHOICE_BOTH
    g_correction: bool = False
    share_variant: str = SHARE_FROM_T
    df_override: int | None = None


@dataclass(frozen=True)
class SimulateConfig:
    scenario: Scenario
    replications: int
    master_seed: int
    kinds: tuple[EstimandKind, ...]
    wls_covariates: str
    threads: int = 0
    level: float = 0.95
    g_correction: bool = False


@dataclass(frozen=True)
class DiagnoseConfig:
    path: str
    schema: ColumnSchema
    bins: int = 20


def _read_ini(path: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return parser


def _names(raw: str) -> tuple[str, ...]:
    return tuple(tok for tok in raw.replace(",", " ").split() if tok)


def _require(section: configparser.SectionProxy, key: str, where: str) -> str:
    if key not in section:
        raise ConfigError(f"missing key '{key}' in [{where}]")
    return section[key]


def _get_float(section, key: str, default: float, where: str) -> float:
    if key not in section:
        return default
    try:
        return float(section[key])
    except ValueError as exc:
        raise ConfigError(f"[{where}] {key} must be a number, got {section[key]!r}") from exc


def _get_int(section, key: str, default: int, where: str) -> int:
    if key not in section:
        return default
    try:
        return int(section[key])
    except ValueError as exc:
        raise ConfigError(f"[{where}] {key} must be an integer, got {section[key]!r}") from exc


def _get_bool(section, key: str, default: bool, where: str) -> bool:
    if key not in section:
        return default
    raw = section[key].strip().lower()
    if raw in ("1", "true", "yes", "on"):
        return True
    if raw in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"[{where}] {key} must be a boolean, got {section[key]!r}")


def _check_level(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ConfigError(f"confidence level must be in (0, 1), got {level}")
    return level


def _schema_from(section: configparser.SectionProxy, *, require_logit_keys: tuple[bool, bool]) -> tuple[str, ColumnSchema]:
    path = _require(section, "path", "data")
    cluster = _require(section, "cluster", "data")
    treat = _require(section, "treat", "data")
    receipt = _require(section, "receipt", "data")
    outcome = _require(section, "outcome", "data")
    need_t, need_c = require_logit_keys
    if need_t and "covariates_logit_t" not in section:
        raise ConfigError(
            "a requested estimator weights by the treatment-arm receipt model, "
            "but [data] declares no covariates_logit_t (use an empty value for intercept-only)"
        )
    if need_c and "covariates_logit_c" not in section:
        raise ConfigError(
            "a requested estimator weights by the control-arm receipt model, "
            "but [data] declares no covariates_logit_c (use an empty value for intercept-only)"
        )
    schema = ColumnSchema(
        cluster=cluster,
        treat=treat,
        receipt=receipt,
        outcome=outcome,
        covariates_wls=_names(section.get("covariates_wls", "")),
        covariates_logit_t=_names(section.get("covariates_logit_t", "")),
        covariates_logit_c=_names(section.get("covariates_logit_c", "")),
        delimiter=section.get("delimiter", ","),
    )
    reserved = {cluster: "cluster", treat: "treat", receipt: "receipt", outcome: "outcome"}
    for name in schema.covariate_union():
        if name in reserved:
            raise ConfigError(
                f"column '{name}' plays the {reserved[name]} role and cannot also be a "
                "covariate (identifiers and design variables carry no adjustment information)"
            )
    return path, schema


def _parse_kinds(raw: str) -> tuple[EstimandKind, ...]:
    tokens = _names(raw.lower())
    if not tokens:
        raise ConfigError("estimator list is empty")
    if tokens == ("all",):
        return KIND_ORDER
    kinds = []
    for tok in tokens:
        if tok not in _KIND_BY_TOKEN:
            raise ConfigError(
                f"unknown estimator '{tok}'; choose from {', '.join(_KIND_BY_TOKEN)} or 'all'"
            )
        kinds.append(_KIND_BY_TOKEN[tok])
    # keep canonical display order, drop duplicates
    return tuple(k for k in KIND_ORDER if k in set(kinds))


def load_estimate_config(path: str) -> EstimateConfig:
    parser = _read_ini(path)
    if "data" not in parser:
        raise ConfigError("config needs a [data] section")
    est = parser["estimate"] if "estimate" in parser else parser["DEFAULT"]
    kinds = _parse_kinds(est.get("kinds", "all"))
    need_t = any(k in _NEEDS_LOGIT_T for k in kinds)
    share_raw = est.get("share_variant", "from_t").strip().lower()
    if share_raw not in _SHARE_VARIANTS:
        raise ConfigError(f"unknown share_variant {share_raw!r}; choose from {', '.join(_SHARE_VARIANTS)}")
    share_variant = _SHARE_VARIANTS[share_raw]
    need_c = any(k in _NEEDS_LOGIT_C for k in kinds)
    if EstimandKind.CACE_TC_RATIO in kinds:
        # the ratio estimator fits the arm opposite to its share source
        if share_variant == SHARE_FROM_T:
            need_c = True
        else:
            need_t = True
    data_path, schema = _schema_from(parser["data"], require_logit_keys=(need_t, need_c))
    se_choice = est.get("se", SE_CHOICE_BOTH).strip().lower()
    if se_choice not in SE_CHOICES:
        raise ConfigError(f"se must be one of {', '.join(SE_CHOICES)}, got {se_choice!r}")
    df_override = _get_int(est, "df_override", 0, "estimate") or None
    if df_override is not None and df_override < 1:
        raise ConfigError("df_override must be a positive integer")
    return EstimateConfig(
        path=data_path,
        schema=schema,
        kinds=kinds,
        level=_check_level(_get_float(est, "level", 0.95, "estimate")),
        se_choice=se_choice,
        g_correction=_get_bool(est, "g_correction", False, "estimate"),
        share_variant=share_variant,
        df_override=df_override,
    )


def load_simulate_config(path: str) -> SimulateConfig:
    parser = _read_ini(path)
    if "scenario" not in parser:
        raise ConfigError("config needs a [scenario] section")
    sc = parser["scenario"]
    kwargs: dict = {}
    kwargs["m"] = _get_int(sc, "m", 80, "scenario")
    kwargs["p"] = _get_float(sc, "p", 0.6, "scenario")
    kwargs["n_range"] = (_get_int(sc, "n_min", 40, "scenario"), _get_int(sc, "n_max", 80, "scenario"))
    kwargs["rbar_t"] = _get_float(sc, "rbar_t", 0.70, "scenario")
    kwargs["rbar_c"] = _get_float(sc, "rbar_c", 0.50, "scenario")
    kwargs["covariate_strength_t"] = _get_float(sc, "covariate_strength_t", 0.10, "scenario")
    kwargs["covariate_strength_c"] = _get_float(sc, "covariate_strength_c", 0.05, "scenario")
    kwargs["icc0"] = _get_float(sc, "icc0", 0.10, "scenario")
    kwargs["r_squared"] = _get_float(sc, "r_squared", 0.30, "scenario")
    kwargs["f_ratio"] = _get_float(sc, "f_ratio", 0.10, "scenario")
    kwargs["sigma_y0_sq"] = _get_float(sc, "sigma_y0_sq", 1.0, "scenario")
    if "stratum_effects" in sc:
        effects = tuple(float(v) for v in _names(sc["stratum_effects"]))
        if len(effects) != 4:
            raise ConfigError("stratum_effects needs exactly 4 numbers: tau_11 tau_10 tau_01 tau_00")
        kwargs["stratum_effects"] = effects
    if "var_ux" in sc:
        kwargs["var_ux"] = _get_float(sc, "var_ux", 0.0, "scenario")
    if "var_ex" in sc:
        kwargs["var_ex"] = _get_float(sc, "var_ex", 0.0, "scenario")
    for key in ("slope_form", "receipt_coupling", "cluster_effects", "outcome_levels"):
        if key in sc:
            kwargs[key] = sc[key].strip()
    kwargs["enforce_exclusion"] = _get_bool(sc, "enforce_exclusion", True, "scenario")
    try:
        scenario = Scenario(**kwargs)
        calibrate_scenario(scenario)
    except CalibrationError as exc:
        raise ConfigError(f"invalid scenario: {exc}") from exc

    sim = parser["simulate"] if "simulate" in parser else parser["DEFAULT"]
    kinds = _parse_kinds(sim.get("kinds", "")) if sim.get("kinds", "").strip() else DEFAULT_STUDY_KINDS
    wls_cov = sim.get("wls_covariates", WLS_COVARIATES_BOTH).strip().lower()
    if wls_cov not in (WLS_COVARIATES_NONE, WLS_COVARIATES_BOTH):
        raise ConfigError(
            f"wls_covariates must be '{WLS_COVARIATES_NONE}' or '{WLS_COVARIATES_BOTH}', got {wls_cov!r}"
        )
    replications = _get_int(sim, "replications", 1000, "simulate")
    if replications < 2:
        raise ConfigError("replications must be at least 2")
    return SimulateConfig(
        scenario=scenario,
        replications=replications,
        master_seed=_get_int(sim, "seed", 1, "simulate"),
        kinds=kinds,
        wls_covariates=wls_cov,
        threads=_get_int(sim, "threads", 0, "simulate"),
        level=_check_level(_get_float(sim, "level", 0.95, "simulate")),
        g_correction=_get_bool(sim, "g_correction", False, "simulate"),
    )


def load_diagnose_config(path: str) -> DiagnoseConfig:
    parser = _read_ini(path)
    if "data" not in parser:
        raise ConfigError("config needs a [data] section")
    data_path, schema = _schema_from(parser["data"], require_logit_keys=(True, True))
    if not schema.covariates_logit_t or not schema.covariates_logit_c:
        raise ConfigError(
            "diagnostics compare each arm against the other arm's receipt model, "
            "so both covariates_logit_t and covariates_logit_c must be non-empty"
        )
    diag = parser["diagnose"] if "diagnose" in parser else parser["DEFAULT"]
    bins = _get_int(diag, "bins", 20, "diagnose")
    if bins < 2:
        raise ConfigError("density check needs at least 2 bins")
    return DiagnoseConfig(path=data_path, schema=schema, bins=bins)


def apply_overrides(
    config,
    *,
    seed: int | None = None,
    threads: int | None = None,
    level: float | None = None,
    se_choice: str | None = None,
    g_correction: bool | None = None,
):
    """Overlay command-line flag values onto a loaded config."""
    updates: dict = {}
    if level is not None:
        updates["level"] = _check_level(level)
    if isinstance(config, EstimateConfig):
        if se_choice is not None:
            updates["se_choice"] = se_choice
        if g_correction is not None:
            updates["g_correction"] = g_correction
    elif isinstance(config, SimulateConfig):
        if seed is not None:
            updates["master_seed"] = seed
        if threads is not None:
            updates["threads"] = threads
        if g_correction is not None:
            updates["g_correction"] = g_correction
    return replace(config, **updates) if updates else config
