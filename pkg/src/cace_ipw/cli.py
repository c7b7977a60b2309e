"""Batch command-line interface: estimate, simulate, diagnose.

Each command reads one INI config (see the config module), writes its
outputs under --out, and echoes the human-readable view to stdout. Output
files are deterministic: identical config and seed give identical bytes.
Exit status: 0 when every requested output was written, 1 on a runtime
failure (the diagnostic names the failing stage), 2 on a config problem.

Set CACE_IPW_LOG=debug|info|warning to get progress logging on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from cace_ipw.config import (
    ConfigError,
    DiagnoseConfig,
    EstimateConfig,
    SE_CHOICE_ADJUSTED,
    SE_CHOICE_BOTH,
    SE_CHOICE_UNADJUSTED,
    SimulateConfig,
    apply_overrides,
    load_diagnose_config,
    load_estimate_config,
    load_simulate_config,
)
from cace_ipw.data import DataError, load_dataset
from cace_ipw.diagnostics import (
    DIRECTION_C_VS_WEIGHTED_T,
    DIRECTION_T_VS_WEIGHTED_C,
    DiagnosticsError,
    balance_table,
    mean_weight_equality,
    overlap_summary,
    shaikh_density_check,
)
from cace_ipw.estimators import (
    EstimationError,
    SE_ADJUSTED,
    SE_UNADJUSTED,
    estimate_cace_t,
    estimate_cace_t_iv,
    estimate_cace_tc_ipw,
    estimate_cace_tc_ratio,
    estimate_itt,
    estimate_tau11,
    format_results_table,
    result_record,
)
from cace_ipw.gee import VarianceError, inference
from cace_ipw.logit import ARM_CONTROL, ARM_TREATMENT, FitError, fit_logit, predict_propensity
from cace_ipw.simulation import CalibrationError, StudyError, run_study, true_estimands
from cace_ipw.weights import EstimandKind, build_weights
from cace_ipw.wls import RankDeficiencyError

log = logging.getLogger("cace_ipw")

# exception type -> pipeline stage named in the exit diagnostic
_STAGES = (
    (ConfigError, "config"),
    (CalibrationError, "config"),
    (DataError, "load"),
    (FitError, "logit"),
    (RankDeficiencyError, "wls"),
    (VarianceError, "variance"),
    (EstimationError, "estimate"),
    (DiagnosticsError, "diagnose"),
    (StudyError, "simulate"),
)
_CONFIG_STAGES = ("config",)


def _stage_of(exc: BaseException) -> str:
    for etype, stage in _STAGES:
        if isinstance(exc, etype):
            return stage
    return "internal"


def _write_text(out_dir: str, name: str, text: str) -> str:
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)
    log.info("wrote %s", path)
    return path


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=True, default=_json_default)


def _override_df(res, df: int):
    """Recompute the t inference at a caller-chosen df, keeping the SE basis."""
    if res.se_basis == SE_ADJUSTED and res.se_adjusted is not None:
        se = res.se_adjusted
    else:
        se = res.se_unadjusted
    inf = inference(res.point, se * se, df, res.level)
    return dataclasses.replace(
        res, df=df, t_stat=inf.t_stat, p_value=inf.p_value, ci_low=inf.ci_low, ci_high=inf.ci_high
    )


def cmd_estimate(cfg: EstimateConfig, out_dir: str) -> int:
    d = load_dataset(cfg.path, cfg.schema)
    log.info("loaded %d rows in %d clusters (%d treatment / %d control)", d.n, d.m, d.m_t, d.m_c)
    basis = {
        SE_CHOICE_ADJUSTED: SE_ADJUSTED,
        SE_CHOICE_UNADJUSTED: SE_UNADJUSTED,
    }.get(cfg.se_choice)
    results = []
    for kind in cfg.kinds:
        common = dict(level=cfg.level, g_correction=cfg.g_correction)
        if basis is not None:
            common["se_basis"] = basis
        if kind is EstimandKind.ITT:
            res = estimate_itt(d, level=cfg.level)
        elif kind is EstimandKind.CACE_T:
            res = estimate_cace_t(d, **common)
        elif kind is EstimandKind.CACE_T_IV:
            res = estimate_cace_t_iv(d, **common)
        elif kind is EstimandKind.CACE_TC_RATIO:
            res = estimate_cace_tc_ratio(d, share_variant=cfg.share_variant, **common)
        elif kind is EstimandKind.CACE_TC_IPW:
            res = estimate_cace_tc_ipw(d, **common)
        else:
            res = estimate_tau11(d, **common)
        if cfg.df_override is not None:
            res = _override_df(res, cfg.df_override)
        results.append(res)
        log.info("%s: %.4f (se %.4f)", res.label, res.point,
                 res.se_adjusted if res.se_adjusted is not None else res.se_unadjusted)
    table = format_results_table(results) + "\n"
    _write_text(out_dir, "estimates.txt", table)
    lines = "".join(_json_line(result_record(res)) + "\n" for res in results)
    _write_text(out_dir, "estimates.jsonl", lines)
    sys.stdout.write(table)
    return 0


def cmd_simulate(cfg: SimulateConfig, out_dir: str) -> int:
    threads = cfg.threads if cfg.threads > 0 else (os.cpu_count() or 1)
    log.info("running %d replications on %d workers", cfg.replications, threads)
    failure_message = None
    try:
        table = run_study(
            cfg.scenario,
            kinds=cfg.kinds,
            replications=cfg.replications,
            master_seed=cfg.master_seed,
            wls_covariates=cfg.wls_covariates,
            threads=threads,
            level=cfg.level,
            g_correction=cfg.g_correction,
        )
    except StudyError as exc:
        if exc.table is None:
            raise
        table = exc.table
        failure_message = str(exc)

    csv_text = table.to_delimited()
    _write_text(out_dir, "metrics.csv", csv_text)
    records = [
        {"record": "scenario", **dataclasses.asdict(cfg.scenario)},
        {"record": "truths", **dataclasses.asdict(table.truths)},
    ]
    for row in table.rows:
        rec = dataclasses.asdict(row)
        rec["kind"] = str(row.kind)
        records.append({"record": "metrics", **rec})
    records.append({
        "record": "run",
        "replications": table.replications,
        "failed_replications": table.failed_replications,
        "master_seed": table.master_seed,
        "wls_covariates": table.wls_covariates,
        "level": cfg.level,
        "g_correction": cfg.g_correction,
    })
    _write_text(out_dir, "study.jsonl", "".join(_json_line(r) + "\n" for r in records))
    sys.stdout.write(csv_text)
    if failure_message is not None:
        print(f"error [simulate]: {failure_message}", file=sys.stderr)
        return 1
    return 0


def cmd_diagnose(cfg: DiagnoseConfig, out_dir: str) -> int:
    d = load_dataset(cfg.path, cfg.schema)
    log.info("loaded %d rows in %d clusters", d.n, d.m)
    fit_t = fit_logit(d, ARM_TREATMENT)
    fit_c = fit_logit(d, ARM_CONTROL)
    w = build_weights(EstimandKind.CACE_TC_IPW, d, fit_t=fit_t, fit_c=fit_c)
    union = d.covariate_names_logit_t + tuple(
        n for n in d.covariate_names_logit_c if n not in d.covariate_names_logit_t
    )
    bal_t = balance_table(d, w, union, DIRECTION_T_VS_WEIGHTED_C)
    bal_c = balance_table(d, w, union, DIRECTION_C_VS_WEIGHTED_T)
    dens_t = shaikh_density_check(fit_t, d, bins=cfg.bins)
    dens_c = shaikh_density_check(fit_c, d, bins=cfg.bins)
    equality = mean_weight_equality(w, d)
    over_t = overlap_summary(predict_propensity(fit_t, d.matrix(fit_t.covariate_names)), d)
    over_c = overlap_summary(predict_propensity(fit_c, d.matrix(fit_c.covariate_names)), d)

    _write_text(out_dir, "balance_t_vs_weighted_c.csv", bal_t.to_delimited())
    _write_text(out_dir, "balance_c_vs_weighted_t.csv", bal_c.to_delimited())
    _write_text(out_dir, "density_treatment.csv", dens_t.to_delimited())
    _write_text(out_dir, "density_control.csv", dens_c.to_delimited())

    flagged_names = sorted(
        {r.covariate for table in (bal_t, bal_c) for r in table.rows if r.flag in ("moderate", "large")}
    )
    text_lines = [
        "Receipt-model diagnostics",
        "",
        f"Balance (treatment vs weighted control): max |std diff| = {bal_t.max_abs_std_diff():.4f}",
        f"Balance (control vs weighted treatment): max |std diff| = {bal_c.max_abs_std_diff():.4f}",
        f"Flags at 0.10/0.25: {len(flagged_names)} covariate(s) "
        + (f"({', '.join(flagged_names)})" if flagged_names else "(none)"),
        "",
        f"Density identity, treatment arm: max gap {dens_t.max_abs_gap:.4f}, L1 gap {dens_t.l1_gap:.4f} "
        f"({dens_t.n_recipients} recipients, {dens_t.n_nonrecipients} non-recipients)",
        f"Density identity, control arm:   max gap {dens_c.max_abs_gap:.4f}, L1 gap {dens_c.l1_gap:.4f} "
        f"({dens_c.n_recipients} recipients, {dens_c.n_nonrecipients} non-recipients)",
        "",
        f"Mean weight, treatment arm: {equality.mean_t:.4f}",
        f"Mean weight, control arm:   {equality.mean_c:.4f}",
        f"Difference (should be near 0 under correct models): {equality.diff:+.4f}",
        "",
        f"Propensity overlap, treatment model: min {over_t.minimum:.4f}, max {over_t.maximum:.4f}"
        + (f"; WARNINGS: {'; '.join(over_t.warnings)}" if over_t.warnings else ""),
        f"Propensity overlap, control model:   min {over_c.minimum:.4f}, max {over_c.maximum:.4f}"
        + (f"; WARNINGS: {'; '.join(over_c.warnings)}" if over_c.warnings else ""),
        "",
    ]
    text = "\n".join(text_lines)
    _write_text(out_dir, "diagnostics.txt", text)

    records = []
    for table in (bal_t, bal_c):
        for r in table.rows:
            records.append({"record": "balance", "direction": table.direction, **dataclasses.asdict(r)})
    for dens in (dens_t, dens_c):
        rec = dataclasses.asdict(dens)
        rec = {k: (list(v) if isinstance(v, tuple) else v) for k, v in rec.items()}
        records.append({"record": "density", **rec})
    records.append({"record": "mean_weight_equality", "mean_t": equality.mean_t,
                    "mean_c": equality.mean_c, "diff": equality.diff})
    for over, model in ((over_t, "treatment"), (over_c, "control")):
        rec = dataclasses.asdict(over)
        rec = {k: (list(v) if isinstance(v, tuple) else v) for k, v in rec.items()}
        records.append({"record": "overlap", "model": model, **rec})
    _write_text(out_dir, "diagnostics.jsonl", "".join(_json_line(r) + "\n" for r in records))
    sys.stdout.write(text)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cace-ipw",
        description="Complier-average effects in clustered trials via receipt-probability weighting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *, seeded: bool) -> None:
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--out", default=".", help="output directory (created if missing)")
        p.add_argument("--level", type=float, default=None, help="confidence level override")
        if seeded:
            p.add_argument("--seed", type=int, default=None, help="master seed override")
            p.add_argument("--threads", type=int, default=None,
                           help="worker process count (0 or absent in config = all cores)")
        p.add_argument("--g-correction", dest="g_correction", action="store_const", const=True,
                       default=None, help="apply the small-sample variance correction")

    p_est = sub.add_parser("estimate", help="run estimators on a data file")
    common(p_est, seeded=False)
    p_est.add_argument("--se", choices=(SE_CHOICE_ADJUSTED, SE_CHOICE_UNADJUSTED, SE_CHOICE_BOTH),
                       default=None, help="SE basis for intervals; 'both' reports both columns")

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo study from a scenario config")
    common(p_sim, seeded=True)

    p_diag = sub.add_parser("diagnose", help="receipt-model diagnostics for a data file")
    p_diag.add_argument("--config", required=True, help="INI run configuration")
    p_diag.add_argument("--out", default=".", help="output directory (created if missing)")
    return parser


def _configure_logging() -> None:
    raw = os.environ.get("CACE_IPW_LOG", "").strip()
    if not raw:
        return
    level = getattr(logging, raw.upper(), None)
    if not isinstance(level, int):
        level = logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = _build_parser().parse_args(argv)
    try:
        os.makedirs(args.out, exist_ok=True)
        if args.command == "estimate":
            cfg = load_estimate_config(args.config)
            cfg = apply_overrides(cfg, level=args.level, se_choice=args.se, g_correction=args.g_correction)
            return cmd_estimate(cfg, args.out)
        if args.command == "simulate":
            cfg = load_simulate_config(args.config)
            cfg = apply_overrides(cfg, seed=args.seed, threads=args.threads,
                                  level=args.level, g_correction=args.g_correction)
            return cmd_simulate(cfg, args.out)
        cfg = load_diagnose_config(args.config)
        return cmd_diagnose(cfg, args.out)
    except Exception as exc:  # noqa: BLE001 - single exit point turns failures into statuses
        stage = _stage_of(exc)
        if stage == "internal":
            raise
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return 2 if stage in _CONFIG_STAGES else 1


if __name__ == "__main__":
    sys.exit(main())
