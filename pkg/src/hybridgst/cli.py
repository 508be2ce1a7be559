"""Command-line front end.

Each run reads one INI-style config file with a section named after the
subcommand (``[design]``, ``[spend]``, ``[analyze]``, ``[simulate]``) and an
optional ``[run]`` section (``output_dir``, ``log_level``).  Unknown keys are
rejected by name.  Exit status is 0 on success, 2 for invalid input and 3 for
numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import mvn
from .boundaries import (
    BoundarySet,
    BoundaryShape,
    SpendingFunction,
    SpendingState,
    design_boundaries,
    next_boundary,
    write_boundary_csv,
)
from .covariance import AnalysisSchedule, Method, StagePlan
from .errors import GSTError, NumericalError, ValidationError
from .estimators import estimate_rho, fit_ancova, fit_anova, read_trial_csv, standardized_stat
from .inference import InferenceResult, Ordering, StatisticModel, StatisticPath, StopReason, analyze, wald_result
from .simulation import GeneratorConfig, ScenarioKind, ScenarioSpec, run_cell

log = logging.getLogger("hybridgst")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.7g}"
    return str(v)


# --- config parsing -----------------------------------------------------------

@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any = None
    required: bool = False


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.replace(";", ",").split(",") if v.strip()]


def _ints(s: str) -> list[int]:
    out = []
    for v in _floats(s):
        if v != int(v):
            raise ValueError(f"{v} is not an integer")
        out.append(int(v))
    return out


def _words(s: str) -> list[str]:
    return [v.strip() for v in s.replace(";", ",").split(",") if v.strip()]


def _bool(s: str) -> bool:
    key = s.strip().lower()
    if key in ("1", "true", "yes", "on"):
        return True
    if key in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{s!r} is not a boolean")


_PLAN_KEYS = {
    "stages": Key(int),
    "n_total": Key(int),
    "n_per_stage": Key(_ints),
}

SCHEMA: dict[str, dict[str, Key]] = {
    "run": {"output_dir": Key(str), "log_level": Key(str, "warn")},
    "design": {
        **_PLAN_KEYS,
        "alpha": Key(float, required=True),
        "rho": Key(float, 1.0),
        "shape": Key(str, "pocock"),
        "schedule": Key(str, "unadjusted"),
        "tol": Key(float, 1e-6),
    },
    "spend": {
        **_PLAN_KEYS,
        "alpha": Key(float, required=True),
        "spending": Key(str, "pocock"),
        "methods": Key(_words),
        "rho_hat": Key(_floats),
        "t_star": Key(_floats),
        "tol": Key(float, 1e-6),
    },
    "analyze": {
        "data": Key(str, required=True),
        "alpha": Key(float, required=True),
        "spending": Key(str),
        "shape": Key(str),
        "rho": Key(float),
        "schedule": Key(str, "hybrid"),
        "n_per_stage": Key(_ints),
        "ordering": Key(str, "stagewise"),
    },
    "simulate": {
        "delta": Key(_floats, required=True),
        "rho": Key(_floats, required=True),
        "p": Key(int, 1),
        "n": Key(_ints, required=True),
        "stages": Key(int, 3),
        "spending": Key(str),
        "shape": Key(str),
        "alpha": Key(float, required=True),
        "reps": Key(int, required=True),
        "seed": Key(int, 0),
        "scenarios": Key(_words, ["A_i", "A_ii", "B_i", "B_ii", "B_iii"]),
        "inference": Key(_words, ["B_iii"]),
        "ordering": Key(str, "stagewise"),
    },
}


def load_config(path: str | os.PathLike, section: str) -> tuple[dict[str, Any], dict[str, Any]]:
    """Parse ``path`` and return the command section and the ``[run]`` section."""
    parser = configparser.ConfigParser(interpolation=None)
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file {path} not found")
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ValidationError(f"config file {path} is malformed: {exc}") from None
    for name in parser.sections():
        if name not in SCHEMA:
            raise ValidationError(f"unknown config section [{name}]", section=name)
    if not parser.has_section(section):
        raise ValidationError(f"config has no [{section}] section")
    return _section(parser, section), _section(parser, "run")


def _section(parser: configparser.ConfigParser, name: str) -> dict[str, Any]:
    schema = SCHEMA[name]
    raw = dict(parser.items(name)) if parser.has_section(name) else {}
    for key in raw:
        if key not in schema:
            raise ValidationError(f"unknown key '{key}' in [{name}]", key=key)
    out = {}
    for key, spec in schema.items():
        if key in raw:
            try:
                out[key] = spec.parse(raw[key])
            except ValueError as exc:
                raise ValidationError(f"bad value for '{key}' in [{name}]: {exc}", key=key) from None
        elif spec.required:
            raise ValidationError(f"missing required key '{key}' in [{name}]", key=key)
        else:
            out[key] = spec.default
    return out


def _plan(cfg: dict) -> StagePlan:
    if cfg.get("n_per_stage"):
        return StagePlan(tuple(cfg["n_per_stage"]))
    if cfg.get("stages") is None:
        raise ValidationError("give 'n_per_stage' or 'stages' (with optional 'n_total')", key="stages")
    return StagePlan.equal(cfg.get("n_total") or 100 * cfg["stages"], cfg["stages"])


def _schedule(text: str, K: int) -> AnalysisSchedule:
    key = text.strip().lower()
    if key == "hybrid":
        return AnalysisSchedule.hybrid(K)
    if key in ("unadjusted", "adjusted", "u", "c", "anova", "ancova"):
        return AnalysisSchedule.consistent(K, key)
    methods = _words(text)
    if len(methods) != K:
        raise ValidationError("schedule must list one method per stage", key="schedule")
    return AnalysisSchedule(tuple(methods))


# --- commands -----------------------------------------------------------------

def cmd_design(cfg: dict, out: Path) -> int:
    plan = _plan(cfg)
    schedule = _schedule(cfg["schedule"], plan.K)
    bounds = design_boundaries(plan, schedule, cfg["rho"], BoundaryShape(cfg["shape"]),
                               cfg["alpha"], tol=cfg["tol"])
    write_boundary_csv(bounds, out / "boundaries.csv")
    total = sum(bounds.increments)
    print(f"design: K={plan.K} shape={cfg['shape']} rho={_fmt(cfg['rho'])} alpha={_fmt(cfg['alpha'])}")
    for row in bounds.rows():
        print(f"  stage {row['stage']}  t={_fmt(row['t_star'])}  {row['method']}  u={_fmt(row['upper'])}")
    print(f"  total rejection probability {_fmt(total)} (target {_fmt(cfg['alpha'])})")
    return EXIT_OK


def cmd_spend(cfg: dict, out: Path) -> int:
    if cfg.get("t_star"):
        t = cfg["t_star"]
    else:
        t = list(_plan(cfg).t_star)
    K = len(t)
    methods = cfg.get("methods") or ["U"] * K
    rhos = cfg.get("rho_hat") or [1.0] * K
    if len(methods) != K or len(rhos) != K:
        raise ValidationError("methods and rho_hat need one entry per stage", key="methods")
    fn = SpendingFunction(cfg["spending"], cfg["alpha"])
    state = SpendingState(fn.alpha)
    for k in range(K):
        try:
            _, _, state = next_boundary(state, fn, t[k], methods[k], rhos[k], tol=cfg["tol"])
        except GSTError as exc:
            exc.message = f"stage {k + 1}: {exc.message}"
            raise
    bounds = state.as_boundaries()
    write_boundary_csv(bounds, out / "boundaries.csv")
    print(f"spend: {fn.kind.value} alpha={_fmt(fn.alpha)}")
    for row in bounds.rows():
        print(f"  stage {row['stage']}  t={_fmt(row['t_star'])}  {row['method']}  u={_fmt(row['upper'])}"
              f"  spent {_fmt(row['alpha_spent_cum'])}")
    return EXIT_OK


@dataclass
class _Replay:
    path: StatisticPath
    bounds: BoundarySet
    plan: StagePlan
    fits: dict
    rho_hat: float


def _replay(data, cfg: dict) -> _Replay:
    """Re-run the monitoring decisions recorded in a dataset."""
    sizes = data.stage_sizes()
    if any(s == 0 for s in sizes):
        raise ValidationError("every stage up to the last observed one needs subjects")
    observed = len(sizes)
    plan = StagePlan(tuple(cfg["n_per_stage"])) if cfg.get("n_per_stage") else StagePlan(tuple(sizes))
    if observed > plan.K:
        raise ValidationError("data contain more stages than the plan")
    for k, (got, want) in enumerate(zip(sizes, plan.n_per_stage), start=1):
        if got != want:
            log.info("stage %d: %d subjects observed, %d planned; using the plan", k, got, want)
    schedule = _schedule(cfg["schedule"], plan.K)
    K = plan.K
    for k in range(1, observed + 1):
        cum = data.through_stage(k)
        n_pos = int(np.sum(cum.a > 0))
        if n_pos in (0, cum.n):
            raise ValidationError(f"stage {k}: only one arm present in the cumulative data", stage=k)

    fn = SpendingFunction(cfg["spending"], cfg["alpha"]) if cfg.get("spending") else None
    fixed = None
    if fn is None:
        shape = BoundaryShape(cfg.get("shape") or "pocock")
        fixed = design_boundaries(plan, schedule, cfg.get("rho") or 1.0, shape, cfg["alpha"])
    state = SpendingState(cfg["alpha"])
    upper: list[float] = []
    z: list[float] = []
    fits = {}
    reason = StopReason.FINAL
    for k in range(1, observed + 1):
        cum = data.through_stage(k)
        method = schedule.per_stage_method[k - 1]
        fit = fit_ancova(cum) if method is Method.ADJUSTED else fit_anova(cum)
        fits[(k, method)] = fit
        if fn is not None:
            rho_k = estimate_rho(cum).rho_hat if method is Method.ADJUSTED else 1.0
            _, u, state = next_boundary(state, fn, float(plan.t_star[k - 1]), method, rho_k)
        else:
            u = fixed.upper[k - 1]
        upper.append(u)
        z.append(standardized_stat(fit))
        if k < K and abs(z[-1]) >= u:
            reason = StopReason.UPPER if z[-1] > 0 else StopReason.LOWER
            if k != observed:
                raise ValidationError(f"trial crossed a boundary at stage {k} but data continue", stage=k)
            break
    if len(z) < K and reason is StopReason.FINAL:
        raise ValidationError("data end before the final stage without a boundary crossing")
    k = len(z)
    if k == K and abs(z[-1]) >= upper[-1]:
        reason = StopReason.UPPER if z[-1] > 0 else StopReason.LOWER
    # boundaries for stages after the stop do not enter stage-wise inference;
    # fill them from the consistent spending sequence for completeness
    while len(upper) < K:
        if fn is not None:
            _, u, state = next_boundary(state, fn, float(plan.t_star[len(upper)]))
        else:
            u = fixed.upper[len(upper)]
        upper.append(u)
    z_adj = None
    cum = data.through_stage(k)
    if schedule.hybrid_final and k < K:
        fits[(k, Method.ADJUSTED)] = fit_ancova(cum)
        z_adj = standardized_stat(fits[(k, Method.ADJUSTED)])
    rho_hat = estimate_rho(cum).rho_hat if cum.p > 0 else 1.0
    bounds = BoundarySet(tuple(upper), cfg["alpha"], tuple(float(t) for t in plan.t_star),
                         schedule.per_stage_method, tuple([math.nan] * K), (1.0,) * K)
    return _Replay(StatisticPath(schedule, tuple(z), reason, z_adj), bounds, plan, fits, rho_hat)


def _result_dict(res: InferenceResult) -> dict:
    return {
        "p_upper": res.p_upper,
        "p_lower": res.p_lower,
        "p_two_sided": res.p_two_sided,
        "ci_lower": res.ci[0],
        "ci_upper": res.ci[1],
        "estimate": res.median_unbiased,
        "ordering": res.ordering.value,
        "adjusted_for_hybrid": res.adjusted_for_hybrid,
    }


def cmd_analyze(cfg: dict, out: Path) -> int:
    data = read_trial_csv(cfg["data"])
    alpha = cfg["alpha"]
    ordering = Ordering(cfg["ordering"])
    rep = _replay(data, cfg)
    k = rep.path.stop_stage
    cum = data.through_stage(k)
    final = rep.fits.get((k, Method.ADJUSTED)) or rep.fits[(k, Method.UNADJUSTED)]
    results = {"Simple": wald_result(final.delta_hat, final.se, alpha)}
    results["GS"] = analyze(rep.path.consistent_view(), rep.bounds,
                            StatisticModel.consistent(rep.plan, math.sqrt(final.sigma2_hat)),
                            ordering, alpha, keep_audit=True)
    if rep.path.schedule.hybrid_final:
        est = estimate_rho(cum)
        model = StatisticModel(rep.plan, est.rho_hat, est.rho_hat * est.sigma_tilde_hat, est.sigma_tilde_hat)
        results["GSAdjust"] = analyze(rep.path, rep.bounds, model, ordering, alpha, keep_audit=True)
    else:
        results["GSAdjust"] = results["GS"]

    lines = ["analysis report", "==============="]
    lines += [f"data: {cfg['data']}"] + [f"note: {n}" for n in data.notes]
    lines.append(f"schedule: {','.join(m.value for m in rep.path.schedule.per_stage_method)}"
                 f"{' (hybrid)' if rep.path.schedule.hybrid_final else ''}")
    lines.append(f"ordering: {ordering.value}   alpha: {_fmt(alpha)}   rho_hat: {_fmt(rep.rho_hat)}")
    lines.append("")
    lines.append("stage  n_cum  z        upper")
    for j, zj in enumerate(rep.path.z, start=1):
        lines.append(f"{j:<6} {int(rep.plan.cum_n[j - 1]):<6} {_fmt(zj):<8} {_fmt(rep.bounds.upper[j - 1])}")
    lines.append(f"stopped at stage {k} ({rep.path.stop_reason.value})")
    if rep.path.z_adjusted is not None:
        lines.append(f"adjusted statistic at stop: {_fmt(rep.path.z_adjusted)}")
    lines.append("")
    lines.append("method    estimate    ci_lower    ci_upper    p_two_sided")
    for name, res in results.items():
        lines.append(f"{name:<9} {_fmt(res.median_unbiased):<11} {_fmt(res.ci[0]):<11} "
                     f"{_fmt(res.ci[1]):<11} {_fmt(res.p_two_sided)}")
    lines.append("")
    lines.append("audit: box probabilities evaluated (GSAdjust)")
    for e in results["GSAdjust"].audit:
        lo = ",".join(_fmt(v) for v in e.lower)
        hi = ",".join(_fmt(v) for v in e.upper)
        lines.append(f"  dim={e.dim} lower=[{lo}] upper=[{hi}] p={_fmt(e.prob)} err={_fmt(e.error)}")
    text = "\n".join(lines) + "\n"
    (out / "analysis.txt").write_text(text)
    report = {
        "path": {"z": list(rep.path.z), "stop_stage": k, "stop_reason": rep.path.stop_reason.value,
                 "z_adjusted": rep.path.z_adjusted},
        "boundaries": list(rep.bounds.upper),
        "rho_hat": rep.rho_hat,
        "notes": list(data.notes),
        "results": {name: _result_dict(r) for name, r in results.items()},
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(text, end="")
    return EXIT_OK


RESULT_COLUMNS = [
    "delta", "rho", "n", "scenario", "reps", "aborted", "reject_rate", "reject_se",
    "simple_median_bias", "simple_mean_bias", "gs_median_bias", "gs_mean_bias",
    "gsadj_median_bias", "gsadj_mean_bias", "simple_coverage", "gs_coverage", "gsadj_coverage",
    "coverage_se",
]


def cmd_simulate(cfg: dict, out: Path, threads: int = 1) -> int:
    if cfg["reps"] < 100:
        raise ValidationError("reps must be at least 100", key="reps")
    if (cfg["spending"] is None) == (cfg["shape"] is None):
        raise ValidationError("give exactly one of 'spending' and 'shape'", key="spending")
    fn = SpendingFunction(cfg["spending"], cfg["alpha"]) if cfg["spending"] else None
    kinds = [ScenarioKind(s) for s in cfg["scenarios"]]
    inference = [ScenarioKind(s) for s in cfg["inference"]]
    specs = [ScenarioSpec(k, spending=fn, shape=cfg["shape"], alpha=cfg["alpha"]) for k in kinds]
    rows, reports = [], []
    failed = False
    for delta in cfg["delta"]:
        for rho in cfg["rho"]:
            for n in cfg["n"]:
                gen = GeneratorConfig(delta, rho, cfg["p"], n, cfg["stages"], cfg["seed"])
                t0 = time.perf_counter()
                cell = run_cell(gen, specs, cfg["reps"], inference=inference,
                                ordering=Ordering(cfg["ordering"]), threads=threads)
                log.info("cell delta=%g rho=%g n=%d done in %.1fs", delta, rho, n, time.perf_counter() - t0)
                for kind in kinds:
                    rep = cell.report(kind)
                    if rep.n_aborted == rep.n_reps:
                        failed = True
                    est = rep.estimators
                    def g(name, attr):
                        return getattr(est[name], attr) if name in est else math.nan
                    rows.append([
                        delta, rho, n, kind.value, rep.n_reps, rep.n_aborted, rep.reject_rate, rep.reject_se,
                        g("Simple", "median_scaled_bias"), g("Simple", "mean_scaled_bias"),
                        g("GS", "median_scaled_bias"), g("GS", "mean_scaled_bias"),
                        g("GSAdjust", "median_scaled_bias"), g("GSAdjust", "mean_scaled_bias"),
                        g("Simple", "coverage"), g("GS", "coverage"), g("GSAdjust", "coverage"),
                        max((e.coverage_se for e in est.values()), default=math.nan),
                    ])
                    reports.append(rep.as_dict())
    with (out / "results.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    (out / "report.json").write_text(json.dumps({"config": cfg, "cells": reports}, indent=2,
                                                default=str) + "\n")
    print((out / "results.csv").read_text(), end="")
    if failed:
        print("error: at least one cell aborted every replicate", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def selftest() -> list[tuple[str, bool, str]]:
    """Quick oracle checks of the box-probability engine."""
    checks = []
    r = 0.5
    p = mvn.rect_prob([[1, r], [r, 1]], [-np.inf, -np.inf], [0, 0])
    exact = 0.25 + math.asin(r) / (2 * math.pi)
    checks.append(("bivariate orthant", abs(p - exact) < 1e-6, f"{p:.9f} vs {exact:.9f}"))
    p = mvn.rect_prob([[1.0]], [-1.959964], [1.959964])
    checks.append(("univariate interval", abs(p - 0.95) < 1e-6, f"{p:.9f}"))
    corr = np.array([[1, 0.3, 0.0, 0.0], [0.3, 1, 0, 0], [0, 0, 1, -0.4], [0, 0, -0.4, 1]])
    lo, hi = np.array([-1, -0.5, -2, 0.1]), np.array([1.2, 2, 0.5, 1.5])
    joint = mvn.rect_prob(corr, lo, hi, tol=1e-6)
    prod = mvn.rect_prob(corr[:2, :2], lo[:2], hi[:2]) * mvn.rect_prob(corr[2:, 2:], lo[2:], hi[2:])
    checks.append(("block factorisation", abs(joint - prod) < 3e-6, f"{joint:.8f} vs {prod:.8f}"))
    rng = np.random.default_rng(0)
    A = rng.normal(size=(5, 5))
    S = A @ A.T
    d = np.sqrt(np.diag(S))
    corr = S / np.outer(d, d)
    lo, hi = rng.normal(size=5) - 1, rng.normal(size=5) + 1.5
    res = mvn.rect_prob_detail(corr, lo, hi, tol=1e-4)
    draws = rng.multivariate_normal(np.zeros(5), corr, size=400_000)
    mc = np.mean(np.all((draws > lo) & (draws < hi), axis=1))
    se = math.sqrt(mc * (1 - mc) / draws.shape[0])
    checks.append(("5-dim vs Monte Carlo", abs(res.prob - mc) < 3 * math.hypot(se, res.error / 3),
                   f"{res.prob:.6f} vs {mc:.6f}"))
    t = np.array([0.5, 1.0])
    corr = np.sqrt(np.minimum.outer(t, t) / np.maximum.outer(t, t))
    up, down = mvn.crossing_probs(corr, [mvn.Look(0, -2.178, 2.178), mvn.Look(1, -2.178, 2.178)])
    total = float(up.sum() + down.sum())
    checks.append(("two-look Pocock size", abs(total - 0.05) < 1e-3, f"{total:.6f}"))
    return checks


def cmd_selftest() -> int:
    ok = True
    for name, passed, detail in selftest():
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if ok else EXIT_NUMERICAL


# --- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridgst", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("design", "boundaries for a known rho and fixed shape"),
        ("spend", "alpha-spending boundaries stage by stage"),
        ("analyze", "adjusted inference for a trial dataset"),
        ("simulate", "Monte Carlo scenario batches"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--out", help="output directory (overrides [run] output_dir)")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--threads", type=int, default=1, help="worker processes for simulate")
    sub.add_parser("selftest", help="run the box-probability oracle checks")
    return parser


_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
           "info": logging.INFO, "debug": logging.DEBUG}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selftest":
            logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
            return cmd_selftest()
        cfg, run = load_config(args.config, args.command)
        if args.command == "analyze":
            # data paths are taken relative to the config file
            cfg["data"] = str(Path(args.config).parent / cfg["data"])
        level = os.environ.get("HYBRIDGST_LOG_LEVEL", run["log_level"]).lower()
        if level not in _LEVELS:
            raise ValidationError(f"unknown log level {level!r}", key="log_level")
        logging.basicConfig(level=_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")
        if args.seed is not None:
            if "seed" not in cfg:
                raise ValidationError(f"--seed does not apply to {args.command}")
            cfg["seed"] = args.seed
        out = Path(args.out or run["output_dir"] or ".")
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "design":
            return cmd_design(cfg, out)
        if args.command == "spend":
            return cmd_spend(cfg, out)
        if args.command == "analyze":
            return cmd_analyze(cfg, out)
        return cmd_simulate(cfg, out, max(1, args.threads))
    except ValidationError as exc:
        print(f"error: {exc.message}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical error: {exc.message}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
