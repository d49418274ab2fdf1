"""Command-line front end: ``run``, ``counterexample``, ``sweep``, ``validate``.

Exit codes: 0 success, 2 config error, 3 divergence, 4 validator failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from .analysis import (
    BoundInputs, TraceError, measure_is_complete, run_validators, stationarity_measure,
    convergence_bound,
)
from .optimizers import NAIVE, SHARED
from .simulator import (
    SWEEP_AXES, ConfigError, DivergenceError, ExperimentConfig, MetricsLog, build_problem,
    config_for_value, config_from_dict, resolved_hyper, run_experiment,
)

log = logging.getLogger("localams")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VALIDATOR = 0, 2, 3, 4


def _num(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _dump(path: Path, obj):
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return config_from_dict(data)


def preset_path(name: str) -> Path:
    ref = resources.files("localams") / "presets" / f"{name}.json"
    if not ref.is_file():
        raise ConfigError("<preset>", f"no preset named {name!r}")
    return Path(str(ref))


def write_metrics_csv(path: Path, metrics: MetricsLog):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsLog.COLUMNS)
        for row in metrics.rows():
            w.writerow([_num(v) for v in row])


def summarize(config: ExperimentConfig, metrics: MetricsLog) -> dict:
    out = {
        "algorithm": metrics.algorithm,
        "total_iters": metrics.total_iters,
        "period": metrics.period,
        "num_workers": metrics.num_workers,
        "records": len(metrics.t),
        "final_t": metrics.t[-1],
        "final_f": metrics.f_xbar[-1],
        "final_grad_sq_norm": metrics.grad_sq_norm[-1],
        "stationarity_measure": stationarity_measure(metrics),
        "stationarity_complete": measure_is_complete(metrics),
        "comm_bytes": metrics.comm_bytes[-1],
        "sync_rounds": metrics.sync_rounds[-1],
        "diverged": metrics.diverged,
        "aborted": metrics.aborted,
        "abort_reason": metrics.abort_reason,
        "initial_xbar_inf_norm": float(np.max(np.abs(metrics.xbar_initial))),
        "final_xbar_inf_norm": float(np.max(np.abs(metrics.xbar_final))),
        "g_max_empirical": metrics.g_max,
        "wall_time_s": metrics.wall_time,
    }
    if metrics.dim <= 10:
        out["final_xbar"] = metrics.xbar_final
    return out


def bound_record(config: ExperimentConfig, problem, metrics: MetricsLog) -> dict | None:
    """Bound value for shared-vhat runs on problems with finite constants."""
    c = problem.constants
    if metrics.algorithm != SHARED or not all(map(math.isfinite, (c.L, c.sigma, c.G_inf))):
        return None
    hyper = resolved_hyper(config, problem)
    gap = metrics.f_xbar[0] - (problem.f_star if problem.f_star is not None else 0.0)
    res = convergence_bound(BoundInputs(c.L, c.sigma, c.G_inf, hyper.epsilon, hyper.beta1,
                                   c.dim, hyper.total_iters, c.num_workers, hyper.period, gap))
    return {"value": res.value, "terms": list(res.terms), "in_regime": res.in_regime}


def execute(config: ExperimentConfig, out_dir: Path, force_trace: bool = False):
    """Run one config and write its artifacts. Returns ``(exit_code, metrics, validation)``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    problem = build_problem(config)
    hyper = resolved_hyper(config, problem)
    trace = config.validators or force_trace
    code = EXIT_OK
    try:
        metrics = run_experiment(config, problem, trace=trace)
    except DivergenceError as exc:
        metrics = exc.log
        code = EXIT_DIVERGED
        log.warning("%s", exc)

    checks = []
    if trace and not metrics.aborted:
        checks = run_validators(metrics, hyper.alpha, hyper.beta1)
    if code == EXIT_OK and any(c["applicable"] and not c["passed"] for c in checks):
        code = EXIT_VALIDATOR

    _dump(out_dir / "config.json", config.to_dict())
    write_metrics_csv(out_dir / "metrics.csv", metrics)
    summary = summarize(config, metrics)
    summary["bound"] = bound_record(config, problem, metrics)
    _dump(out_dir / "summary.json", summary)
    _dump(out_dir / "validation.json", {"enabled": trace, "checks": checks})
    return code, metrics, checks


def cmd_run(args) -> int:
    config = load_config(preset_path(args.preset) if args.preset else args.config)
    code, metrics, checks = execute(config, Path(args.out))
    print(f"{metrics.algorithm}: T={metrics.total_iters} final f={metrics.f_xbar[-1]:.6g} "
          f"grad^2={metrics.grad_sq_norm[-1]:.6g} comm={metrics.comm_bytes[-1]} "
          f"diverged={metrics.diverged}")
    _print_checks(checks)
    return code


def _print_checks(checks):
    for c in checks:
        if not c["applicable"]:
            print(f"  {c['name']:<16} n/a")
        else:
            print(f"  {c['name']:<16} {'PASS' if c['passed'] else 'FAIL'}  max={c['max']:.3e}")


COUNTEREXAMPLE_T = 2000


def counterexample_config(algorithm: str, total_iters: int = COUNTEREXAMPLE_T) -> ExperimentConfig:
    data = json.loads(preset_path("counterexample_shared").read_text())
    data["algorithm"] = algorithm
    data["hyper"]["total_iters"] = total_iters
    return config_from_dict(data)


def cmd_counterexample(args) -> int:
    out = Path(args.out)
    runs = {}
    code = EXIT_OK
    for algo in (NAIVE, SHARED):
        c, metrics, checks = execute(counterexample_config(algo), out / algo)
        runs[algo] = metrics
        if c != EXIT_OK:
            code = c

    naive, shared = runs[NAIVE], runs[SHARED]
    header = ["t", "naive_xbar", "naive_w1", "naive_w2", "naive_w3", "shared_xbar",
              "shared_w1", "shared_w2", "shared_w3"]
    rows = []
    for s in range(0, 11):
        nc = naive.trace.candidates[s].ravel()
        sc = shared.trace.candidates[s].ravel()
        rows.append([s, naive.trace.xbar[s][0], *nc, shared.trace.xbar[s][0], *sc])
    with open(out / "counterexample_table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([[_num(v) for v in r] for r in rows])

    print("per-worker columns are local iterates before averaging")
    print(f"{'t':>3} {'naive xbar':>11} {'w1':>8} {'w2':>8} {'w3':>8} | "
          f"{'shared xbar':>11} {'w1':>8} {'w2':>8} {'w3':>8}")
    for r in rows:
        print(f"{r[0]:>3} {r[1]:>11.5f} {r[2]:>8.4f} {r[3]:>8.4f} {r[4]:>8.4f} | "
              f"{r[5]:>11.5f} {r[6]:>8.4f} {r[7]:>8.4f} {r[8]:>8.4f}")
    for name, m in runs.items():
        verdict = "DIVERGES" if m.diverged else "converges"
        print(f"{name}: xbar_T={m.xbar_final[0]:.6g} |grad f|^2={m.grad_sq_norm[-1]:.3g} "
              f"-> {verdict}")
    return code


def cmd_sweep(args) -> int:
    base = load_config(preset_path(args.preset) if args.preset else args.config)
    if args.axis not in SWEEP_AXES:
        raise ConfigError("axis", f"must be one of {', '.join(SWEEP_AXES)}")
    raw = [v.strip() for v in args.values.split(",") if v.strip()]
    if not raw:
        raise ConfigError("values", "empty list")
    convert = {"alpha": float, "k": int, "N": int, "algorithm": str}[args.axis]
    try:
        values = [convert(v) for v in raw]
    except ValueError as exc:
        raise ConfigError("values", str(exc)) from None
    configs = [config_for_value(base, args.axis, v) for v in values]  # validate all up front

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    code = EXIT_OK
    rows = []
    for value, cfg in zip(raw, configs):
        c, metrics, _ = execute(cfg, out / f"{args.axis}_{value}")
        code = max(code, c)
        stat = math.inf if metrics.aborted else stationarity_measure(metrics)
        rows.append([value, _num(stat), _num(metrics.comm_bytes[-1])])
        print(f"{args.axis}={value}: stationarity={stat:.6g} comm_bytes={metrics.comm_bytes[-1]}")
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "final_stationarity", "comm_bytes"])
        w.writerows(rows)
    return code


def cmd_validate(args) -> int:
    config = load_config(preset_path(args.preset) if args.preset else args.config)
    if config.cadence != 1:
        raise ConfigError("cadence", "validation needs cadence 1")
    config = replace(config, validators=True)
    code, metrics, checks = execute(config, Path(args.out), force_trace=True)
    _print_checks(checks)
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="localams", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add_source(sp):
        g = sp.add_mutually_exclusive_group(required=True)
        g.add_argument("--config", help="path to a JSON experiment config")
        g.add_argument("--preset", help="name of a bundled config, e.g. counterexample_naive")

    sp = sub.add_parser("run", help="run one experiment")
    add_source(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("counterexample", help="naive vs shared vhat on the 3-worker counterexample")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_counterexample)

    sp = sub.add_parser("sweep", help="one run per value along an axis")
    add_source(sp)
    sp.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sp.add_argument("--values", required=True, help="comma-separated list")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("validate", help="run with full tracing and check the proof invariants")
    add_source(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
