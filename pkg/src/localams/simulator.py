"""Run T iterations of one algorithm over N simulated workers and record metrics."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from . import numeric
from .numeric import RngStream, ordered_mean
from .optimizers import (
    ALGORITHMS, NAIVE, SGD, SHARED, Hyperparams, ServerState, WorkerState,
    amsgrad_moments, local_sgd_step, naive_local_step, shared_local_step, sync_round,
)
from .problems import (
    CounterexampleProblem, LabeledDataset, MLPProblem, Problem, ProblemError,
    gaussian_mixture_dataset, load_csv_dataset, quadratic_problem, shard_dataset,
    stochastic_gradient,
)

DIVERGENCE_LIMIT = 1e15

PROBLEM_FAMILIES = ("counterexample", "quadratic", "mixture_mlp", "csv_mlp")

_PROBLEM_DEFAULTS = {
    "counterexample": {},
    "quadratic": {"dim": 20, "condition_spread": [0.5, 1.0], "radius": 10.0, "center_std": 1.0},
    "mixture_mlp": {"num_clusters": 10, "dim": 20, "samples_per_cluster": 200,
                    "layer_widths": [20, 50, 50, 10], "batch_size": 32},
    "csv_mlp": {"path": None, "layer_widths": None, "batch_size": 32, "num_classes": 0},
}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class DivergenceError(RuntimeError):
    """The run left the finite/bounded region; ``log`` holds everything up to then."""

    def __init__(self, iteration: int, reason: str, log: "MetricsLog"):
        super().__init__(f"diverged at iteration {iteration}: {reason}")
        self.iteration = iteration
        self.reason = reason
        self.log = log


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str
    hyper: Hyperparams
    problem: dict = field(default_factory=lambda: {"family": "quadratic"})
    num_workers: int = 1
    seed: int = 0
    noise_std: float = 0.0
    sharding: dict = field(default_factory=lambda: {"strategy": "iid"})
    x0: Any = None
    epochs: int | None = None
    cadence: int = 1
    validators: bool = False
    parallel: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "ExperimentConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError("algorithm", f"must be one of {', '.join(ALGORITHMS)}")
        for name, msg in self.hyper.problems():
            raise ConfigError(f"hyper.{name}", msg)
        if not (isinstance(self.num_workers, int) and self.num_workers >= 1):
            raise ConfigError("num_workers", "must be an integer >= 1")
        if not (isinstance(self.seed, int) and 0 <= self.seed < 2**64):
            raise ConfigError("seed", "must be a 64-bit unsigned integer")
        if not self.noise_std >= 0:
            raise ConfigError("noise_std", "must be >= 0")
        if not (isinstance(self.cadence, int) and self.cadence >= 1):
            raise ConfigError("cadence", "must be an integer >= 1")
        family = self.problem.get("family")
        if family not in PROBLEM_FAMILIES:
            raise ConfigError("problem.family", f"must be one of {', '.join(PROBLEM_FAMILIES)}")
        unknown = set(self.problem) - set(_PROBLEM_DEFAULTS[family]) - {"family"}
        if unknown:
            raise ConfigError(f"problem.{sorted(unknown)[0]}", f"unknown field for {family}")
        if family == "counterexample" and self.num_workers != 3:
            raise ConfigError("num_workers", "counterexample problem has exactly 3 workers")
        if family == "csv_mlp" and not self.problem.get("path"):
            raise ConfigError("problem.path", "required for csv_mlp")
        strategy = self.sharding.get("strategy")
        if strategy not in ("iid", "by_label"):
            raise ConfigError("sharding.strategy", "must be 'iid' or 'by_label'")
        if self.epochs is not None:
            if not (isinstance(self.epochs, int) and self.epochs >= 1):
                raise ConfigError("epochs", "must be an integer >= 1")
            if family not in ("mixture_mlp", "csv_mlp"):
                raise ConfigError("epochs", "only meaningful for dataset problems")
        return self


_TOP_FIELDS = {f for f in ExperimentConfig.__dataclass_fields__}
_HYPER_FIELDS = {f for f in Hyperparams.__dataclass_fields__}


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build and validate a config from parsed JSON, naming the offending field on error."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = set(data) - _TOP_FIELDS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    for required in ("algorithm", "hyper"):
        if required not in data:
            raise ConfigError(required, "missing")
    hyper = data["hyper"]
    if not isinstance(hyper, dict):
        raise ConfigError("hyper", "must be an object")
    unknown = set(hyper) - _HYPER_FIELDS
    if unknown:
        raise ConfigError(f"hyper.{sorted(unknown)[0]}", "unknown field")
    if "alpha" not in hyper:
        raise ConfigError("hyper.alpha", "missing")
    for name, value in hyper.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"hyper.{name}", "must be a number")
    for name in ("problem", "sharding"):
        if name in data and not isinstance(data[name], dict):
            raise ConfigError(name, "must be an object")
    kwargs = dict(data)
    kwargs["hyper"] = Hyperparams(**hyper)
    return ExperimentConfig(**kwargs).validate()


def resolved_problem_params(config: ExperimentConfig) -> dict:
    family = config.problem["family"]
    params = dict(_PROBLEM_DEFAULTS[family])
    params.update({k: v for k, v in config.problem.items() if k != "family"})
    return params


def build_problem(config: ExperimentConfig) -> Problem:
    family = config.problem["family"]
    p = resolved_problem_params(config)
    build_rng = RngStream(config.seed, purpose=numeric.PROBLEM_BUILD)
    try:
        if family == "counterexample":
            x0 = 5.0 if config.x0 is None else float(np.ravel(config.x0)[0])
            return CounterexampleProblem(noise_std=config.noise_std, x0=x0)
        if family == "quadratic":
            return quadratic_problem(build_rng, p["dim"], config.num_workers,
                                     tuple(p["condition_spread"]), noise_std=config.noise_std,
                                     radius=p["radius"], center_std=p["center_std"])
        if family == "mixture_mlp":
            data = gaussian_mixture_dataset(RngStream(config.seed, purpose=numeric.DATA),
                                            p["num_clusters"], p["dim"], p["samples_per_cluster"])
            widths = p["layer_widths"]
        else:
            data = load_csv_dataset(p["path"], num_classes=p["num_classes"])
            widths = p["layer_widths"] or [data.dim, 50, 50, data.num_classes]
        shards = make_shards(data, config)
        return MLPProblem(shards, widths, batch_size=p["batch_size"])
    except (ProblemError, numeric.NumericError) as exc:
        raise ConfigError("problem", str(exc)) from exc


def make_shards(data: LabeledDataset, config: ExperimentConfig) -> list[LabeledDataset]:
    strategy = config.sharding.get("strategy", "iid")
    cpw = config.sharding.get("classes_per_worker", 2)
    return shard_dataset(data, config.num_workers, strategy,
                         RngStream(config.seed, purpose=numeric.SHARDING), classes_per_worker=cpw)


def resolved_hyper(config: ExperimentConfig, problem: Problem) -> Hyperparams:
    if config.epochs is None:
        return config.hyper
    T = config.epochs * problem.iterations_per_epoch()
    return replace(config.hyper, total_iters=T, period=min(config.hyper.period, T))


@dataclass
class Trace:
    """Cadence-1 state history for the validators.

    Row ``s`` of ``xbar``/``worker_x`` is the state after ``s`` iterations;
    rows of ``gbar``/``mbar``/``vhat`` hold the quantities of iteration ``s``
    (row 0 holds the initial ``m = 0`` and ``vhat = epsilon``).
    """

    xbar: list = field(default_factory=list)
    worker_x: list = field(default_factory=list)
    candidates: list = field(default_factory=list)    # per-worker iterates before averaging
    gbar: list = field(default_factory=list)
    mbar: list = field(default_factory=list)
    vhat: list = field(default_factory=list)          # shared vhat in force at step s
    vhat_workers: list = field(default_factory=list)  # naive: per-worker vhat after step s
    sync_steps: list = field(default_factory=list)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(v) for k, v in asdict(self).items()}


@dataclass
class MetricsLog:
    algorithm: str
    total_iters: int
    period: int
    num_workers: int
    dim: int
    epsilon: float
    t: list = field(default_factory=list)
    f_xbar: list = field(default_factory=list)
    grad_sq_norm: list = field(default_factory=list)
    consensus_max: list = field(default_factory=list)
    comm_bytes: list = field(default_factory=list)
    sync_rounds: list = field(default_factory=list)
    xbar_initial: np.ndarray | None = None
    xbar_final: np.ndarray | None = None
    g_max: float = 0.0
    aborted: bool = False
    abort_reason: str = ""
    wall_time: float = 0.0
    trace: Trace | None = None

    COLUMNS = ("t", "f_xbar", "grad_sq_norm", "consensus_max", "comm_bytes", "sync_rounds")

    def rows(self):
        return list(zip(*(getattr(self, c) for c in self.COLUMNS)))

    @property
    def diverged(self) -> bool:
        """Aborted, or ended no closer to stationarity and farther from the origin."""
        if self.aborted:
            return True
        if not self.t:
            return False
        no_progress = self.grad_sq_norm[-1] >= self.grad_sq_norm[0]
        ran_off = np.max(np.abs(self.xbar_final)) > np.max(np.abs(self.xbar_initial))
        return bool(no_progress and ran_off)


def initial_state(config: ExperimentConfig, problem: Problem | None = None):
    """All workers start from the same ``x0`` with ``m = v = 0`` and ``vhat = epsilon``."""
    problem = problem or build_problem(config)
    d = problem.dim
    if config.x0 is None:
        x0 = problem.initial_point(RngStream(config.seed, purpose=numeric.INITIAL_POINT))
    else:
        x0 = np.broadcast_to(np.asarray(config.x0, dtype=np.float64), (d,)).copy()
    x0 = numeric.check_finite(x0, "x0")
    eps = np.full(d, config.hyper.epsilon)
    workers = [WorkerState(i, x0.copy(), np.zeros(d), np.zeros(d), eps.copy())
               for i in range(problem.num_workers)]
    return workers, ServerState(vhat_shared=eps.copy())


def _record(log: MetricsLog, problem: Problem, workers, server: ServerState, t: int):
    xs = [w.x for w in workers]
    xbar = ordered_mean(xs)
    g = problem.full_grad(xbar)
    log.t.append(t)
    log.f_xbar.append(problem.full_loss(xbar))
    log.grad_sq_norm.append(float(np.dot(g, g)))
    log.consensus_max.append(max(float(np.dot(xbar - x, xbar - x)) for x in xs))
    log.comm_bytes.append(server.comm_bytes)
    log.sync_rounds.append(server.sync_rounds)
    return xbar


def run_experiment(config: ExperimentConfig, problem: Problem | None = None,
                   trace: bool | None = None) -> MetricsLog:
    """Execute ``config``; raises DivergenceError when the iterates blow up."""
    config.validate()
    problem = problem or build_problem(config)
    hyper = resolved_hyper(config, problem)
    trace = config.validators if trace is None else trace
    algo = config.algorithm
    N, k, T = problem.num_workers, hyper.period, hyper.total_iters

    workers, server = initial_state(config, problem)
    log = MetricsLog(algo, T, k, N, problem.dim, hyper.epsilon)
    tr = Trace() if trace else None
    log.trace = tr
    started = time.perf_counter()
    log.xbar_initial = _record(log, problem, workers, server, 0)
    if tr is not None:
        tr.xbar.append(log.xbar_initial)
        tr.worker_x.append(np.array([w.x for w in workers]))
        tr.candidates.append(tr.worker_x[0])
        tr.gbar.append(np.zeros(problem.dim))
        tr.mbar.append(np.zeros(problem.dim))
        tr.vhat.append(server.vhat_shared.copy())
        tr.vhat_workers.append(np.array([w.vhat_local for w in workers]))

    pool = ThreadPoolExecutor(max_workers=N) if config.parallel and N > 1 else None
    try:
        for s in range(1, T + 1):
            is_sync = s % k == 0

            def local_phase(i, s=s, is_sync=is_sync):
                w = workers[i]
                g = stochastic_gradient(problem, i, w.x, RngStream(config.seed, i, s))
                if algo == SGD:
                    return g, (w if is_sync else local_sgd_step(w, g, hyper))
                w = amsgrad_moments(w, g, hyper)
                if is_sync:
                    return g, w
                if algo == NAIVE:
                    return g, naive_local_step(w, hyper)
                return g, shared_local_step(w, server, hyper)

            results = list(pool.map(local_phase, range(N)) if pool else map(local_phase, range(N)))
            grads = [r[0] for r in results]
            workers = [r[1] for r in results]
            log.g_max = max(log.g_max, max(float(np.abs(g).max()) for g in grads))
            mbar = ordered_mean([w.m for w in workers]) if tr is not None else None

            if is_sync:
                workers, server, candidates = sync_round(workers, server, hyper, algo, grads,
                                                         return_candidates=True)
            else:
                candidates = [w.x for w in workers]
            server = replace(server, t=s)

            worst = max(float(np.abs(w.x).max()) for w in workers)
            if not worst <= DIVERGENCE_LIMIT:
                log.aborted = True
                log.abort_reason = f"|x| reached {worst:.3g} at iteration {s}"
                log.xbar_final = ordered_mean([w.x for w in workers])
                log.wall_time = time.perf_counter() - started
                raise DivergenceError(s, log.abort_reason, log)

            if s % config.cadence == 0 or is_sync or s == T:
                xbar = _record(log, problem, workers, server, s)
            else:
                xbar = None
            if tr is not None:
                tr.xbar.append(xbar if xbar is not None else ordered_mean([w.x for w in workers]))
                tr.worker_x.append(np.array([w.x for w in workers]))
                tr.candidates.append(np.array(candidates))
                tr.gbar.append(ordered_mean(grads))
                tr.mbar.append(mbar)
                tr.vhat.append(server.vhat_shared.copy())
                tr.vhat_workers.append(np.array([w.vhat_local for w in workers]))
                if is_sync:
                    tr.sync_steps.append(s)
    except numeric.NumericError as exc:
        log.aborted = True
        log.abort_reason = str(exc)
        log.xbar_final = ordered_mean([w.x for w in workers])
        log.wall_time = time.perf_counter() - started
        raise DivergenceError(server.t + 1, str(exc), log) from exc
    finally:
        if pool is not None:
            pool.shutdown()

    log.xbar_final = ordered_mean([w.x for w in workers])
    log.wall_time = time.perf_counter() - started
    return log


SWEEP_AXES = ("alpha", "k", "N", "algorithm")


def config_for_value(base: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "alpha":
        cfg = replace(base, hyper=replace(base.hyper, alpha=float(value)))
    elif axis == "k":
        cfg = replace(base, hyper=replace(base.hyper, period=int(value)))
    elif axis == "N":
        cfg = replace(base, num_workers=int(value))
    elif axis == "algorithm":
        cfg = replace(base, algorithm=str(value))
    else:
        raise ConfigError("axis", f"must be one of {', '.join(SWEEP_AXES)}")
    return cfg.validate()


def stationarity_of(log: MetricsLog) -> float:
    from .analysis import stationarity_measure
    return stationarity_measure(log)


def sweep(base: ExperimentConfig, axis: str, values, seed: int | None = None):
    """One run per value, all sharing ``base.seed`` unless ``seed`` overrides it.

    Returns ``(results, summary)`` where ``results`` is a list of
    ``(value, MetricsLog)`` and ``summary`` has one row per value.
    """
    if seed is not None:
        base = replace(base, seed=seed)
    configs = [(v, config_for_value(base, axis, v)) for v in values]
    results, summary = [], []
    for value, cfg in configs:
        try:
            log = run_experiment(cfg)
        except DivergenceError as exc:
            log = exc.log
        results.append((value, log))
        summary.append({
            "value": value,
            "final_stationarity": math.inf if log.aborted else stationarity_of(log),
            "comm_bytes": log.comm_bytes[-1],
        })
    return results, summary
