"""Worker/server state machines for local SGD and the two local AMSGrad variants.

Every function returns fresh state objects; inputs are never modified.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numeric import NumericError, check_finite, ordered_mean

SGD = "local_sgd"
NAIVE = "naive_local_amsgrad"
SHARED = "local_amsgrad"
ALGORITHMS = (SGD, NAIVE, SHARED)

BYTES_PER_SCALAR = 8


@dataclass(frozen=True)
class Hyperparams:
    alpha: float
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    period: int = 1
    total_iters: int = 1

    def problems(self) -> list[tuple[str, str]]:
        """(field, message) for every violated range; empty when valid."""
        out = []
        if not self.alpha > 0:
            out.append(("alpha", "must be > 0"))
        if not 0 <= self.beta1 < 1:
            out.append(("beta1", "must be in [0, 1)"))
        if not 0 <= self.beta2 < 1:
            out.append(("beta2", "must be in [0, 1)"))
        if not self.epsilon > 0:
            out.append(("epsilon", "must be > 0"))
        if not (isinstance(self.period, int) and self.period >= 1):
            out.append(("period", "must be an integer >= 1"))
        if not (isinstance(self.total_iters, int) and self.total_iters >= 1):
            out.append(("total_iters", "must be an integer >= 1"))
        elif isinstance(self.period, int) and self.period > self.total_iters:
            out.append(("period", "must not exceed total_iters"))
        return out


@dataclass(frozen=True)
class WorkerState:
    worker_id: int
    x: np.ndarray
    m: np.ndarray
    v: np.ndarray
    vhat_local: np.ndarray  # only advanced by the naive variant


@dataclass(frozen=True)
class ServerState:
    vhat_shared: np.ndarray
    t: int = 0
    sync_rounds: int = 0
    comm_bytes: int = 0


def _finite(state: WorkerState) -> WorkerState:
    check_finite(state.x, f"worker {state.worker_id} x")
    return state


def _same_dim(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise NumericError(f"dim mismatch: {a.shape} vs {b.shape}")


def _with_x(state: WorkerState, x: np.ndarray) -> WorkerState:
    return _finite(WorkerState(state.worker_id, x, state.m, state.v, state.vhat_local))


def local_sgd_step(state: WorkerState, g: np.ndarray, hyper: Hyperparams) -> WorkerState:
    _same_dim(state.x, g)
    return _with_x(state, state.x - hyper.alpha * g)


def amsgrad_moments(state: WorkerState, g: np.ndarray, hyper: Hyperparams) -> WorkerState:
    _same_dim(state.m, g)
    b1, b2 = hyper.beta1, hyper.beta2
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * (g * g)
    # non-finite m or v surfaces in x at the step that consumes them
    return WorkerState(state.worker_id, state.x, m, v, state.vhat_local)


def naive_local_step(state: WorkerState, hyper: Hyperparams) -> WorkerState:
    """Raise the worker's own vhat to the running max, then take a local step."""
    vhat = np.maximum(state.v, state.vhat_local)
    x = state.x - hyper.alpha * state.m / np.sqrt(vhat)
    return _finite(WorkerState(state.worker_id, x, state.m, state.v, vhat))


def shared_local_step(state: WorkerState, server: ServerState, hyper: Hyperparams) -> WorkerState:
    return _with_x(state, state.x - hyper.alpha * state.m / np.sqrt(server.vhat_shared))


def sync_comm_bytes(algorithm: str, num_workers: int, dim: int) -> int:
    # shared: x-candidate and v up, averaged x and vhat down
    vectors_per_worker = 4 if algorithm == SHARED else 2
    return num_workers * vectors_per_worker * dim * BYTES_PER_SCALAR


def sync_round(workers: list[WorkerState], server: ServerState, hyper: Hyperparams,
               algorithm: str = SHARED, grads: list[np.ndarray] | None = None,
               return_candidates: bool = False):
    """One averaging round at an iteration with ``t % k == 0``.

    For the shared variant the server first raises vhat to the max of its
    old value and the mean of worker ``v``; candidates are then formed with
    the new vhat. The naive variant forms candidates with each worker's own
    vhat (after the running max). Local SGD averages ``x_j - alpha g_j`` and
    needs ``grads``. Momentum is never averaged. With ``return_candidates``
    the pre-average per-worker iterates are returned as a third element.
    """
    if not workers:
        raise NumericError("sync_round needs at least one worker")
    for w in workers[1:]:
        _same_dim(workers[0].x, w.x)
    alpha = hyper.alpha
    vhat_shared = server.vhat_shared

    if algorithm == SHARED:
        vhat_shared = np.maximum(ordered_mean([w.v for w in workers]), server.vhat_shared)
        root = np.sqrt(vhat_shared)
        candidates = [w.x - alpha * w.m / root for w in workers]
    elif algorithm == NAIVE:
        workers = [replace(w, vhat_local=np.maximum(w.v, w.vhat_local)) for w in workers]
        candidates = [w.x - alpha * w.m / np.sqrt(w.vhat_local) for w in workers]
    elif algorithm == SGD:
        if grads is None or len(grads) != len(workers):
            raise NumericError("local SGD sync needs one gradient per worker")
        candidates = [w.x - alpha * g for w, g in zip(workers, grads)]
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")

    xbar = check_finite(ordered_mean(candidates), "averaged x")
    new_workers = [replace(w, x=xbar) for w in workers]
    new_server = replace(
        server,
        vhat_shared=vhat_shared,
        sync_rounds=server.sync_rounds + 1,
        comm_bytes=server.comm_bytes + sync_comm_bytes(algorithm, len(workers), xbar.shape[0]),
    )
    if return_candidates:
        return new_workers, new_server, candidates
    return new_workers, new_server
