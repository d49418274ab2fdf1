"""Trace validators and the convergence-bound calculator for local AMSGrad."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .optimizers import NAIVE, SHARED

IDENTITY_TOL = 1e-10


class TraceError(ValueError):
    pass


def aux_sequence(xbar: np.ndarray, beta1: float) -> np.ndarray:
    """Momentum-corrected averages ``z_s = xbar_s + b/(1-b) (xbar_s - xbar_{s-1})``.

    ``xbar`` is indexed by completed iterations; the state before the first
    one stands in for its own predecessor.
    """
    xbar = np.asarray(xbar, dtype=np.float64)
    prev = np.concatenate([xbar[:1], xbar[:-1]])
    return xbar + beta1 / (1.0 - beta1) * (xbar - prev)


def aux_identity_residual(mbar_prev, gbar, vhat, vhat_prev, z_next, z_cur,
                          alpha: float, beta1: float) -> float:
    """Sup-norm gap between the observed one-step change of ``z`` and its closed form."""
    c = beta1 / (1.0 - beta1)
    predicted = (alpha * c * (1.0 / np.sqrt(vhat_prev) - 1.0 / np.sqrt(vhat)) * mbar_prev
                 - alpha * gbar / np.sqrt(vhat))
    return float(np.max(np.abs((z_next - z_cur) - predicted)))


def _need_trace(log):
    if log.trace is None or not log.trace.xbar:
        raise TraceError("run has no cadence-1 trace; enable validators")
    return log.trace.arrays()


def _report(name, applicable, value=None, passed=True, **extra):
    out = {"name": name, "applicable": applicable, "max": value, "passed": bool(passed)}
    out.update(extra)
    return out


def aux_identity_check(log, alpha: float, beta1: float, tol: float = IDENTITY_TOL) -> dict:
    """Relative residual of the z-sequence identity at every step of a shared-vhat run."""
    name = "aux_identity"
    if log.algorithm != SHARED:
        return _report(name, False)
    tr = _need_trace(log)
    z = aux_sequence(tr["xbar"], beta1)
    worst, worst_step = 0.0, 0
    for s in range(1, z.shape[0]):
        r = aux_identity_residual(tr["mbar"][s - 1], tr["gbar"][s], tr["vhat"][s],
                                  tr["vhat"][s - 1], z[s], z[s - 1], alpha, beta1)
        rel = r / max(1.0, float(np.max(np.abs(z[s - 1]))))
        if rel > worst:
            worst, worst_step = rel, s
    return _report(name, True, worst, worst <= tol, tolerance=tol, worst_step=worst_step)


def consensus_rhs(period: int, alpha: float, dim: int, G: float, epsilon: float) -> float:
    return 4.0 * (period - 1) ** 2 * alpha**2 * dim * G**2 / epsilon


def consensus_bound_check(log, alpha: float, G_empirical: float | None = None) -> dict:
    """Worst ratio of worker drift ``||xbar - x_i||^2`` to its proven bound."""
    name = "consensus_bound"
    if log.algorithm != SHARED:
        return _report(name, False)
    tr = _need_trace(log)
    G = log.g_max if G_empirical is None else G_empirical
    rhs = consensus_rhs(log.period, alpha, log.dim, G, log.epsilon)
    diff = tr["worker_x"] - tr["xbar"][:, None, :]
    lhs = np.einsum("sid,sid->si", diff, diff)
    max_lhs = float(lhs.max())
    if rhs > 0:
        ratio = max_lhs / rhs
    else:
        ratio = 0.0 if max_lhs == 0 else math.inf
    return _report(name, True, ratio, ratio <= 1.0, max_lhs=max_lhs, rhs=rhs, G_empirical=G)


def vhat_monotonicity_check(log) -> dict:
    """Scan vhat (shared, or each worker's own for the naive variant) for any decrease."""
    name = "vhat_monotone"
    if log.algorithm not in (SHARED, NAIVE):
        return _report(name, False)
    tr = _need_trace(log)
    series = tr["vhat"] if log.algorithm == SHARED else tr["vhat_workers"]
    drops = np.diff(series, axis=0) < 0
    count = int(drops.sum())
    first = None
    if count:
        idx = np.argwhere(drops)[0]
        first = {"step": int(idx[0]) + 1, "index": [int(i) for i in idx[1:]]}
    return _report(name, True, count, count == 0, violations=count, first_violation=first)


def run_validators(log, alpha: float, beta1: float) -> list[dict]:
    return [
        aux_identity_check(log, alpha, beta1),
        consensus_bound_check(log, alpha),
        vhat_monotonicity_check(log),
    ]


@dataclass(frozen=True)
class BoundInputs:
    L: float
    sigma: float
    G: float
    epsilon: float
    beta1: float
    d: int
    T: int
    N: int
    k: int
    f_init_minus_min: float

    def min_T(self) -> float:
        return 16.0 * self.N * self.L**2 / (self.epsilon * self.d)

    def in_regime(self) -> bool:
        return self.T >= self.min_T()


@dataclass(frozen=True)
class BoundResult:
    value: float
    terms: tuple[float, ...]
    in_regime: bool


def convergence_bound(inp: BoundInputs) -> BoundResult:
    """Five-term upper bound on the vhat-weighted average squared gradient norm."""
    if inp.epsilon <= 0 or inp.T <= 0:
        raise ValueError("epsilon and T must be positive")
    d, T, N, L, G, eps = inp.d, inp.T, inp.N, inp.L, inp.G, inp.epsilon
    mom = inp.beta1 / (1.0 - inp.beta1)
    root = math.sqrt(d) / math.sqrt(T * N)
    terms = (
        8 * root * inp.f_init_minus_min,
        8 * L * root * inp.sigma**2 / eps,
        8 * (d / T) * mom * G**2 / math.sqrt(eps),
        8 * (L * N / T**2) * mom**2 * G**2 / eps,
        8 * (N / T) * L * (mom**2 + 5 * (inp.k - 1) ** 2) * G**2 / eps**1.5,
    )
    return BoundResult(math.fsum(terms), terms, inp.in_regime())


def bound_step_size(N: int, T: int, d: int, epsilon: float, L: float) -> float:
    """Step size the bound is stated for: ``min(sqrt(N/(T d)), sqrt(eps)/(4L))``."""
    return min(math.sqrt(N) / math.sqrt(T * d), math.sqrt(epsilon) / (4 * L))


def stationarity_measure(log) -> float:
    """Mean of ``||grad f(xbar)||^2`` over the states that start iterations ``1..T``.

    With cadence 1 these are the records ``t = 0..T-1``; otherwise the mean
    runs over the recorded subset (see :func:`measure_is_complete`).
    """
    if not log.t:
        raise TraceError("empty metrics log")
    vals = [g for t, g in zip(log.t, log.grad_sq_norm) if t < log.total_iters]
    if not vals:
        vals = log.grad_sq_norm
    return math.fsum(vals) / len(vals)


def measure_is_complete(log) -> bool:
    return sum(1 for t in log.t if t < log.total_iters) == log.total_iters


def max_period_for_rate(T, d, N) -> int:
    """Largest integer ``k`` with ``k <= T^(1/4) d^(1/4) / sqrt(N)``."""
    if min(T, d, N) <= 0:
        raise ValueError("T, d and N must be positive")
    if all(isinstance(v, int) for v in (T, d, N)):
        # k <= (Td)^(1/4)/sqrt(N)  <=>  k^4 N^2 <= T d, exact in integers
        k = int(((T * d) ** 0.25) / math.sqrt(N)) + 2
        while k > 0 and k**4 * N**2 > T * d:
            k -= 1
        return k
    return math.floor((T * d) ** 0.25 / math.sqrt(N))
