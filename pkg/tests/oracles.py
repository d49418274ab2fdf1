"""Reference computations that share no code path with the package internals.

Each oracle is written out the long way (plain Python floats or explicit
loops) so a bug in the package cannot silently reproduce itself here.
"""

import math

import numpy as np


def central_difference(fun, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        out[j] = (fun(xp) - fun(xm)) / (2 * h)
    return out


def counterexample_grad(worker, x):
    if abs(x) < 1:
        return 4 * x if worker == 0 else -x
    s = 1.0 if x > 0 else -1.0
    return 4 * s if worker == 0 else -s


def counterexample_naive(T, alpha=0.1, beta2=0.5, eps=1e-8, x0=5.0):
    """Scalar recursion for the naive variant with k = 1 and beta1 = 0.

    Returns (xbar history, candidate history), index s = after s iterations.
    """
    x = x0
    v = [0.0, 0.0, 0.0]
    vhat = [eps, eps, eps]
    xs, cands = [x], [[x, x, x]]
    for _ in range(T):
        c = []
        for i in range(3):
            g = counterexample_grad(i, x)
            v[i] = beta2 * v[i] + (1 - beta2) * g * g
            vhat[i] = max(vhat[i], v[i])
            c.append(x - alpha * g / math.sqrt(vhat[i]))
        x = (c[0] + c[1] + c[2]) / 3
        xs.append(x)
        cands.append(c)
    return xs, cands


def counterexample_shared(T, alpha=0.1, beta2=0.5, eps=1e-8, x0=5.0):
    """Scalar recursion for the shared-vhat variant with k = 1 and beta1 = 0."""
    x = x0
    v = [0.0, 0.0, 0.0]
    vhat = eps
    xs = [x]
    for _ in range(T):
        g = [counterexample_grad(i, x) for i in range(3)]
        v = [beta2 * v[i] + (1 - beta2) * g[i] ** 2 for i in range(3)]
        vhat = max(vhat, (v[0] + v[1] + v[2]) / 3)
        x = sum(x - alpha * gi / math.sqrt(vhat) for gi in g) / 3
        xs.append(x)
    return xs


def reference_amsgrad(problem, x0, alpha, beta1, beta2, eps, T, seed):
    """Single-node AMSGrad, vhat initialised to eps, no bias correction.

    Gradient draws use the same (seed, worker 0, iteration t) stream as the
    simulator so the two trajectories can be compared bit for bit.
    """
    from localams.numeric import RngStream

    x = np.array(x0, dtype=np.float64)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    vhat = np.full_like(x, eps)
    traj = [x.copy()]
    for t in range(1, T + 1):
        g = problem.stochastic_gradient(0, x, RngStream(seed, 0, t))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        vhat = np.maximum(v, vhat)
        x = x - alpha * m / np.sqrt(vhat)
        traj.append(x.copy())
    return traj


def aux_identity_residuals(xbar, mbar, gbar, vhat, alpha, beta1):
    """Coordinate-by-coordinate evaluation of the z-sequence identity.

    Index conventions match the simulator trace: xbar[s] after s steps,
    mbar/gbar/vhat[s] belong to step s, row 0 is the initial state.
    """
    c = beta1 / (1 - beta1)
    T = len(xbar) - 1
    d = len(xbar[0])

    def z(s):
        prev = xbar[max(s - 1, 0)]
        return [xbar[s][j] + c * (xbar[s][j] - prev[j]) for j in range(d)]

    out = []
    for s in range(1, T + 1):
        z_next, z_cur = z(s), z(s - 1)
        worst = 0.0
        for j in range(d):
            lhs = z_next[j] - z_cur[j]
            rhs = (alpha * c * (1 / math.sqrt(vhat[s - 1][j]) - 1 / math.sqrt(vhat[s][j]))
                   * mbar[s - 1][j] - alpha * gbar[s][j] / math.sqrt(vhat[s][j]))
            worst = max(worst, abs(lhs - rhs))
        scale = max(1.0, max(abs(v) for v in z_cur))
        out.append(worst / scale)
    return out


def bound_rhs_retyped(L, sigma, G, eps, b1, d, T, N, k, gap):
    """The five-term bound typed in again from scratch, as one expression."""
    r = b1 / (1 - b1)
    return (8 * d**0.5 / (T * N) ** 0.5 * gap
            + 8 * L * d**0.5 / (T * N) ** 0.5 * sigma**2 / eps
            + 8 * d / T * r * G**2 / eps**0.5
            + 8 * L * N / T**2 * r**2 * G**2 / eps
            + 8 * N / T * L * (r**2 + 5 * (k - 1) ** 2) * G**2 / eps**1.5)
