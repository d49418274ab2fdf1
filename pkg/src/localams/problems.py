"""Per-worker objectives with exact and stochastic gradient oracles.

The global objective is always the plain mean of the worker losses,
``f(x) = (1/N) sum_i f_i(x)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numeric import NumericError, RngStream, ordered_mean


class ProblemError(ValueError):
    pass


@dataclass(frozen=True)
class ProblemConstants:
    """Smoothness ``L``, noise bound ``sigma`` and gradient bound ``G_inf``.

    ``math.inf`` marks a constant that is not known in closed form.
    """

    L: float
    sigma: float
    G_inf: float
    dim: int
    num_workers: int

    def __post_init__(self):
        for name in ("L", "sigma", "G_inf"):
            if not getattr(self, name) >= 0:
                raise ProblemError(f"{name} must be nonnegative")
        if self.dim < 1 or self.num_workers < 1:
            raise ProblemError("dim and num_workers must be >= 1")


def _generator(rng) -> np.random.Generator:
    return rng.generator() if isinstance(rng, RngStream) else rng


class Problem:
    """Base class. Subclasses implement ``loss`` and ``grad`` per worker."""

    constants: ProblemConstants
    # known global minimum value, or a lower estimate; None if unknown
    f_star: float | None = None

    @property
    def dim(self) -> int:
        return self.constants.dim

    @property
    def num_workers(self) -> int:
        return self.constants.num_workers

    def loss(self, worker: int, x: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, worker: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def full_loss(self, x: np.ndarray) -> float:
        return math.fsum(self.loss(i, x) for i in range(self.num_workers)) / self.num_workers

    def full_grad(self, x: np.ndarray) -> np.ndarray:
        return ordered_mean([self.grad(i, x) for i in range(self.num_workers)])

    def stochastic_gradient(self, worker: int, x: np.ndarray, rng) -> np.ndarray:
        raise NotImplementedError

    def initial_point(self, rng) -> np.ndarray:
        raise NotImplementedError

    def _check_worker(self, worker: int):
        if not 0 <= worker < self.num_workers:
            raise ProblemError(f"worker {worker} out of range [0, {self.num_workers})")


class AnalyticProblem(Problem):
    """Closed-form losses with additive Gaussian noise clipped to ``[-G_inf, G_inf]``."""

    def stochastic_gradient(self, worker, x, rng):
        self._check_worker(worker)
        g = self.grad(worker, x)
        sigma = self.constants.sigma
        if sigma > 0:
            g = g + sigma * rng.standard_normal(g.shape[0])
        G = self.constants.G_inf
        if np.abs(g).max() > G:
            g = np.clip(g, -G, G)
        return g


class CounterexampleProblem(AnalyticProblem):
    """Three 1-d piecewise quadratics whose mean has its only stationary point at 0.

    Worker 0 has ``2x^2`` inside ``|x| <= 1`` and ``4|x| - 2`` outside; workers
    1 and 2 have ``-0.5x^2`` inside and ``-|x| + 0.5`` outside. At ``|x| = 1``
    the gradient takes the outer one-sided value.
    """

    f_star = 0.0

    def __init__(self, noise_std: float = 0.0, x0: float = 5.0):
        self.constants = ProblemConstants(L=4.0, sigma=noise_std, G_inf=4.0, dim=1, num_workers=3)
        self.x0 = x0

    def loss(self, worker, x):
        self._check_worker(worker)
        a = abs(float(x[0]))
        if worker == 0:
            return 2.0 * a * a if a < 1 else 4.0 * a - 2.0
        return -0.5 * a * a if a < 1 else -a + 0.5

    def grad(self, worker, x):
        self._check_worker(worker)
        xv = float(x[0])
        if abs(xv) < 1:
            slope = 4.0 * xv if worker == 0 else -xv
        else:
            s = 1.0 if xv > 0 else -1.0
            slope = 4.0 * s if worker == 0 else -s
        return np.array([slope])

    def initial_point(self, rng=None):
        return np.array([float(self.x0)])


def counterexample_problem(noise_std: float = 0.0) -> CounterexampleProblem:
    return CounterexampleProblem(noise_std=noise_std)


class QuadraticProblem(AnalyticProblem):
    """``f_i(x) = 0.5 (x - c_i)^T diag(D_i) (x - c_i)``.

    ``radius`` is the sup-norm ball the iterates are expected to stay in;
    ``G_inf`` bounds exact gradients there plus six noise standard deviations.
    """

    def __init__(self, curvatures, centers, noise_std: float = 0.0, radius: float = 10.0,
                 init_std: float = 2.0):
        D = np.atleast_2d(np.asarray(curvatures, dtype=np.float64))
        C = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        if D.shape != C.shape:
            raise ProblemError("curvatures and centers must have equal shape")
        if np.any(D <= 0):
            raise ProblemError("curvatures must be positive")
        self.curvatures = D
        self.centers = C
        self.init_std = init_std
        n, d = D.shape
        G = float(np.max(D * (radius + np.abs(C)))) + 6.0 * noise_std
        self.constants = ProblemConstants(L=float(D.max()), sigma=noise_std, G_inf=G,
                                          dim=d, num_workers=n)
        self.minimizer = D.sum(axis=0) ** -1 * (D * C).sum(axis=0)
        self.f_star = self.full_loss(self.minimizer)

    def loss(self, worker, x):
        self._check_worker(worker)
        r = x - self.centers[worker]
        return 0.5 * float(np.dot(r * self.curvatures[worker], r))

    def grad(self, worker, x):
        self._check_worker(worker)
        return self.curvatures[worker] * (x - self.centers[worker])

    def full_loss(self, x):
        r = x - self.centers
        return 0.5 * float((r * self.curvatures * r).sum(axis=1).mean())

    def full_grad(self, x):
        return (self.curvatures * (x - self.centers)).mean(axis=0)

    def initial_point(self, rng):
        return self.init_std * _generator(rng).standard_normal(self.dim)


def quadratic_problem(rng, dim: int, num_workers: int, condition_spread=(0.5, 1.0),
                      noise_std: float = 0.0, radius: float = 10.0,
                      center_std: float = 1.0) -> QuadraticProblem:
    """Random diagonal quadratics; eigenvalues uniform in ``condition_spread``."""
    if dim < 1 or num_workers < 1:
        raise ProblemError("dim and num_workers must be >= 1")
    lo, hi = condition_spread
    if not 0 < lo <= hi:
        raise ProblemError("condition_spread must be an interval (lo, hi) with 0 < lo <= hi")
    gen = _generator(rng)
    D = gen.uniform(lo, hi, size=(num_workers, dim))
    C = center_std * gen.standard_normal((num_workers, dim))
    return QuadraticProblem(D, C, noise_std=noise_std, radius=radius)


# -- datasets -----------------------------------------------------------------

@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int = field(default=0)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ProblemError("features and labels differ in length")
        if self.num_classes == 0 and self.labels.size:
            self.num_classes = int(self.labels.max()) + 1
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ProblemError("labels out of range")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)


def gaussian_mixture_dataset(rng, num_clusters: int, dim: int,
                             samples_per_cluster: int) -> LabeledDataset:
    """Isotropic unit-variance clusters whose means are themselves N(0, I) draws."""
    if min(num_clusters, dim, samples_per_cluster) < 1:
        raise ProblemError("all arguments must be >= 1")
    gen = _generator(rng)
    means = gen.standard_normal((num_clusters, dim))
    X = np.repeat(means, samples_per_cluster, axis=0)
    X = X + gen.standard_normal(X.shape)
    y = np.repeat(np.arange(num_clusters), samples_per_cluster)
    return LabeledDataset(X, y, num_classes=num_clusters)


def shard_dataset(dataset: LabeledDataset, num_workers: int, strategy: str = "iid",
                  rng=None, classes_per_worker: int = 2) -> list[LabeledDataset]:
    """Split ``dataset`` across workers.

    ``iid`` is a random near-equal partition. ``by_label`` gives each worker
    every sample of a disjoint set of at most ``classes_per_worker`` labels.
    """
    if num_workers < 1:
        raise ProblemError("num_workers must be >= 1")
    if strategy not in ("iid", "by_label"):
        raise ProblemError(f"unknown sharding strategy {strategy!r}")
    C = dataset.num_classes
    if strategy == "by_label" and (num_workers * classes_per_worker < C or C < num_workers):
        raise ProblemError(
            f"by_label infeasible: {C} classes over {num_workers} workers "
            f"with {classes_per_worker} classes each")
    if num_workers == 1:
        return [dataset.subset(np.arange(len(dataset)))]

    gen = _generator(rng) if rng is not None else np.random.default_rng(0)
    if strategy == "iid":
        perm = gen.permutation(len(dataset))
        return [dataset.subset(np.sort(part)) for part in np.array_split(perm, num_workers)]

    classes = gen.permutation(C)
    shards = []
    for group in np.array_split(classes, num_workers):
        mask = np.isin(dataset.labels, group)
        shards.append(dataset.subset(np.flatnonzero(mask)))
    return shards


def load_csv_dataset(path, num_classes: int = 0) -> LabeledDataset:
    """Read header-less rows of feature columns followed by one integer label."""
    rows = []
    width = None
    with open(Path(path), newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise ProblemError(f"{path}:{lineno}: need at least one feature and a label")
            elif len(row) != width:
                raise ProblemError(f"{path}:{lineno}: ragged row ({len(row)} columns, expected {width})")
            try:
                label = int(row[-1])
                feats = [float(v) for v in row[:-1]]
            except ValueError as exc:
                raise ProblemError(f"{path}:{lineno}: {exc}") from None
            rows.append((feats, label))
    if not rows:
        raise ProblemError(f"{path}: no rows")
    X = np.array([r[0] for r in rows])
    y = np.array([r[1] for r in rows])
    return LabeledDataset(X, y, num_classes=num_classes)


# -- MLP ----------------------------------------------------------------------

class MLPProblem(Problem):
    """ReLU MLP with softmax cross-entropy; one data shard per worker.

    Parameters live in one flat vector, laid out layer by layer as the
    row-major weight matrix (fan_in x fan_out) followed by the bias.
    """

    f_star = 0.0  # cross-entropy lower bound, not the attained minimum

    def __init__(self, shards: list[LabeledDataset], layer_widths, batch_size: int = 32):
        if not shards:
            raise ProblemError("need at least one shard")
        for i, s in enumerate(shards):
            if len(s) == 0:
                raise ProblemError(f"shard {i} is empty")
        widths = [int(w) for w in layer_widths]
        if len(widths) < 2:
            raise ProblemError("layer_widths needs input and output widths")
        if widths[0] != shards[0].dim:
            raise ProblemError(f"input width {widths[0]} != feature dim {shards[0].dim}")
        n_classes = max(s.num_classes for s in shards)
        if widths[-1] < n_classes:
            raise ProblemError(f"output width {widths[-1]} < number of classes {n_classes}")
        if batch_size < 1:
            raise ProblemError("batch_size must be >= 1")
        self.shards = shards
        self.widths = widths
        self.batch_size = batch_size
        self._slices = []
        off = 0
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            w = slice(off, off + fan_in * fan_out)
            off += fan_in * fan_out
            b = slice(off, off + fan_out)
            off += fan_out
            self._slices.append((w, b, fan_in, fan_out))
        inf = math.inf
        self.constants = ProblemConstants(L=inf, sigma=inf, G_inf=inf, dim=off,
                                          num_workers=len(shards))

    def _unpack(self, x):
        return [(x[w].reshape(i, o), x[b]) for w, b, i, o in self._slices]

    def _forward_backward(self, x, X, y, need_grad=True):
        layers = self._unpack(x)
        acts = [X]
        h = X
        for j, (W, b) in enumerate(layers):
            z = h @ W + b
            h = np.maximum(z, 0.0) if j < len(layers) - 1 else z
            acts.append(h)
        logits = acts[-1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=1))
        n = X.shape[0]
        loss = float(np.mean(logsumexp - shifted[np.arange(n), y]))
        if not need_grad:
            return loss, None

        probs = np.exp(shifted - logsumexp[:, None])
        delta = probs
        delta[np.arange(n), y] -= 1.0
        delta /= n
        grad = np.empty_like(x)
        for j in range(len(layers) - 1, -1, -1):
            W, _ = layers[j]
            w_sl, b_sl, _, _ = self._slices[j]
            grad[w_sl] = (acts[j].T @ delta).reshape(-1)
            grad[b_sl] = delta.sum(axis=0)
            if j > 0:
                delta = (delta @ W.T) * (acts[j] > 0)
        return loss, grad

    def loss(self, worker, x):
        self._check_worker(worker)
        s = self.shards[worker]
        return self._forward_backward(x, s.features, s.labels, need_grad=False)[0]

    def grad(self, worker, x):
        self._check_worker(worker)
        s = self.shards[worker]
        return self._forward_backward(x, s.features, s.labels)[1]

    def stochastic_gradient(self, worker, x, rng):
        self._check_worker(worker)
        s = self.shards[worker]
        if self.batch_size >= len(s):
            return self.grad(worker, x)
        idx = rng.integers(0, len(s), size=self.batch_size)
        return self._forward_backward(x, s.features[idx], s.labels[idx])[1]

    def initial_point(self, rng):
        gen = _generator(rng)
        x = np.zeros(self.dim)
        for w, _, fan_in, _ in self._slices:
            x[w] = math.sqrt(2.0 / fan_in) * gen.standard_normal(w.stop - w.start)
        return x

    def iterations_per_epoch(self) -> int:
        return max(math.ceil(len(s) / self.batch_size) for s in self.shards)


def mlp_problem(dataset_shards, layer_widths, rng=None, batch_size: int = 32) -> MLPProblem:
    # rng is consumed by initial_point, not at construction
    return MLPProblem(list(dataset_shards), layer_widths, batch_size=batch_size)


def stochastic_gradient(problem: Problem, worker: int, x: np.ndarray, rng) -> np.ndarray:
    """Draw one gradient estimate and enforce the sup-norm bound ``G_inf``."""
    g = problem.stochastic_gradient(worker, x, rng)
    if np.abs(g).max() > problem.constants.G_inf:
        raise NumericError(f"gradient exceeds G_inf={problem.constants.G_inf}")
    return g
