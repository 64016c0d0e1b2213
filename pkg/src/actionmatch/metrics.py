"""Sample-based distances and field errors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist, pdist

from .paths import AnalyticUnavailable

MAX_ASSIGNMENT = 4096
_MEDIAN_POINTS = 2000


@dataclass(frozen=True)
class KernelSpec:
    family: str = "rbf"
    bandwidth: float | None = None  # None: median heuristic on the pooled sample

    def __post_init__(self):
        if self.family != "rbf":
            raise ValueError("only the rbf kernel is supported")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")


def _cloud(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise ValueError("empty sample")
    return X


def median_bandwidth(X, Y) -> float:
    """Median pairwise distance of the pooled sample (first 2000 points of each)."""
    Z = np.concatenate([_cloud(X)[:_MEDIAN_POINTS], _cloud(Y)[:_MEDIAN_POINTS]])
    dist = pdist(Z)
    dist = dist[dist > 0]
    return float(np.median(dist)) if dist.size else 1.0


def _sorted_rows(X):
    return X[np.lexsort(X.T[::-1])]


def mmd(X, Y, kernel: KernelSpec = KernelSpec()) -> float:
    """Biased (V-statistic) MMD with an RBF kernel exp(-|x-y|^2 / (2 bw^2)).

    Rows are put in a canonical order first, so the result is exactly zero
    for equal multisets and exactly symmetric in its arguments.
    """
    X, Y = _cloud(X), _cloud(Y)
    if X.shape[1] != Y.shape[1]:
        raise ValueError("samples have different dimensions")
    bw = kernel.bandwidth if kernel.bandwidth is not None else median_bandwidth(X, Y)
    X, Y = _sorted_rows(X), _sorted_rows(Y)
    if (Y.shape[0], Y.tobytes()) < (X.shape[0], X.tobytes()):
        X, Y = Y, X
    g = 0.5 / bw ** 2
    kxx = np.exp(-g * cdist(X, X, "sqeuclidean")).mean()
    kyy = np.exp(-g * cdist(Y, Y, "sqeuclidean")).mean()
    kxy = np.exp(-g * cdist(X, Y, "sqeuclidean")).mean()
    return float(np.sqrt(max(kxx + kyy - 2.0 * kxy, 0.0)))


def wasserstein2(X, Y) -> float:
    """Exact W2 between equal-size empirical measures via optimal assignment."""
    X, Y = _cloud(X), _cloud(Y)
    if X.shape != Y.shape:
        raise ValueError("wasserstein2 needs equal sample sizes and dimensions")
    if X.shape[0] > MAX_ASSIGNMENT:
        raise ValueError(f"exact assignment limited to n <= {MAX_ASSIGNMENT}")
    cost = cdist(X, Y, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(max(cost[rows, cols].mean(), 0.0)))


def field_error(field, path, n_times: int = 20, n_samples: int = 2000,
                rng: np.random.Generator | None = None) -> float:
    """Relative velocity error sqrt(sum_t E|grad s - v*|^2 / sum_t E|v*|^2)
    over a midpoint time grid."""
    if path.provides("true_action_grad"):
        truth = path.true_action_grad
    elif path.provides("velocity"):
        truth = path.velocity
    else:
        raise AnalyticUnavailable("path has no analytic velocity to compare against")
    return relative_drift_error(field.grad, truth, path, n_times, n_samples, rng)


def relative_drift_error(model, truth, path, n_times=20, n_samples=2000, rng=None) -> float:
    """Same ratio for arbitrary callables (t, x) -> (N, d)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    num = den = 0.0
    for t in (np.arange(n_times) + 0.5) / n_times:
        x = path.sample(t, n_samples, rng)
        tt = np.full(n_samples, t)
        v = truth(tt, x)
        num += np.mean(np.sum((model(tt, x) - v) ** 2, axis=1))
        den += np.mean(np.sum(v * v, axis=1))
    if den == 0.0:
        raise ValueError("reference field vanishes; relative error undefined")
    return float(np.sqrt(num / den))
