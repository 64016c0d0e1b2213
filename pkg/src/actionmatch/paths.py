"""Time-indexed marginal distributions q_t on [0, 1].

Each path draws samples with ``sample(t, n, rng)`` where ``t`` is a scalar or
an array of n times (one point per time). Synthetic paths additionally expose
analytic ``density``, ``score``, ``velocity`` and ``true_action_grad``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .field import QuadraticFamilyField, VelocityField

TGRID = np.linspace(0.0, 1.0, 1001)


class AnalyticUnavailable(ValueError):
    """The path has no closed form for the requested quantity."""


# ---------------------------------------------------------------------------
# Scalar / vector curves of time with derivatives


@dataclass(frozen=True)
class Curve:
    """A function of time with its first (and optionally second) derivative.

    All callables are vectorized over a time array.
    """

    f: Callable
    df: Callable
    ddf: Callable | None = None

    def __call__(self, t):
        return self.f(np.asarray(t, dtype=np.float64))

    def deriv(self, t):
        return self.df(np.asarray(t, dtype=np.float64))

    def second(self, t):
        if self.ddf is None:
            raise AnalyticUnavailable("second derivative not supplied for this curve")
        return self.ddf(np.asarray(t, dtype=np.float64))

    @staticmethod
    def constant(c: float) -> "Curve":
        c = float(c)
        return Curve(lambda t: np.full_like(t, c), np.zeros_like, np.zeros_like)

    @staticmethod
    def affine(c0: float, c1: float) -> "Curve":
        """c0 + c1 t"""
        c0, c1 = float(c0), float(c1)
        return Curve(lambda t: c0 + c1 * t, lambda t: np.full_like(t, c1), np.zeros_like)

    @staticmethod
    def exponential(rate: float = 1.0, scale: float = 1.0) -> "Curve":
        """scale * exp(rate t)"""
        return Curve(lambda t: scale * np.exp(rate * t),
                     lambda t: scale * rate * np.exp(rate * t),
                     lambda t: scale * rate * rate * np.exp(rate * t))

    @staticmethod
    def sqrt_affine(c0: float, c1: float) -> "Curve":
        """sqrt(c0 + c1 t)"""
        return Curve(lambda t: np.sqrt(c0 + c1 * t),
                     lambda t: 0.5 * c1 / np.sqrt(c0 + c1 * t),
                     lambda t: -0.25 * c1 * c1 / (c0 + c1 * t) ** 1.5)

    @staticmethod
    def sqrt_quadratic(c0: float, c1: float, c2: float) -> "Curve":
        """sqrt(c0 + c1 t + c2 t^2)"""
        def g(t):
            return c0 + c1 * t + c2 * t * t

        def df(t):
            return 0.5 * (c1 + 2 * c2 * t) / np.sqrt(g(t))

        def ddf(t):
            gp = c1 + 2 * c2 * t
            return c2 / np.sqrt(g(t)) - 0.25 * gp * gp / g(t) ** 1.5

        return Curve(lambda t: np.sqrt(g(t)), df, ddf)


@dataclass(frozen=True)
class AffineMean:
    """Mean map f_t(x0) = gain(t) * x0 + shift(t)."""

    gain: Curve
    shift: Callable  # t (N,) -> (N, d)
    shift_dot: Callable
    shift_ddot: Callable | None = None

    def __call__(self, t, x0):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return self.gain(t)[:, None] * x0 + self.shift(t)

    def deriv(self, t, x0):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return self.gain.deriv(t)[:, None] * x0 + self.shift_dot(t)

    def second(self, t, x0):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if self.shift_ddot is None:
            raise AnalyticUnavailable("second derivative of the mean not supplied")
        return self.gain.second(t)[:, None] * x0 + self.shift_ddot(t)


def translation(u) -> AffineMean:
    """f_t(x0) = x0 + t u"""
    u = np.asarray(u, dtype=np.float64)
    return AffineMean(Curve.constant(1.0),
                      lambda t: t[:, None] * u,
                      lambda t: np.broadcast_to(u, (t.shape[0], u.size)),
                      lambda t: np.zeros((t.shape[0], u.size)))


def static_mean(dim: int) -> AffineMean:
    return translation(np.zeros(dim))


def gain_mean(gain: Curve, dim: int) -> AffineMean:
    """f_t(x0) = gain(t) x0"""
    z = lambda t: np.zeros((t.shape[0], dim))
    return AffineMean(gain, z, z, z)


# ---------------------------------------------------------------------------
# Base class


class MarginalPath:
    dim: int
    _hooks: tuple = ()

    def sample(self, t, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def provides(self, name: str) -> bool:
        return name in self._hooks

    def density(self, t, x):
        raise AnalyticUnavailable(f"{type(self).__name__} has no analytic density")

    def log_density(self, t, x):
        return np.log(self.density(t, x))

    def score(self, t, x):
        raise AnalyticUnavailable(f"{type(self).__name__} has no analytic score")

    def velocity(self, t, x):
        raise AnalyticUnavailable(f"{type(self).__name__} has no analytic velocity")

    def true_action_grad(self, t, x):
        raise AnalyticUnavailable(f"{type(self).__name__} has no analytic action")

    def entropic_drift(self, t, x, sigma: float):
        """Gradient drift that reproduces q_t under diffusion sigma:
        velocity + sigma^2/2 * score (both are gradient fields)."""
        return self.velocity(t, x) + 0.5 * sigma ** 2 * self.score(t, x)

    def true_action(self):
        """An ActionField whose gradient is the true velocity."""
        if not self.provides("true_action_grad"):
            raise AnalyticUnavailable(f"{type(self).__name__} has no analytic action")
        return VelocityField(self.dim, self.true_action_grad)


def _times(t, n):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(n, float(t))
    if t.shape != (n,):
        raise ValueError("need a scalar time or one time per sample")
    return t


def _pts(x, dim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1 and dim == 1:
        x = x[:, None]
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != dim:
        raise ValueError(f"expected points of dimension {dim}")
    return x


def _check_scale(scale: Curve):
    vals = np.asarray(scale(TGRID))
    if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
        bad = TGRID[np.argmax(~np.isfinite(vals) | (vals <= 0))]
        raise ValueError(f"scale must be positive on [0, 1]; fails at t={bad:.3g} "
                         "(a vanishing scale makes the velocity singular)")


# ---------------------------------------------------------------------------
# Gaussian and delta-mixture paths


class DeltaMixturePath(MarginalPath):
    """q_t = (1/N) sum_i N(x | f_t(x^i), sigma_t^2 I).

    With an affine mean map the mixture velocity is itself a gradient field,
    so it doubles as the true action gradient.
    """

    _hooks = ("density", "score", "velocity", "true_action_grad")

    def __init__(self, points, mean: AffineMean, scale: Curve):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            points = points[None, :]
        if points.shape[0] == 0:
            raise ValueError("need at least one point")
        _check_scale(scale)
        self.points = points
        self.dim = points.shape[1]
        self.mean = mean
        self.scale = scale

    def _centers(self, t):
        # (N, K, d)
        t = np.atleast_1d(t)
        return np.stack([self.mean(t, p) for p in self.points], axis=1)

    def sample(self, t, n, rng):
        t = _times(t, n)
        idx = rng.integers(0, self.points.shape[0], size=n) if self.points.shape[0] > 1 \
            else np.zeros(n, dtype=int)
        mu = self.mean(t, self.points[idx])
        return mu + self.scale(t)[:, None] * rng.standard_normal((n, self.dim))

    def _log_components(self, t, x):
        x = _pts(x, self.dim)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        sig = self.scale(t)
        diff = x[:, None, :] - self._centers(t)
        logc = (-0.5 * np.sum(diff * diff, axis=2) / sig[:, None] ** 2
                - self.dim * np.log(sig)[:, None] - 0.5 * self.dim * np.log(2 * np.pi))
        return t, x, sig, diff, logc

    def log_density(self, t, x):
        _, _, _, _, logc = self._log_components(t, x)
        return logsumexp(logc, axis=1) - np.log(self.points.shape[0])

    def density(self, t, x):
        return np.exp(self.log_density(t, x))

    def _resp(self, logc):
        return np.exp(logc - logsumexp(logc, axis=1, keepdims=True))

    def score(self, t, x):
        _, _, sig, diff, logc = self._log_components(t, x)
        r = self._resp(logc)
        return -np.einsum("nk,nkd->nd", r, diff) / sig[:, None] ** 2

    def velocity(self, t, x):
        t, x, sig, diff, logc = self._log_components(t, x)
        r = self._resp(logc)
        dlog = self.scale.deriv(t) / sig
        fdot = np.stack([self.mean.deriv(t, p) for p in self.points], axis=1)
        per = diff * dlog[:, None, None] + fdot
        return np.einsum("nk,nkd->nd", r, per)

    true_action_grad = velocity

    def transport(self, t, x0):
        """Exact flow map of a single-component path from time 0 to t."""
        if self.points.shape[0] != 1:
            raise AnalyticUnavailable("closed-form flow map only for a single component")
        x0 = _pts(x0, self.dim)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x0.shape[0],))
        z = np.zeros_like(t)
        ratio = self.scale(t) / self.scale(z)
        p = self.points[0]
        return self.mean(t, p) + ratio[:, None] * (x0 - self.mean(z, p))


class GaussianPath(DeltaMixturePath):
    """Single delta pushed through f_t and blurred by sigma_t."""

    def __init__(self, x0, mean: AffineMean, scale: Curve):
        super().__init__(np.atleast_1d(np.asarray(x0, dtype=np.float64))[None, :], mean, scale)
        self.x0 = self.points[0]

    def true_action(self) -> QuadraticFamilyField:
        """s*(t, x) = lambda_t/2 |x - m_t|^2 + m_t'.x with lambda = d/dt log sigma."""
        x0, mean, scale = self.x0, self.mean, self.scale

        def lam(t):
            return scale.deriv(t) / scale(t)

        def dlam(t):
            s = scale(t)
            return scale.second(t) / s - (scale.deriv(t) / s) ** 2

        return QuadraticFamilyField(
            self.dim, lam, dlam,
            m=lambda t: mean(t, x0), dm=lambda t: mean.deriv(t, x0),
            b=lambda t: mean.deriv(t, x0), db=lambda t: mean.second(t, x0))


def gaussian_path(x0, mean: AffineMean, scale: Curve) -> GaussianPath:
    return GaussianPath(x0, mean, scale)


def delta_mixture_path(points, mean: AffineMean, scale: Curve) -> DeltaMixturePath:
    return DeltaMixturePath(points, mean, scale)


def translation_path(u, sigma: float = 1.0, x0=None) -> GaussianPath:
    """N(x0 + t u, sigma^2 I)"""
    u = np.asarray(u, dtype=np.float64)
    x0 = np.zeros_like(u) if x0 is None else x0
    return gaussian_path(x0, translation(u), Curve.constant(sigma))


def drifting_gaussian_path(u, var0: float = 1.0, var_rate: float = 1.0) -> GaussianPath:
    """N(u t, (var0 + var_rate t) I): Brownian motion with drift u when var_rate = 1."""
    u = np.asarray(u, dtype=np.float64)
    return gaussian_path(np.zeros_like(u), translation(u), Curve.sqrt_affine(var0, var_rate))


def linear_gaussian_interpolant_path(target_mean) -> GaussianPath:
    """Law of (1-t) x0 + t x1 with x0 ~ N(0, I), x1 ~ N(m, I): N(t m, ((1-t)^2 + t^2) I)."""
    m = np.asarray(target_mean, dtype=np.float64)
    return gaussian_path(m, gain_mean(Curve.affine(0.0, 1.0), m.size),
                         Curve.sqrt_quadratic(1.0, -2.0, 2.0))


# ---------------------------------------------------------------------------
# Two-mode weight shift


class WeightShiftPath(MarginalPath):
    """alpha_t N(left, 1) + (1 - alpha_t) N(right, 1), alpha linear in t."""

    _hooks = ("density", "score")
    dim = 1

    def __init__(self, left_mean=-5.0, right_mean=5.0, alpha0=0.2, alpha1=0.8):
        for a in (alpha0, alpha1):
            if not 0.0 < a < 1.0:
                raise ValueError("mode weights must lie strictly inside (0, 1)")
        self.left, self.right = float(left_mean), float(right_mean)
        self.alpha0, self.alpha1 = float(alpha0), float(alpha1)

    def alpha(self, t):
        return self.alpha0 + (self.alpha1 - self.alpha0) * np.asarray(t, dtype=np.float64)

    def sample(self, t, n, rng):
        t = _times(t, n)
        left = rng.random(n) < self.alpha(t)
        centers = np.where(left, self.left, self.right)
        return (centers + rng.standard_normal(n))[:, None]

    def _parts(self, t, x):
        x = _pts(x, 1)[:, 0]
        a = self.alpha(t)
        pl = a * np.exp(-0.5 * (x - self.left) ** 2) / math.sqrt(2 * math.pi)
        pr = (1 - a) * np.exp(-0.5 * (x - self.right) ** 2) / math.sqrt(2 * math.pi)
        return x, pl, pr

    def density(self, t, x):
        _, pl, pr = self._parts(t, x)
        return pl + pr

    def score(self, t, x):
        x, pl, pr = self._parts(t, x)
        return ((-(x - self.left) * pl - (x - self.right) * pr) / (pl + pr))[:, None]


def weight_shift_path(left_mean=-5.0, right_mean=5.0, alpha0=0.2, alpha1=0.8) -> WeightShiftPath:
    return WeightShiftPath(left_mean, right_mean, alpha0, alpha1)


# ---------------------------------------------------------------------------
# Harmonic-oscillator superposition


class QHOSuperpositionPath(MarginalPath):
    """|psi(x, tau)|^2 for an equal superposition of the two lowest
    unit-frequency oscillator eigenstates, tau = 2 pi t (one beat period).

    q = exp(-x^2)/(2 sqrt(pi)) * P,  P = 1 + 2x^2 + 2 sqrt(2) x cos(tau)
    probability current J = -sin(tau) exp(-x^2) / sqrt(2 pi), velocity = J/q.
    """

    _hooks = ("density", "score", "velocity", "true_action_grad")
    dim = 1
    envelope_var = 4.0

    def __init__(self):
        # (1 + sqrt2 |x|)^2 bounds P, and q/g = sqrt2 exp(-7x^2/8)(1 + sqrt2 |x|)^2
        # for the N(0, 4) envelope g; its maximizer solves 7 sqrt2 y^2 + 7y - 8 sqrt2 = 0.
        r2 = math.sqrt(2.0)
        y = (-7.0 + math.sqrt(49.0 + 4 * 7 * r2 * 8 * r2)) / (2 * 7 * r2)
        self.envelope_bound = r2 * math.exp(-7 * y * y / 8) * (1 + r2 * y) ** 2

    @staticmethod
    def tau(t):
        return 2 * np.pi * np.asarray(t, dtype=np.float64)

    def _poly(self, t, x):
        x = _pts(x, 1)[:, 0]
        c = np.cos(self.tau(t))
        return x, 1 + 2 * x * x + 2 * math.sqrt(2) * x * c

    def density(self, t, x):
        x, P = self._poly(t, x)
        return np.exp(-x * x) * P / (2 * math.sqrt(math.pi))

    def score(self, t, x):
        x, P = self._poly(t, x)
        c = np.cos(self.tau(t))
        with np.errstate(divide="ignore", invalid="ignore"):
            s = -2 * x + (4 * x + 2 * math.sqrt(2) * c) / P
        return s[:, None]

    def velocity(self, t, x):
        x, P = self._poly(t, x)
        num = -2 * np.pi * math.sqrt(2) * np.sin(self.tau(t)) * np.ones_like(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(P > 0, num / np.where(P > 0, P, 1.0), 0.0)
        return v[:, None]

    true_action_grad = velocity

    def sample(self, t, n, rng):
        t = _times(t, n)
        out = np.empty(n)
        todo = np.arange(n)
        sd = math.sqrt(self.envelope_var)
        while todo.size:
            cand = sd * rng.standard_normal(todo.size)
            u = rng.random(todo.size)
            q = self.density(t[todo], cand[:, None])
            g = np.exp(-cand * cand / (2 * self.envelope_var)) / math.sqrt(2 * math.pi * self.envelope_var)
            ok = u * self.envelope_bound * g <= q
            out[todo[ok]] = cand[ok]
            todo = todo[~ok]
        return out[:, None]


def qho_superposition_path() -> QHOSuperpositionPath:
    return QHOSuperpositionPath()


# ---------------------------------------------------------------------------
# Sample-space interpolants


Sampler = Callable[[int, np.random.Generator], np.ndarray]


def gaussian_sampler(mean, std: float = 1.0) -> Sampler:
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    return lambda n, rng: mean + std * rng.standard_normal((n, mean.size))


class InterpolantPath(MarginalPath):
    """x_t = mask x1 + (1 - mask)(alpha(t) x0 + beta(t) x1)."""

    def __init__(self, prior_sampler: Sampler, data_sampler: Sampler, mask=None,
                 alpha: Callable | None = None, beta: Callable | None = None):
        probe = np.random.default_rng(0)
        d0 = np.atleast_2d(prior_sampler(1, probe)).shape[1]
        d1 = np.atleast_2d(data_sampler(1, probe)).shape[1]
        if d0 != d1:
            raise ValueError(f"prior has dimension {d0} but data has dimension {d1}")
        self.dim = d0
        if mask is not None:
            mask = np.asarray(mask, dtype=np.float64)
            if mask.shape != (d0,) or not np.all((mask == 0) | (mask == 1)):
                raise ValueError("mask must be a 0/1 vector matching the dimension")
        self.mask = mask
        self.prior_sampler = prior_sampler
        self.data_sampler = data_sampler
        self.alpha = alpha or (lambda t: 1.0 - t)
        self.beta = beta or (lambda t: t)

    def sample(self, t, n, rng):
        t = _times(t, n)
        x0 = np.asarray(self.prior_sampler(n, rng), dtype=np.float64).reshape(n, self.dim)
        x1 = np.asarray(self.data_sampler(n, rng), dtype=np.float64).reshape(n, self.dim)
        xt = self.alpha(t)[:, None] * x0 + self.beta(t)[:, None] * x1
        if self.mask is not None:
            xt = self.mask * x1 + (1 - self.mask) * xt
        return xt


def interpolant_path(prior_sampler, data_sampler, mask=None, alpha=None, beta=None):
    return InterpolantPath(prior_sampler, data_sampler, mask, alpha, beta)


# ---------------------------------------------------------------------------
# Snapshot data


@dataclass
class SnapshotDataset:
    times: np.ndarray
    snapshots: list = dc_field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.times.size < 2:
            raise ValueError("a snapshot dataset needs at least 2 timestamps")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if self.times[0] < 0 or self.times[-1] > 1:
            raise ValueError("timestamps must lie in [0, 1]")
        self.snapshots = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in self.snapshots]
        if len(self.snapshots) != self.times.size:
            raise ValueError("one point set per timestamp required")
        dims = {s.shape[1] for s in self.snapshots}
        if len(dims) != 1:
            raise ValueError("all snapshots must share a dimension")
        if any(s.shape[0] == 0 for s in self.snapshots):
            raise ValueError("empty snapshot")
        if not all(np.all(np.isfinite(s)) for s in self.snapshots):
            raise ValueError("snapshot points must be finite")

    @property
    def dim(self) -> int:
        return self.snapshots[0].shape[1]


SMOOTHING = ("blend", "mixture", "hold")


class SnapshotPath(MarginalPath):
    """Interpolates between consecutive snapshots.

    blend   : (1-l) a + l b with a, b drawn from the two neighbours
    mixture : draw from snapshot k w.p. 1-l, else k+1
    hold    : resample snapshot k on [t_k, t_{k+1})
    where l = (t - t_k) / (t_{k+1} - t_k).
    """

    def __init__(self, dataset: SnapshotDataset, smoothing: str = "blend"):
        if smoothing not in SMOOTHING:
            raise ValueError(f"smoothing must be one of {SMOOTHING}")
        self.dataset = dataset
        self.smoothing = smoothing
        self.dim = dataset.dim

    def _draw(self, k, rng):
        snap = self.dataset.snapshots[k]
        return snap[rng.integers(0, snap.shape[0])]

    def sample(self, t, n, rng):
        t = _times(t, n)
        ts = self.dataset.times
        if np.any(t < ts[0]) or np.any(t > ts[-1]):
            raise ValueError(f"time outside the snapshot range [{ts[0]}, {ts[-1]}]")
        k = np.clip(np.searchsorted(ts, t, side="right") - 1, 0, ts.size - 2)
        lam = (t - ts[k]) / (ts[k + 1] - ts[k])
        snaps = self.dataset.snapshots
        out = np.empty((n, self.dim))
        for kk in np.unique(k):
            sel = np.nonzero(k == kk)[0]
            a = snaps[kk][rng.integers(0, snaps[kk].shape[0], sel.size)]
            b = snaps[kk + 1][rng.integers(0, snaps[kk + 1].shape[0], sel.size)]
            l = lam[sel][:, None]
            if self.smoothing == "blend":
                out[sel] = (1 - l) * a + l * b
            elif self.smoothing == "mixture":
                pick_b = rng.random(sel.size)[:, None] < l
                out[sel] = np.where(pick_b, b, a)
            else:
                out[sel] = np.where(l >= 1.0, b, a)
        return out


def snapshot_path(dataset: SnapshotDataset, smoothing: str = "blend") -> SnapshotPath:
    return SnapshotPath(dataset, smoothing)


def load_snapshots(file) -> SnapshotDataset:
    """Read the snapshot CSV (header ``t,x0,...``) and rescale times to [0, 1]."""
    with open(file, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError("empty snapshot file")
    header = [h.strip() for h in rows[0]]
    expected = ["t"] + [f"x{i}" for i in range(len(header) - 1)]
    if len(header) < 2 or header != expected:
        raise ValueError("missing or malformed header; expected 't,x0,...,x{d-1}'")
    width = len(header)
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise ValueError(f"row {lineno}: expected {width} cells, got {len(row)} (ragged row)")
        try:
            data.append([float(c) for c in row])
        except ValueError:
            raise ValueError(f"row {lineno}: non-numeric cell") from None
    arr = np.asarray(data, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no data rows")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite value in snapshot file")
    raw = np.unique(arr[:, 0])
    if raw.size < 2:
        raise ValueError("snapshot data needs at least 2 timestamps")
    lo, hi = raw[0], raw[-1]
    snaps = [arr[arr[:, 0] == r, 1:] for r in raw]
    return SnapshotDataset((raw - lo) / (hi - lo), snaps)


def write_snapshots(file, times, snapshots) -> None:
    snapshots = [np.atleast_2d(s) for s in snapshots]
    d = snapshots[0].shape[1]
    with open(file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"x{i}" for i in range(d)])
        for t, snap in zip(times, snapshots):
            for p in snap:
                w.writerow([repr(float(t))] + [repr(float(v)) for v in p])
