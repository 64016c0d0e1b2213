"""Monte-Carlo estimators of the action-matching family of objectives.

All estimators share one skeleton

    w(0) E[s_0] - w(1) E[s_1]
      + E_{t~p} 1/p(t) E_{q_t}[ w(t) (K(grad s) + ds/dt + extra) + s dw/dt ]

where K is 1/2 |.|^2 (or a convex conjugate c*), and ``extra`` is the
entropic Laplacian term or the unbalanced growth term. Each call returns the
value, its exact parameter gradient on the sampled batch, and the signed
sub-terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace
from typing import Callable

import numpy as np

from .field import ActionField, FieldJet, NonFiniteError
from .paths import MarginalPath, AnalyticUnavailable

TERM_SIGNS = {
    "boundary_0": 1.0,
    "boundary_1": -1.0,
    "kinetic": 1.0,
    "time_deriv": 1.0,
    "laplacian": 1.0,
    "growth": 1.0,
    "weight_deriv": 1.0,
}


@dataclass(frozen=True)
class BatchSpec:
    n_boundary: int = 256
    n_interior: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.n_boundary < 1 or self.n_interior < 1:
            raise ValueError("batch sizes must be at least 1")


@dataclass(frozen=True)
class WeightSchedule:
    """Time reweighting w(t) >= 0 with derivative."""

    value: Callable
    deriv: Callable
    name: str = "custom"

    @staticmethod
    def identity() -> "WeightSchedule":
        return WeightSchedule(np.ones_like, np.zeros_like, "identity")

    @staticmethod
    def endpoint_cancelling() -> "WeightSchedule":
        """(1 - t) t^{3/2}: vanishes at both ends, cancelling velocity blow-up
        for paths with sigma_t = sqrt(t), f_t(x) = x sqrt(1 - t)."""
        return WeightSchedule(
            lambda t: (1 - t) * t ** 1.5,
            lambda t: -t ** 1.5 + 1.5 * (1 - t) * np.sqrt(t),
            "endpoint_cancelling")

    @property
    def is_identity(self) -> bool:
        return self.name == "identity"


# ---------------------------------------------------------------------------
# Time proposal


@dataclass(frozen=True)
class TimeProposal:
    """Piecewise-constant proposal over B equal bins of [0, 1].

    Bin masses follow an exponential moving average of the per-bin standard
    deviation of the interior integrand.
    """

    masses: np.ndarray
    stds: np.ndarray
    seen: np.ndarray
    decay: float = 0.99
    eps_std: float = 1e-8

    @staticmethod
    def uniform(n_bins: int = 100, decay: float = 0.99) -> "TimeProposal":
        return TimeProposal(np.full(n_bins, 1.0 / n_bins), np.zeros(n_bins),
                            np.zeros(n_bins, dtype=bool), decay)

    @staticmethod
    def from_stds(stds, decay: float = 0.99) -> "TimeProposal":
        stds = np.asarray(stds, dtype=np.float64)
        seen = np.ones(stds.size, dtype=bool)
        return TimeProposal(_masses_from_stds(stds, seen, 1e-8), stds, seen, decay)

    @property
    def n_bins(self) -> int:
        return self.masses.size

    @property
    def eps_p(self) -> float:
        return 1e-3 / self.n_bins

    def density(self, t) -> np.ndarray:
        b = self.bin_of(t)
        return self.masses[b] * self.n_bins

    def bin_of(self, t) -> np.ndarray:
        return np.clip((np.asarray(t) * self.n_bins).astype(int), 0, self.n_bins - 1)

    def sample(self, n: int, rng: np.random.Generator):
        """Stratified draw: n evenly spaced quantiles with one shared random
        offset, mapped through the inverse CDF. Returns (t, 1/p(t), bins)."""
        u = (np.arange(n) + rng.random()) / n
        cdf = np.concatenate([[0.0], np.cumsum(self.masses)])
        cdf[-1] = 1.0
        b = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, self.n_bins - 1)
        frac = (u - cdf[b]) / self.masses[b]
        t = (b + np.clip(frac, 0.0, 1.0)) / self.n_bins
        return t, 1.0 / (self.masses[b] * self.n_bins), b


def _masses_from_stds(stds, seen, eps_std):
    B = stds.size
    if not np.any(seen):
        return np.full(B, 1.0 / B)
    s = np.where(seen, np.maximum(stds, eps_std), np.max(np.maximum(stds[seen], eps_std)))
    raw = s / s.sum()
    eps_p = 1e-3 / B
    floored = np.zeros(B, dtype=bool)
    while True:
        free = ~floored
        m = np.where(floored, eps_p, raw * (1 - eps_p * floored.sum()) / raw[free].sum())
        new = free & (m < eps_p)
        if not new.any():
            return m
        floored |= new


def update_time_proposal(proposal: TimeProposal, bin_observations) -> TimeProposal:
    """Fold one batch of (bin index, integrand value) observations into the
    EMA standard deviations and recompute the masses.

    Bins with fewer than two observations keep their previous statistic.
    """
    bins, values = bin_observations
    bins = np.asarray(bins, dtype=int)
    values = np.asarray(values, dtype=np.float64)
    B = proposal.n_bins
    cnt = np.bincount(bins, minlength=B)
    s1 = np.bincount(bins, weights=values, minlength=B)
    s2 = np.bincount(bins, weights=values * values, minlength=B)
    ok = cnt >= 2
    var = np.zeros(B)
    var[ok] = np.maximum(s2[ok] - s1[ok] ** 2 / cnt[ok], 0.0) / (cnt[ok] - 1)
    obs = np.sqrt(var)
    lam = proposal.decay
    stds = proposal.stds.copy()
    first = ok & ~proposal.seen
    again = ok & proposal.seen
    stds[first] = obs[first]
    stds[again] = lam * stds[again] + (1 - lam) * obs[again]
    seen = proposal.seen | ok
    return replace(proposal, stds=stds, seen=seen,
                   masses=_masses_from_stds(stds, seen, proposal.eps_std))


# ---------------------------------------------------------------------------
# Batches and estimates


@dataclass
class DrawnBatch:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    xt: np.ndarray
    inv_p: np.ndarray
    bins: np.ndarray


def draw_batch(path: MarginalPath, batch: BatchSpec,
               proposal: TimeProposal | None = None) -> DrawnBatch:
    """Boundary samples, then interior times and samples, from one seeded stream."""
    rng = np.random.default_rng(batch.seed)
    x0 = path.sample(0.0, batch.n_boundary, rng)
    x1 = path.sample(1.0, batch.n_boundary, rng)
    if proposal is None:
        proposal = TimeProposal.uniform()
    t, inv_p, bins = proposal.sample(batch.n_interior, rng)
    xt = path.sample(t, batch.n_interior, rng)
    return DrawnBatch(x0, x1, t, xt, inv_p, bins)


@dataclass
class LossEstimate:
    value: float
    grad: np.ndarray
    terms: dict
    stderr: float = float("nan")
    proposal: TimeProposal | None = None
    observations: tuple | None = dc_field(default=None, repr=False)

    def signed_sum(self) -> float:
        return float(sum(TERM_SIGNS.get(k, 1.0) * v for k, v in self.terms.items()))


@dataclass(frozen=True)
class Conjugate:
    """Convex conjugate c* of a transport cost, with its gradient."""

    value: Callable  # (N, d) -> (N,)
    grad: Callable  # (N, d) -> (N, d)
    name: str = "custom"


def quadratic_conjugate() -> Conjugate:
    return Conjugate(lambda y: 0.5 * np.sum(y * y, axis=1), lambda y: y, "quadratic")


def quartic_conjugate() -> Conjugate:
    """c*(y) = |y|^4 / 4"""
    def value(y):
        sq = np.sum(y * y, axis=1)
        return 0.25 * sq * sq

    return Conjugate(value, lambda y: np.sum(y * y, axis=1)[:, None] * y, "quartic")


def _check_finite(batch: DrawnBatch, arrays: dict):
    for name, arr in arrays.items():
        if arr is None:
            continue
        bad = ~np.isfinite(arr)
        if bad.ndim > 1:
            bad = bad.any(axis=tuple(range(1, bad.ndim)))
        if bad.any():
            i = int(np.argmax(bad))
            raise NonFiniteError(name, f"time bin {int(batch.bins[i])}, t={batch.t[i]:.4f}")


def _action_objective(field: ActionField, path: MarginalPath, batch, *,
                      schedule: WeightSchedule | None = None,
                      proposal: TimeProposal | None = None,
                      conjugate: Conjugate | None = None,
                      sigma: Callable | None = None,
                      growth_weight: float = 0.0,
                      compute_grad: bool = True) -> LossEstimate:
    if field.dim != path.dim:
        raise ValueError(f"field dimension {field.dim} does not match path dimension {path.dim}")
    if isinstance(batch, BatchSpec):
        batch = draw_batch(path, batch, proposal)
    schedule = schedule or WeightSchedule.identity()
    kin = conjugate or quadratic_conjugate()
    nb, ni = batch.x0.shape[0], batch.xt.shape[0]
    order = 2 if sigma is not None else 1

    if compute_grad:
        j0, back0 = field.jet_vjp(np.zeros(nb), batch.x0, 0)
        j1, back1 = field.jet_vjp(np.ones(nb), batch.x1, 0)
        jt, backt = field.jet_vjp(batch.t, batch.xt, order)
    else:
        j0 = field.jet(np.zeros(nb), batch.x0, 0)
        j1 = field.jet(np.ones(nb), batch.x1, 0)
        jt = field.jet(batch.t, batch.xt, order)
    _check_finite(batch, {"value": jt.value, "spatial_grad": jt.spatial_grad,
                          "time_deriv": jt.time_deriv, "laplacian": jt.laplacian})

    w0 = float(schedule.value(np.array(0.0)))
    w1 = float(schedule.value(np.array(1.0)))
    wt = np.broadcast_to(schedule.value(batch.t), (ni,))
    dwt = np.broadcast_to(schedule.deriv(batch.t), (ni,))
    ip = batch.inv_p
    s = jt.value
    g = jt.spatial_grad

    k_val = kin.value(g)
    parts = {
        "kinetic": wt * k_val,
        "time_deriv": wt * jt.time_deriv,
        "weight_deriv": s * dwt,
    }
    sig2 = None
    if sigma is not None:
        sig = np.broadcast_to(np.asarray(sigma(batch.t), dtype=np.float64), (ni,))
        if np.any(sig < 0):
            raise ValueError("diffusion scale must be nonnegative")
        sig2 = sig * sig
        parts["laplacian"] = wt * 0.5 * sig2 * jt.laplacian
    if growth_weight:
        parts["growth"] = wt * growth_weight * 0.5 * s * s
    _check_finite(batch, parts)

    terms = {"boundary_0": w0 * float(np.mean(j0.value)),
             "boundary_1": w1 * float(np.mean(j1.value))}
    for k, v in parts.items():
        terms[k] = float(np.mean(ip * v))
    value = sum(TERM_SIGNS[k] * v for k, v in terms.items())

    zeta = sum(parts.values())
    var = (w0 ** 2 * np.var(j0.value) + w1 ** 2 * np.var(j1.value)) / nb + np.var(ip * zeta) / ni
    est = LossEstimate(float(value), np.zeros(field.n_params), terms, float(np.sqrt(var)),
                       observations=(batch.bins, zeta))
    if proposal is not None:
        est.proposal = update_time_proposal(proposal, (batch.bins, zeta))
    if not compute_grad:
        return est

    c_val = ip * dwt
    if growth_weight:
        c_val = c_val + ip * wt * growth_weight * s
    cot_t = FieldJet(c_val / ni, (ip * wt)[:, None] * kin.grad(g) / ni, ip * wt / ni)
    if sigma is not None:
        cot_t.laplacian = ip * wt * 0.5 * sig2 / ni
    grad = (back0(FieldJet(np.full(nb, w0 / nb)))
            + back1(FieldJet(np.full(nb, -w1 / nb)))
            + backt(cot_t))
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("parameter gradient")
    est.grad = grad
    return est


def am_loss(field, path, batch, schedule=None, proposal=None, *, compute_grad=True) -> LossEstimate:
    """Action-matching objective, optionally time-weighted and importance-sampled."""
    return _action_objective(field, path, batch, schedule=schedule, proposal=proposal,
                             compute_grad=compute_grad)


def _as_sigma(sigma_schedule):
    if sigma_schedule is None:
        raise ValueError("entropic objective needs a diffusion schedule")
    if callable(sigma_schedule):
        return sigma_schedule
    c = float(sigma_schedule)
    if c < 0:
        raise ValueError("diffusion scale must be nonnegative")
    return lambda t: np.full_like(np.asarray(t, dtype=np.float64), c)


def eam_loss(field, path, batch, sigma_schedule, schedule=None, proposal=None, *,
             compute_grad=True) -> LossEstimate:
    """Entropic objective: adds E[sigma_t^2/2 * Laplacian s]."""
    return _action_objective(field, path, batch, schedule=schedule, proposal=proposal,
                             sigma=_as_sigma(sigma_schedule), compute_grad=compute_grad)


def uam_loss(field, path, batch, growth_weight: float = 1.0, proposal=None, *,
             compute_grad=True) -> LossEstimate:
    """Unbalanced objective: adds E[s^2/2] so s doubles as the growth rate."""
    return _action_objective(field, path, batch, proposal=proposal, growth_weight=growth_weight,
                             compute_grad=compute_grad)


def cam_loss(field, path, batch, conjugate: Conjugate, schedule=None, proposal=None, *,
             compute_grad=True) -> LossEstimate:
    """Convex-cost objective: 1/2 |grad s|^2 replaced by c*(grad s)."""
    return _action_objective(field, path, batch, schedule=schedule, proposal=proposal,
                             conjugate=conjugate, compute_grad=compute_grad)


def ssm_loss(field, path, batch, n_projections: int = 1, *, compute_grad=True) -> LossEstimate:
    """Sliced score matching with Rademacher projections; the score model is
    grad_x s(t, x). Interior times are uniform on [0, 1]."""
    if n_projections < 1:
        raise ValueError("n_projections must be at least 1")
    if field.dim != path.dim:
        raise ValueError("field and path dimensions differ")
    if isinstance(batch, BatchSpec):
        rng = np.random.default_rng(batch.seed)
        n = batch.n_interior
        t, _, _ = TimeProposal.uniform().sample(n, rng)
        x = path.sample(t, n, rng)
    else:
        rng = np.random.default_rng(0)
        t, x = batch.t, batch.xt
        n = t.size
    v = rng.choice(np.array([-1.0, 1.0]), size=(n, n_projections, field.dim))
    first, second, back = field.directional_vjp(t, x, v)
    if not (np.all(np.isfinite(first)) and np.all(np.isfinite(second))):
        raise NonFiniteError("projected score")
    per = 0.5 * first * first + second
    m = first.size
    terms = {"projected_norm": float(np.mean(0.5 * first * first)),
             "projected_hessian": float(np.mean(second))}
    value = terms["projected_norm"] + terms["projected_hessian"]
    per_point = per.mean(axis=1)
    est = LossEstimate(float(value), np.zeros(field.n_params), terms,
                       float(np.std(per_point) / np.sqrt(n)))
    if compute_grad:
        est.grad = back(first / m, np.full(first.shape, 1.0 / m))
    return est


# ---------------------------------------------------------------------------
# Diagnostics against analytic truth


def _truth(path):
    if path.provides("true_action_grad"):
        return path.true_action_grad
    raise AnalyticUnavailable("path exposes no analytic action gradient")


def _grid_expectation(path, fn, n_samples, n_times, seed):
    """Midpoint rule in t of Monte-Carlo expectations in x.

    Returns (estimate, stderr) of int_0^1 E_{q_t}[fn(t, x)] dt.
    """
    rng = np.random.default_rng(seed)
    times = (np.arange(n_times) + 0.5) / n_times
    per = max(1, n_samples // n_times)
    means, variances = [], []
    for t in times:
        x = path.sample(t, per, rng)
        vals = fn(np.full(per, t), x)
        means.append(vals.mean())
        variances.append(vals.var(ddof=1) / per if per > 1 else 0.0)
    means = np.asarray(means)
    return float(means.mean()), float(np.sqrt(np.sum(variances)) / n_times)


def action_gap(field: ActionField, path: MarginalPath, n_samples: int = 200_000,
               n_times: int = 200, seed: int = 0, return_stderr: bool = False):
    """1/2 int E_{q_t} |grad s - grad s*|^2 dt on a midpoint time grid."""
    truth = _truth(path)

    def fn(t, x):
        diff = field.grad(t, x) - truth(t, x)
        return 0.5 * np.sum(diff * diff, axis=1)

    est, se = _grid_expectation(path, fn, n_samples, n_times, seed)
    return (est, se) if return_stderr else est


def kinetic_energy(path: MarginalPath, n_samples: int = 200_000, n_times: int = 200,
                   seed: int = 0, return_stderr: bool = False):
    """1/2 int E_{q_t} |grad s*|^2 dt."""
    truth = _truth(path)

    def fn(t, x):
        v = truth(t, x)
        return 0.5 * np.sum(v * v, axis=1)

    est, se = _grid_expectation(path, fn, n_samples, n_times, seed)
    return (est, se) if return_stderr else est
