"""Fixed-step integrators driven by an action field, and the annealed
Langevin baseline.

Random streams: the SDE and Langevin samplers draw one (n, d) standard
normal block per step from the caller's generator, in step order, so a run
is reproducible given (seed, n).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .field import ActionField, NonFiniteError

METHODS = ("euler", "rk4", "euler_maruyama")


@dataclass
class ParticleEnsemble:
    time: float
    positions: np.ndarray
    log_weights: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        if self.log_weights is not None:
            self.log_weights = np.asarray(self.log_weights, dtype=np.float64)
            if self.log_weights.shape != (self.positions.shape[0],):
                raise ValueError("one log-weight per particle required")

    @property
    def weights(self) -> np.ndarray:
        if self.log_weights is None:
            return np.ones(self.positions.shape[0])
        return np.exp(self.log_weights)


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk4"
    steps: int = 100
    direction: str | None = None  # "forward" / "backward"; inferred when None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.direction not in (None, "forward", "backward"):
            raise ValueError("direction must be 'forward' or 'backward'")


def _check_direction(config, t0, t1):
    for t in (t0, t1):
        if not 0.0 <= t <= 1.0:
            raise ValueError("integration times must lie in [0, 1]")
    if config.direction == "forward" and t1 < t0:
        raise ValueError("forward integration requested but t1 < t0")
    if config.direction == "backward" and t1 > t0:
        raise ValueError("backward integration requested but t1 > t0")


def _finite(arr, step, what="state"):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(what, f"integration step {step}")


def _rk_step(f, t, y, h, method):
    if method == "euler":
        return y + h * f(t, y)
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _odeint(f, y, t0, t1, config):
    h = (t1 - t0) / config.steps
    for i in range(config.steps):
        y = _rk_step(f, t0 + i * h, y, h, config.method)
        _finite(y, i)
    return y


def integrate_ode(field: ActionField, ensemble: ParticleEnsemble, t0: float, t1: float,
                  config: IntegratorConfig = IntegratorConfig(), conjugate=None) -> ParticleEnsemble:
    """Move particles along dx/dt = grad s (or grad c*(grad s) for a cost conjugate)."""
    if config.method not in ("euler", "rk4"):
        raise ValueError("integrate_ode supports euler and rk4")
    _check_direction(config, t0, t1)

    def f(t, x):
        g = field.grad(np.full(x.shape[0], t), x)
        return conjugate.grad(g) if conjugate is not None else g

    x = _odeint(f, ensemble.positions.copy(), t0, t1, config)
    return ParticleEnsemble(t1, x, ensemble.log_weights)


def integrate_sde(field: ActionField, ensemble: ParticleEnsemble, t0: float, t1: float,
                  sigma_schedule, config: IntegratorConfig = IntegratorConfig("euler_maruyama", 500),
                  rng: np.random.Generator | None = None) -> ParticleEnsemble:
    """Euler-Maruyama for dx = grad s dt + sigma_t dW, forward in time only."""
    if config.direction == "backward" or t1 < t0:
        raise ValueError("stochastic integration is forward-only")
    _check_direction(config, t0, t1)
    if config.method not in ("euler", "euler_maruyama"):
        raise ValueError("integrate_sde uses Euler-Maruyama")
    if rng is None:
        raise ValueError("integrate_sde needs an explicit random generator")
    sigma = sigma_schedule if callable(sigma_schedule) else (lambda t, c=float(sigma_schedule): c)
    x = ensemble.positions.copy()
    n, d = x.shape
    h = (t1 - t0) / config.steps
    sq = np.sqrt(h)
    for i in range(config.steps):
        t = t0 + i * h
        x = x + h * field.grad(np.full(n, t), x)
        sig = float(sigma(t))
        if sig < 0:
            raise ValueError("diffusion scale must be nonnegative")
        if sig != 0.0:
            x = x + (sig * sq) * rng.standard_normal((n, d))
        _finite(x, i)
    return ParticleEnsemble(t1, x, ensemble.log_weights)


def integrate_weighted(field: ActionField, ensemble: ParticleEnsemble, t0: float, t1: float,
                       config: IntegratorConfig = IntegratorConfig()) -> ParticleEnsemble:
    """Positions follow grad s while log-weights grow at rate s."""
    if ensemble.log_weights is None:
        raise ValueError("weighted integration needs log-weights on the ensemble")
    if config.method not in ("euler", "rk4"):
        raise ValueError("integrate_weighted supports euler and rk4")
    _check_direction(config, t0, t1)
    n, d = ensemble.positions.shape

    def f(t, y):
        jet = field.jet(np.full(n, t), y[:, :d], order=1)
        return np.concatenate([jet.spatial_grad, jet.value[:, None]], axis=1)

    y = np.concatenate([ensemble.positions, ensemble.log_weights[:, None]], axis=1)
    y = _odeint(f, y, t0, t1, config)
    return ParticleEnsemble(t1, y[:, :d], y[:, d])


def log_likelihood(field: ActionField, x, base_log_density: Callable,
                   config: IntegratorConfig = IntegratorConfig()) -> np.ndarray:
    """log q_1(x) = log q_0(x(0)) - int_0^1 Laplacian s(x(t)) dt, with x(t)
    integrated backward from x(1) = x."""
    if config.method not in ("euler", "rk4"):
        raise ValueError("log_likelihood supports euler and rk4")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape

    def f(t, y):
        jet = field.jet(np.full(n, t), y[:, :d], order=2)
        return np.concatenate([jet.spatial_grad, jet.laplacian[:, None]], axis=1)

    y = np.concatenate([x, np.zeros((n, 1))], axis=1)
    y = _odeint(f, y, 1.0, 0.0, config)
    # the accumulator integrates d(acc)/dt = Laplacian from 1 down to 0: acc(0) = -int Laplacian
    out = np.asarray(base_log_density(y[:, :d]), dtype=np.float64) + y[:, d]
    _finite(out, config.steps, "log-likelihood")
    return out


def ald_sample(score: Callable, path_times: Sequence[float], M: int = 5, step: float = 0.01,
               initial=None, rng: np.random.Generator | None = None) -> list[ParticleEnsemble]:
    """Annealed Langevin dynamics: for each time run M steps of
    x <- x + step/2 * score(t, x) + sqrt(step) * noise and record the ensemble."""
    if M < 0:
        raise ValueError("M must be nonnegative")
    if step <= 0:
        raise ValueError("step must be positive")
    if rng is None:
        raise ValueError("ald_sample needs an explicit random generator")
    x = np.atleast_2d(np.asarray(initial, dtype=np.float64)).copy()
    n, d = x.shape
    out = []
    sq = np.sqrt(step)
    for i, t in enumerate(path_times):
        for _ in range(M):
            x = x + 0.5 * step * score(np.full(n, float(t)), x) + sq * rng.standard_normal((n, d))
        _finite(x, i)
        out.append(ParticleEnsemble(float(t), x.copy()))
    return out


def write_trajectory(file, ensembles: Sequence[ParticleEnsemble]) -> None:
    """CSV with header t,particle,x0,...[,log_w]; one row per particle per time."""
    d = ensembles[0].positions.shape[1]
    weighted = ensembles[0].log_weights is not None
    with open(file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "particle"] + [f"x{i}" for i in range(d)] + (["log_w"] if weighted else []))
        for ens in ensembles:
            for i, p in enumerate(ens.positions):
                row = [repr(float(ens.time)), i] + [repr(float(v)) for v in p]
                if weighted:
                    row.append(repr(float(ens.log_weights[i])))
                w.writerow(row)
