"""Training loop: seeded batches, Adam updates, checkpoints, diagnostics.

Each iteration draws its batch from ``SeedSequence([seed, iteration])`` so a
run resumed from any checkpoint replays the remaining iterations exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field, asdict
from pathlib import Path

import numpy as np

from . import objectives as obj
from .field import MLPField, field_from_dict, field_to_dict
from .metrics import field_error
from .objectives import BatchSpec, TimeProposal, WeightSchedule

OBJECTIVES = ("am", "eam", "uam", "cam", "ssm")
CONJUGATES = {"quadratic": obj.quadratic_conjugate, "quartic": obj.quartic_conjugate}
SCHEDULES = {"identity": WeightSchedule.identity,
             "endpoint_cancelling": WeightSchedule.endpoint_cancelling}


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss; carries the last good state."""

    def __init__(self, iteration, state):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.state = state


@dataclass
class TrainConfig:
    iterations: int = 20000
    n_boundary: int = 256
    n_interior: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    objective: str = "am"
    sigma: float | None = None
    conjugate: str = "quadratic"
    weight_schedule: str = "identity"
    adaptive_proposal: bool = False
    n_bins: int = 100
    n_projections: int = 1
    growth_weight: float = 1.0
    eval_every: int = 1000
    eval_samples: int = 1000
    eval_times: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.objective == "eam" and self.sigma is None:
            raise ValueError("the eam objective needs a diffusion scale 'sigma'")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.conjugate not in CONJUGATES:
            raise ValueError(f"conjugate must be one of {tuple(CONJUGATES)}")
        if self.weight_schedule not in SCHEDULES:
            raise ValueError(f"weight_schedule must be one of {tuple(SCHEDULES)}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def zeros(n: int) -> "AdamState":
        return AdamState(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grad, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new (params, state)."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes must agree")
    step = state.step + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    mhat = m / (1 - beta1 ** step)
    vhat = v / (1 - beta2 ** step)
    return params - lr * mhat / (np.sqrt(vhat) + eps), AdamState(m, v, step)


@dataclass
class TrainReport:
    records: list = dc_field(default_factory=list)

    def append(self, rec: dict):
        if self.records and rec["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("report iterations must increase")
        self.records.append(rec)

    def losses(self):
        return [r["loss"] for r in self.records]

    def to_jsonl(self, path, include_time: bool = False):
        with open(path, "w") as fh:
            for r in self.records:
                r = dict(r) if include_time else {k: v for k, v in r.items() if k != "wall_time"}
                fh.write(json.dumps(r, sort_keys=True) + "\n")


@dataclass
class TrainState:
    field: MLPField
    adam: AdamState
    proposal: TimeProposal | None
    iteration: int = 0
    report: TrainReport = dc_field(default_factory=TrainReport)


def _hex(a):
    return [float(v).hex() for v in np.asarray(a).ravel()]


def _unhex(a):
    return np.array([float.fromhex(v) for v in a], dtype=np.float64)


def save_state(state: TrainState, path) -> None:
    prop = None
    if state.proposal is not None:
        p = state.proposal
        prop = {"masses": _hex(p.masses), "stds": _hex(p.stds),
                "seen": [bool(s) for s in p.seen], "decay": p.decay}
    data = {
        "format": "actionmatch.train_state/1",
        "field": field_to_dict(state.field),
        "adam": {"m": _hex(state.adam.m), "v": _hex(state.adam.v), "step": state.adam.step},
        "proposal": prop,
        "iteration": state.iteration,
        # wall times stay out so checkpoints are byte-identical across reruns
        "report": [{k: v for k, v in r.items() if k != "wall_time"} for r in state.report.records],
    }
    Path(path).write_text(json.dumps(data))


def load_state(path) -> TrainState:
    data = json.loads(Path(path).read_text())
    if data.get("format") != "actionmatch.train_state/1":
        raise ValueError("not a training checkpoint")
    prop = None
    if data["proposal"] is not None:
        p = data["proposal"]
        prop = TimeProposal(_unhex(p["masses"]), _unhex(p["stds"]),
                            np.array(p["seen"], dtype=bool), p["decay"])
    a = data["adam"]
    return TrainState(field_from_dict(data["field"]),
                      AdamState(_unhex(a["m"]), _unhex(a["v"]), a["step"]),
                      prop, data["iteration"], TrainReport(data["report"]))


def batch_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1, np.uint64)[0])


def make_objective(config: TrainConfig):
    """Map a config onto a callable (field, path, batch, proposal) -> LossEstimate."""
    kind = config.objective
    schedule = SCHEDULES[config.weight_schedule]()
    if kind == "am":
        return lambda f, p, b, q: obj.am_loss(f, p, b, schedule, q)
    if kind == "eam":
        return lambda f, p, b, q: obj.eam_loss(f, p, b, config.sigma, schedule, q)
    if kind == "uam":
        return lambda f, p, b, q: obj.uam_loss(f, p, b, config.growth_weight, q)
    if kind == "cam":
        conj = CONJUGATES[config.conjugate]()
        return lambda f, p, b, q: obj.cam_loss(f, p, b, conj, schedule, q)
    return lambda f, p, b, q: obj.ssm_loss(f, p, b, config.n_projections)


def _diagnostic_error(field, path, config):
    if not path.provides("true_action_grad"):
        return None
    if config.objective not in ("am", "cam") or (config.objective == "cam"
                                                 and config.conjugate != "quadratic"):
        return None
    rng = np.random.default_rng(batch_seed(config.seed, 2**31))
    try:
        return field_error(field, path, config.eval_times, config.eval_samples, rng)
    except ValueError:  # static path: relative error undefined
        return None


def train(field: MLPField, path, config: TrainConfig, *, resume: TrainState | None = None,
          checkpoint_path=None, callback=None) -> tuple[MLPField, TrainReport]:
    """Minimize the configured objective with Adam.

    With ``checkpoint_path`` the full training state is written at every
    evaluation. A non-finite loss raises :class:`TrainingDiverged` holding the
    last good state (also left on disk when checkpointing).
    """
    if field.dim != path.dim:
        raise ValueError(f"field dimension {field.dim} does not match path dimension {path.dim}")
    loss_fn = make_objective(config)
    if resume is not None:
        state = resume
    else:
        proposal = TimeProposal.uniform(config.n_bins) if config.adaptive_proposal else None
        state = TrainState(field, AdamState.zeros(field.n_params), proposal)
    t_start = time.perf_counter()
    params = state.field.params
    cur = state.field
    while state.iteration < config.iterations:
        it = state.iteration
        batch = BatchSpec(config.n_boundary, config.n_interior, batch_seed(config.seed, it))
        try:
            est = loss_fn(cur, path, batch, state.proposal)
            bad = not (np.isfinite(est.value) and np.all(np.isfinite(est.grad)))
        except FloatingPointError:
            bad = True
        if bad:
            raise TrainingDiverged(it, state)
        params, adam = adam_step(params, est.grad, state.adam, config.lr, config.beta1,
                                 config.beta2, config.eps)
        cur = cur.with_params(params)
        proposal = est.proposal if config.adaptive_proposal else state.proposal
        state = TrainState(cur, adam, proposal, it + 1, state.report)
        if (it + 1) % config.eval_every == 0 or it + 1 == config.iterations:
            rec = {"iteration": it + 1, "loss": est.value,
                   "terms": {k: float(v) for k, v in est.terms.items()},
                   "field_error": _diagnostic_error(cur, path, config),
                   "wall_time": time.perf_counter() - t_start}
            state.report.append(rec)
            if checkpoint_path is not None:
                save_state(state, checkpoint_path)
            if callback is not None:
                callback(state, rec)
    return state.field, state.report
