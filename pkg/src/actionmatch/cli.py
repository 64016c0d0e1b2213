"""Experiment driver.

    actionmatch generate    --config cfg.json --out runs/x
    actionmatch train       --config cfg.json --out runs/x [--checkpoint state.json]
    actionmatch sample      --config cfg.json --out runs/x --checkpoint field.json
    actionmatch likelihood  --config cfg.json --out runs/x --checkpoint field.json
    actionmatch evaluate    --config cfg.json --out runs/x --checkpoint field.json
    actionmatch compare-ald --config cfg.json --out runs/x [--checkpoint score.json]

A config is a JSON object. Missing keys take the defaults in ``DEFAULTS``;
``"preset": name`` (or ``--preset``) starts from one of ``PRESETS`` instead.
The resolved config is echoed to ``<out>/<command>.config.json``. Wall times go
to ``<out>/<command>.timing.json`` so every other output is byte-identical
across reruns with the same config and seed. ``--checkpoint analytic`` uses
the path's closed-form drift.

Exit codes: 0 success, 2 config error, 3 numeric failure.
ACTIONMATCH_THREADS caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid
from threadpoolctl import threadpool_limits

from . import paths as P
from .dynamics import (IntegratorConfig, ParticleEnsemble, ald_sample, integrate_ode,
                       integrate_sde, integrate_weighted, log_likelihood, write_trajectory)
from .field import (MLPField, NonFiniteError, VelocityField, field_from_dict, new_mlp_field,
                    save_field)
from .metrics import mmd, wasserstein2
from .train import TrainConfig, TrainingDiverged, load_state, train

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

EVAL_TIMES = [round(k / 10, 10) for k in range(1, 11)]

DEFAULTS = {
    "seed": 0,
    "path": {"kind": "translation", "u": [2.0, 2.0], "sigma": 1.0},
    "model": {"widths": [64, 64], "activation": "tanh"},
    "train": {"iterations": 20000, "n_boundary": 256, "n_interior": 256, "lr": 1e-3,
              "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "objective": "am", "sigma": None,
              "conjugate": "quadratic", "weight_schedule": "identity",
              "adaptive_proposal": False, "n_bins": 100, "n_projections": 1,
              "growth_weight": 1.0, "eval_every": 1000, "eval_samples": 1000, "eval_times": 10},
    # kind: ode | sde | weighted
    "dynamics": {"kind": "ode", "method": "rk4", "steps_per_unit": 100, "sigma": None},
    "evaluate": {"times": EVAL_TIMES, "n_samples": 2000, "metrics": ["mmd", "w2"],
                 "null_repeats": 1},
    "generate": {"times": [0.0, 0.25, 0.5, 0.75, 1.0], "n": 1000},
    "likelihood": {"n_test": 500, "steps": 100, "points": None},
    "ald": {"M": 5, "step": "auto", "grid_steps": 100,
            "step_candidates": [1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1], "tune_samples": 500},
}

PRESETS = {
    "translation": {
        "path": {"kind": "translation", "u": [2.0, 2.0], "sigma": 1.0},
    },
    "eam_drift": {
        "path": {"kind": "drifting_gaussian", "u": [1.0], "var0": 1.0, "var_rate": 1.0},
        "train": {"objective": "eam", "sigma": 1.0, "n_boundary": 2048, "lr": 3e-4},
        "dynamics": {"kind": "sde", "method": "euler_maruyama", "steps_per_unit": 500,
                     "sigma": 1.0},
    },
    "uam_weight_shift": {
        "path": {"kind": "weight_shift", "left_mean": -5.0, "right_mean": 5.0,
                 "alpha0": 0.2, "alpha1": 0.8},
        "train": {"objective": "uam", "iterations": 10000, "n_boundary": 1024, "lr": 3e-4},
        "dynamics": {"kind": "weighted", "method": "rk4", "steps_per_unit": 200},
    },
    "qho": {
        "path": {"kind": "qho"},
        "model": {"widths": [128, 128]},
        "train": {"n_boundary": 1024, "lr": 3e-4},
        "dynamics": {"kind": "ode", "method": "rk4", "steps_per_unit": 200},
    },
    "likelihood_interpolant": {
        "path": {"kind": "linear_interpolant", "target_mean": [3.0, 3.0]},
        "train": {"n_boundary": 1024, "lr": 3e-4},
    },
}

PATH_KEYS = {
    "translation": {"u": None, "sigma": 1.0, "x0": None},
    "drifting_gaussian": {"u": None, "var0": 1.0, "var_rate": 1.0},
    "linear_interpolant": {"target_mean": None},
    "delta_mixture": {"points": None, "gain": [1.0, 0.0], "shift": None,
                      "scale": [1.0, 0.0, 0.0]},
    "weight_shift": {"left_mean": -5.0, "right_mean": 5.0, "alpha0": 0.2, "alpha1": 0.8},
    "qho": {},
    "interpolant": {"prior_mean": None, "prior_std": 1.0, "data_mean": None,
                    "data_std": 1.0, "mask": None},
    "snapshot": {"file": None, "smoothing": "blend"},
}

# stream ids for SeedSequence([seed, id]); one per independent random source
STREAM = {"generate": 1, "eval_start": 2, "eval_ref": 3, "eval_null": 4, "sde": 5,
          "resample": 6, "likelihood": 7, "ald": 8, "ald_tune": 9, "sample": 10}


class ConfigError(ValueError):
    pass


def _rng(seed, stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAM[stream]]))


# ---------------------------------------------------------------------------
# config


def _merge(base, over, where=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(out.get(k), dict) and isinstance(v, dict) and k != "path":
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(raw: dict | None = None, preset: str | None = None, seed: int | None = None) -> dict:
    """Apply defaults, an optional preset and overrides; validate."""
    raw = dict(raw or {})
    preset = preset or raw.pop("preset", None)
    raw.pop("preset", None)
    cfg = copy.deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = _merge(cfg, PRESETS[preset])
        cfg["preset"] = preset
    unknown = set(raw) - set(DEFAULTS) - {"preset"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for k in raw:
        if k in DEFAULTS and isinstance(DEFAULTS[k], dict) and not isinstance(raw[k], dict):
            raise ConfigError(f"'{k}' must be an object")
    cfg = _merge(cfg, raw)
    if seed is not None:
        cfg["seed"] = seed
    _validate(cfg)
    return cfg


def _validate(cfg):
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    kind = cfg["path"].get("kind")
    if kind not in PATH_KEYS:
        raise ConfigError(f"unknown path kind {kind!r}; choose from {sorted(PATH_KEYS)}")
    params = {k: v for k, v in cfg["path"].items() if k != "kind"}
    extra = set(params) - set(PATH_KEYS[kind])
    if extra:
        raise ConfigError(f"path kind {kind!r} does not take {sorted(extra)}")
    full = dict(PATH_KEYS[kind])
    full.update(params)
    missing = [k for k, v in full.items() if v is None and k in ("u", "target_mean", "points",
                                                                   "prior_mean", "data_mean", "file")]
    if missing:
        raise ConfigError(f"path kind {kind!r} needs {missing}")
    cfg["path"] = {"kind": kind, **full}
    if kind == "snapshot" and not Path(full["file"]).is_file():
        raise ConfigError(f"snapshot file not found: {full['file']}")
    for section in ("train", "dynamics", "evaluate", "generate", "likelihood", "ald", "model"):
        extra = set(cfg[section]) - set(DEFAULTS[section])
        if extra:
            raise ConfigError(f"unknown keys in '{section}': {sorted(extra)}")
    try:
        train_config(cfg)
        IntegratorConfig(cfg["dynamics"]["method"], 1)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    dyn = cfg["dynamics"]
    if dyn["kind"] not in ("ode", "sde", "weighted"):
        raise ConfigError("dynamics.kind must be ode, sde or weighted")
    if dyn["kind"] == "sde" and dyn["sigma"] is None and cfg["train"]["sigma"] is None:
        raise ConfigError("sde dynamics need a diffusion scale (dynamics.sigma)")
    if dyn["steps_per_unit"] < 1:
        raise ConfigError("dynamics.steps_per_unit must be at least 1")
    ev = cfg["evaluate"]
    if not ev["times"] or any(not 0 < t <= 1 for t in ev["times"]):
        raise ConfigError("evaluation times must lie in (0, 1]")
    if list(ev["times"]) != sorted(ev["times"]):
        raise ConfigError("evaluation times must be increasing")
    if set(ev["metrics"]) - {"mmd", "w2"}:
        raise ConfigError("evaluate.metrics may contain 'mmd' and 'w2'")
    if ev["n_samples"] < 2 or ev["null_repeats"] < 1:
        raise ConfigError("evaluate needs n_samples >= 2 and null_repeats >= 1")
    gen = cfg["generate"]
    if gen["n"] < 1 or any(not 0 <= t <= 1 for t in gen["times"]):
        raise ConfigError("generate needs n >= 1 and times in [0, 1]")
    ald = cfg["ald"]
    if ald["M"] < 0 or ald["grid_steps"] < 1:
        raise ConfigError("ald needs M >= 0 and grid_steps >= 1")
    if ald["step"] != "auto" and not (isinstance(ald["step"], (int, float)) and ald["step"] > 0):
        raise ConfigError("ald.step must be 'auto' or a positive number")
    for t in ev["times"]:
        if abs(t * ald["grid_steps"] - round(t * ald["grid_steps"])) > 1e-9:
            raise ConfigError("every evaluation time must lie on the ALD time grid")


def load_config(file, preset=None, seed=None) -> dict:
    raw = {}
    if file is not None:
        try:
            raw = json.loads(Path(file).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {file}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    return resolve_config(raw, preset, seed)


def train_config(cfg) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


def build_path(spec: dict) -> P.MarginalPath:
    kind = spec["kind"]
    try:
        if kind == "translation":
            return P.translation_path(spec["u"], spec["sigma"], spec["x0"])
        if kind == "drifting_gaussian":
            return P.drifting_gaussian_path(spec["u"], spec["var0"], spec["var_rate"])
        if kind == "linear_interpolant":
            return P.linear_gaussian_interpolant_path(spec["target_mean"])
        if kind == "delta_mixture":
            pts = np.atleast_2d(np.asarray(spec["points"], dtype=np.float64))
            d = pts.shape[1]
            tr = P.translation(np.zeros(d) if spec["shift"] is None else spec["shift"])
            mean = P.AffineMean(P.Curve.affine(*spec["gain"]), tr.shift, tr.shift_dot, tr.shift_ddot)
            return P.delta_mixture_path(pts, mean, P.Curve.sqrt_quadratic(*spec["scale"]))
        if kind == "weight_shift":
            return P.weight_shift_path(spec["left_mean"], spec["right_mean"],
                                       spec["alpha0"], spec["alpha1"])
        if kind == "qho":
            return P.qho_superposition_path()
        if kind == "interpolant":
            return P.interpolant_path(P.gaussian_sampler(spec["prior_mean"], spec["prior_std"]),
                                      P.gaussian_sampler(spec["data_mean"], spec["data_std"]),
                                      spec["mask"])
        return P.snapshot_path(P.load_snapshots(spec["file"]), spec["smoothing"])
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"bad parameters for path kind {kind!r}: {exc}") from None


def path_metadata(path) -> dict:
    meta = {"kind": type(path).__name__, "dim": int(path.dim),
            "analytic": sorted(h for h in ("density", "score", "velocity", "true_action_grad")
                               if path.provides(h))}
    if isinstance(path, P.QHOSuperpositionPath):
        # density = exp(-x^2) P(x, tau) / Z with Z = 2 sqrt(pi); check numerically on a grid
        grid = np.linspace(-12.0, 12.0, 24001)
        mass = [float(trapezoid(path.density(t, grid[:, None]), grid)) for t in (0.0, 0.25, 0.5)]
        meta["normalization"] = {"constant": 2.0 * math.sqrt(math.pi),
                                 "numerical_mass": mass,
                                 "envelope_variance": path.envelope_var,
                                 "envelope_bound": path.envelope_bound,
                                 "beat_period": 2.0 * math.pi}
    return meta


# ---------------------------------------------------------------------------
# output helpers


def _prepare_out(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory is not writable: {out} ({exc})") from None
    return out


def _finite_tree(obj, where="output"):
    if isinstance(obj, float) and not math.isfinite(obj):
        raise NonFiniteError(where)
    if isinstance(obj, dict):
        for k, v in obj.items():
            _finite_tree(v, f"{where}.{k}")
    if isinstance(obj, (list, tuple)):
        for v in obj:
            _finite_tree(v, where)


def _write_json(file, obj):
    _finite_tree(obj, Path(file).name)
    Path(file).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_jsonl(file, records):
    _finite_tree(records, Path(file).name)
    with open(file, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _write_csv(file, header, rows):
    _finite_tree([v for r in rows for v in r if isinstance(v, float)], Path(file).name)
    with open(file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


# ---------------------------------------------------------------------------
# fields and dynamics


def load_checkpoint(ref, cfg, path):
    """A trained field file (or training state), or 'analytic'."""
    if ref is None:
        raise ConfigError("this command needs --checkpoint")
    if ref == "analytic":
        return analytic_field(cfg, path)
    try:
        data = json.loads(Path(ref).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {ref}") from None
    except json.JSONDecodeError:
        raise ConfigError(f"checkpoint is not valid JSON: {ref}") from None
    try:
        if data.get("format") == "actionmatch.train_state/1":
            field = load_state(ref).field
        else:
            field = field_from_dict(data)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint {ref}: {exc}") from None
    if field.dim != path.dim:
        raise ConfigError(f"checkpoint dimension {field.dim} does not match path dimension {path.dim}")
    return field


def analytic_field(cfg, path):
    kind = cfg["dynamics"]["kind"]
    try:
        if kind == "sde":
            sig = _dyn_sigma(cfg)
            return VelocityField(path.dim, lambda t, x: path.entropic_drift(t, x, sig))
        if kind == "weighted":
            raise P.AnalyticUnavailable("no closed-form unbalanced action")
        return path.true_action()
    except P.AnalyticUnavailable as exc:
        raise ConfigError(f"--checkpoint analytic unavailable: {exc}") from None


def _dyn_sigma(cfg):
    s = cfg["dynamics"]["sigma"]
    return float(cfg["train"]["sigma"] if s is None else s)


def push(field, cfg, x0, times, rng=None):
    """Move an ensemble drawn at t=0 through the configured dynamics, returning
    the ensemble at each requested time."""
    dyn = cfg["dynamics"]
    ens = ParticleEnsemble(0.0, x0, np.zeros(x0.shape[0]) if dyn["kind"] == "weighted" else None)
    out, t = [], 0.0
    for tt in times:
        steps = max(1, int(round((tt - t) * dyn["steps_per_unit"])))
        if tt > t:
            if dyn["kind"] == "ode":
                ens = integrate_ode(field, ens, t, tt, IntegratorConfig(dyn["method"], steps))
            elif dyn["kind"] == "weighted":
                ens = integrate_weighted(field, ens, t, tt, IntegratorConfig(dyn["method"], steps))
            else:
                ens = integrate_sde(field, ens, t, tt, _dyn_sigma(cfg),
                                    IntegratorConfig("euler_maruyama", steps), rng)
        out.append(ens)
        t = tt
    return out


def _resample(ens, rng):
    """Equal-weight particles from a weighted ensemble (systematic resampling)."""
    if ens.log_weights is None:
        return ens.positions
    w = np.exp(ens.log_weights - ens.log_weights.max())
    c = np.cumsum(w / w.sum())
    c[-1] = 1.0
    n = w.size
    idx = np.searchsorted(c, (np.arange(n) + rng.random()) / n)
    return ens.positions[idx]


def _sample_metrics(method, t, X, ref, null_refs, metrics, extra=None):
    recs = []
    n = X.shape[0]
    if "mmd" in metrics:
        recs.append({"method": method, "t": t, "metric": "mmd", "value": mmd(X, ref), "n": n})
        null = float(np.mean([mmd(Y, ref) for Y in null_refs]))
        recs.append({"method": method, "t": t, "metric": "mmd_null", "value": null, "n": n})
    if "w2" in metrics:
        recs.append({"method": method, "t": t, "metric": "w2", "value": wasserstein2(X, ref), "n": n})
        null = float(np.mean([wasserstein2(Y, ref) for Y in null_refs]))
        recs.append({"method": method, "t": t, "metric": "w2_null", "value": null, "n": n})
    for name, v in (extra or {}).items():
        recs.append({"method": method, "t": t, "metric": name, "value": float(v), "n": n})
    return recs


def _references(path, cfg, times):
    ev = cfg["evaluate"]
    n = ev["n_samples"]
    ref_rng, null_rng = _rng(cfg["seed"], "eval_ref"), _rng(cfg["seed"], "eval_null")
    refs = [path.sample(t, n, ref_rng) for t in times]
    nulls = [[path.sample(t, n, null_rng) for _ in range(ev["null_repeats"])] for t in times]
    return refs, nulls


CORE_METRICS = ("mmd", "mmd_null", "w2", "w2_null")
KERNEL_META = {"family": "rbf", "bandwidth": "median pairwise distance of the pooled sample"}


def summarize(records, times):
    """Per-time table and averages over evaluation times for each metric."""
    names = sorted({r["metric"] for r in records if r["t"] is not None})
    table = {t: {} for t in times}
    for r in records:
        if r["t"] is not None:
            table[r["t"]][r["metric"]] = r["value"]
    avg = {f"avg_{m}": float(np.mean([table[t][m] for t in times])) for m in names}
    return names, table, avg


def _emit_metrics(out, prefix, method, records, times, method_params):
    """Write the metrics stream and summaries. The CSV and the top-level
    summary keys hold only the core metrics, so files from different methods
    share one schema; method-specific diagnostics go under ``extra``."""
    names, table, avg = summarize(records, times)
    for k, v in avg.items():
        records.append({"method": method, "t": None, "metric": k, "value": v,
                        "n": records[0]["n"]})
    _write_jsonl(out / f"{prefix}_metrics.jsonl", records)
    core = [m for m in CORE_METRICS if m in names]
    _write_csv(out / f"{prefix}_summary.csv", ["t"] + core,
               [[t] + [table[t][m] for m in core] for t in times])
    summary = {"method": method, "times": list(times), "n": records[0]["n"],
               "kernel": KERNEL_META, "method_params": method_params,
               **{f"avg_{m}": avg[f"avg_{m}"] for m in core},
               "extra": {k: v for k, v in avg.items() if k[4:] not in core}}
    if "avg_mmd" in avg and "avg_mmd_null" in avg:
        summary["mmd_ratio"] = avg["avg_mmd"] / avg["avg_mmd_null"]
    _write_json(out / f"{prefix}_summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg, out, args):
    path = build_path(cfg["path"])
    gen = cfg["generate"]
    rng = _rng(cfg["seed"], "generate")
    snaps = [path.sample(t, gen["n"], rng) for t in gen["times"]]
    P.write_snapshots(out / "snapshots.csv", gen["times"], snaps)
    _write_json(out / "path_meta.json", path_metadata(path))
    return {"rows": gen["n"] * len(gen["times"])}


def cmd_train(cfg, out, args):
    path = build_path(cfg["path"])
    tc = train_config(cfg)
    resume = None
    if args.checkpoint is not None:
        try:
            resume = load_state(args.checkpoint)
        except FileNotFoundError:
            raise ConfigError(f"checkpoint not found: {args.checkpoint}") from None
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"cannot resume from {args.checkpoint}: {exc}") from None
        field = resume.field
    else:
        m = cfg["model"]
        try:
            field = new_mlp_field(path.dim, m["widths"], m["activation"], cfg["seed"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if field.dim != path.dim:
        raise ConfigError(f"checkpoint dimension {field.dim} does not match path dimension {path.dim}")
    state_file = out / "train_state.json"
    try:
        field, report = train(field, path, tc, resume=resume, checkpoint_path=state_file)
    except TrainingDiverged as exc:
        print(f"training diverged at iteration {exc.iteration}; last good state kept in "
              f"{state_file}", file=sys.stderr)
        raise
    save_field(field, out / "field.json")
    report.to_jsonl(out / "train_report.jsonl")
    rows = [[r["iteration"], r["loss"], r["field_error"] if r["field_error"] is not None else ""]
            for r in report.records]
    _write_csv(out / "train_summary.csv", ["iteration", "loss", "field_error"], rows)
    return {"train_wall_time": report.records[-1]["wall_time"] if report.records else 0.0,
            "iterations": tc.iterations}


def cmd_sample(cfg, out, args):
    path = build_path(cfg["path"])
    field = load_checkpoint(args.checkpoint, cfg, path)
    n = cfg["evaluate"]["n_samples"]
    rng = _rng(cfg["seed"], "sample")
    x0 = path.sample(0.0, n, rng)
    times = [0.0] + list(cfg["evaluate"]["times"])
    ens = push(field, cfg, x0, times, _rng(cfg["seed"], "sde"))
    write_trajectory(out / "trajectory.csv", ens)
    return {"particles": n}


def cmd_likelihood(cfg, out, args):
    path = build_path(cfg["path"])
    field = load_checkpoint(args.checkpoint, cfg, path)
    lk = cfg["likelihood"]
    if not path.provides("density"):
        raise ConfigError("likelihood needs a path with an analytic density at t=0")
    if lk["points"] is not None:
        ds = _read_points(lk["points"], path.dim)
    else:
        ds = path.sample(1.0, lk["n_test"], _rng(cfg["seed"], "likelihood"))
    if isinstance(field, VelocityField):
        raise ConfigError("likelihood needs a field with a Laplacian (not a velocity-only field)")
    ll = log_likelihood(field, ds, lambda y: path.log_density(0.0, y),
                        IntegratorConfig("rk4", lk["steps"]))
    header = [f"x{i}" for i in range(path.dim)] + ["log_likelihood"]
    analytic = path.log_density(1.0, ds) if path.provides("density") else None
    if analytic is not None:
        header += ["analytic", "abs_error"]
    rows = []
    for i in range(ds.shape[0]):
        row = [float(v) for v in ds[i]] + [float(ll[i])]
        if analytic is not None:
            row += [float(analytic[i]), float(abs(ll[i] - analytic[i]))]
        rows.append(row)
    _write_csv(out / "likelihood.csv", header, rows)
    summary = {"n": int(ds.shape[0]), "mean_log_likelihood": float(np.mean(ll)),
               "steps": lk["steps"]}
    if analytic is not None:
        summary["mean_abs_error"] = float(np.mean(np.abs(ll - analytic)))
        summary["mean_analytic"] = float(np.mean(analytic))
    _write_json(out / "likelihood_summary.json", summary)
    return {}


def _read_points(file, dim):
    try:
        with open(file, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise ConfigError(f"points file not found: {file}") from None
    if not rows or [h.strip() for h in rows[0]] != [f"x{i}" for i in range(dim)]:
        raise ConfigError(f"points file needs header x0..x{dim - 1}")
    try:
        return np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError:
        raise ConfigError("points file has a non-numeric cell") from None


def cmd_evaluate(cfg, out, args):
    path = build_path(cfg["path"])
    field = load_checkpoint(args.checkpoint, cfg, path)
    ev = cfg["evaluate"]
    times = list(ev["times"])
    x0 = path.sample(0.0, ev["n_samples"], _rng(cfg["seed"], "eval_start"))
    ens = push(field, cfg, x0, times, _rng(cfg["seed"], "sde"))
    refs, nulls = _references(path, cfg, times)
    res_rng = _rng(cfg["seed"], "resample")
    records = []
    for t, e, ref, null in zip(times, ens, refs, nulls):
        extra = {}
        if e.log_weights is not None:
            extra["total_weight"] = float(np.mean(e.weights))
        if "w2" in ev["metrics"] and hasattr(path, "transport") and e.log_weights is None \
                and cfg["dynamics"]["kind"] == "ode":
            # exact flow map of the same start points: a coupled sample of q_t
            extra["w2_coupled"] = wasserstein2(e.positions, path.transport(t, x0))
        records += _sample_metrics("am", t, _resample(e, res_rng), ref, null, ev["metrics"], extra)
    summary = _emit_metrics(out, "evaluate", "am", records, times, dict(cfg["dynamics"]))
    return {"avg_mmd": summary.get("avg_mmd")}


def _score_fn(cfg, path, checkpoint):
    if checkpoint is None:
        if not path.provides("score"):
            raise ConfigError("path has no analytic score; pass an SSM-trained --checkpoint")
        return path.score, "ald_true"
    field = load_checkpoint(checkpoint, cfg, path)
    return field.grad, "ald_ssm"


def run_ald(score, path, cfg, n, step, rng):
    ald = cfg["ald"]
    grid = [(k + 1) / ald["grid_steps"] for k in range(ald["grid_steps"])]
    x0 = path.sample(0.0, n, rng)
    ens = ald_sample(score, grid, ald["M"], step, x0, rng)
    by_time = {round(e.time, 10): e for e in ens}
    return [by_time[round(t, 10)] for t in cfg["evaluate"]["times"]]


def tune_ald_step(path, cfg):
    """Step size minimizing average MMD against the true path, using the true
    score, on a separate random stream."""
    if not path.provides("score"):
        raise ConfigError("ald.step 'auto' needs analytic scores; set a numeric step")
    ald = cfg["ald"]
    n = ald["tune_samples"]
    rng = _rng(cfg["seed"], "ald_tune")
    refs = [path.sample(t, n, rng) for t in cfg["evaluate"]["times"]]
    best = None
    for step in ald["step_candidates"]:
        try:
            ens = run_ald(path.score, path, cfg, n, step, np.random.default_rng(rng.integers(2**63)))
        except FloatingPointError:
            continue
        avg = float(np.mean([mmd(e.positions, r) for e, r in zip(ens, refs)]))
        if best is None or avg < best[1]:
            best = (step, avg)
    if best is None:
        raise NonFiniteError("ald step search", "every candidate diverged")
    return best[0]


def cmd_compare_ald(cfg, out, args):
    path = build_path(cfg["path"])
    score, method = _score_fn(cfg, path, args.checkpoint)
    ev = cfg["evaluate"]
    times = list(ev["times"])
    step = cfg["ald"]["step"]
    if step == "auto":
        step = tune_ald_step(path, cfg)
    with np.errstate(over="ignore", invalid="ignore"):
        ens = run_ald(score, path, cfg, ev["n_samples"], float(step), _rng(cfg["seed"], "ald"))
    refs, nulls = _references(path, cfg, times)
    records = []
    for t, e, ref, null in zip(times, ens, refs, nulls):
        records += _sample_metrics(method, t, e.positions, ref, null, ev["metrics"])
    summary = _emit_metrics(out, "ald", method, records, times,
                            {"M": cfg["ald"]["M"], "step": float(step),
                             "grid_steps": cfg["ald"]["grid_steps"]})
    rows = []
    am_file = out / "evaluate_summary.json"
    if am_file.is_file():
        am = json.loads(am_file.read_text(encoding="utf-8"))
        rows.append(["am", am.get("avg_mmd"), am.get("avg_mmd_null")])
    rows.append([method, summary.get("avg_mmd"), summary.get("avg_mmd_null")])
    _write_csv(out / "comparison.csv", ["method", "avg_mmd", "avg_mmd_null"], rows)
    if len(rows) == 2:
        better = "am" if rows[0][1] < rows[1][1] else method
        print(f"average MMD: am {rows[0][1]:.4g}, {method} {rows[1][1]:.4g} "
              f"(lower: {better})")
    return {"step": float(step)}


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "sample": cmd_sample,
            "likelihood": cmd_likelihood, "evaluate": cmd_evaluate,
            "compare-ald": cmd_compare_ald}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="actionmatch",
                                 description="Learn dynamics from samples of temporal marginals.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="start from a built-in config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--checkpoint", help="field or training-state file, or 'analytic'")
    return ap


def _threads():
    raw = os.environ.get("ACTIONMATCH_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("ACTIONMATCH_THREADS must be a positive integer") from None
    if n < 1:
        raise ConfigError("ACTIONMATCH_THREADS must be a positive integer")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.preset, args.seed)
        out = _prepare_out(args.out)
        threads = _threads()
        _write_json(out / f"{args.command}.config.json", cfg)
        t0 = time.perf_counter()
        with threadpool_limits(limits=threads):
            info = COMMANDS[args.command](cfg, out, args)
        timing = {"command": args.command, "wall_time": time.perf_counter() - t0, **(info or {})}
        Path(out / f"{args.command}.timing.json").write_text(
            json.dumps(timing, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
