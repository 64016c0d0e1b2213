"""Scalar action fields s(t, x) with exact nested derivatives.

Every field exposes the same batched interface:

    jet(t, x, order)          -> FieldJet (value, spatial_grad, time_deriv, laplacian)
    jet_vjp(t, x, order)      -> (FieldJet, backward)
    directional_vjp(t, x, v)  -> (first, second, backward)

``backward`` maps cotangents of the outputs to a gradient with respect to the
flat parameter vector. The MLP implements this with hand-written forward
tangent recurrences (first and second directional derivatives propagated
layer by layer) and a reverse sweep through those recurrences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "softplus")
_NON_SMOOTH = ("relu", "leaky_relu", "hardtanh", "abs", "elu", "relu6")

CHUNK = 65536


class NonFiniteError(FloatingPointError):
    """A non-finite number showed up in a named quantity."""

    def __init__(self, term: str, detail: str = ""):
        self.term = term
        msg = f"non-finite value in {term!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@dataclass
class FieldJet:
    """Value and derivatives of a field. Arrays are batched along axis 0
    unless produced by :func:`eval_bundle`, which returns a single point."""

    value: np.ndarray
    spatial_grad: np.ndarray | None = None
    time_deriv: np.ndarray | None = None
    laplacian: np.ndarray | None = None

    def items(self):
        for name in ("value", "spatial_grad", "time_deriv", "laplacian"):
            arr = getattr(self, name)
            if arr is not None:
                yield name, arr


Backward = Callable[[FieldJet], np.ndarray]


def _as_batch(t, x, dim: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {x.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],)).copy()
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t))):
        raise ValueError("non-finite input to field evaluation")
    return t, x


class ActionField:
    """Base class. Subclasses implement ``_jet_vjp`` and ``_directional_vjp``."""

    dim: int
    params: np.ndarray

    @property
    def n_params(self) -> int:
        return int(self.params.size)

    def with_params(self, params: np.ndarray) -> "ActionField":
        if np.asarray(params).size != 0:
            raise ValueError("this field has no trainable parameters")
        return self

    # public batched API -------------------------------------------------

    def jet(self, t, x, order: int = 2) -> FieldJet:
        t, x = _as_batch(t, x, self.dim)
        n = x.shape[0]
        if n <= CHUNK:
            return self._jet_vjp(t, x, order, need_backward=False)[0]
        parts = [self._jet_vjp(t[i:i + CHUNK], x[i:i + CHUNK], order, need_backward=False)[0]
                 for i in range(0, n, CHUNK)]
        return FieldJet(*[
            None if getattr(parts[0], k) is None else np.concatenate([getattr(p, k) for p in parts])
            for k in ("value", "spatial_grad", "time_deriv", "laplacian")
        ])

    def jet_vjp(self, t, x, order: int = 2) -> tuple[FieldJet, Backward]:
        t, x = _as_batch(t, x, self.dim)
        return self._jet_vjp(t, x, order, need_backward=True)

    def directional_vjp(self, t, x, dirs) -> tuple[np.ndarray, np.ndarray, Callable]:
        """First and second derivatives along spatial directions.

        ``dirs`` has shape (K, d) or (N, K, d). Returns ``first`` (N, K) with
        v.grad s and ``second`` (N, K) with v^T H v, plus a backward closure
        taking ``(first_bar, second_bar)``.
        """
        t, x = _as_batch(t, x, self.dim)
        dirs = np.asarray(dirs, dtype=np.float64)
        if dirs.shape[-1] != self.dim:
            raise ValueError("direction dimension mismatch")
        return self._directional_vjp(t, x, dirs)

    def value(self, t, x) -> np.ndarray:
        return self.jet(t, x, order=0).value

    def grad(self, t, x) -> np.ndarray:
        return self.jet(t, x, order=1).spatial_grad

    def __add__(self, c: float) -> "ShiftedField":
        return ShiftedField(self, float(c))

    # subclass hooks -----------------------------------------------------

    def _jet_vjp(self, t, x, order, need_backward):
        raise NotImplementedError

    def _directional_vjp(self, t, x, dirs):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# MLP field


def _activation(name: str, z: np.ndarray, k: int = 3):
    """Activation and its first ``k`` derivatives (None beyond ``k``)."""
    a2 = a3 = None
    if name == "tanh":
        a0 = np.tanh(z)
        a1 = 1.0 - a0 * a0
        if k >= 2:
            a2 = -2.0 * a0 * a1
        if k >= 3:
            a3 = -2.0 * (a1 * a1 + a0 * a2)
    elif name == "softplus":
        a0 = np.logaddexp(0.0, z)
        a1 = 0.5 * (1.0 + np.tanh(0.5 * z))
        if k >= 2:
            a2 = a1 * (1.0 - a1)
        if k >= 3:
            a3 = a2 * (1.0 - 2.0 * a1)
    else:  # pragma: no cover - guarded at construction
        raise ValueError(name)
    return a0, a1, a2, a3


def mlp_param_count(input_dim: int, hidden_widths: Sequence[int]) -> int:
    sizes = [input_dim + 1, *hidden_widths, 1]
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


class MLPField(ActionField):
    """Fully connected network over the concatenated input (x, t)."""

    def __init__(self, input_dim: int, hidden_widths: Sequence[int], activation: str,
                 seed: int, params: np.ndarray | None = None):
        self.dim = int(input_dim)
        self.hidden_widths = tuple(int(w) for w in hidden_widths)
        self.activation = activation
        self.seed = int(seed)
        sizes = [self.dim + 1, *self.hidden_widths, 1]
        self._shapes = list(zip(sizes[1:], sizes[:-1]))
        if params is None:
            params = self._init_params()
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (mlp_param_count(self.dim, self.hidden_widths),):
            raise ValueError("parameter vector has the wrong length")
        self.params = params
        self._layers = self._views(params)

    def _init_params(self) -> np.ndarray:
        rng = np.random.default_rng(np.uint64(self.seed))
        chunks = []
        for fan_out, fan_in in self._shapes:
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=fan_out * fan_in))
            chunks.append(np.zeros(fan_out))
        return np.concatenate(chunks)

    def _views(self, params):
        layers, o = [], 0
        for fan_out, fan_in in self._shapes:
            W = params[o:o + fan_out * fan_in].reshape(fan_out, fan_in)
            o += fan_out * fan_in
            b = params[o:o + fan_out]
            o += fan_out
            layers.append((W, b))
        return layers

    def with_params(self, params):
        return MLPField(self.dim, self.hidden_widths, self.activation, self.seed,
                        np.array(params, dtype=np.float64))

    def __repr__(self):
        return (f"MLPField(dim={self.dim}, widths={list(self.hidden_widths)}, "
                f"activation={self.activation!r}, seed={self.seed})")

    # core engine --------------------------------------------------------

    def _forward(self, inp, dirs, n_second):
        """Propagate value, first tangents along ``dirs`` and second tangents
        along the first ``n_second`` directions.

        dirs: None, (K, D) shared across the batch, or (N, K, D).
        Overflow yields inf/nan, which callers report as NonFiniteError.
        """
        with np.errstate(over="ignore", invalid="ignore"):
            return self._forward_impl(inp, dirs, n_second)

    def _forward_impl(self, inp, dirs, n_second):
        h, hd, hdd = inp, dirs, None
        cache = []
        for W, b in self._layers[:-1]:
            z = h @ W.T + b
            # backward needs one derivative more than the forward tangents use
            k = 1 + (hd is not None) + bool(n_second)
            a0, a1, a2, a3 = _activation(self.activation, z, k)
            entry = {"h": h, "hd": hd, "hdd": hdd, "a1": a1, "a2": a2, "a3": a3}
            hd_new = hdd_new = None
            if hd is not None:
                zd = hd @ W.T
                if zd.ndim == 2:
                    zd = np.broadcast_to(zd, (z.shape[0], *zd.shape))
                hd_new = a1[:, None, :] * zd
                entry["zd"] = zd
                if n_second:
                    zs = zd[:, :n_second]
                    hdd_new = a2[:, None, :] * zs * zs
                    zdd = None
                    if hdd is not None:
                        zdd = hdd @ W.T
                        hdd_new = hdd_new + a1[:, None, :] * zdd
                    entry["zdd"] = zdd
            cache.append(entry)
            h, hd, hdd = a0, hd_new, hdd_new
        w, c = self._layers[-1]
        value = h @ w[0] + c[0]
        first = hd @ w[0] if hd is not None else None
        second = hdd @ w[0] if hdd is not None else None
        return value, first, second, (cache, h, hd, hdd)

    def _backward(self, saved, dirs, n_second, vbar, fbar, sbar):
        cache, h, hd, hdd = saved
        grads = []
        w, _ = self._layers[-1]
        w = w[0]
        gw = vbar @ h
        hbar = vbar[:, None] * w
        hdbar = hddbar = None
        if hd is not None:
            gw = gw + np.einsum("nk,nkm->m", fbar, hd)
            hdbar = fbar[:, :, None] * w
            if hdd is not None:
                gw = gw + np.einsum("nk,nkm->m", sbar, hdd)
                hddbar = sbar[:, :, None] * w
        grads.append(np.array([vbar.sum()]))
        grads.append(gw)
        for li in range(len(cache) - 1, -1, -1):
            W, _ = self._layers[li]
            e = cache[li]
            a1, a2 = e["a1"], e["a2"]
            m = a1.shape[1]
            a1bar = 0.0
            a2bar = 0.0
            zdbar = zddbar = None
            if hdbar is not None:
                zd = e["zd"]
                a1bar = (hdbar * zd).sum(axis=1)
                zdbar = hdbar * a1[:, None, :]
                if hddbar is not None:
                    zs = zd[:, :n_second]
                    a2bar = (hddbar * zs * zs).sum(axis=1)
                    zdbar[:, :n_second] += 2.0 * a2[:, None, :] * zs * hddbar
                    if e["zdd"] is not None:
                        a1bar = a1bar + (hddbar * e["zdd"]).sum(axis=1)
                        zddbar = hddbar * a1[:, None, :]
            zbar = hbar * a1
            if hdbar is not None:
                zbar = zbar + a1bar * a2
            if hddbar is not None:
                zbar = zbar + a2bar * e["a3"]
            gW = zbar.T @ e["h"]
            gb = zbar.sum(axis=0)
            if zdbar is not None:
                hd_prev = e["hd"]
                if hd_prev.ndim == 2:
                    gW += zdbar.sum(axis=0).T @ hd_prev
                else:
                    gW += zdbar.reshape(-1, m).T @ hd_prev.reshape(-1, hd_prev.shape[-1])
            if zddbar is not None:
                hdd_prev = e["hdd"]
                gW += zddbar.reshape(-1, m).T @ hdd_prev.reshape(-1, hdd_prev.shape[-1])
            grads.append(gb)
            grads.append(gW.ravel())
            if li > 0:
                hbar = zbar @ W
                hdbar = zdbar @ W if zdbar is not None else None
                hddbar = zddbar @ W if zddbar is not None else None
        return np.concatenate(grads[::-1])

    def _jet_vjp(self, t, x, order, need_backward):
        d = self.dim
        inp = np.concatenate([x, t[:, None]], axis=1)
        dirs = np.eye(d + 1) if order >= 1 else None
        n_second = d if order >= 2 else 0
        value, first, second, saved = self._forward(inp, dirs, n_second)
        jet = FieldJet(value)
        if order >= 1:
            jet.spatial_grad = first[:, :d]
            jet.time_deriv = first[:, d]
        if order >= 2:
            jet.laplacian = second.sum(axis=1)
        if not need_backward:
            return jet, None
        n = x.shape[0]

        def backward(bar: FieldJet) -> np.ndarray:
            vbar = _cot(bar.value, (n,))
            fbar = sbar = None
            if order >= 1:
                fbar = np.concatenate([_cot(bar.spatial_grad, (n, d)),
                                       _cot(bar.time_deriv, (n,))[:, None]], axis=1)
            if order >= 2:
                sbar = np.repeat(_cot(bar.laplacian, (n,))[:, None], d, axis=1)
            return self._backward(saved, dirs, n_second, vbar, fbar, sbar)

        return jet, backward

    def _directional_vjp(self, t, x, dirs):
        n = x.shape[0]
        inp = np.concatenate([x, t[:, None]], axis=1)
        pad = np.zeros(dirs.shape[:-1] + (1,))
        full = np.concatenate([dirs, pad], axis=-1)
        k = full.shape[-2]
        _, first, second, saved = self._forward(inp, full, k)

        def backward(fbar, sbar):
            return self._backward(saved, full, k, np.zeros(n), np.asarray(fbar, float),
                                  np.asarray(sbar, float))

        return first, second, backward


def _cot(arr, shape):
    if arr is None:
        return np.zeros(shape)
    return np.broadcast_to(np.asarray(arr, dtype=np.float64), shape)


def new_mlp_field(input_dim: int, hidden_widths: Sequence[int], activation: str = "tanh",
                  seed: int = 0) -> MLPField:
    """Create an MLP action field with deterministic initialization.

    Weights are drawn uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)] using
    a PCG64 generator seeded by ``seed``; biases start at zero.
    """
    if int(input_dim) < 1:
        raise ValueError("input_dim must be at least 1")
    widths = list(hidden_widths)
    if not widths:
        raise ValueError("hidden_widths must be nonempty")
    if any(int(w) < 1 for w in widths):
        raise ValueError("hidden widths must be positive (got a zero width)")
    if activation not in ACTIVATIONS:
        if activation in _NON_SMOOTH:
            raise ValueError(
                f"activation {activation!r} is not twice differentiable; the Laplacian of a "
                "piecewise-linear network vanishes almost everywhere. Use one of "
                f"{ACTIVATIONS}.")
        raise ValueError(f"unknown activation {activation!r}; choose from {ACTIVATIONS}")
    if not 0 <= int(seed) < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return MLPField(input_dim, widths, activation, seed)


# ---------------------------------------------------------------------------
# Closed-form fields


class QuadraticFamilyField(ActionField):
    """s(t, x) = a(t)/2 |x - m(t)|^2 + b(t).x + c(t).

    Callables take a time array of shape (N,) and return (N,) for a, c and
    (N, d) for m, b. Their time derivatives are supplied alongside.
    """

    def __init__(self, dim, a, da, m=None, dm=None, b=None, db=None, c=None, dc=None):
        self.dim = int(dim)
        self.params = np.zeros(0)
        zero_s = lambda t: np.zeros_like(t)
        zero_v = lambda t: np.zeros((t.shape[0], self.dim))
        self._a, self._da = a, da
        self._m, self._dm = m or zero_v, dm or zero_v
        self._b, self._db = b or zero_v, db or zero_v
        self._c, self._dc = c or zero_s, dc or zero_s

    def _jet_vjp(self, t, x, order, need_backward):
        a = np.broadcast_to(self._a(t), t.shape)
        diff = x - self._m(t)
        b = self._b(t)
        sq = np.einsum("ni,ni->n", diff, diff)
        jet = FieldJet(0.5 * a * sq + np.einsum("ni,ni->n", b, x) + self._c(t))
        if order >= 1:
            jet.spatial_grad = a[:, None] * diff + b
            jet.time_deriv = (0.5 * self._da(t) * sq
                              - a * np.einsum("ni,ni->n", diff, self._dm(t))
                              + np.einsum("ni,ni->n", self._db(t), x) + self._dc(t))
        if order >= 2:
            jet.laplacian = a * self.dim
        return jet, (lambda bar: np.zeros(0)) if need_backward else None

    def _directional_vjp(self, t, x, dirs):
        jet, _ = self._jet_vjp(t, x, 1, False)
        a = np.broadcast_to(self._a(t), t.shape)
        if dirs.ndim == 2:
            first = jet.spatial_grad @ dirs.T
            second = a[:, None] * np.sum(dirs * dirs, axis=-1)[None, :]
        else:
            first = np.einsum("nkd,nd->nk", dirs, jet.spatial_grad)
            second = a[:, None] * np.sum(dirs * dirs, axis=-1)
        return first, second, lambda fbar, sbar: np.zeros(0)


def constant_field(dim: int, c: float) -> QuadraticFamilyField:
    c = float(c)
    return QuadraticFamilyField(dim, lambda t: np.zeros_like(t), lambda t: np.zeros_like(t),
                                c=lambda t: np.full_like(t, c))


def linear_field(a) -> QuadraticFamilyField:
    """s(t, x) = a.x"""
    a = np.asarray(a, dtype=np.float64)
    return QuadraticFamilyField(a.size, lambda t: np.zeros_like(t), lambda t: np.zeros_like(t),
                                b=lambda t: np.broadcast_to(a, (t.shape[0], a.size)))


def quadratic_field(dim: int, a: Callable | float = 1.0, da: Callable | None = None):
    """s(t, x) = a(t)/2 |x|^2. A float ``a`` means a constant coefficient."""
    if not callable(a):
        const = float(a)
        a = lambda t: np.full_like(t, const)
        da = lambda t: np.zeros_like(t)
    if da is None:
        raise ValueError("time derivative of the coefficient is required")
    return QuadraticFamilyField(dim, a, da)


class ShiftedField(ActionField):
    """``field + c``: same derivatives, value shifted by a constant."""

    def __init__(self, inner: ActionField, c: float):
        self.inner = inner
        self.c = float(c)
        self.dim = inner.dim
        self.params = inner.params

    def with_params(self, params):
        return ShiftedField(self.inner.with_params(params), self.c)

    def _jet_vjp(self, t, x, order, need_backward):
        jet, back = self.inner._jet_vjp(t, x, order, need_backward)
        jet = FieldJet(jet.value + self.c, jet.spatial_grad, jet.time_deriv, jet.laplacian)
        return jet, back

    def _directional_vjp(self, t, x, dirs):
        return self.inner._directional_vjp(t, x, dirs)


class VelocityField(ActionField):
    """Wraps an analytic gradient field v(t, x) = grad s when s itself has no
    convenient closed form. Only ``spatial_grad`` is available."""

    def __init__(self, dim: int, velocity: Callable):
        self.dim = int(dim)
        self.params = np.zeros(0)
        self._velocity = velocity

    def _jet_vjp(self, t, x, order, need_backward):
        raise NotImplementedError("velocity-only field exposes grad() alone")

    def grad(self, t, x):
        t, x = _as_batch(t, x, self.dim)
        return self._velocity(t, x)

    def value(self, t, x):
        raise NotImplementedError("velocity-only field has no action value")


# ---------------------------------------------------------------------------
# Single-point API


def eval_bundle(field: ActionField, t: float, x) -> FieldJet:
    """Value, spatial gradient, time derivative and Laplacian at one point."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("eval_bundle takes a single point; use field.jet for batches")
    if not np.isfinite(t):
        raise ValueError("non-finite time")
    jet = field.jet(np.array([t], dtype=np.float64), x[None, :], order=2)
    return FieldJet(float(jet.value[0]), jet.spatial_grad[0].copy(),
                    float(jet.time_deriv[0]), float(jet.laplacian[0]))


Query = tuple  # (t array, x array, order)
Functional = Callable[[list], tuple]


def loss_and_param_grad(field: ActionField, queries: Sequence[Query],
                        functional: Functional) -> tuple[float, np.ndarray]:
    """Value and exact parameter gradient of a functional of field jets.

    ``queries`` is a list of ``(t, x, order)`` batches. ``functional`` takes
    the list of resulting jets and returns ``(value, cotangents)`` where
    ``cotangents`` is a list of FieldJet holding d(value)/d(jet entry), or
    None for batches that do not contribute.
    """
    if not queries:
        return 0.0, np.zeros(field.n_params)
    jets, backs = [], []
    for t, x, order in queries:
        jet, back = field.jet_vjp(t, x, order)
        for name, arr in jet.items():
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(name)
        jets.append(jet)
        backs.append(back)
    value, cots = functional(jets)
    if not np.isfinite(value):
        raise NonFiniteError("functional value")
    grad = np.zeros(field.n_params)
    for back, cot in zip(backs, cots):
        if cot is not None:
            grad += back(cot)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("parameter gradient")
    return float(value), grad


# ---------------------------------------------------------------------------
# Checkpoints


def field_to_dict(field: MLPField) -> dict:
    return {
        "format": "actionmatch.mlp_field/1",
        "input_dim": field.dim,
        "hidden_widths": list(field.hidden_widths),
        "activation": field.activation,
        "seed": field.seed,
        "params": [float(v).hex() for v in field.params],
    }


def field_from_dict(data: dict) -> MLPField:
    if data.get("format") != "actionmatch.mlp_field/1":
        raise ValueError("not an MLP field checkpoint")
    params = np.array([float.fromhex(v) for v in data["params"]], dtype=np.float64)
    return MLPField(data["input_dim"], data["hidden_widths"], data["activation"],
                    data["seed"], params)


def save_field(field: MLPField, path) -> None:
    Path(path).write_text(json.dumps(field_to_dict(field), indent=1))


def load_field(path) -> MLPField:
    return field_from_dict(json.loads(Path(path).read_text()))
