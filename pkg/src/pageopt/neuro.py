"""A small differentiable core: exactly the layers the slate rankers need.

Every op comes as an explicit forward/backward pair over float64 arrays.
There is no tape; models chain the backward calls themselves. Gradients are
verified against central finite differences in the test suite.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np


class ShapeMismatch(ValueError):
    pass


_WORK = [np.float64]


def work_dtype():
    """Float type used for computation; float64 except inside :func:`extended_precision`."""
    return _WORK[-1]


def real(x) -> np.ndarray:
    return np.asarray(x, dtype=_WORK[-1])


@contextmanager
def extended_precision(*stores: Dict[str, np.ndarray]):
    """Compute in long double, swapping float entries of ``stores`` for extended copies.

    Used by finite-difference oracles: it pushes the cancellation floor of a
    central difference far below the gradients being checked.
    """
    saved = [dict(d) for d in stores]
    for d in stores:
        for k, v in d.items():
            if isinstance(v, np.ndarray) and v.dtype.kind == "f":
                d[k] = v.astype(np.longdouble)
    _WORK.append(np.longdouble)
    try:
        yield
    finally:
        _WORK.pop()
        for d, old in zip(stores, saved):
            d.update(old)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = real(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------- dense


def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeMismatch(f"dense: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W + b


def dense_backward(x: np.ndarray, W: np.ndarray, dy: np.ndarray):
    """Returns (dx, dW, db)."""
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


# ---------------------------------------------------------------- LSTM


def lstm_cell_forward(x, h, c, W, b):
    """One LSTM step. ``W`` is (dx + dh, 4 dh) with gate blocks [i, f, o, g].

    Returns (h_new, c_new, cache).
    """
    dh = h.shape[-1]
    if W.shape != (x.shape[-1] + dh, 4 * dh) or b.shape != (4 * dh,) or c.shape != h.shape:
        raise ShapeMismatch(f"lstm: x{x.shape} h{h.shape} c{c.shape} W{W.shape} b{b.shape}")
    xh = np.concatenate([x, h], axis=-1)
    a = xh @ W + b
    i = sigmoid(a[..., :dh])
    f = sigmoid(a[..., dh:2 * dh])
    o = sigmoid(a[..., 2 * dh:3 * dh])
    g = np.tanh(a[..., 3 * dh:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (xh, c, i, f, o, g, tc, W)


def lstm_cell_backward(dh_new, dc_new, cache):
    """Returns (dx, dh, dc, dW, db) given upstream grads of h_new and c_new."""
    xh, c, i, f, o, g, tc, W = cache
    dh = c.shape[-1]
    do = dh_new * tc
    dc = dc_new + dh_new * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c
    dg = dc * i
    dc_prev = dc * f
    da = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=-1)
    dW = xh.T @ da
    db = da.sum(axis=0)
    dxh = da @ W.T
    nx = xh.shape[-1] - dh
    return dxh[..., :nx], dxh[..., nx:], dc_prev, dW, db


# ---------------------------------------------------------------- embeddings


def embedding_lookup(table: np.ndarray, ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    return table[ids]


def embedding_backward(n_rows: int, ids, drows: np.ndarray) -> np.ndarray:
    """Dense gradient of the table; repeated ids accumulate."""
    ids = np.asarray(ids, dtype=np.int64).ravel()
    drows = drows.reshape(len(ids), -1)
    out = np.zeros((n_rows, drows.shape[1]))
    np.add.at(out, ids, drows)
    return out


def scatter_rows(n_rows: int, ids: np.ndarray, drows: np.ndarray) -> np.ndarray:
    """Same as :func:`embedding_backward` via a one-hot product, which has a
    fixed reduction order and is faster for many rows."""
    ids = np.asarray(ids, dtype=np.int64).ravel()
    onehot = np.zeros((n_rows, len(ids)))
    onehot[ids, np.arange(len(ids))] = 1.0
    return onehot @ drows.reshape(len(ids), -1)


# ---------------------------------------------------------------- losses


def binary_ce(logit: np.ndarray, y: np.ndarray, weight) -> Tuple[float, np.ndarray]:
    """Weighted sum of binary cross-entropy in logit space; returns (loss, dlogit)."""
    z = real(logit)
    y = real(y)
    w = np.broadcast_to(real(weight), z.shape)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return np.sum(w * per), w * (sigmoid(z) - y)


def softmax(logits: np.ndarray, mask: Optional[np.ndarray] = None, axis: int = -1) -> np.ndarray:
    z = real(logits)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_ce(logits: np.ndarray, target: np.ndarray, weight, mask: Optional[np.ndarray] = None):
    """Weighted cross-entropy of a softmax over the last axis.

    ``logits`` (..., C), ``target`` integer indices (...), ``mask`` marks
    available candidates. Returns (loss, dlogits).
    """
    z = real(logits)
    t = np.asarray(target, dtype=np.int64)
    w = np.broadcast_to(real(weight), t.shape)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z - m), axis=-1)) + m[..., 0]
    picked = np.take_along_axis(z, t[..., None], axis=-1)[..., 0]
    loss = np.sum(w * (lse - picked))
    p = np.exp(z - lse[..., None])
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
    return loss, w[..., None] * (p - onehot)


# ---------------------------------------------------------------- parameters


@dataclass
class ParamStore:
    values: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name}")
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self):
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def n_params(self, prefix: str = "") -> int:
        return int(sum(v.size for k, v in self.values.items() if k.startswith(prefix)))

    def copy_values(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.copy()) for k, v in self.values.items())

    def load_values(self, values: Dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if self.values[k].shape != v.shape:
                raise ShapeMismatch(f"{k}: {self.values[k].shape} vs {v.shape}")
            self.values[k][...] = v


def init_dense(rng: np.random.Generator, fan_in: int, fan_out: int):
    r = np.sqrt(1.0 / fan_in)
    return rng.uniform(-r, r, size=(fan_in, fan_out)), rng.uniform(-r, r, size=fan_out)


def init_lstm(rng: np.random.Generator, d_in: int, d_h: int):
    r = np.sqrt(1.0 / (d_in + d_h))
    W = rng.uniform(-r, r, size=(d_in + d_h, 4 * d_h))
    b = rng.uniform(-r, r, size=4 * d_h)
    b[d_h:2 * d_h] = 1.0  # forget gate
    return W, b


def init_embedding(rng: np.random.Generator, n: int, d: int):
    return rng.normal(0.0, 0.1, size=(n, d))


def adam_step(store: ParamStore, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, names: Optional[Sequence[str]] = None) -> None:
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k in (store.values if names is None else names):
        g = store.grads[k]
        m = store.m[k]
        v = store.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.values[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- objectives


@dataclass
class ObjectiveWeights:
    """Fixed non-negative weights, or learned log-variances ``s``.

    Learned mode minimizes ``sum_i exp(-s_i) L_i + s_i``; the ``s`` values
    live in the owning :class:`ParamStore` under ``objective.s``.
    """

    mode: str = "learned"
    fixed: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.mode not in ("fixed", "learned"):
            raise ValueError("mode must be 'fixed' or 'learned'")
        if self.mode == "fixed" and any(w < 0 for w in self.fixed):
            raise ValueError("fixed weights must be >= 0")


def aggregate_loss(losses: Sequence[float], weights: ObjectiveWeights, s: Optional[np.ndarray] = None):
    """Combine per-objective losses.

    Returns (L, dL/dL_i, dL/ds); the last is ``None`` in fixed mode.
    """
    L_i = real(losses)
    if L_i.size < 1:
        raise ValueError("need at least one objective")
    if weights.mode == "fixed":
        w = real(weights.fixed)
        if w.shape != L_i.shape:
            raise ShapeMismatch("one fixed weight per objective is required")
        return w @ L_i, w.copy(), None
    s = real(s)
    e = np.exp(-s)
    return np.sum(e * L_i + s), e, 1.0 - e * L_i


def effective_weights(weights: ObjectiveWeights, s: Optional[np.ndarray]) -> np.ndarray:
    if weights.mode == "fixed":
        return np.asarray(weights.fixed, dtype=np.float64)
    return np.exp(-np.asarray(s, dtype=np.float64))


# ---------------------------------------------------------------- gradient check


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                 index: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = index if index is not None else list(np.ndindex(*x.shape))
    for ix in it:
        old = x[ix]
        x[ix] = old + h
        fp = f()
        x[ix] = old - h
        fm = f()
        x[ix] = old
        g[ix] = (fp - fm) / (2.0 * h)
    return g


def max_grad_error(f: Callable[[], float], arrays: Dict[str, np.ndarray], analytic: Dict[str, np.ndarray],
                   h: float = 1e-5, max_entries: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> float:
    """Largest relative error between ``analytic`` and central differences.

    ``max_entries`` samples that many coordinates per array instead of all.
    """
    worst = 0.0
    for name, x in arrays.items():
        idx = list(np.ndindex(*x.shape))
        if max_entries is not None and len(idx) > max_entries:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(idx), size=max_entries, replace=False)
            idx = [idx[i] for i in pick]
        num = numeric_grad(f, x, h, idx)
        ana = analytic[name]
        err = max(float(relative_error(ana[ix], num[ix])) for ix in idx)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"PGOPTCK1"


def save_checkpoint(path, values: Dict[str, np.ndarray], hyperparameters: dict, seed: int) -> None:
    """JSON header (names, shapes, hyperparameters, seed), then each tensor as
    little-endian float64 in header order."""
    names = list(values)
    header = {
        "names": names,
        "shapes": [list(values[k].shape) for k in names],
        "hyperparameters": hyperparameters,
        "seed": int(seed),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(values[k], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (values, hyperparameters, seed)."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        values = OrderedDict()
        for name, shape in zip(header["names"], header["shapes"]):
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated tensor {name}")
            values[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return values, header["hyperparameters"], header["seed"]
