"""Two-stage recurrent slate ranker and its point-wise MLP baseline.

The page encoder maps context features to the LSTM's initial hidden state.
At each slot the LSTM consumes the family embedding of the module placed
one slot earlier (a learned start token at slot 1); its output is paired
with every candidate's module embedding and scored by a shared multi-head
MLP. Heads are logistic by default, giving an absolute per-module
probability for each engagement signal.

Both models expose the same decoding interface used by
:mod:`pageopt.inference`::

    state = model.begin(x, bucket)
    probs, stepped = model.step(state, candidates, available)
    state = model.advance(stepped, rows, chosen)
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import neuro
from .neuro import ObjectiveWeights, ParamStore, ShapeMismatch
from .rng import stream

HEADS = ("click", "intent", "attributed_purchase")


class EmptyCandidates(ValueError):
    pass


@dataclass
class TrnnConfig:
    d_h: int = 50
    d_f: int = 50
    d_m: int = 50
    d_o: int = 50
    mlp_hidden: int = 50
    mlp_depth: int = 2
    heads: Tuple[str, ...] = HEADS
    objective_mode: str = "learned"
    fixed_weights: Optional[Tuple[float, ...]] = None
    head_type: str = "sigmoid"
    epochs: int = 10
    lr: float = 0.001
    batch_size: int = 32
    use_ips: bool = True
    seed: int = 0

    def validate(self) -> None:
        for k in ("d_h", "d_f", "d_m", "d_o", "mlp_hidden", "mlp_depth", "epochs", "batch_size"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.d_o != self.d_h:
            raise ValueError("d_o must equal d_h: the LSTM output is its hidden state")
        if not self.heads or any(h not in HEADS for h in self.heads) or len(set(self.heads)) != len(self.heads):
            raise ValueError(f"heads must be a nonempty subset of {HEADS}")
        if self.head_type not in ("sigmoid", "softmax"):
            raise ValueError("head_type must be 'sigmoid' or 'softmax'")
        if self.objective_mode == "fixed" and self.fixed_weights is not None \
                and len(self.fixed_weights) != len(self.heads):
            raise ValueError("one fixed weight per head")
        ObjectiveWeights(self.objective_mode, tuple(self.weights()))

    def weights(self) -> Tuple[float, ...]:
        if self.fixed_weights is None:
            return (1.0,) * len(self.heads)
        return tuple(float(w) for w in self.fixed_weights)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads"] = list(self.heads)
        d["fixed_weights"] = None if self.fixed_weights is None else list(self.fixed_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrnnConfig":
        d = dict(d)
        d["heads"] = tuple(d.get("heads", HEADS))
        if d.get("fixed_weights") is not None:
            d["fixed_weights"] = tuple(d["fixed_weights"])
        return cls(**d)


# ---------------------------------------------------------------- targets


def head_targets(ds, heads: Sequence[str], use_ips: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Stack labels and loss weights as (pages, K, heads).

    Click and intent use the click IPS; the attributed-purchase head uses the
    purchase IPS and the soft attributed label.
    """
    Y, W = [], []
    for h in heads:
        if h == "click":
            Y.append(ds.y_click), W.append(ds.ips_click)
        elif h == "intent":
            Y.append(ds.y_intent), W.append(ds.ips_click)
        else:
            Y.append(ds.y_attr), W.append(ds.ips_purchase)
    Y = neuro.real(np.stack(Y, axis=-1))
    W = neuro.real(np.stack(W, axis=-1))
    if not use_ips:
        W = np.ones_like(W)
    return Y, W


# ---------------------------------------------------------------- scoring head


class Head:
    """Multi-head MLP whose first layer takes several named input parts.

    Depth 1 is a single linear layer; depth ``D`` has ``D-1`` ReLU hidden
    layers sharing one trunk and a final layer with one logit per head.
    """

    def __init__(self, store: ParamStore, rng, parts: Dict[str, int], hidden: int, depth: int, n_out: int,
                 prefix: str = "head"):
        self.store, self.prefix, self.parts, self.depth = store, prefix, dict(parts), depth
        fan_in = sum(parts.values())
        first = n_out if depth == 1 else hidden
        W, b = neuro.init_dense(rng, fan_in, first)
        off = 0
        for name, d in parts.items():
            store.add(f"{prefix}.W1.{name}", W[off:off + d])
            off += d
        store.add(f"{prefix}.b1", b)
        self.layers = []
        for l in range(2, depth):
            W, b = neuro.init_dense(rng, hidden, hidden)
            store.add(f"{prefix}.W{l}", W), store.add(f"{prefix}.b{l}", b)
            self.layers.append((f"{prefix}.W{l}", f"{prefix}.b{l}"))
        if depth > 1:
            W, b = neuro.init_dense(rng, hidden, n_out)
            store.add(f"{prefix}.Wout", W), store.add(f"{prefix}.bout", b)

    def _w1(self, name):
        return self.store[f"{self.prefix}.W1.{name}"]

    def pre(self, name: str, x: np.ndarray) -> np.ndarray:
        return x @ self._w1(name)

    def tail(self, a1: np.ndarray):
        """From first-layer pre-activation (P, H) to logits (P, Q)."""
        s = self.store
        if self.depth == 1:
            return a1, None
        z = np.maximum(a1, 0.0)
        acts = [(a1, z)]
        for Wn, bn in self.layers:
            a = z @ s[Wn] + s[bn]
            z = np.maximum(a, 0.0)
            acts.append((a, z))
        return z @ s[f"{self.prefix}.Wout"] + s[f"{self.prefix}.bout"], acts

    def tail_backward(self, dlogits: np.ndarray, acts, grads: Dict[str, np.ndarray]) -> np.ndarray:
        """Returns d(first-layer pre-activation); accumulates tail param grads."""
        if self.depth == 1:
            return dlogits
        s, p = self.store, self.prefix
        z = acts[-1][1]
        grads[f"{p}.Wout"] += z.T @ dlogits
        grads[f"{p}.bout"] += dlogits.sum(axis=0)
        dz = dlogits @ s[f"{p}.Wout"].T
        for li in range(len(self.layers) - 1, -1, -1):
            a, _ = acts[li + 1]
            da = dz * (a > 0)
            zin = acts[li][1]
            Wn, bn = self.layers[li]
            grads[Wn] += zin.T @ da
            grads[bn] += da.sum(axis=0)
            dz = da @ s[Wn].T
        return dz * (acts[0][0] > 0)

    def aligned(self, inputs: Dict[str, np.ndarray]):
        a1 = sum(self.pre(k, v) for k, v in inputs.items()) + self.store[f"{self.prefix}.b1"]
        logits, acts = self.tail(a1)
        return logits, (inputs, acts)

    def aligned_backward(self, dlogits, cache, grads) -> Dict[str, np.ndarray]:
        inputs, acts = cache
        da1 = self.tail_backward(dlogits, acts, grads)
        grads[f"{self.prefix}.b1"] += da1.sum(axis=0)
        out = {}
        for k, v in inputs.items():
            grads[f"{self.prefix}.W1.{k}"] += v.T @ da1
            out[k] = da1 @ self._w1(k).T
        return out

    def dense(self, rows: Dict[str, np.ndarray], cols: Dict[str, np.ndarray]):
        """Score every (row, col) pair; returns logits (R, C, Q)."""
        rpre = sum(self.pre(k, v) for k, v in rows.items())
        cpre = sum(self.pre(k, v) for k, v in cols.items())
        R, C = rpre.shape[0], cpre.shape[0]
        a1 = (rpre[:, None, :] + cpre[None, :, :] + self.store[f"{self.prefix}.b1"]).reshape(R * C, -1)
        logits, acts = self.tail(a1)
        return logits.reshape(R, C, -1), (rows, cols, acts, R, C)

    def dense_backward(self, dlogits, cache, grads):
        rows, cols, acts, R, C = cache
        da1 = self.tail_backward(dlogits.reshape(R * C, -1), acts, grads).reshape(R, C, -1)
        grads[f"{self.prefix}.b1"] += da1.sum(axis=(0, 1))
        drow_pre = da1.sum(axis=1)
        dcol_pre = da1.sum(axis=0)
        out = {}
        for k, v in rows.items():
            grads[f"{self.prefix}.W1.{k}"] += v.T @ drow_pre
            out[k] = drow_pre @ self._w1(k).T
        for k, v in cols.items():
            grads[f"{self.prefix}.W1.{k}"] += v.T @ dcol_pre
            out[k] = dcol_pre @ self._w1(k).T
        return out


# ---------------------------------------------------------------- shared model plumbing


class _Model:
    kind = "base"

    def __init__(self, config: TrnnConfig, context_dim: int, module_features: np.ndarray, family_of: np.ndarray,
                 K: int):
        config.validate()
        self.config = config
        self.context_dim = int(context_dim)
        self.module_features = np.asarray(module_features, dtype=np.float64)
        self.family_of = np.asarray(family_of, dtype=np.int64)
        self.n_families = int(self.family_of.max()) + 1
        self.K = int(K)
        self.heads = tuple(config.heads)
        self.params = ParamStore()
        self.objective = ObjectiveWeights(config.objective_mode, config.weights())
        self._cache_src = None
        self._cache = None

    @property
    def n_modules(self) -> int:
        return self.module_features.shape[0]

    @property
    def purchase_index(self) -> int:
        return self.heads.index("attributed_purchase") if "attributed_purchase" in self.heads else 0

    def _init_common(self, rng):
        p, c = self.params, self.config
        W, b = neuro.init_dense(rng, self.context_dim, c.d_h)
        p.add("enc.W", W), p.add("enc.b", b)
        W, b = neuro.init_dense(rng, self.module_features.shape[1], c.d_m)
        p.add("mod.W", W), p.add("mod.b", b)

    def _init_objective(self):
        if self.objective.mode == "learned":
            self.params.add("objective.s", np.zeros(len(self.heads)))

    def n_network_params(self) -> int:
        return sum(v.size for k, v in self.params.values.items() if not k.startswith("objective."))

    # ------------------------------------------------------------ module embeddings

    def module_embeddings(self):
        a = self.module_features @ self.params["mod.W"] + self.params["mod.b"]
        return np.tanh(a)

    def precompute_module_embeddings(self) -> np.ndarray:
        self._cache = self.module_embeddings()
        self._cache_src = (self.params["mod.W"].copy(), self.params["mod.b"].copy())
        return self._cache

    def embedding_cache(self) -> np.ndarray:
        """Cached module embeddings, rebuilt whenever the module network changed."""
        src = self._cache_src
        if src is None or not (np.array_equal(src[0], self.params["mod.W"])
                               and np.array_equal(src[1], self.params["mod.b"])):
            return self.precompute_module_embeddings()
        return self._cache

    def _module_backward(self, hm, dhm, grads):
        da = dhm * (1.0 - hm * hm)
        grads["mod.W"] += self.module_features.T @ da
        grads["mod.b"] += da.sum(axis=0)

    def encode_page(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(neuro.real(x))
        if x.shape[1] != self.context_dim:
            raise ShapeMismatch(f"context has {x.shape[1]} features, model expects {self.context_dim}")
        return np.tanh(x @ self.params["enc.W"] + self.params["enc.b"])

    # ------------------------------------------------------------ losses

    def _combine(self, per_head: np.ndarray):
        s = self.params["objective.s"] if "objective.s" in self.params else None
        return neuro.aggregate_loss(per_head, self.objective, s)

    def loss(self, x, slates, Y, W) -> float:
        return self.loss_and_grad(x, slates, Y, W, grad=False)[0]

    # ------------------------------------------------------------ checkpoint

    def hyperparameters(self) -> dict:
        return {"kind": self.kind, "config": self.config.to_dict(), "context_dim": self.context_dim,
                "K": self.K, "n_modules": self.n_modules, "module_dim": int(self.module_features.shape[1])}

    def save(self, path) -> None:
        values = OrderedDict(self.params.values)
        values["buffer.module_features"] = self.module_features
        values["buffer.family_of"] = self.family_of.astype(np.float64)
        neuro.save_checkpoint(path, values, self.hyperparameters(), self.config.seed)

    def _decode_setup(self, x, bucket):
        if x is None:
            raise ShapeMismatch("context features required")
        return self.encode_page(x)


# ---------------------------------------------------------------- TRNN


class TrnnModel(_Model):
    kind = "trnn"

    def __init__(self, config: TrnnConfig, context_dim: int, module_features: np.ndarray, family_of: np.ndarray,
                 K: int):
        super().__init__(config, context_dim, module_features, family_of, K)
        rng = stream(config.seed, "init", self.kind)
        c = config
        self._init_common(rng)
        p = self.params
        p.add("fam.emb", neuro.init_embedding(rng, self.n_families + 1, c.d_f))  # last row: start token
        W, b = neuro.init_lstm(rng, c.d_f, c.d_h)
        p.add("lstm.W", W), p.add("lstm.b", b)
        self.head = Head(p, rng, {"o": c.d_h, "m": c.d_m}, c.mlp_hidden, c.mlp_depth, len(self.heads))
        self._init_objective()

    @property
    def start_token(self) -> int:
        return self.n_families

    def _step_inputs(self, slates: np.ndarray) -> np.ndarray:
        B, K = slates.shape
        ids = np.full((B, K), self.start_token, dtype=np.int64)
        ids[:, 1:] = self.family_of[slates[:, :-1]]
        return ids

    def loss_and_grad(self, x, slates, Y, W, grad: bool = True):
        """Teacher-forced multi-objective loss along the logged slot order.

        Returns (aggregate loss, per-head losses, grads or None).
        """
        p = self.params
        x = neuro.real(x)
        slates = np.asarray(slates, dtype=np.int64)
        B, K = slates.shape
        Q = len(self.heads)
        h0 = self.encode_page(x)
        ids = self._step_inputs(slates)
        emb = neuro.embedding_lookup(p["fam.emb"], ids)
        h, c = h0, np.zeros_like(h0)
        caches, O = [], np.empty((B, K, h0.shape[1]), dtype=h0.dtype)
        for j in range(K):
            h, c, cache = neuro.lstm_cell_forward(emb[:, j], h, c, p["lstm.W"], p["lstm.b"])
            caches.append(cache)
            O[:, j] = h
        hm = self.module_embeddings()
        n = B * K
        per_head = np.zeros(Q, dtype=neuro.work_dtype())
        dlog = []
        if self.config.head_type == "sigmoid":
            logits, hcache = self.head.aligned({"o": O.reshape(n, -1), "m": hm[slates.ravel()]})
            Yf, Wf = Y.reshape(n, Q), W.reshape(n, Q)
            for q in range(Q):
                l, d = neuro.binary_ce(logits[:, q], Yf[:, q], Wf[:, q])
                per_head[q] = l / n
                dlog.append(d / n)
        else:
            logits, hcache = self.head.dense({"o": O.reshape(n, -1)}, {"m": hm})
            avail = np.ones((B, K, self.n_modules), dtype=bool)
            for j in range(1, K):
                avail[np.arange(B)[:, None], j:, slates[:, j - 1][:, None]] = False
            avail = avail.reshape(n, -1)
            tgt = slates.ravel()
            wts = (Y * W).reshape(n, Q)
            for q in range(Q):
                l, d = neuro.softmax_ce(logits[:, :, q], tgt, wts[:, q], avail)
                per_head[q] = l / n
                dlog.append(np.where(avail, d, 0.0) / n)
        total, dtot, ds = self._combine(per_head)
        if not grad:
            return total, per_head, None

        g = {k: np.zeros_like(v) for k, v in p.values.items()}
        if ds is not None:
            g["objective.s"] += ds
        if self.config.head_type == "sigmoid":
            dl = np.stack([dtot[q] * dlog[q] for q in range(Q)], axis=-1)
            dparts = self.head.aligned_backward(dl, hcache, g)
            dhm = neuro.scatter_rows(self.n_modules, slates.ravel(), dparts["m"])
        else:
            dl = np.stack([dtot[q] * dlog[q] for q in range(Q)], axis=-1)
            dparts = self.head.dense_backward(dl, hcache, g)
            dhm = dparts["m"]
        self._module_backward(hm, dhm, g)
        dO = dparts["o"].reshape(B, K, -1)
        dh_next = np.zeros_like(h0)
        dc_next = np.zeros_like(h0)
        demb = np.empty_like(emb)
        for j in range(K - 1, -1, -1):
            dx, dh_next, dc_next, dW, db = neuro.lstm_cell_backward(dO[:, j] + dh_next, dc_next, caches[j])
            g["lstm.W"] += dW
            g["lstm.b"] += db
            demb[:, j] = dx
        g["fam.emb"] += neuro.scatter_rows(self.n_families + 1, ids.ravel(), demb.reshape(B * K, -1))
        da = dh_next * (1.0 - h0 * h0)
        g["enc.W"] += x.T @ da
        g["enc.b"] += da.sum(axis=0)
        return total, per_head, g

    # ------------------------------------------------------------ decoding

    def begin(self, x, bucket=None) -> dict:
        h = self._decode_setup(x, bucket)
        return {"h": h, "c": np.zeros_like(h), "prev": np.full(h.shape[0], -1, dtype=np.int64)}

    def step(self, state: dict, candidates: np.ndarray, available: Optional[np.ndarray] = None):
        """Score ``candidates`` for the next slot of every beam in ``state``.

        Returns (probs (beams, candidates, heads), stepped state).
        """
        candidates = np.asarray(candidates, dtype=np.int64)
        if candidates.size == 0:
            raise EmptyCandidates("no candidates to score")
        p = self.params
        ids = np.where(state["prev"] < 0, self.start_token, self.family_of[np.maximum(state["prev"], 0)])
        f = p["fam.emb"][ids]
        h, c, _ = neuro.lstm_cell_forward(f, state["h"], state["c"], p["lstm.W"], p["lstm.b"])
        hm = self.embedding_cache()[candidates]
        logits, _ = self.head.dense({"o": h}, {"m": hm})
        if self.config.head_type == "softmax":
            mask = np.ones(logits.shape[:2], dtype=bool) if available is None else available
            probs = neuro.softmax(logits, mask[..., None], axis=1)
        else:
            probs = neuro.sigmoid(logits)
        return probs, {"h": h, "c": c}

    def advance(self, stepped: dict, rows: np.ndarray, chosen: np.ndarray) -> dict:
        rows = np.asarray(rows, dtype=np.int64)
        return {"h": stepped["h"][rows], "c": stepped["c"][rows], "prev": np.asarray(chosen, dtype=np.int64)}

    def teacher_forced_probs(self, x, slates, bucket=None) -> np.ndarray:
        """(pages, K, heads) probabilities of the modules actually in ``slates``."""
        x = neuro.real(x)
        slates = np.asarray(slates, dtype=np.int64)
        B, K = slates.shape
        p = self.params
        h = self.encode_page(x)
        c = np.zeros_like(h)
        ids = self._step_inputs(slates)
        hm = self.embedding_cache()
        out = np.empty((B, K, len(self.heads)))
        for j in range(K):
            h, c, _ = neuro.lstm_cell_forward(p["fam.emb"][ids[:, j]], h, c, p["lstm.W"], p["lstm.b"])
            if self.config.head_type == "sigmoid":
                logits, _ = self.head.aligned({"o": h, "m": hm[slates[:, j]]})
                out[:, j] = neuro.sigmoid(logits)
            else:
                logits, _ = self.head.dense({"o": h}, {"m": hm})
                mask = np.ones((B, self.n_modules), dtype=bool)
                for t in range(j):
                    mask[np.arange(B), slates[:, t]] = False
                pr = neuro.softmax(logits, mask[..., None], axis=1)
                out[:, j] = pr[np.arange(B), slates[:, j]]
        return out


# ---------------------------------------------------------------- MLP baseline


def matched_hidden(target: int, context_dim: int, module_dim: int, d_h: int, d_m: int, K: int, depth: int,
                   Q: int) -> int:
    """Hidden width giving the MLP baseline the closest parameter count to ``target``."""
    fixed = context_dim * d_h + d_h + module_dim * d_m + d_m
    best, best_gap = 1, None
    for H in range(1, 4096):
        n = fixed + (d_h + d_m + K) * H + H + (depth - 2) * (H * H + H) + H * Q + Q
        gap = abs(n - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = H, gap
        if n > target:
            break
    return best


class MlpModel(_Model):
    """Point-wise scorer over (context, module, slot); no recurrence."""

    kind = "mlp"

    def __init__(self, config: TrnnConfig, context_dim: int, module_features: np.ndarray, family_of: np.ndarray,
                 K: int):
        super().__init__(config, context_dim, module_features, family_of, K)
        if config.head_type != "sigmoid":
            raise ValueError("the MLP baseline is point-wise and only supports sigmoid heads")
        rng = stream(config.seed, "init", self.kind)
        c = config
        self._init_common(rng)
        self.head = Head(self.params, rng, {"x": c.d_h, "m": c.d_m, "s": K}, c.mlp_hidden, c.mlp_depth,
                         len(self.heads))
        self._init_objective()

    @classmethod
    def matched_to(cls, trnn: TrnnModel, depth: int = 3, seed: Optional[int] = None,
                   **overrides) -> "MlpModel":
        c = trnn.config
        H = matched_hidden(trnn.n_network_params(), trnn.context_dim, trnn.module_features.shape[1], c.d_h,
                           c.d_m, trnn.K, depth, len(trnn.heads))
        cfg = TrnnConfig(**{**c.to_dict(), "heads": tuple(c.heads), "mlp_hidden": H, "mlp_depth": depth,
                            "head_type": "sigmoid", "seed": c.seed if seed is None else seed, **overrides})
        return cls(cfg, trnn.context_dim, trnn.module_features, trnn.family_of, trnn.K)

    def _slot_onehot(self, n: int, j: int) -> np.ndarray:
        out = np.zeros((n, self.K))
        out[:, j] = 1.0
        return out

    def loss_and_grad(self, x, slates, Y, W, grad: bool = True):
        x = neuro.real(x)
        slates = np.asarray(slates, dtype=np.int64)
        B, K = slates.shape
        Q = len(self.heads)
        n = B * K
        hx = self.encode_page(x)
        hm = self.module_embeddings()
        S = np.tile(np.eye(self.K)[:K], (B, 1))
        logits, hcache = self.head.aligned({"x": np.repeat(hx, K, axis=0), "m": hm[slates.ravel()], "s": S})
        Yf, Wf = Y.reshape(n, Q), W.reshape(n, Q)
        per_head = np.zeros(Q, dtype=neuro.work_dtype())
        dlog = []
        for q in range(Q):
            l, d = neuro.binary_ce(logits[:, q], Yf[:, q], Wf[:, q])
            per_head[q] = l / n
            dlog.append(d / n)
        total, dtot, ds = self._combine(per_head)
        if not grad:
            return total, per_head, None
        g = {k: np.zeros_like(v) for k, v in self.params.values.items()}
        if ds is not None:
            g["objective.s"] += ds
        dl = np.stack([dtot[q] * dlog[q] for q in range(Q)], axis=-1)
        dparts = self.head.aligned_backward(dl, hcache, g)
        self._module_backward(hm, neuro.scatter_rows(self.n_modules, slates.ravel(), dparts["m"]), g)
        dhx = dparts["x"].reshape(B, K, -1).sum(axis=1)
        da = dhx * (1.0 - hx * hx)
        g["enc.W"] += x.T @ da
        g["enc.b"] += da.sum(axis=0)
        return total, per_head, g

    def begin(self, x, bucket=None) -> dict:
        hx = self._decode_setup(x, bucket)
        return {"hx": hx, "j": 0}

    def step(self, state: dict, candidates: np.ndarray, available: Optional[np.ndarray] = None):
        candidates = np.asarray(candidates, dtype=np.int64)
        if candidates.size == 0:
            raise EmptyCandidates("no candidates to score")
        hx = state["hx"]
        j = min(state["j"], self.K - 1)
        logits, _ = self.head.dense({"x": hx, "s": self._slot_onehot(hx.shape[0], j)},
                                    {"m": self.embedding_cache()[candidates]})
        return neuro.sigmoid(logits), state

    def advance(self, stepped: dict, rows: np.ndarray, chosen: np.ndarray) -> dict:
        return {"hx": stepped["hx"][np.asarray(rows, dtype=np.int64)], "j": stepped["j"] + 1}

    def teacher_forced_probs(self, x, slates, bucket=None) -> np.ndarray:
        slates = np.asarray(slates, dtype=np.int64)
        B, K = slates.shape
        hx = self.encode_page(x)
        hm = self.embedding_cache()
        logits, _ = self.head.aligned({"x": np.repeat(hx, K, axis=0), "m": hm[slates.ravel()],
                                       "s": np.tile(np.eye(self.K)[:K], (B, 1))})
        return neuro.sigmoid(logits).reshape(B, K, -1)


def gradient_check(model: _Model, x, slates, Y, W, h: float = 1e-5, max_entries: Optional[int] = None,
                   seed: int = 0) -> float:
    """Worst relative error of the analytic loss gradient against central differences.

    The finite differences are taken in extended precision at the same
    parameter point, so float64 round-off in the loss does not swamp small
    gradient entries.
    """
    _, _, g = model.loss_and_grad(x, slates, Y, W)
    buffers = {"module_features": model.module_features}
    with neuro.extended_precision(model.params.values, buffers):
        model.module_features = buffers["module_features"]
        xe, Ye, We = neuro.real(x), neuro.real(Y), neuro.real(W)
        try:
            return neuro.max_grad_error(lambda: model.loss(xe, slates, Ye, We), model.params.values, g, h=h,
                                        max_entries=max_entries, rng=np.random.default_rng(seed))
        finally:
            model.module_features = np.asarray(model.module_features, dtype=np.float64)


MODEL_KINDS = {"trnn": TrnnModel, "mlp": MlpModel}


def load_model(path):
    values, hp, seed = neuro.load_checkpoint(path)
    cls = MODEL_KINDS[hp["kind"]]
    cfg = TrnnConfig.from_dict(hp["config"])
    mf = values.pop("buffer.module_features")
    fam = values.pop("buffer.family_of").astype(np.int64)
    model = cls(cfg, hp["context_dim"], mf, fam, hp["K"])
    model.params.load_values(values)
    return model


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_head_losses: List[float]
    val_loss: Optional[float]
    val_head_losses: Optional[List[float]]
    val_metrics: Dict[str, Optional[float]] = field(default_factory=dict)
    objective_weights: List[float] = field(default_factory=list)


@dataclass
class TrainingReport:
    kind: str
    config: dict
    seed: int
    n_train: int
    n_validation: int
    best_epoch: int
    epochs: List[EpochRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def _val_metrics(model, ds) -> Dict[str, Optional[float]]:
    from .evaluation import f1_auc

    pr = model.teacher_forced_probs(ds.context, ds.slates)[..., model.purchase_index]
    prec, rec, f1, auc = f1_auc(pr.ravel(), ds.y_purchase.ravel())
    return {"precision": prec, "recall": rec, "f1": f1, "auc": auc}


def train(model: _Model, train_ds, val_ds=None, epochs: Optional[int] = None, log_every: int = 0):
    """Minibatch Adam over pages; returns (model at best validation loss, report).

    Validation loss is the unweighted sum of per-head losses so that epochs
    stay comparable while learned objective weights move.
    """
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    if len(train_ds) == 0:
        raise ValueError("empty training set")
    if train_ds.context.shape[1] != model.context_dim or train_ds.K > model.K:
        raise ShapeMismatch("dataset dimensions do not match the model")
    Y, Wt = head_targets(train_ds, model.heads, cfg.use_ips)
    if val_ds is not None and len(val_ds):
        Yv, Wv = head_targets(val_ds, model.heads, cfg.use_ips)
    else:
        val_ds = None
    report = TrainingReport(model.kind, cfg.to_dict(), cfg.seed, len(train_ds),
                            0 if val_ds is None else len(val_ds), 0)
    best, best_loss = None, math.inf
    for ep in range(1, epochs + 1):
        rng = stream(cfg.seed, "epoch", ep)
        tot, heads_sum, seen = 0.0, np.zeros(len(model.heads)), 0
        for idx in _batches(len(train_ds), cfg.batch_size, rng):
            _, per_head, g = model.loss_and_grad(train_ds.context[idx], train_ds.slates[idx], Y[idx], Wt[idx])
            for k, v in g.items():
                model.params.grads[k][...] = v
            neuro.adam_step(model.params, cfg.lr)
            heads_sum += per_head * len(idx)
            seen += len(idx)
        heads_mean = heads_sum / seen
        rec = EpochRecord(ep, float(heads_mean.mean()), heads_mean.tolist(), None, None)
        s = model.params["objective.s"] if "objective.s" in model.params else None
        rec.objective_weights = neuro.effective_weights(model.objective, s).tolist()
        if val_ds is not None:
            _, vh, _ = model.loss_and_grad(val_ds.context, val_ds.slates, Yv, Wv, grad=False)
            rec.val_loss = float(vh.sum())
            rec.val_head_losses = vh.tolist()
            rec.val_metrics = _val_metrics(model, val_ds)
            score = rec.val_loss
        else:
            score = rec.train_loss
        if score < best_loss:
            best_loss, best = score, model.params.copy_values()
            report.best_epoch = ep
        report.epochs.append(rec)
        if log_every and ep % log_every == 0:
            print(f"[{model.kind}] epoch {ep} train {rec.train_loss:.5f} val {rec.val_loss}")
    if best is not None:
        model.params.load_values(best)
    model.precompute_module_embeddings()
    return model, report
