"""Slate construction by beam search over a slot-by-slot scorer.

A beam's score is the probability of at least one purchase on the prefix,
``phi = 1 - prod(1 - p_purchase)``. Consecutive same-family placements are
pruned during expansion. Ties break on the higher slot-1 purchase
probability, then on the lexicographically smaller slate.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np


class InsufficientCandidates(ValueError):
    pass


class InfeasibleDiversity(UserWarning):
    pass


def beam_score_update(phi, p):
    """``1 - (1 - phi)(1 - p)``: the chance of at least one purchase after adding ``p``."""
    phi_a, p_a = np.asarray(phi, dtype=np.float64), np.asarray(p, dtype=np.float64)
    if np.any((phi_a < 0) | (phi_a >= 1)) or np.any((p_a < 0) | (p_a > 1)):
        raise ValueError("need 0 <= phi < 1 and 0 <= p <= 1")
    out = 1.0 - (1.0 - phi_a) * (1.0 - p_a)
    return float(out) if out.ndim == 0 else out


@dataclass
class Beam:
    prefix: List[int]
    score: float
    probs: np.ndarray  # (len(prefix), heads)

    def recompute(self, purchase_index: int) -> float:
        return float(1.0 - np.prod(1.0 - self.probs[:, purchase_index]))


@dataclass
class RankResult:
    slate: np.ndarray
    score: float
    probs: np.ndarray  # (K, heads) along the chosen slate
    trace: List[float]  # phi after each slot
    width: Optional[int]
    start_slot: int
    diversity: bool
    fallback: bool = False
    beams_explored: int = 0
    heads: Sequence[str] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "slots": [int(m) for m in self.slate],
            "score": self.score,
            "slot_probs": [{h: float(v) for h, v in zip(self.heads, row)} for row in self.probs],
            "phi_trace": list(self.trace),
            "width": self.width,
            "start_slot": self.start_slot,
            "diversity": self.diversity,
            "diversity_fallback": self.fallback,
            "policy_tag": "model",
        }


def _search(model, x, bucket, cand, fam, K, W, start_slot, diverse, pidx):
    state = model.begin(x, bucket)
    prefix = np.zeros((1, 0), dtype=np.int64)
    used = np.zeros((1, cand.size), dtype=bool)
    score = np.zeros(1)
    s1 = np.zeros(1)
    probs = np.zeros((1, 0, 0))
    explored = 0
    for j in range(K):
        width = 1 if j < start_slot - 1 else W
        p, stepped = model.step(state, cand, ~used)
        if probs.shape[2] == 0:
            probs = np.zeros((prefix.shape[0], 0, p.shape[2]))
        legal = ~used
        if diverse and j > 0:
            legal &= fam[None, :] != fam[prefix[:, -1]][:, None]
        b, i = np.nonzero(legal)
        if b.size == 0:
            return None, explored
        explored += b.size
        pp = p[b, i, pidx]
        new_score = 1.0 - (1.0 - score[b]) * (1.0 - pp)
        new_s1 = pp if j == 0 else s1[b]
        new_prefix = np.concatenate([prefix[b], cand[i][:, None]], axis=1)
        keys = [new_prefix[:, c] for c in range(new_prefix.shape[1] - 1, -1, -1)] + [-new_s1, -new_score]
        order = np.lexsort(keys)
        if width is not None:
            order = order[:width]
        b, i = b[order], i[order]
        prefix, score, s1 = new_prefix[order], new_score[order], new_s1[order]
        probs = np.concatenate([probs[b], p[b, i][:, None, :]], axis=1)
        used = used[b].copy()
        used[np.arange(b.size), i] = True
        state = model.advance(stepped, b, cand[i])
    return (prefix[0], float(score[0]), probs[0]), explored


def _better(a, b, pidx) -> bool:
    """True when result ``a`` beats ``b`` under the beam ordering."""
    sa, sb = a[1], b[1]
    if sa != sb:
        return sa > sb
    if a[2][0, pidx] != b[2][0, pidx]:
        return a[2][0, pidx] > b[2][0, pidx]
    return a[0].tolist() < b[0].tolist()


def _run(model, x, bucket, cand, fam, K, W, start_slot, diverse, pidx, keep_greedy):
    found, explored = _search(model, x, bucket, cand, fam, K, W, start_slot, diverse, pidx)
    if found is not None and keep_greedy and W is not None and W > 1:
        # with history-dependent scores a wider beam can prune the greedy path
        g, more = _search(model, x, bucket, cand, fam, K, 1, start_slot, diverse, pidx)
        explored += more
        if g is not None and _better(g, found, pidx):
            found = g
    return found, explored


def rank_page(model, x, bucket, candidates, K: int, W: Optional[int] = 3, start_slot: int = 1,
              diversity: bool = True, family_of: Optional[np.ndarray] = None, keep_greedy: bool = True) -> RankResult:
    """Best slate of ``K`` modules under the purchase objective.

    ``W=None`` keeps every beam (exhaustive). Slots before ``start_slot`` are
    filled greedily. With ``keep_greedy`` a finite beam never returns less
    than the width-1 result. When the diversity constraint cannot be met the
    search reruns without it and the result is flagged.
    """
    cand = np.unique(np.asarray(candidates, dtype=np.int64))
    if K < 1 or cand.size < K:
        raise InsufficientCandidates(f"need at least K={K} candidates, got {cand.size}")
    if W is not None and W < 1:
        raise ValueError("W must be >= 1")
    if not 1 <= start_slot <= K:
        raise ValueError("start_slot must lie in 1..K")
    fam = np.asarray(model.family_of if family_of is None else family_of, dtype=np.int64)[cand]
    pidx = model.purchase_index
    fallback = False
    found, explored = (None, 0)
    if diversity and (K < 2 or np.unique(fam).size >= 2):
        found, explored = _run(model, x, bucket, cand, fam, K, W, start_slot, True, pidx, keep_greedy)
    if found is None:
        fallback = diversity and K >= 2
        if fallback:
            warnings.warn("diversity constraint infeasible; ranked without it", InfeasibleDiversity)
        found, more = _run(model, x, bucket, cand, fam, K, W, start_slot, False, pidx, keep_greedy)
        explored += more
    slate, score, probs = found
    trace = (1.0 - np.cumprod(1.0 - probs[:, pidx])).tolist()
    return RankResult(slate, score, probs, trace, W, start_slot, diversity, fallback, explored,
                      tuple(getattr(model, "heads", ("purchase",))))


def rank_pages(model, X, buckets, candidates, K: int, W: Optional[int] = 3, start_slot: int = 1,
               diversity: bool = True) -> np.ndarray:
    """Slates (n, K) for a batch of contexts sharing one candidate set."""
    X = np.atleast_2d(X) if X is not None else None
    out = np.empty((len(buckets), K), dtype=np.int64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InfeasibleDiversity)
        for r, b in enumerate(buckets):
            out[r] = rank_page(model, None if X is None else X[r], int(b), candidates, K, W, start_slot,
                               diversity).slate
    return out


def beam_vs_greedy_report(model, X, buckets, candidates, K: int, widths=(1, 3), diversity: bool = True) -> dict:
    """Per-context beam objective at each width, plus means."""
    per = {int(w): [] for w in widths}
    for r, b in enumerate(buckets):
        for w in widths:
            per[int(w)].append(rank_page(model, None if X is None else X[r], int(b), candidates, K, int(w),
                                         diversity=diversity).score)
    return {"phi": {w: v for w, v in per.items()}, "mean_phi": {w: float(np.mean(v)) for w, v in per.items()}}


# ---------------------------------------------------------------- reference scorers


class OracleScorer:
    """Ground-truth per-(bucket, module) probabilities from a simulator world.

    Probabilities ignore examination and history, so beam search with this
    scorer maximizes the examination-free purchase objective.
    """

    heads = ("click", "attributed_purchase")
    purchase_index = 1

    def __init__(self, world):
        self.world = world
        self.family_of = world.family_of
        self.table = np.stack([world.event_prob("ctr"), world.event_prob("ptr")], axis=-1)

    def begin(self, x, bucket) -> dict:
        return {"bucket": int(bucket), "n": 1}

    def step(self, state, candidates, available=None):
        p = self.table[state["bucket"], np.asarray(candidates)]
        return np.broadcast_to(p[None], (state["n"],) + p.shape), state

    def advance(self, stepped, rows, chosen) -> dict:
        return {"bucket": stepped["bucket"], "n": len(rows)}


class TableScorer(OracleScorer):
    """Fixed per-module probabilities; ``table`` is (modules, heads) or (buckets, modules, heads)."""

    def __init__(self, table, family_of, heads=("attributed_purchase",)):
        t = np.asarray(table, dtype=np.float64)
        if t.ndim == 1:
            t = t[:, None]
        if t.ndim == 2:
            t = t[None]
        self.table = t
        self.family_of = np.asarray(family_of, dtype=np.int64)
        self.heads = tuple(heads)
        self.purchase_index = self.heads.index("attributed_purchase") if "attributed_purchase" in self.heads else 0

    def begin(self, x, bucket) -> dict:
        return {"bucket": 0 if self.table.shape[0] == 1 else int(bucket), "n": 1}
