"""Offline metrics: ranking quality on logged pages and off-policy value estimates.

Page value composes slot-level probabilities as ``1 - prod_s(1 - e_s * p_s)``
with ``e_s`` the examination propensity of slot ``s``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

Z95 = 1.959963984540054


class MissingPrediction(ValueError):
    pass


class ZeroPropensity(ValueError):
    pass


# ---------------------------------------------------------------- ranking metrics


def ndcg_at_k(labels_in_rank_order, K: int) -> float:
    """NDCG of one ranked list; gain is the label, discount ``1/log2(1 + rank)``.

    Lists without a positive label score 0.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    y = np.asarray(labels_in_rank_order, dtype=np.float64)[:K]
    disc = 1.0 / np.log2(np.arange(2, y.size + 2))
    ideal = np.sort(y)[::-1]
    idcg = float(ideal @ disc)
    return 0.0 if idcg <= 0 else float(y @ disc) / idcg


def ndcg_rows(labels: np.ndarray, K: int) -> np.ndarray:
    """Row-wise :func:`ndcg_at_k` for a (pages, slots) label matrix already in rank order."""
    y = np.asarray(labels, dtype=np.float64)[:, :K]
    disc = 1.0 / np.log2(np.arange(2, y.shape[1] + 2))
    idcg = -np.sort(-y, axis=1) @ disc
    dcg = y @ disc
    return np.where(idcg > 0, dcg / np.where(idcg > 0, idcg, 1.0), 0.0)


def reciprocal_ranks(labels: np.ndarray) -> np.ndarray:
    """1/rank of the first positive per row; NaN for rows without one."""
    y = np.asarray(labels) > 0
    has = y.any(axis=1)
    first = np.argmax(y, axis=1) + 1.0
    return np.where(has, 1.0 / first, np.nan)


def mrpr(first_purchase_ranks) -> float:
    """Mean reciprocal rank of the first purchased module over purchase-positive pages.

    Entries that are ``None`` or non-positive mark pages without a purchase
    and are skipped; returns NaN when no page qualifies.
    """
    r = np.array([np.nan if v is None else v for v in first_purchase_ranks], dtype=np.float64)
    r = r[np.isfinite(r) & (r > 0)]
    return float(np.mean(1.0 / r)) if r.size else float("nan")


def auc(scores, labels) -> Optional[float]:
    """Rank-statistic AUC with ties counted half; ``None`` when labels are all one class."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel() > 0
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        return None
    # unique + inverse gives tie-averaged ranks without a python loop
    uniq, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    mid = upper - (counts - 1) / 2.0
    r = mid[inv]
    return float((r[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def f1_auc(probs, labels, threshold: float = 0.5) -> Tuple[float, float, float, Optional[float]]:
    """(precision, recall, F1, AUC) for binary labels; empty ratios are 0."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    y = np.asarray(labels).ravel() > 0
    pred = p >= threshold
    tp = float(np.sum(pred & y))
    prec = tp / pred.sum() if pred.any() else 0.0
    rec = tp / y.sum() if y.any() else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return float(prec), float(rec), float(f1), auc(p, y)


# ---------------------------------------------------------------- off-policy estimators


def page_values(slot_probs: np.ndarray, examination: np.ndarray) -> np.ndarray:
    q = np.asarray(examination, dtype=np.float64)[None, :slot_probs.shape[1]] * slot_probs
    return 1.0 - np.prod(1.0 - q, axis=1)


@dataclass
class Estimate:
    value: float
    raw: float
    half_width: float
    n: int
    per_page: np.ndarray = field(repr=False, default=None)


def _summarize(vals: np.ndarray) -> Estimate:
    n = vals.size
    raw = float(vals.mean()) if n else float("nan")
    hw = float(Z95 * vals.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return Estimate(float(np.clip(raw, 0.0, 1.0)), raw, hw, n, vals)


def dm_estimate(target_probs: np.ndarray, examination: np.ndarray) -> Estimate:
    """Direct method: average model page value of the target slates.

    ``target_probs`` (pages, K) holds the reward model's examination-free
    probability for each module the target policy places.
    """
    p = np.asarray(target_probs, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise MissingPrediction("reward model returned non-finite predictions")
    return _summarize(page_values(p, examination))


def dr_slot_terms(logged_slates, rewards, logging_propensity, target_slates, target_probs, examination,
                  w_max: float = 20.0) -> np.ndarray:
    """Slot-level doubly robust estimates of ``e_s * p(target module at s)``.

    Model term plus, where the target places the logged module, the
    propensity-weighted residual of the observed reward. Weights ``1/mu`` are
    clipped at ``w_max``.
    """
    L = np.asarray(logged_slates)
    T = np.asarray(target_slates)
    mu = np.asarray(logging_propensity, dtype=np.float64)
    if np.any(mu <= 0):
        raise ZeroPropensity("logging propensities must be positive")
    p = np.asarray(target_probs, dtype=np.float64)
    e = np.asarray(examination, dtype=np.float64)[None, :L.shape[1]]
    dm = e * p
    match = L == T
    w = np.minimum(1.0 / mu, w_max)
    return dm + match * (np.asarray(rewards, dtype=np.float64) - dm) * w


def dr_estimate(logged_slates, rewards, logging_propensity, target_slates, target_probs, examination,
                w_max: float = 20.0) -> Estimate:
    """Doubly robust page value; ``raw`` keeps the unclipped mean."""
    q = dr_slot_terms(logged_slates, rewards, logging_propensity, target_slates, target_probs, examination, w_max)
    return _summarize(1.0 - np.prod(1.0 - q, axis=1))


# ---------------------------------------------------------------- report


@dataclass
class EvalReport:
    metrics: Dict[str, Optional[float]] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    half_widths: Dict[str, Optional[float]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def add(self, name: str, value, n: int = 0, half_width=None) -> None:
        self.metrics[name] = None if value is None else float(value)
        self.counts[name] = int(n)
        self.half_widths[name] = None if half_width is None or not np.isfinite(half_width) else float(half_width)

    def add_mean(self, name: str, vals: np.ndarray) -> None:
        v = np.asarray(vals, dtype=np.float64)
        v = v[np.isfinite(v)]
        if v.size == 0:
            self.add(name, None, 0)
            return
        hw = Z95 * v.std(ddof=1) / np.sqrt(v.size) if v.size > 1 else None
        self.add(name, v.mean(), v.size, hw)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'metric':<28}{'value':>12}{'±95%':>12}{'n':>9}"]
        for k in self.metrics:
            v, hw = self.metrics[k], self.half_widths.get(k)
            vs = "n/a" if v is None else f"{v:.5f}"
            hs = "" if hw is None else f"{hw:.5f}"
            lines.append(f"{k:<28}{vs:>12}{hs:>12}{self.counts.get(k, 0):>9}")
        return "\n".join(lines)

    def csv(self) -> str:
        rows = ["metric,value,half_width,n"]
        for k in self.metrics:
            v, hw = self.metrics[k], self.half_widths.get(k)
            rows.append(f"{k},{'' if v is None else repr(v)},{'' if hw is None else repr(hw)},{self.counts.get(k, 0)}")
        return "\n".join(rows) + "\n"
