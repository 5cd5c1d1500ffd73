"""Logs to training data.

Sessionization and purchase-intent attribution, slot propensity / IPS
estimation from shuffled traffic, feature assembly with train-only
normalization statistics, and the page-level train/validation/test split.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .domain import POLICY_TAGS as _POLICY_TAGS
from .domain import Catalog, EngagementEvent, LabeledSlot
from .kernels import attribution_sweep
from .logs import POLICY_CODES, Log, SchemaViolation, iter_jsonl, read_json, write_json, write_jsonl
from .simulator import EVENT_CODES

SPLITS = ("train", "validation", "test")


class InsufficientData(ValueError):
    pass


class MissingPropensity(ValueError):
    pass


# ---------------------------------------------------------------- sessions


@dataclass(frozen=True)
class Session:
    user_id: int
    events: tuple

    @property
    def start(self) -> float:
        return self.events[0].timestamp

    @property
    def end(self) -> float:
        return self.events[-1].timestamp


def _event_order(e: EngagementEvent):
    # a click sorts ahead of a purchase stamped at the same instant
    return (e.timestamp, e.event_type == "purchase", e.page_id, e.slot)


def sessionize(events_by_user: Dict[int, Sequence[EngagementEvent]], T_minutes: float) -> List[Session]:
    """Split each user's time-ordered events wherever the gap exceeds ``T``.

    A gap of exactly ``T`` minutes stays inside the session.
    """
    T = 60.0 * T_minutes
    out: List[Session] = []
    for user in sorted(events_by_user):
        evs = sorted(events_by_user[user], key=_event_order)
        cur: List[EngagementEvent] = []
        for e in evs:
            if cur and e.timestamp - cur[-1].timestamp > T:
                out.append(Session(user, tuple(cur)))
                cur = []
            cur.append(e)
        if cur:
            out.append(Session(user, tuple(cur)))
    return out


def attribution_weight(dt_seconds: float, eta: float, eps: float, T_minutes: float) -> float:
    return float(eta ** (dt_seconds / (eps * 60.0 * T_minutes)))


def attribute_purchase_intent(session: Session, eta: float, eps: float, T_minutes: float) -> Dict[EngagementEvent, float]:
    """Weight every click of ``session`` toward the purchases that follow it.

    A click preceding several purchases keeps the largest weight, i.e. the
    one from the nearest purchase. Clicks with no later purchase get 0.
    """
    if not 0.0 < eta < 1.0 or eps <= 0:
        raise ValueError("eta must be in (0,1) and eps > 0")
    out: Dict[EngagementEvent, float] = {}
    purchases = [e.timestamp for e in session.events if e.event_type == "purchase"]
    for e in session.events:
        if e.event_type != "click":
            continue
        later = [t for t in purchases if t >= e.timestamp]
        out[e] = attribution_weight(min(later) - e.timestamp, eta, eps, T_minutes) if later else 0.0
    return out


def attribute_log(log: Log, eta: float, eps: float, T_minutes: float) -> np.ndarray:
    """(pages, K) attributed purchase intent for every logged slot.

    Sessions are per user and span pages, so a purchase credits clicks on
    earlier pages of the same session. A slot clicked more than once keeps its
    largest weight.
    """
    ev = log.events
    pos = {int(p): i for i, p in enumerate(log.page_id)}
    row = np.array([pos[int(p)] for p in ev.page_id], dtype=np.int64)
    user = log.contexts.user_id[row] if len(row) else np.zeros(0, dtype=np.int64)
    is_click = ev.event_code == EVENT_CODES["click"]
    is_buy = ev.event_code == EVENT_CODES["purchase"]
    order = np.lexsort((ev.slot, ev.page_id, is_buy, ev.timestamp, user))
    w = attribution_sweep(user[order], ev.timestamp[order], is_click[order], is_buy[order],
                          60.0 * T_minutes, eta, eps)
    out = np.zeros(log.slates.shape)
    np.maximum.at(out, (row[order], ev.slot[order] - 1), w)
    return out


# ---------------------------------------------------------------- propensity


@dataclass
class PropensityTable:
    click_propensity: np.ndarray
    purchase_propensity: np.ndarray
    counts: np.ndarray  # impressions per slot

    @property
    def ips_click(self) -> np.ndarray:
        return 1.0 / self.click_propensity

    @property
    def ips_purchase(self) -> np.ndarray:
        return 1.0 / self.purchase_propensity

    @property
    def K(self) -> int:
        return len(self.click_propensity)

    def to_dict(self) -> dict:
        return {
            "click_propensity": self.click_propensity.tolist(),
            "purchase_propensity": self.purchase_propensity.tolist(),
            "ips_click": self.ips_click.tolist(),
            "ips_purchase": self.ips_purchase.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PropensityTable":
        return cls(np.asarray(d["click_propensity"], dtype=np.float64),
                   np.asarray(d["purchase_propensity"], dtype=np.float64),
                   np.asarray(d["counts"], dtype=np.float64))

    @classmethod
    def from_slot_rates(cls, click_rate: Sequence[float], purchase_rate: Sequence[float],
                        counts: Optional[Sequence[float]] = None) -> "PropensityTable":
        c = np.asarray(click_rate, dtype=np.float64)
        p = np.asarray(purchase_rate, dtype=np.float64)
        n = np.ones_like(c) if counts is None else np.asarray(counts, dtype=np.float64)
        return cls(_relative(c, "click"), _relative(p, "purchase"), n)


def _relative(rate: np.ndarray, level: str) -> np.ndarray:
    if rate[0] <= 0 or np.any(rate <= 0):
        raise InsufficientData(f"zero {level} rate at some slot; cannot form propensity")
    # estimates above slot 1 are sampling noise under a non-increasing examination profile
    return np.minimum(rate / rate[0], 1.0)


def slot_rates(log: Log) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    labels = log.slot_labels()
    n = np.full(log.K, float(len(log)))
    return labels["click"].sum(axis=0) / n, labels["purchase"].sum(axis=0) / n, n


def estimate_propensity(log: Log, min_count: int = 1000) -> PropensityTable:
    """Click and purchase propensity per slot relative to slot 1, from
    uniformly shuffled pages only."""
    uni = log.with_policy("uniform_random")
    if len(uni) < min_count:
        raise InsufficientData(f"{len(uni)} uniform-random impressions per slot, need {min_count}")
    click, purchase, n = slot_rates(uni)
    return PropensityTable.from_slot_rates(click, purchase, n)


# ---------------------------------------------------------------- features


@dataclass
class Normalizer:
    """Per-column standardize, optional log1p first, then clip to [-clip, clip]."""

    mean: np.ndarray
    scale: np.ndarray
    log1p: np.ndarray  # bool per column
    clip: float = 3.0

    @classmethod
    def fit(cls, X: np.ndarray, log_cols: Sequence[int] = (), clip: float = 3.0) -> "Normalizer":
        X = np.asarray(X, dtype=np.float64)
        tag = np.zeros(X.shape[1], dtype=bool)
        tag[list(log_cols)] = True
        Z = np.where(tag, np.log1p(np.maximum(X, 0.0)), X)
        mean = Z.mean(axis=0)
        scale = Z.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(mean, scale, tag, float(clip))

    def transform(self, X: np.ndarray, clip: bool = True) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        Z = np.where(self.log1p, np.log1p(np.maximum(X, 0.0)), X)
        Z = (Z - self.mean) / self.scale
        return np.clip(Z, -self.clip, self.clip) if clip else Z

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        X = np.asarray(Z, dtype=np.float64) * self.scale + self.mean
        return np.where(self.log1p, np.expm1(X), X)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(),
                "log1p": self.log1p.tolist(), "clip": self.clip}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64),
                   np.asarray(d["log1p"], dtype=bool), float(d["clip"]))


def _onehot(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1.0
    return out


@dataclass
class FeatureConfig:
    clip: float = 3.0
    n_buckets: int = 4
    n_platforms: int = 3


@dataclass
class FeatureSpace:
    """Everything needed to featurize a context or module after training."""

    context_norm: Normalizer
    module_norm: Normalizer
    config: FeatureConfig
    module_features: np.ndarray  # normalized (N, dm)
    family_of: np.ndarray

    @property
    def context_dim(self) -> int:
        return len(self.context_norm.mean) + self.config.n_platforms + self.config.n_buckets

    def context_features(self, bucket, user, hero, platform) -> np.ndarray:
        num = np.concatenate([np.asarray(user, dtype=np.float64), np.asarray(hero, dtype=np.float64)], axis=1)
        z = self.context_norm.transform(num)
        return np.concatenate([z, _onehot(np.asarray(platform), self.config.n_platforms),
                               _onehot(np.asarray(bucket), self.config.n_buckets)], axis=1)

    def featurize_contexts(self, contexts) -> np.ndarray:
        return self.context_features(contexts.bucket, contexts.user_features, contexts.hero_features,
                                     contexts.platform)

    def to_dict(self) -> dict:
        return {
            "context_norm": self.context_norm.to_dict(),
            "module_norm": self.module_norm.to_dict(),
            "config": vars(self.config),
            "module_features": self.module_features.tolist(),
            "family_of": self.family_of.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpace":
        return cls(Normalizer.from_dict(d["context_norm"]), Normalizer.from_dict(d["module_norm"]),
                   FeatureConfig(**d["config"]), np.asarray(d["module_features"], dtype=np.float64),
                   np.asarray(d["family_of"], dtype=np.int64))


# ---------------------------------------------------------------- split


def _split_key(seed: int, page_id: int) -> bytes:
    return hashlib.blake2b(f"{seed}:{page_id}".encode(), digest_size=8).digest()


def assign_split(page_ids: Sequence[int], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> np.ndarray:
    """Split code (0 train, 1 validation, 2 test) per page.

    Pages are ordered by a seeded hash of their id and cut at the fraction
    boundaries, so sizes are exact up to rounding and a page's split depends
    only on the seed and the page set.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if len(fr) != 3 or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be three non-negative values summing to 1")
    ids = [int(p) for p in page_ids]
    order = sorted(range(len(ids)), key=lambda i: _split_key(seed, ids[i]))
    n = len(ids)
    n_train = int(round(fr[0] * n))
    n_val = int(round((fr[0] + fr[1]) * n)) - n_train
    out = np.empty(n, dtype=np.int64)
    for rank, i in enumerate(order):
        out[i] = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
    return out


# ---------------------------------------------------------------- dataset


@dataclass
class Dataset:
    page_id: np.ndarray
    split: np.ndarray
    bucket: np.ndarray
    context: np.ndarray  # (n, dx) normalized context features
    slates: np.ndarray  # (n, K)
    y_click: np.ndarray
    y_intent: np.ndarray
    y_attr: np.ndarray  # attributed purchase intent in [0, 1]
    y_purchase: np.ndarray
    ips_click: np.ndarray
    ips_purchase: np.ndarray
    policy: np.ndarray
    features: FeatureSpace
    raw: dict = field(default_factory=dict)  # raw context columns for re-ranking / oracle lookup

    def __len__(self) -> int:
        return len(self.page_id)

    @property
    def K(self) -> int:
        return self.slates.shape[1]

    @property
    def n_modules(self) -> int:
        return self.features.module_features.shape[0]

    _ARRAYS = ("page_id", "split", "bucket", "context", "slates", "y_click", "y_intent", "y_attr",
               "y_purchase", "ips_click", "ips_purchase", "policy")

    def take(self, idx) -> "Dataset":
        idx = np.arange(len(self))[idx]
        kw = {k: getattr(self, k)[idx] for k in self._ARRAYS}
        return Dataset(**kw, features=self.features, raw={k: v[idx] for k, v in self.raw.items()})

    def select(self, split: str) -> "Dataset":
        return self.take(self.split == SPLITS.index(split))

    def labeled_slots(self, i: int) -> List[LabeledSlot]:
        return [
            LabeledSlot(int(self.slates[i, s]), s + 1, int(self.y_click[i, s]), int(self.y_intent[i, s]),
                        float(self.y_attr[i, s]), float(self.ips_click[i, s]), float(self.ips_purchase[i, s]),
                        int(self.y_purchase[i, s]))
            for s in range(self.K)
        ]

    def without_ips(self) -> "Dataset":
        out = self.take(slice(None))
        out.ips_click = np.ones_like(self.ips_click)
        out.ips_purchase = np.ones_like(self.ips_purchase)
        return out

    # ------------------------------------------------------------ files

    def write(self, path, meta_path) -> None:
        def rows():
            for i in range(len(self)):
                yield {
                    "page_id": int(self.page_id[i]),
                    "split": SPLITS[int(self.split[i])],
                    "policy_tag": _POLICY_TAGS[int(self.policy[i])],
                    "bucket": int(self.bucket[i]),
                    "context_features": self.context[i].tolist(),
                    "raw_context": {k: (v[i].tolist() if v.ndim > 1 else v[i].item()) for k, v in self.raw.items()},
                    "candidates": list(range(self.n_modules)),
                    "slots": [s.to_dict() for s in self.labeled_slots(i)],
                }
        write_jsonl(path, rows())
        write_json(meta_path, {"K": self.K, "features": self.features.to_dict()})

    @classmethod
    def read(cls, path, meta_path) -> "Dataset":
        meta = read_json(meta_path)
        fs = FeatureSpace.from_dict(meta["features"])
        cols: Dict[str, list] = {k: [] for k in cls._ARRAYS}
        raw: Dict[str, list] = {}
        for i, d in iter_jsonl(path):
            try:
                slots = [LabeledSlot.from_dict(s) for s in d["slots"]]
                row = (d["page_id"], SPLITS.index(d["split"]), _POLICY_TAGS.index(d["policy_tag"]), d["bucket"],
                       d["context_features"])
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaViolation(path, i, f"malformed dataset row ({exc})") from None
            for k, v in zip(("page_id", "split", "policy", "bucket", "context"), row):
                cols[k].append(v)
            cols["slates"].append([s.module_id for s in slots])
            cols["y_click"].append([s.y_click for s in slots])
            cols["y_intent"].append([s.y_intent for s in slots])
            cols["y_attr"].append([s.y_attributed_purchase for s in slots])
            cols["y_purchase"].append([s.y_purchase for s in slots])
            cols["ips_click"].append([s.ips_click for s in slots])
            cols["ips_purchase"].append([s.ips_purchase for s in slots])
            for k, v in d.get("raw_context", {}).items():
                raw.setdefault(k, []).append(v)
        ints = {"page_id", "split", "bucket", "slates", "y_click", "y_intent", "y_purchase", "policy"}
        kw = {k: np.asarray(v, dtype=np.int64 if k in ints else np.float64) for k, v in cols.items()}
        raw_arr = {k: np.asarray(v) for k, v in raw.items()}
        return cls(**kw, features=fs, raw=raw_arr)



def module_history(log: Log, n_modules: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-module impressions and clicks over ``log``."""
    clicks = log.slot_labels()["click"]
    imp = np.bincount(log.slates.ravel(), minlength=n_modules).astype(np.float64)
    clk = np.bincount(log.slates.ravel(), weights=clicks.ravel().astype(np.float64), minlength=n_modules)
    return imp, clk


def build_dataset(log: Log, catalog: Catalog, propensity: PropensityTable, eta: float = 0.5, eps: float = 1.0,
                  T_minutes: float = 30.0, features: Optional[FeatureConfig] = None,
                  fractions=(0.8, 0.1, 0.1), seed: int = 0) -> Dataset:
    """Label, weight and featurize every slot of every page in ``log``.

    Normalization statistics and module click history come from the train
    split only (see :func:`assign_split`).
    """
    features = features or FeatureConfig()
    if propensity.K < log.K:
        raise MissingPropensity(f"propensity table covers {propensity.K} slots, log has {log.K}")
    split = assign_split(log.page_id, fractions, seed)
    train = split == 0
    labels = log.slot_labels()
    attr = attribute_log(log, eta, eps, T_minutes)

    c = log.contexts
    num = np.concatenate([c.user_features, c.hero_features], axis=1)
    if num.shape[0] == 0 or not train.any():
        raise InsufficientData("no training pages")
    ctx_norm = Normalizer.fit(num[train], clip=features.clip)

    N = catalog.n_modules
    imp, clk = module_history(log.subset(train), N)
    hist_ctr = (clk + 1.0) / (imp + 2.0)
    mod_raw = np.concatenate([catalog.module_features(), catalog.theme_features(),
                              hist_ctr[:, None], imp[:, None]], axis=1)
    n_cols = mod_raw.shape[1]
    # module statistics are over the catalog itself; impressions are log-scaled
    mod_norm = Normalizer.fit(mod_raw, log_cols=[n_cols - 1], clip=features.clip)
    fs = FeatureSpace(ctx_norm, mod_norm, features, mod_norm.transform(mod_raw), catalog.family_of)

    K = log.K
    ips_c = np.broadcast_to(propensity.ips_click[:K], log.slates.shape).copy()
    ips_p = np.broadcast_to(propensity.ips_purchase[:K], log.slates.shape).copy()
    raw = {"user_features": c.user_features, "hero_features": c.hero_features, "platform": c.platform,
           "user_id": c.user_id, "slot_propensity": log.propensities.astype(np.float64)}
    return Dataset(
        page_id=log.page_id.copy(), split=split, bucket=c.bucket.copy(),
        context=fs.featurize_contexts(c), slates=log.slates.copy(),
        y_click=labels["click"], y_intent=labels["intent"], y_attr=attr, y_purchase=labels["purchase"],
        ips_click=ips_c, ips_purchase=ips_p, policy=log.policy.copy(), features=fs, raw=raw,
    )


def split_dataset(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> Tuple[Dataset, Dataset, Dataset]:
    split = assign_split(ds.page_id, fractions, seed)
    out = []
    for code in range(3):
        part = ds.take(split == code)
        part.split = np.full(len(part), code, dtype=np.int64)
        out.append(part)
    return tuple(out)


def policy_mask(ds: Dataset, tag: str) -> np.ndarray:
    return ds.policy == POLICY_CODES[tag]
