"""Synthetic world with known engagement probabilities.

Users examine slot ``s`` with probability ``P_e(s)`` independently of content
(position-based model, not cascade). An examined module is clicked with its
ground-truth click probability for the page's context bucket; watch /
add-to-cart and purchase fire only after a click, independently of each
other. Because examination is independent per slot, the probability that a
page receives at least one click (purchase) has the closed form used by
:func:`oracle_page_value`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .domain import (
    Catalog,
    EngagementEvent,
    ModuleCandidate,
    ModuleFamily,
    PageContext,
    PagePresentation,
)
from .rng import stream

EVENT_CODES = {"click": 0, "watch": 1, "add_to_cart": 2, "purchase": 3}
EVENT_NAMES = {v: k for k, v in EVENT_CODES.items()}


class InvalidConfig(ValueError):
    pass


class UnknownModule(KeyError):
    pass


@dataclass
class SimConfig:
    n_families: int = 8
    modules_per_family: int = 5
    K: int = 6
    n_buckets: int = 4
    bucket_weights: Optional[List[float]] = None
    n_users: int = 2000
    pe_shape: str = "log_decay"  # log_decay | geometric | custom
    pe_ratio: float = 0.8
    pe_custom: Optional[List[float]] = None
    click_range: List[float] = field(default_factory=lambda: [0.02, 0.30])
    purchase_range: List[float] = field(default_factory=lambda: [0.02, 0.50])
    intent_range: List[float] = field(default_factory=lambda: [0.05, 0.60])
    session_gap_minutes: float = 30.0
    slot_delay_seconds: float = 5.0
    page_interval_seconds: float = 1.0
    n_user_features: int = 4
    n_hero_features: int = 4
    n_module_features: int = 6
    n_theme_features: int = 3
    n_platforms: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.n_families < 2:
            raise InvalidConfig("n_families must be >= 2")
        if self.modules_per_family < 1 or self.K < 1 or self.n_buckets < 1:
            raise InvalidConfig("modules_per_family, K and n_buckets must be >= 1")
        if self.n_families * self.modules_per_family < self.K + 2:
            raise InvalidConfig("n_families * modules_per_family must be >= K + 2")
        for name in ("click_range", "purchase_range", "intent_range"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise InvalidConfig(f"{name} must satisfy 0 <= lo <= hi <= 1")
        if self.pe_shape not in ("log_decay", "geometric", "custom"):
            raise InvalidConfig(f"unknown pe_shape {self.pe_shape!r}")
        if self.pe_shape == "custom":
            pe = self.pe_custom or []
            if len(pe) != self.K or pe[0] != 1.0 or any(not 0 < x <= 1 for x in pe):
                raise InvalidConfig("pe_custom must have K values in (0,1] starting at 1")
            if any(b > a for a, b in zip(pe, pe[1:])):
                raise InvalidConfig("pe_custom must be non-increasing")
        if self.pe_shape == "geometric" and not 0 < self.pe_ratio <= 1:
            raise InvalidConfig("pe_ratio must be in (0,1]")
        if self.bucket_weights is not None:
            w = self.bucket_weights
            if len(w) != self.n_buckets or any(x < 0 for x in w) or sum(w) <= 0:
                raise InvalidConfig("bucket_weights must be n_buckets non-negative values")
        if self.n_users < 1 or self.n_platforms < 1:
            raise InvalidConfig("n_users and n_platforms must be >= 1")

    @property
    def session_gap_seconds(self) -> float:
        return 60.0 * self.session_gap_minutes


def examination_profile(cfg: SimConfig) -> np.ndarray:
    s = np.arange(1, cfg.K + 1, dtype=np.float64)
    if cfg.pe_shape == "log_decay":
        return 1.0 / np.log2(s + 1.0)
    if cfg.pe_shape == "geometric":
        return cfg.pe_ratio ** (s - 1.0)
    return np.asarray(cfg.pe_custom, dtype=np.float64)


@dataclass
class World:
    config: SimConfig
    catalog: Catalog
    bucket_weights: np.ndarray
    user_means: np.ndarray  # (B, du)
    hero_means: np.ndarray  # (B, de)
    platform_weights: np.ndarray
    true_click_prob: np.ndarray  # (B, N)
    true_purchase_given_click: np.ndarray  # (B, N)
    true_intent_given_click: np.ndarray  # (B, N)
    examination_prob: np.ndarray  # (K,)

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def K(self) -> int:
        return self.config.K

    @property
    def n_buckets(self) -> int:
        return self.true_click_prob.shape[0]

    @property
    def family_of(self) -> np.ndarray:
        return self.catalog.family_of

    def event_prob(self, metric: str) -> np.ndarray:
        """Examination-free per-(bucket, module) probability for ``ctr`` or ``ptr``."""
        if metric == "ctr":
            return self.true_click_prob
        if metric == "ptr":
            return self.true_click_prob * self.true_purchase_given_click
        raise ValueError(f"metric must be 'ctr' or 'ptr', got {metric!r}")

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "catalog": self.catalog.to_dict(),
            "bucket_weights": self.bucket_weights.tolist(),
            "user_means": self.user_means.tolist(),
            "hero_means": self.hero_means.tolist(),
            "platform_weights": self.platform_weights.tolist(),
            "true_click_prob": self.true_click_prob.tolist(),
            "true_purchase_given_click": self.true_purchase_given_click.tolist(),
            "true_intent_given_click": self.true_intent_given_click.tolist(),
            "examination_prob": self.examination_prob.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        a = lambda k: np.asarray(d[k], dtype=np.float64)  # noqa: E731
        return cls(
            config=SimConfig(**d["config"]),
            catalog=Catalog.from_dict(d["catalog"]),
            bucket_weights=a("bucket_weights"),
            user_means=a("user_means"),
            hero_means=a("hero_means"),
            platform_weights=a("platform_weights"),
            true_click_prob=a("true_click_prob"),
            true_purchase_given_click=a("true_purchase_given_click"),
            true_intent_given_click=a("true_intent_given_click"),
            examination_prob=a("examination_prob"),
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, World) and self.to_dict() == other.to_dict()


def _squash(logit: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return lo + (hi - lo) / (1.0 + np.exp(-logit))


def gen_world(cfg: SimConfig) -> World:
    """Build a world deterministically from ``cfg`` (including its seed)."""
    cfg.validate()
    rng = stream(cfg.seed, "world")
    F, per, B = cfg.n_families, cfg.modules_per_family, cfg.n_buckets
    dm, dt = cfg.n_module_features, cfg.n_theme_features

    themes = rng.normal(size=(F, dt))
    mix = rng.normal(size=(dt, dm)) / math.sqrt(dt)
    families = tuple(ModuleFamily(f, tuple(float(x) for x in themes[f])) for f in range(F))
    family_of = np.repeat(np.arange(F), per)
    feats = themes[family_of] @ mix + 0.8 * rng.normal(size=(F * per, dm))
    modules = tuple(
        ModuleCandidate(i, int(family_of[i]), tuple(float(x) for x in feats[i])) for i in range(F * per)
    )
    catalog = Catalog(families, modules)

    # click and purchase tastes are drawn independently so the modules that
    # attract clicks are not the ones that convert
    z = feats / math.sqrt(dm)
    click_taste = rng.normal(size=(B, dm))
    buy_taste = rng.normal(size=(B, dm))
    intent_taste = rng.normal(size=(B, dm))
    n = F * per
    click_logit = 2.0 * click_taste @ z.T + 0.5 * rng.normal(size=(B, n))
    buy_logit = 2.0 * buy_taste @ z.T + 0.5 * rng.normal(size=(B, n))
    intent_logit = 2.0 * intent_taste @ z.T + 0.5 * rng.normal(size=(B, n))

    bw = np.ones(B) if cfg.bucket_weights is None else np.asarray(cfg.bucket_weights, dtype=np.float64)
    plat = np.linspace(1.0, 0.4, cfg.n_platforms)
    return World(
        config=cfg,
        catalog=catalog,
        bucket_weights=bw / bw.sum(),
        user_means=rng.normal(size=(B, cfg.n_user_features)),
        hero_means=rng.normal(size=(B, cfg.n_hero_features)),
        platform_weights=plat / plat.sum(),
        true_click_prob=_squash(click_logit, *cfg.click_range),
        true_purchase_given_click=_squash(buy_logit, *cfg.purchase_range),
        true_intent_given_click=_squash(intent_logit, *cfg.intent_range),
        examination_prob=examination_profile(cfg),
    )


# ---------------------------------------------------------------- contexts


@dataclass
class ContextBatch:
    context_id: np.ndarray
    bucket: np.ndarray
    user_features: np.ndarray
    hero_features: np.ndarray
    platform: np.ndarray
    user_id: np.ndarray
    timestamp: np.ndarray

    def __len__(self) -> int:
        return len(self.bucket)

    def context(self, i: int) -> PageContext:
        return PageContext(
            int(self.context_id[i]),
            int(self.bucket[i]),
            tuple(float(x) for x in self.user_features[i]),
            tuple(float(x) for x in self.hero_features[i]),
            int(self.platform[i]),
            int(self.user_id[i]),
            float(self.timestamp[i]),
        )

    def contexts(self) -> List[PageContext]:
        return [self.context(i) for i in range(len(self))]

    @classmethod
    def from_contexts(cls, ctxs: Sequence[PageContext]) -> "ContextBatch":
        return cls(
            np.array([c.context_id for c in ctxs], dtype=np.int64),
            np.array([c.bucket for c in ctxs], dtype=np.int64),
            np.array([c.user_features for c in ctxs], dtype=np.float64).reshape(len(ctxs), -1),
            np.array([c.hero_features for c in ctxs], dtype=np.float64).reshape(len(ctxs), -1),
            np.array([c.platform for c in ctxs], dtype=np.int64),
            np.array([c.user_id for c in ctxs], dtype=np.int64),
            np.array([c.timestamp for c in ctxs], dtype=np.float64),
        )


def sample_contexts(world: World, n: int, rng: np.random.Generator, first_id: int = 0) -> ContextBatch:
    """Draw ``n`` page contexts; page ``i`` is viewed at ``(first_id + i) * page_interval``."""
    cfg = world.config
    bucket = rng.choice(world.n_buckets, size=n, p=world.bucket_weights)
    user = world.user_means[bucket] + rng.normal(size=(n, cfg.n_user_features))
    hero = world.hero_means[bucket] + rng.normal(size=(n, cfg.n_hero_features))
    platform = rng.choice(cfg.n_platforms, size=n, p=world.platform_weights)
    user_id = rng.integers(0, cfg.n_users, size=n)
    ids = np.arange(first_id, first_id + n, dtype=np.int64)
    return ContextBatch(ids, bucket.astype(np.int64), user, hero, platform.astype(np.int64),
                        user_id.astype(np.int64), ids * cfg.page_interval_seconds)


def sample_page_context(world: World, rng: np.random.Generator, context_id: int = 0) -> PageContext:
    return sample_contexts(world, 1, rng, first_id=context_id).context(0)


# ---------------------------------------------------------------- engagement


@dataclass
class EventArrays:
    """Column-oriented event log, sorted by (page, timestamp, slot, type)."""

    page_id: np.ndarray
    slot: np.ndarray
    module_id: np.ndarray
    event_code: np.ndarray
    timestamp: np.ndarray

    def __len__(self) -> int:
        return len(self.page_id)

    def to_events(self) -> List[EngagementEvent]:
        return [
            EngagementEvent(int(p), int(s), int(m), EVENT_NAMES[int(c)], float(t))
            for p, s, m, c, t in zip(self.page_id, self.slot, self.module_id, self.event_code, self.timestamp)
        ]

    @classmethod
    def from_events(cls, events: Sequence[EngagementEvent]) -> "EventArrays":
        return cls(
            np.array([e.page_id for e in events], dtype=np.int64),
            np.array([e.slot for e in events], dtype=np.int64),
            np.array([e.module_id for e in events], dtype=np.int64),
            np.array([EVENT_CODES[e.event_type] for e in events], dtype=np.int64),
            np.array([e.timestamp for e in events], dtype=np.float64),
        )

    @classmethod
    def concat(cls, parts: Sequence["EventArrays"]) -> "EventArrays":
        if not parts:
            z = np.zeros(0, dtype=np.int64)
            return cls(z, z, z, z, np.zeros(0))
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("page_id", "slot", "module_id", "event_code", "timestamp")))


def simulate_batch(
    world: World,
    bucket: np.ndarray,
    slates: np.ndarray,
    page_ids: np.ndarray,
    page_times: np.ndarray,
    rng: np.random.Generator,
) -> EventArrays:
    """Simulate engagement for a batch of pages (rows of ``slates``)."""
    slates = np.asarray(slates, dtype=np.int64)
    n, K = slates.shape
    N = world.catalog.n_modules
    if n and (slates.min() < 0 or slates.max() >= N):
        raise UnknownModule("slate references a module outside the world")
    cfg = world.config
    pe = world.examination_prob[:K]
    b = np.asarray(bucket, dtype=np.int64)[:, None]
    p_click = pe[None, :] * world.true_click_prob[b, slates]
    p_intent = world.true_intent_given_click[b, slates]
    p_buy = world.true_purchase_given_click[b, slates]

    u = rng.random(size=(5, n, K))
    click = u[0] < p_click
    intent = click & (u[1] < p_intent)
    buy = click & (u[2] < p_buy)
    intent_code = np.where(u[3] < 0.5, EVENT_CODES["watch"], EVENT_CODES["add_to_cart"])

    slot_idx = np.broadcast_to(np.arange(1, K + 1), (n, K))
    t_click = np.asarray(page_times, dtype=np.float64)[:, None] + slot_idx * cfg.slot_delay_seconds
    t_intent = t_click + 0.5 * cfg.slot_delay_seconds * u[3]
    t_buy = t_click + 0.5 * cfg.session_gap_seconds * u[4]

    pid = np.broadcast_to(np.asarray(page_ids, dtype=np.int64)[:, None], (n, K))
    parts = []
    for mask, code, t in (
        (click, np.full((n, K), EVENT_CODES["click"]), t_click),
        (intent, intent_code, t_intent),
        (buy, np.full((n, K), EVENT_CODES["purchase"]), t_buy),
    ):
        parts.append((pid[mask], slot_idx[mask], slates[mask], code[mask], t[mask]))
    cols = [np.concatenate([p[i] for p in parts]) for i in range(5)]
    order = np.lexsort((cols[3], cols[1], cols[4], cols[0]))
    return EventArrays(*(c[order] for c in cols))


def simulate_engagement(world: World, p: PagePresentation, rng: np.random.Generator) -> List[EngagementEvent]:
    slates = np.array([p.slots], dtype=np.int64)
    ev = simulate_batch(world, np.array([p.context.bucket]), slates, np.array([p.page_id]),
                        np.array([p.context.timestamp]), rng)
    return ev.to_events()


# ---------------------------------------------------------------- oracle


def oracle_values(world: World, bucket: np.ndarray, slates: np.ndarray, metric: str) -> np.ndarray:
    """Exact P(at least one click/purchase) for each row of ``slates``."""
    slates = np.asarray(slates, dtype=np.int64)
    if slates.size and (slates.min() < 0 or slates.max() >= world.catalog.n_modules):
        raise UnknownModule("slate references a module outside the world")
    K = slates.shape[1]
    q = world.examination_prob[:K][None, :] * world.event_prob(metric)[np.asarray(bucket)[:, None], slates]
    return 1.0 - np.prod(1.0 - q, axis=1)


def oracle_page_value(world: World, p: PagePresentation, metric: str) -> float:
    return float(oracle_values(world, np.array([p.context.bucket]), np.array([p.slots]), metric)[0])


def _family_sequences(F: int, K: int, diverse: bool) -> np.ndarray:
    seqs = np.arange(F, dtype=np.int64)[:, None]
    for _ in range(K - 1):
        nxt = np.arange(F, dtype=np.int64)
        rep = np.repeat(seqs, F, axis=0)
        col = np.tile(nxt, len(seqs))
        keep = rep[:, -1] != col if diverse else np.ones(len(col), dtype=bool)
        seqs = np.concatenate([rep[keep], col[keep][:, None]], axis=1)
    return seqs


def oracle_best_slate(world: World, bucket: int, metric: str, diverse: bool = True,
                      K: Optional[int] = None) -> tuple:
    """Best slate under the true probabilities, returned as (slate, value).

    Exact: an optimal slate uses each family's best modules, and within a
    family the better module takes the earlier (more examined) slot, so it
    suffices to enumerate family sequences.
    """
    K = world.K if K is None else K
    p = world.event_prob(metric)[bucket]
    pe = world.examination_prob[:K]
    fam = world.family_of
    if not diverse:
        top = np.argsort(-p, kind="stable")[:K]
        slate = np.asarray(top, dtype=np.int64)
        return slate, float(1.0 - np.prod(1.0 - pe * p[slate]))
    F = world.catalog.n_families
    ranked = [np.flatnonzero(fam == f)[np.argsort(-p[fam == f], kind="stable")] for f in range(F)]
    depth = max(len(r) for r in ranked)
    table = np.full((F, depth), -1, dtype=np.int64)
    for f, r in enumerate(ranked):
        table[f, :len(r)] = r
    seqs = _family_sequences(F, K, diverse=True)
    occ = np.zeros_like(seqs)
    for s in range(1, K):
        occ[:, s] = np.sum(seqs[:, :s] == seqs[:, s:s + 1], axis=1)
    occ_ok = occ < depth
    mods = np.where(occ_ok, table[seqs, np.minimum(occ, depth - 1)], -1)
    valid = np.all(mods >= 0, axis=1)
    if not valid.any():
        raise ValueError("no diversity-feasible slate exists")
    seqs, mods = seqs[valid], mods[valid]
    vals = 1.0 - np.prod(1.0 - pe[None, :] * p[mods], axis=1)
    best = int(np.argmax(vals))
    return mods[best], float(vals[best])
