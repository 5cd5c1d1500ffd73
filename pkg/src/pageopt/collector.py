"""Logging policies: beta-Bernoulli Thompson sampling, uniform shuffles, a
frozen production ranking, and downsampling of the resulting logs.

Thompson state is per (context bucket, module). It is frozen for the length
of a batch and updated between batches, so every page in a batch ranks
against the same posterior snapshot.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .domain import PageContext, PagePresentation
from .kernels import demote_rows, swap_rows
from .logs import Log, build_log
from .rng import stream
from .simulator import World, oracle_values, sample_contexts, simulate_batch

STRATEGIES = ("swap", "demote", "none")


class InsufficientCandidates(ValueError):
    pass


@dataclass
class CollectorConfig:
    policy_tag: str = "thompson"
    diversity_strategy: str = "swap"
    demotion_factor: float = 0.5
    prior: Tuple[float, float] = (1.0, 1.0)
    batch_period: int = 200
    propensity_mc_samples: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if self.diversity_strategy not in STRATEGIES:
            raise ValueError(f"diversity_strategy must be one of {STRATEGIES}")
        if not 0.0 < self.demotion_factor < 1.0:
            raise ValueError("demotion_factor must be in (0, 1)")
        if min(self.prior) <= 0:
            raise ValueError("prior parameters must be positive")
        if self.batch_period < 1:
            raise ValueError("batch_period must be >= 1")
        if self.policy_tag == "thompson" and self.propensity_mc_samples < 100:
            raise ValueError("propensity_mc_samples must be >= 100 for logged Thompson traffic")


@dataclass
class BetaState:
    alpha: np.ndarray  # (buckets, modules)
    beta: np.ndarray
    pending_clicks: np.ndarray = None
    pending_impressions: np.ndarray = None

    def __post_init__(self):
        if self.pending_clicks is None:
            self.pending_clicks = np.zeros_like(self.alpha)
        if self.pending_impressions is None:
            self.pending_impressions = np.zeros_like(self.alpha)

    @classmethod
    def uniform(cls, n_buckets: int, n_modules: int, prior=(1.0, 1.0)) -> "BetaState":
        a0, b0 = prior
        return cls(np.full((n_buckets, n_modules), float(a0)), np.full((n_buckets, n_modules), float(b0)))

    def copy(self) -> "BetaState":
        return BetaState(self.alpha.copy(), self.beta.copy(), self.pending_clicks.copy(),
                         self.pending_impressions.copy())

    def mean(self) -> np.ndarray:
        return self.alpha / (self.alpha + self.beta)

    def record(self, bucket: np.ndarray, slates: np.ndarray, clicked: np.ndarray) -> None:
        """Accumulate impressions and clicks since the last batch update."""
        b = np.broadcast_to(np.asarray(bucket)[:, None], slates.shape)
        np.add.at(self.pending_impressions, (b.ravel(), slates.ravel()), 1.0)
        np.add.at(self.pending_clicks, (b.ravel(), slates.ravel()), clicked.ravel().astype(np.float64))

    def flush(self) -> "BetaState":
        """Apply pending counts as one batch update and clear them."""
        out = BetaState(self.alpha + self.pending_clicks,
                        self.beta + (self.pending_impressions - self.pending_clicks))
        return out


def ts_update(state: BetaState, batch: Iterable[Tuple[int, int, float, float]]) -> BetaState:
    """Conjugate update: alpha += clicks, beta += impressions - clicks."""
    out = state.copy()
    for bucket, module_id, impressions, clicks in batch:
        if clicks < 0 or impressions < 0:
            raise ValueError("negative counts")
        if clicks > impressions:
            raise ValueError("clicks exceed impressions")
        out.alpha[bucket, module_id] += clicks
        out.beta[bucket, module_id] += impressions - clicks
    return out


# ---------------------------------------------------------------- diversification


def diversify_swap(ranked: Sequence[int], family_of: np.ndarray, limit: Optional[int] = None) -> List[int]:
    """Greedy top-down swap of consecutive same-family modules.

    >>> fam = np.array([0, 0, 1])
    >>> diversify_swap([0, 1, 2], fam)
    [0, 2, 1]
    """
    if len(ranked) == 0:
        raise ValueError("ranked list is empty")
    arr = np.asarray([ranked], dtype=np.int64)
    limit = len(ranked) if limit is None else limit
    return [int(m) for m in swap_rows(arr, family_of, limit)[0]]


def diversify_demote(scores: dict, family_of: dict, gamma: float, K: Optional[int] = None) -> list:
    """Order keys of ``scores`` by repeated argmax, demoting a picked module's
    family by ``gamma`` (compounding)."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must be in (0, 1)")
    keys = list(scores)
    K = len(keys) if K is None else K
    s = np.array([[scores[k] for k in keys]], dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    fam = np.array([family_of[k] for k in keys], dtype=np.int64)
    return [keys[i] for i in demote_rows(s, fam, gamma, K)[0]]


def _orders_from_scores(scores: np.ndarray, candidates: np.ndarray, family_of: np.ndarray, K: int,
                        strategy: str, gamma: float) -> np.ndarray:
    """Turn (rows, candidates) sampled rewards into (rows, K) slates."""
    if strategy == "demote":
        return candidates[demote_rows(scores, family_of[candidates], gamma, K)]
    order = candidates[np.argsort(-scores, axis=1, kind="stable")]
    if strategy == "swap":
        # swap on the whole ranking so a violation in the top K can pull from below it
        order = swap_rows(order, family_of, K)
    return order[:, :K]


def _check_candidates(candidates, K):
    if len(candidates) < K:
        raise InsufficientCandidates(f"{len(candidates)} candidates for {K} slots")


def ts_slates(state: BetaState, bucket: np.ndarray, candidates: np.ndarray, family_of: np.ndarray, K: int,
              strategy: str, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """One Thompson draw per row of ``bucket``; returns (rows, K) slates."""
    candidates = np.asarray(candidates, dtype=np.int64)
    _check_candidates(candidates, K)
    a = state.alpha[np.asarray(bucket)[:, None], candidates[None, :]]
    b = state.beta[np.asarray(bucket)[:, None], candidates[None, :]]
    r = rng.beta(a, b)
    return _orders_from_scores(r, candidates, family_of, K, strategy, gamma)


def slot_frequency(slates: np.ndarray, n_modules: int) -> np.ndarray:
    """(n_modules, K) fraction of rows placing each module at each slot."""
    R, K = slates.shape
    counts = np.zeros((n_modules, K))
    np.add.at(counts, (slates.ravel(), np.tile(np.arange(K), R)), 1.0)
    return counts / R


def propensity_lookup(freq: np.ndarray, slates: np.ndarray, M: int) -> np.ndarray:
    K = slates.shape[1]
    return np.maximum(freq[slates, np.arange(K)[None, :]], 1.0 / (2.0 * M))


def record_propensity(state: BetaState, ctx: PageContext, chosen: Sequence[int], M: int,
                      rng: np.random.Generator, candidates: np.ndarray, family_of: np.ndarray,
                      strategy: str = "swap", gamma: float = 0.5) -> List[float]:
    """Per-slot fraction of ``M`` replays placing the chosen module there, floored at 1/(2M)."""
    if M < 1:
        raise ValueError("M must be >= 1")
    K = len(chosen)
    reps = ts_slates(state, np.full(M, ctx.bucket), candidates, family_of, K, strategy, gamma, rng)
    freq = slot_frequency(reps, int(family_of.shape[0]))
    return [float(x) for x in propensity_lookup(freq, np.asarray([chosen]), M)[0]]


def ts_rank(state: BetaState, ctx: PageContext, candidates: Sequence[int], K: int, strategy: str,
            rng: np.random.Generator, family_of: np.ndarray, gamma: float = 0.5, M: int = 1000,
            page_id: int = 0) -> PagePresentation:
    candidates = np.asarray(candidates, dtype=np.int64)
    slate = ts_slates(state, np.array([ctx.bucket]), candidates, family_of, K, strategy, gamma, rng)[0]
    props = record_propensity(state, ctx, slate, M, rng, candidates, family_of, strategy, gamma)
    return PagePresentation(page_id, ctx, tuple(int(m) for m in slate), "thompson", tuple(props))


def uniform_slates(n: int, candidates: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    candidates = np.asarray(candidates, dtype=np.int64)
    _check_candidates(candidates, K)
    return candidates[np.argsort(rng.random((n, len(candidates))), axis=1)[:, :K]]


def uniform_random_rank(ctx: PageContext, candidates: Sequence[int], K: int, rng: np.random.Generator,
                        page_id: int = 0) -> PagePresentation:
    """Uniform random K-permutation. Every (module, slot) marginal is 1/N."""
    slate = uniform_slates(1, np.asarray(candidates), K, rng)[0]
    N = len(candidates)
    return PagePresentation(page_id, ctx, tuple(int(m) for m in slate), "uniform_random", (1.0 / N,) * K)


def production_slates(scores: np.ndarray, bucket: np.ndarray, candidates: np.ndarray, family_of: np.ndarray,
                      K: int, strategy: str = "swap", gamma: float = 0.5) -> np.ndarray:
    """Deterministic ranking by frozen per-(bucket, module) scores."""
    candidates = np.asarray(candidates, dtype=np.int64)
    _check_candidates(candidates, K)
    s = scores[np.asarray(bucket)[:, None], candidates[None, :]]
    return _orders_from_scores(s, candidates, family_of, K, strategy, gamma)


# ---------------------------------------------------------------- collection runs


@dataclass
class ThompsonTrace:
    """Per-page bookkeeping from a Thompson run, for regret-style checks."""

    bucket: List[np.ndarray] = field(default_factory=list)
    oracle_ctr: List[np.ndarray] = field(default_factory=list)
    clicked: List[np.ndarray] = field(default_factory=list)

    def arrays(self):
        return (np.concatenate(self.bucket), np.concatenate(self.oracle_ctr), np.concatenate(self.clicked))


def collect_thompson(world: World, n_pages: int, cfg: CollectorConfig, state: Optional[BetaState] = None,
                     first_page_id: int = 0, candidates: Optional[np.ndarray] = None):
    """Run batched Thompson sampling in ``world``.

    Returns ``(log, final_state, trace)``. Propensities come from
    ``propensity_mc_samples`` replays per (batch, bucket) against the batch's
    frozen posterior, which is the same distribution a per-page replay sees.
    """
    cfg.validate()
    K = world.K
    N = world.catalog.n_modules
    fam = world.family_of
    candidates = np.arange(N) if candidates is None else np.asarray(candidates, dtype=np.int64)
    state = BetaState.uniform(world.n_buckets, N, cfg.prior) if state is None else state.copy()
    M = cfg.propensity_mc_samples
    logs, trace = [], ThompsonTrace()
    n_batches = (n_pages + cfg.batch_period - 1) // cfg.batch_period
    for b in range(n_batches):
        start = b * cfg.batch_period
        n = min(cfg.batch_period, n_pages - start)
        rng = stream(cfg.seed, "thompson", b)
        ctx = sample_contexts(world, n, rng, first_id=first_page_id + start)
        slates = ts_slates(state, ctx.bucket, candidates, fam, K, cfg.diversity_strategy,
                           cfg.demotion_factor, rng)
        props = np.empty((n, K))
        for bk in np.unique(ctx.bucket):
            rows = ctx.bucket == bk
            reps = ts_slates(state, np.full(M, bk), candidates, fam, K, cfg.diversity_strategy,
                             cfg.demotion_factor, rng)
            props[rows] = propensity_lookup(slot_frequency(reps, N), slates[rows], M)
        ev = simulate_batch(world, ctx.bucket, slates, ctx.context_id, ctx.timestamp, rng)
        log = build_log(ctx.context_id, ctx, slates, "thompson", props, ev)
        clicked = log.slot_labels()["click"]
        state.record(ctx.bucket, slates, clicked)
        state = state.flush()
        logs.append(log)
        trace.bucket.append(ctx.bucket)
        trace.oracle_ctr.append(oracle_values(world, ctx.bucket, slates, "ctr"))
        trace.clicked.append(clicked.any(axis=1))
    return Log.concat(logs), state, trace


def collect_uniform(world: World, n_pages: int, seed: int, first_page_id: int = 0,
                    candidates: Optional[np.ndarray] = None, chunk: int = 5000) -> Log:
    K = world.K
    N = world.catalog.n_modules
    candidates = np.arange(N) if candidates is None else np.asarray(candidates, dtype=np.int64)
    logs = []
    for c, start in enumerate(range(0, n_pages, chunk)):
        n = min(chunk, n_pages - start)
        rng = stream(seed, "uniform", c)
        ctx = sample_contexts(world, n, rng, first_id=first_page_id + start)
        slates = uniform_slates(n, candidates, K, rng)
        ev = simulate_batch(world, ctx.bucket, slates, ctx.context_id, ctx.timestamp, rng)
        logs.append(build_log(ctx.context_id, ctx, slates, "uniform_random",
                              np.full((n, K), 1.0 / len(candidates)), ev))
    return Log.concat(logs)


def collect_production(world: World, n_pages: int, scores: np.ndarray, seed: int, first_page_id: int = 0,
                       strategy: str = "swap", gamma: float = 0.5, chunk: int = 5000) -> Log:
    K = world.K
    N = world.catalog.n_modules
    logs = []
    for c, start in enumerate(range(0, n_pages, chunk)):
        n = min(chunk, n_pages - start)
        rng = stream(seed, "production", c)
        ctx = sample_contexts(world, n, rng, first_id=first_page_id + start)
        slates = production_slates(scores, ctx.bucket, np.arange(N), world.family_of, K, strategy, gamma)
        ev = simulate_batch(world, ctx.bucket, slates, ctx.context_id, ctx.timestamp, rng)
        logs.append(build_log(ctx.context_id, ctx, slates, "production", np.ones((n, K)), ev))
    return Log.concat(logs)


def downsample(log: Log, target_ratio: float, negative_keep_rate: float, rng: np.random.Generator) -> Log:
    """Cap production pages at ``target_ratio`` x exploration pages, then thin
    zero-engagement pages at ``negative_keep_rate``. Engaged pages are never
    dropped by the negative thinning."""
    if target_ratio <= 0 or not 0 < negative_keep_rate <= 1:
        raise ValueError("target_ratio must be > 0 and negative_keep_rate in (0, 1]")
    from .logs import POLICY_CODES

    prod = log.policy == POLICY_CODES["production"]
    n_explore = int(np.sum(~prod))
    cap = int(np.floor(n_explore * target_ratio))
    keep = ~prod
    prod_idx = np.flatnonzero(prod)
    if len(prod_idx) > cap:
        chosen = np.sort(rng.choice(prod_idx, size=cap, replace=False))
    else:
        chosen = prod_idx
    keep[chosen] = True
    engaged = np.isin(log.page_id, log.events.page_id)
    thin = rng.random(len(log)) < negative_keep_rate
    keep &= engaged | thin
    return log.subset(keep)
