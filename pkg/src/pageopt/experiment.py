"""Stage functions chaining simulator, collector, pipeline, training and evaluation.

The CLI subcommands and the end-to-end run are thin wrappers over these.
"""
from __future__ import annotations

import warnings
from typing import Callable, Dict, Optional

import numpy as np

from .baselines import MlpModel, PopularityModel
from .collector import collect_thompson, collect_uniform
from .config import RunConfig
from .domain import consecutive_family_violations
from .evaluation import EvalReport, dm_estimate, dr_estimate, f1_auc, ndcg_rows, reciprocal_ranks
from .inference import InfeasibleDiversity, rank_page
from .logs import Log
from .pipeline import Dataset, FeatureConfig, PropensityTable, build_dataset, estimate_propensity
from .simulator import World, gen_world, oracle_best_slate, oracle_values
from .trnn import TrnnModel, train

MODEL_VARIANTS = ("trnn_ips", "trnn_noips", "mlp", "trnn_click")


def make_world(cfg: RunConfig) -> World:
    return gen_world(cfg.sim_config())


def collect_logs(world: World, cfg: RunConfig):
    """Thompson-sampling traffic followed by uniform-random traffic; returns (ts, uniform, trace)."""
    c = cfg.collect
    ts, _, trace = collect_thompson(world, c.n_thompson_pages, cfg.collector_config())
    uni = collect_uniform(world, c.n_uniform_pages, cfg.uniform_seed, first_page_id=c.n_thompson_pages)
    return ts, uni, trace


def fit_propensity(uniform_log: Log, cfg: RunConfig) -> PropensityTable:
    return estimate_propensity(uniform_log.with_policy("uniform_random"), min_count=cfg.pipeline.min_count)


def make_dataset(log: Log, world: World, prop: PropensityTable, cfg: RunConfig) -> Dataset:
    p = cfg.pipeline
    feats = FeatureConfig(p.clip, world.n_buckets, world.config.n_platforms)
    return build_dataset(log, world.catalog, prop, p.eta, p.eps, p.T_minutes, feats, tuple(p.fractions),
                         cfg.split_seed)


def build_model(variant: str, ds: Dataset, cfg: RunConfig):
    fs = ds.features
    args = (ds.context.shape[1], fs.module_features, fs.family_of, ds.K)
    if variant == "trnn_ips":
        return TrnnModel(cfg.trnn_config(), *args)
    if variant == "trnn_noips":
        return TrnnModel(cfg.trnn_config(use_ips=False), *args)
    if variant == "trnn_click":
        return TrnnModel(cfg.trnn_config(heads=("click",), fixed_weights=None), *args)
    if variant == "mlp":
        return MlpModel.matched_to(TrnnModel(cfg.trnn_config(), *args), depth=cfg.train.baseline_depth)
    raise ValueError(f"unknown model variant {variant!r}")


def train_variant(variant: str, ds: Dataset, cfg: RunConfig, log: Optional[Callable] = None):
    model = build_model(variant, ds, cfg)
    model, report = train(model, ds.select("train"), ds.select("validation"))
    if log:
        last = report.epochs[-1]
        log(f"trained {variant}: {model.n_network_params()} params, best epoch {report.best_epoch}, "
            f"val loss {last.val_loss}")
    return model, report


def popularity(ds: Dataset) -> PopularityModel:
    train_ds = ds.select("train")
    return PopularityModel.fit(train_ds, ds.n_modules, ds.features.family_of, ds.features.config.n_buckets)


# ---------------------------------------------------------------- evaluation


def eval_contexts(ds: Dataset, n: int) -> Dataset:
    test = ds.select("test")
    order = np.argsort(test.page_id, kind="stable")[:n]
    return test.take(order)


def rank_contexts(model, ctx: Dataset, cfg: RunConfig, candidates=None) -> np.ndarray:
    cand = np.arange(ctx.n_modules) if candidates is None else candidates
    out = np.empty((len(ctx), ctx.K), dtype=np.int64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InfeasibleDiversity)
        for r in range(len(ctx)):
            out[r] = rank_page(model, ctx.context[r], int(ctx.bucket[r]), cand, ctx.K, cfg.infer.W,
                               cfg.infer.start_slot, cfg.infer.diversity).slate
    return out


def rerank_metrics(model, pages: Dataset, W) -> Dict[str, np.ndarray]:
    """NDCG and reciprocal purchase rank after the model re-orders each page's logged modules."""
    labels = np.zeros_like(pages.y_purchase)
    pos = np.nonzero(pages.y_purchase.any(axis=1))[0]
    for r in pos:
        slate = pages.slates[r]
        order = rank_page(model, pages.context[r], int(pages.bucket[r]), slate, pages.K, W, diversity=False).slate
        lookup = dict(zip(slate.tolist(), pages.y_purchase[r].tolist()))
        labels[r] = [lookup[int(m)] for m in order]
    return {"ndcg": ndcg_rows(labels, pages.K), "rr": reciprocal_ranks(labels[pos])}


def purchase_probs(model, pages: Dataset) -> np.ndarray:
    return model.teacher_forced_probs(pages.context, pages.slates, pages.bucket)[..., model.purchase_index]


def evaluate_policies(world: World, ds: Dataset, models: Dict[str, object], prop: PropensityTable,
                      cfg: RunConfig, reward_model=None) -> dict:
    """Oracle, ranking and off-policy metrics for every model policy on held-out contexts."""
    ctx = eval_contexts(ds, cfg.eval.max_contexts)
    rank_pages_ds = eval_contexts(ds, cfg.eval.max_rank_pages)
    reward_model = reward_model or models.get("trnn_ips")
    out = {"n_contexts": len(ctx), "n_rank_pages": len(rank_pages_ds), "policies": {}}

    best = {m: np.array([oracle_best_slate(world, b, m)[0] for b in range(world.n_buckets)]) for m in ("ptr", "ctr")}
    ref = EvalReport()
    for m in ("ptr", "ctr"):
        ref.add_mean(f"oracle_best_{m}", oracle_values(world, ctx.bucket, best[m][ctx.bucket], m))
    out["reference"] = ref.to_dict()

    logged_labels = {"ctr": ctx.y_click, "ptr": ctx.y_purchase}
    for name, model in models.items():
        rep = EvalReport(config={"W": cfg.infer.W, "start_slot": cfg.infer.start_slot,
                                 "diversity": cfg.infer.diversity})
        slates = rank_contexts(model, ctx, cfg)
        for m in ("ptr", "ctr"):
            rep.add_mean(f"oracle_{m}", oracle_values(world, ctx.bucket, slates, m))
        rep.add("family_violations", consecutive_family_violations(slates, world.family_of), len(slates))
        rr = rerank_metrics(model, rank_pages_ds, cfg.infer.W)
        rep.add_mean("ndcg_purchase", rr["ndcg"])
        rep.add_mean("mrpr", rr["rr"])
        prec, rec, f1, auc = f1_auc(np.clip(purchase_probs(model, rank_pages_ds), 0, 1), rank_pages_ds.y_purchase,
                                    cfg.eval.threshold)
        n = rank_pages_ds.y_purchase.size
        rep.add("precision", prec, n), rep.add("recall", rec, n), rep.add("f1", f1, n), rep.add("auc", auc, n)
        if reward_model is not None:
            heads = getattr(reward_model, "heads", ())
            for m, head, e in (("ctr", "click", prop.click_propensity), ("ptr", "attributed_purchase",
                                                                          prop.purchase_propensity)):
                if head not in heads:
                    continue
                p_hat = reward_model.teacher_forced_probs(ctx.context, slates, ctx.bucket)[..., heads.index(head)]
                dm = dm_estimate(p_hat, e)
                rep.add(f"dm_{m}", dm.value, dm.n, dm.half_width)
                dr = dr_estimate(ctx.slates, logged_labels[m], ctx.raw["slot_propensity"], slates, p_hat, e,
                                 cfg.eval.w_max)
                rep.add(f"dr_{m}", dr.value, dr.n, dr.half_width)
                rep.add(f"dr_{m}_unclipped", dr.raw, dr.n)
        out["policies"][name] = rep.to_dict()
    return out
