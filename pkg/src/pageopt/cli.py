"""Command-line entry point: ``pageopt <command> [--config PATH] [--seed N] [--out DIR]``.

Every command writes its outputs plus ``config.resolved.json`` and
``VERSION`` into ``--out``. Exit codes: 3 missing input, 4 schema
violation, 5 configuration error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import __version__
from . import experiment as E
from .collector import collect_thompson, collect_uniform
from .config import CONFIG_ENV, ConfigError, RunConfig, resolve
from .logs import Log, SchemaViolation, read_json, write_json, write_jsonl
from .neuro import ShapeMismatch
from .pipeline import Dataset, PropensityTable, attribute_log
from .simulator import World
from .trnn import load_model

EXIT_MISSING_INPUT = 3
EXIT_SCHEMA = 4
EXIT_CONFIG = 5

PAGES, EVENTS = "pages.jsonl", "events.jsonl"
DATASET, DATASET_META = "dataset.jsonl", "dataset_meta.json"


class MissingInput(FileNotFoundError):
    pass


# ---------------------------------------------------------------- helpers


def _need(path, default_name: Optional[str] = None) -> Path:
    """Resolve ``path``; a directory resolves to ``default_name`` inside it."""
    p = Path(path)
    if default_name is not None and p.is_dir():
        p = p / default_name
    if not p.exists():
        raise MissingInput(f"missing input: {p}")
    return p


def _guard(path, loader: Callable):
    """Run ``loader`` and re-raise malformed content as a schema violation naming ``path``."""
    try:
        return loader()
    except (SchemaViolation, MissingInput, FileNotFoundError):
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaViolation(path, 0, f"malformed content ({exc})") from None


def load_world(path) -> World:
    p = _need(path, "world.json")
    return _guard(p, lambda: World.from_dict(read_json(p)))


def load_log(directory) -> Log:
    d = Path(directory)
    return Log.read(_need(d / PAGES), _need(d / EVENTS))


def load_logs(dirs: List[str]) -> Log:
    return Log.concat([load_log(d) for d in dirs])


def load_propensity(path) -> PropensityTable:
    p = _need(path, "propensity.json")
    return _guard(p, lambda: PropensityTable.from_dict(read_json(p)))


def load_dataset(path) -> Dataset:
    p = _need(path, DATASET)
    meta = _need(p.with_name(DATASET_META))
    return _guard(meta, lambda: Dataset.read(p, meta))


def load_checkpoint(path):
    p = _need(path, "model.ckpt")
    return _guard(p, lambda: load_model(p))


def _model_name(path) -> str:
    p = Path(path)
    return p.name if p.is_dir() else (p.parent.name or p.stem)


def prepare_out(out, cfg: RunConfig) -> Path:
    o = Path(out)
    o.mkdir(parents=True, exist_ok=True)
    (o / "config.resolved.json").write_text(cfg.dumps(), encoding="utf-8")
    (o / "VERSION").write_text(f"pageopt {__version__}\n", encoding="utf-8")
    return o


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------- commands


def cmd_simulate(args, cfg: RunConfig) -> None:
    out = prepare_out(args.out, cfg)
    world = E.make_world(cfg)
    write_json(out / "world.json", world.to_dict())
    write_json(out / "catalog.json", world.catalog.to_dict())
    _say(f"world: {world.catalog.n_modules} modules, {world.n_buckets} buckets -> {out}")


def cmd_collect(args, cfg: RunConfig) -> None:
    world = load_world(args.world)
    out = prepare_out(args.out, cfg)
    if args.policy == "thompson":
        n = cfg.collect.n_thompson_pages if args.pages is None else args.pages
        log, _, _ = collect_thompson(world, n, cfg.collector_config(), first_page_id=args.first_page_id)
    else:
        n = cfg.collect.n_uniform_pages if args.pages is None else args.pages
        log = collect_uniform(world, n, cfg.uniform_seed, first_page_id=args.first_page_id)
    log.write(out / PAGES, out / EVENTS)
    _say(f"{args.policy}: {len(log)} pages, {len(log.events.page_id)} events -> {out}")


def cmd_attribute(args, cfg: RunConfig) -> None:
    log = load_logs(args.logs)
    out = prepare_out(args.out, cfg)
    p = cfg.pipeline
    w = attribute_log(log, p.eta, p.eps, p.T_minutes)
    write_jsonl(out / "attribution.jsonl",
                ({"page_id": int(pid), "slots": [int(m) for m in s], "y_attributed_purchase": [float(x) for x in r]}
                 for pid, s, r in zip(log.page_id, log.slates, w)))
    _say(f"attributed {int((w > 0).sum())} clicks over {len(log)} pages -> {out}")


def cmd_propensity(args, cfg: RunConfig) -> None:
    log = load_logs(args.logs)
    out = prepare_out(args.out, cfg)
    prop = E.fit_propensity(log, cfg)
    write_json(out / "propensity.json", prop.to_dict())
    _say("click propensity: " + " ".join(f"{v:.4f}" for v in prop.click_propensity))


def cmd_build_dataset(args, cfg: RunConfig) -> None:
    world = load_world(args.world)
    log = load_logs(args.logs)
    prop = load_propensity(args.propensity)
    out = prepare_out(args.out, cfg)
    ds = E.make_dataset(log, world, prop, cfg)
    ds.write(out / DATASET, out / DATASET_META)
    _say(f"dataset: {len(ds)} pages ({np.bincount(ds.split, minlength=3).tolist()} train/val/test) -> {out}")


def cmd_train(args, cfg: RunConfig) -> None:
    ds = load_dataset(args.dataset)
    out = prepare_out(args.out, cfg)
    model, report = E.train_variant(args.model, ds, cfg, log=_say)
    model.save(out / "model.ckpt")
    write_json(out / "training_report.json", report.to_dict())


def cmd_rank(args, cfg: RunConfig) -> None:
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    out = prepare_out(args.out, cfg)
    ctx = E.eval_contexts(ds, args.limit) if args.split == "test" else ds.select(args.split).take(
        slice(0, args.limit))
    from .inference import rank_page

    rows = []
    for r in range(len(ctx)):
        res = rank_page(model, ctx.context[r], int(ctx.bucket[r]), np.arange(ds.n_modules), ds.K, cfg.infer.W,
                        cfg.infer.start_slot, cfg.infer.diversity)
        rows.append({"page_id": int(ctx.page_id[r]), **res.to_dict()})
    write_jsonl(out / "rankings.jsonl", rows)
    _say(f"ranked {len(rows)} contexts -> {out / 'rankings.jsonl'}")


def cmd_evaluate(args, cfg: RunConfig) -> None:
    world = load_world(args.world)
    ds = load_dataset(args.dataset)
    prop = load_propensity(args.propensity)
    models = {}
    for spec in args.checkpoint:
        name, _, path = spec.rpartition("=")
        models[name or _model_name(path)] = load_checkpoint(path)
    models["popularity"] = E.popularity(ds)
    out = prepare_out(args.out, cfg)
    reward = models[args.reward_model] if args.reward_model else next(iter(models.values()))
    res = E.evaluate_policies(world, ds, models, prop, cfg, reward_model=reward)
    write_json(out / "eval.json", res)
    lines = ["policy,metric,value,half_width,n"]
    for name, rep in res["policies"].items():
        for k, v in rep["metrics"].items():
            hw = rep["half_widths"].get(k)
            lines.append(f"{name},{k},{'' if v is None else repr(v)},{'' if hw is None else repr(hw)},"
                         f"{rep['counts'].get(k, 0)}")
    (out / "eval.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(format_table(res))


def format_table(res: dict) -> str:
    cols = ("oracle_ptr", "oracle_ctr", "ndcg_purchase", "mrpr", "auc", "f1", "dm_ptr", "dr_ptr")
    head = f"{'policy':<12}" + "".join(f"{c:>14}" for c in cols)
    rows = [head]
    for name, rep in res["policies"].items():
        m = rep["metrics"]
        rows.append(f"{name:<12}" + "".join(f"{'n/a' if m.get(c) is None else format(m[c], '.4f'):>14}" for c in cols))
    return "\n".join(rows)


def cmd_e2e(args, cfg: RunConfig) -> None:
    out = prepare_out(args.out, cfg)
    summary = run_e2e(cfg, out, log=_say)
    print(format_table(summary["evaluation"]))
    _say(f"summary -> {out / 'summary.json'}")


def run_e2e(cfg: RunConfig, out: Optional[Path] = None, log: Callable = lambda m: None,
            variants=E.MODEL_VARIANTS) -> dict:
    """simulate -> collect -> propensity -> attribute -> dataset -> train -> rank -> evaluate."""
    world = E.make_world(cfg)
    ts, uni, trace = E.collect_logs(world, cfg)
    log(f"collected {len(ts)} thompson + {len(uni)} uniform pages")
    prop = E.fit_propensity(uni, cfg)
    full = Log.concat([ts, uni])
    ds = E.make_dataset(full, world, prop, cfg)
    models, reports = {}, {}
    for v in variants:
        models[v], reports[v] = E.train_variant(v, ds, cfg, log=log)
    models["popularity"] = E.popularity(ds)
    res = E.evaluate_policies(world, ds, models, prop, cfg)
    summary = {
        "version": __version__,
        "seed": cfg.seed,
        "pages": {"thompson": len(ts), "uniform": len(uni),
                  "split": np.bincount(ds.split, minlength=3).tolist()},
        "propensity": prop.to_dict(),
        "true_examination": world.examination_prob.tolist(),
        "models": {v: {"params": int(models[v].n_network_params()), "best_epoch": reports[v].best_epoch,
                       "final_train_loss": reports[v].epochs[-1].train_loss,
                       "final_val_loss": reports[v].epochs[-1].val_loss,
                       "objective_weights": reports[v].epochs[-1].objective_weights} for v in variants},
        "evaluation": res,
    }
    if out is not None:
        out = Path(out)
        write_json(out / "world.json", world.to_dict())
        write_json(out / "catalog.json", world.catalog.to_dict())
        for name, lg in (("thompson", ts), ("uniform", uni)):
            (out / name).mkdir(exist_ok=True)
            lg.write(out / name / PAGES, out / name / EVENTS)
        write_json(out / "propensity.json", prop.to_dict())
        ds.write(out / DATASET, out / DATASET_META)
        for v in variants:
            models[v].save(out / f"{v}.ckpt")
            write_json(out / f"{v}_training_report.json", reports[v].to_dict())
        write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pageopt", description="Whole-page module ranking workbench.")
    ap.add_argument("--version", action="version", version=f"pageopt {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help=f"JSON run config (default: ${CONFIG_ENV}, else built-in defaults)")
        p.add_argument("--seed", type=int, help="global seed; overrides the config")
        p.add_argument("--out", default=".", help="output directory")
        p.set_defaults(func=fn)
        return p

    add("simulate", cmd_simulate, "generate a world (world.json, catalog.json)")
    p = add("collect", cmd_collect, "log traffic from a logging policy")
    p.add_argument("--world", required=True)
    p.add_argument("--policy", choices=("thompson", "uniform"), default="thompson")
    p.add_argument("--pages", type=int)
    p.add_argument("--first-page-id", type=int, default=0)
    for name, fn, h in (("attribute", cmd_attribute, "purchase-intent attribution per logged slot"),
                        ("propensity", cmd_propensity, "slot propensities from uniform-random logs")):
        p = add(name, fn, h)
        p.add_argument("--logs", nargs="+", required=True, help="directories holding pages.jsonl and events.jsonl")
    p = add("build-dataset", cmd_build_dataset, "labels, IPS weights and features")
    p.add_argument("--world", required=True)
    p.add_argument("--logs", nargs="+", required=True)
    p.add_argument("--propensity", required=True)
    p = add("train", cmd_train, "train a ranker")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", choices=E.MODEL_VARIANTS, default="trnn_ips")
    p = add("rank", cmd_rank, "rank contexts with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--limit", type=int, default=100)
    p = add("evaluate", cmd_evaluate, "offline metrics and off-policy estimates")
    p.add_argument("--world", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--propensity", required=True)
    p.add_argument("--checkpoint", nargs="+", required=True, help="[name=]path, repeatable")
    p.add_argument("--reward-model", help="name of the checkpoint used for DM/DR (default: first)")
    add("e2e", cmd_e2e, "run the whole pipeline and write summary.json")
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            cfg = resolve(args.config, args.seed)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {exc}") from None
        args.func(args, cfg)
    except ConfigError as exc:
        _say(f"config error: {exc}")
        return EXIT_CONFIG
    except MissingInput as exc:
        _say(str(exc))
        return EXIT_MISSING_INPUT
    except (SchemaViolation, ShapeMismatch) as exc:
        _say(f"schema violation: {exc}")
        return EXIT_SCHEMA
    return 0


if __name__ == "__main__":
    sys.exit(main())
