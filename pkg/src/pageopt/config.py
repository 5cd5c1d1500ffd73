"""Run configuration: one JSON document with a section per pipeline stage.

Unknown keys are rejected. Section seeds default to values derived from the
global ``seed`` so that ``--seed`` re-seeds every stage at once.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .collector import CollectorConfig
from .simulator import InvalidConfig, SimConfig
from .trnn import TrnnConfig

CONFIG_ENV = "PAGEOPT_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class CollectSection:
    n_thompson_pages: int = 80000
    n_uniform_pages: int = 20000
    diversity_strategy: str = "swap"
    demotion_factor: float = 0.5
    prior: tuple = (1.0, 1.0)
    batch_period: int = 200
    propensity_mc_samples: int = 1000
    seed: Optional[int] = None


@dataclass
class PipelineSection:
    eta: float = 0.5
    eps: float = 1.0
    T_minutes: float = 30.0
    fractions: tuple = (0.8, 0.1, 0.1)
    min_count: int = 1000
    clip: float = 3.0
    seed: Optional[int] = None


@dataclass
class TrainSection:
    d_h: int = 50
    d_f: int = 50
    d_m: int = 50
    d_o: int = 50
    mlp_hidden: int = 50
    mlp_depth: int = 2
    heads: tuple = ("click", "intent", "attributed_purchase")
    objective_mode: str = "learned"
    fixed_weights: Optional[tuple] = None
    head_type: str = "sigmoid"
    epochs: int = 10
    lr: float = 0.001
    batch_size: int = 32
    use_ips: bool = True
    baseline_depth: int = 3
    seed: Optional[int] = None


@dataclass
class InferSection:
    W: Optional[int] = 3
    start_slot: int = 1
    diversity: bool = True


@dataclass
class EvalSection:
    max_contexts: int = 2000
    max_rank_pages: int = 4000
    w_max: float = 20.0
    threshold: float = 0.5


SECTIONS = {"sim": SimConfig, "collect": CollectSection, "pipeline": PipelineSection, "train": TrainSection,
            "infer": InferSection, "eval": EvalSection}


@dataclass
class RunConfig:
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    collect: CollectSection = field(default_factory=CollectSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    train: TrainSection = field(default_factory=TrainSection)
    infer: InferSection = field(default_factory=InferSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # ------------------------------------------------------------ derived configs

    def sim_config(self) -> SimConfig:
        return replace(self.sim, seed=self.seed)

    def collector_config(self) -> CollectorConfig:
        c = self.collect
        return CollectorConfig("thompson", c.diversity_strategy, c.demotion_factor, tuple(c.prior), c.batch_period,
                               c.propensity_mc_samples, self.collect_seed)

    def trnn_config(self, **overrides) -> TrnnConfig:
        t = asdict(self.train)
        t.pop("baseline_depth")
        t["seed"] = self.train_seed
        t["heads"] = tuple(t["heads"])
        if t["fixed_weights"] is not None:
            t["fixed_weights"] = tuple(t["fixed_weights"])
        t.update(overrides)
        return TrnnConfig(**t)

    @property
    def collect_seed(self) -> int:
        return self.seed + 1 if self.collect.seed is None else self.collect.seed

    @property
    def uniform_seed(self) -> int:
        return self.collect_seed + 1000

    @property
    def split_seed(self) -> int:
        return self.seed if self.pipeline.seed is None else self.pipeline.seed

    @property
    def train_seed(self) -> int:
        return self.seed + 2 if self.train.seed is None else self.train.seed

    # ------------------------------------------------------------ io

    def validate(self) -> None:
        try:
            self.sim_config().validate()
            self.collector_config().validate()
            self.trnn_config().validate()
        except (InvalidConfig, ValueError) as e:
            raise ConfigError(str(e)) from None
        p = self.pipeline
        if not (0 < p.eta < 1 and p.eps > 0 and p.T_minutes > 0):
            raise ConfigError("pipeline: need 0 < eta < 1, eps > 0, T_minutes > 0")
        if len(p.fractions) != 3 or abs(sum(p.fractions) - 1) > 1e-9 or min(p.fractions) < 0:
            raise ConfigError("pipeline.fractions: three non-negative values summing to 1")
        if self.collect.n_uniform_pages < 1 or self.collect.n_thompson_pages < 0:
            raise ConfigError("collect: page counts must be positive")
        i = self.infer
        if (i.W is not None and i.W < 1) or not 1 <= i.start_slot <= self.sim.K:
            raise ConfigError("infer: need W >= 1 and 1 <= start_slot <= K")
        if self.eval.w_max <= 0 or self.eval.max_contexts < 1:
            raise ConfigError("eval: need w_max > 0 and max_contexts >= 1")
        if self.train.baseline_depth < 1:
            raise ConfigError("train.baseline_depth must be >= 1")

    def to_dict(self) -> dict:
        d = {"seed": self.seed}
        for name in SECTIONS:
            d[name] = _jsonable(asdict(getattr(self, name)))
        d["sim"].pop("seed")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        unknown = set(d) - {"seed", *SECTIONS}
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        kw = {}
        if "seed" in d:
            if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
                raise ConfigError("seed: must be an integer")
            kw["seed"] = d["seed"]
        for name, cls_ in SECTIONS.items():
            sec = d.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"{name}: must be an object")
            allowed = {f.name for f in fields(cls_)} - ({"seed"} if name == "sim" else set())
            bad = set(sec) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in {name}: {', '.join(f'{name}.{k}' for k in sorted(bad))}")
            vals = {k: (tuple(v) if isinstance(v, list) and k in _TUPLE_KEYS else v) for k, v in sec.items()}
            try:
                kw[name] = cls_(**vals)
            except TypeError as e:
                raise ConfigError(f"{name}: {e}") from None
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
        return cls.from_dict(d)

    def with_seed(self, seed: int) -> "RunConfig":
        c = copy.deepcopy(self)
        c.seed = int(seed)
        return c

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_TUPLE_KEYS = {"prior", "fractions", "heads", "fixed_weights"}


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d


def resolve(path: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    """Config from ``path``, else the file named by ``$PAGEOPT_CONFIG``, else defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        if not Path(path).is_file():
            raise FileNotFoundError(path)
        cfg = RunConfig.load(path)
    else:
        cfg = RunConfig()
        cfg.validate()
    return cfg if seed is None else cfg.with_seed(seed)
