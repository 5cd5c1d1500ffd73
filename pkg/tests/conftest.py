import numpy as np
import pytest

from pageopt.collector import CollectorConfig, collect_thompson, collect_uniform
from pageopt.logs import Log
from pageopt.pipeline import FeatureConfig, build_dataset, estimate_propensity
from pageopt.simulator import SimConfig, gen_world
from pageopt.trnn import TrnnConfig


def tiny_config(**kw) -> TrnnConfig:
    base = dict(d_h=4, d_f=3, d_m=4, d_o=4, mlp_hidden=5, mlp_depth=2, seed=0)
    base.update(kw)
    return TrnnConfig(**base)


def micro_problem(seed: int, B: int = 3, K: int = 3, N: int = 6, F: int = 3, dx: int = 4, dmod: int = 3,
                  n_heads: int = 3):
    """Random contexts, slates, soft labels and weights for gradient checks."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(B, dx))
    mf = rng.normal(size=(N, dmod))
    fam = np.arange(N) % F
    slates = np.stack([rng.permutation(N)[:K] for _ in range(B)])
    Y = rng.random((B, K, n_heads))
    W = rng.uniform(0.5, 2.0, size=(B, K, n_heads))
    return x, mf, fam, slates, Y, W


@pytest.fixture(scope="session")
def small_world():
    return gen_world(SimConfig(n_families=4, modules_per_family=3, K=4, n_buckets=2, n_users=200, seed=7))


@pytest.fixture(scope="session")
def small_logs(small_world):
    ts, _, _ = collect_thompson(small_world, 1200, CollectorConfig(batch_period=200, propensity_mc_samples=200,
                                                                   seed=3))
    uni = collect_uniform(small_world, 3000, seed=4, first_page_id=1200)
    return ts, uni


@pytest.fixture(scope="session")
def small_dataset(small_world, small_logs):
    ts, uni = small_logs
    prop = estimate_propensity(uni, min_count=500)
    feats = FeatureConfig(3.0, small_world.n_buckets, small_world.config.n_platforms)
    return build_dataset(Log.concat([ts, uni]), small_world.catalog, prop, 0.5, 1.0, 30.0, feats, seed=0)


class PageBatch:
    """Minimal stand-in for a dataset split: arrays only, unit IPS unless given."""

    def __init__(self, context, slates, y_click, y_intent, y_attr, ips_click=None, ips_purchase=None):
        self.context, self.slates = context, slates
        self.y_click, self.y_intent, self.y_attr = y_click, y_intent, y_attr
        self.y_purchase = (y_attr > 0.5).astype(np.int64)
        self.ips_click = np.ones(slates.shape) if ips_click is None else ips_click
        self.ips_purchase = np.ones(slates.shape) if ips_purchase is None else ips_purchase
        self.bucket = np.zeros(len(slates), dtype=np.int64)

    def __len__(self):
        return len(self.context)

    @property
    def K(self):
        return self.slates.shape[1]


def overfit_suite(seed: int = 0, n: int = 32, K: int = 4, N: int = 12, F: int = 4, dx: int = 6, dmod: int = 5):
    """32 random pages with random binary labels; returns (batch, module_features, family_of)."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, dx))
    mf = rng.normal(size=(N, dmod))
    fam = np.arange(N) % F
    slates = np.stack([rng.permutation(N)[:K] for _ in range(n)])
    y = [(rng.random((n, K)) < 0.3).astype(np.float64) for _ in range(3)]
    return PageBatch(x, slates, *y), mf, fam


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
