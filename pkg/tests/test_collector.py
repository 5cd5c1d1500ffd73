import numpy as np
import pytest

from pageopt.collector import (BetaState, CollectorConfig, collect_thompson, collect_uniform, downsample,
                               record_propensity, ts_rank, ts_update, uniform_random_rank, uniform_slates)
from pageopt.domain import PageContext, consecutive_family_violations, validate_presentation
from pageopt.logs import Log
from pageopt.rng import stream
from pageopt.simulator import SimConfig, gen_world

CTX = PageContext(0, 0, (0.0,), (0.0,), 0)


def test_beta_update():
    s = ts_update(BetaState.uniform(1, 2), [(0, 1, 10, 3)])
    assert (s.alpha[0, 1], s.beta[0, 1]) == (4.0, 8.0)
    same = ts_update(BetaState.uniform(1, 2), [])
    np.testing.assert_array_equal(same.alpha, 1.0)


def _dominant(n=10):
    s = BetaState.uniform(1, n)
    s.alpha[:] = 1.0
    s.beta[:] = 1e6
    s.alpha[0, 3], s.beta[0, 3] = 1e6, 1.0
    return s


def test_dominant_module_first():
    fam = np.arange(10) % 5
    rng = stream(0, "dom")
    firsts = [ts_rank(_dominant(), CTX, range(10), 3, "swap", rng, fam, M=100).slots[0] for _ in range(1000)]
    assert firsts.count(3) >= 999
    p = ts_rank(_dominant(), CTX, range(10), 3, "swap", rng, fam, M=1000)
    assert p.slot_propensities[0] >= 0.99


def test_swap_output_diverse():
    w = gen_world(SimConfig(seed=0))
    rng = stream(0, "div")
    state = BetaState.uniform(w.n_buckets, w.catalog.n_modules)
    for _ in range(20):
        p = ts_rank(state, CTX, range(w.catalog.n_modules), w.K, "swap", rng, w.family_of, M=100)
        assert validate_presentation(p, w.catalog, require_diversity=True) == []


def test_ts_repeatable():
    fam = np.arange(10) % 5
    a = ts_rank(BetaState.uniform(1, 10), CTX, range(10), 3, "swap", stream(1, "x"), fam, M=100)
    b = ts_rank(BetaState.uniform(1, 10), CTX, range(10), 3, "swap", stream(1, "x"), fam, M=100)
    assert a == b


def test_uniform_propensity_and_frequency():
    p = uniform_random_rank(CTX, range(10), 6, stream(0, "u"))
    assert p.slot_propensities == (0.1,) * 6
    slates = uniform_slates(100_000, np.arange(10), 6, stream(0, "u"))
    np.testing.assert_allclose(np.bincount(slates[:, 0], minlength=10) / 1e5, 0.1, atol=0.005)


def test_propensity_deterministic_and_floor():
    fam = np.arange(10) % 5
    props = record_propensity(_dominant(), CTX, [3, 0], 1, stream(0, "p"), np.arange(10), fam)
    assert props[0] == 1.0
    # module 9 never wins slot 1 under the dominant posterior
    props = record_propensity(_dominant(), CTX, [9, 0], 1000, stream(0, "p"), np.arange(10), fam)
    assert props[0] == 0.0005


def test_downsample():
    w = gen_world(SimConfig(seed=0))
    uni = collect_uniform(w, 1000, seed=1)
    from pageopt.collector import collect_production
    prod = collect_production(w, 5000, w.true_click_prob, seed=2, first_page_id=1000)
    log = Log.concat([uni, prod])
    out = downsample(log, 1.0, 1.0, stream(0, "d"))
    assert np.sum(out.policy == 2) <= 1000
    assert np.sum(out.policy == 1) == 1000


def test_negative_thinning():
    w = gen_world(SimConfig(seed=0, click_range=[0.0, 0.0]))
    uni = collect_uniform(w, 10_000, seed=1)
    out = downsample(uni, 1.0, 0.1, stream(0, "d"))
    assert abs(len(out) - 1000) <= 100


def test_thompson_run_deterministic_and_diverse():
    w = gen_world(SimConfig(seed=0))
    cfg = CollectorConfig(batch_period=100, propensity_mc_samples=100, seed=5)
    a, sa, _ = collect_thompson(w, 300, cfg)
    b, sb, _ = collect_thompson(w, 300, cfg)
    np.testing.assert_array_equal(a.slates, b.slates)
    np.testing.assert_array_equal(a.propensities, b.propensities)
    np.testing.assert_array_equal(sa.alpha, sb.alpha)
    assert consecutive_family_violations(a.slates, w.family_of) == 0
    assert np.all((a.propensities > 0) & (a.propensities <= 1))


def test_config_validation():
    with pytest.raises(ValueError):
        CollectorConfig(diversity_strategy="shuffle").validate()
    with pytest.raises(ValueError):
        CollectorConfig(demotion_factor=1.0).validate()
