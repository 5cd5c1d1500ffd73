import itertools

import numpy as np
import pytest

from pageopt.domain import (Catalog, EngagementEvent, LabeledSlot, ModuleCandidate, ModuleFamily, PageContext,
                            PagePresentation, consecutive_family_violations, validate_presentation)
from pageopt.rng import stream
from pageopt.simulator import (InvalidConfig, SimConfig, World, examination_profile, gen_world, oracle_best_slate,
                               oracle_values, sample_contexts, simulate_batch)

# families A=0, B=1; A1=0, A2=1, B1=2
CAT = Catalog((ModuleFamily(0, (0.0,)), ModuleFamily(1, (1.0,))),
              (ModuleCandidate(0, 0, (0.1,)), ModuleCandidate(1, 0, (0.2,)), ModuleCandidate(2, 1, (0.3,))))
CTX = PageContext(5, 1, (0.5, -0.5), (1.0,), 2, user_id=9, timestamp=12.5)


def page(slots, props=None):
    return PagePresentation(1, CTX, tuple(slots), "thompson", tuple(props or [0.5] * len(slots)))


def test_presentation_examples():
    assert validate_presentation(page([0, 2, 1]), CAT, require_diversity=True) == []
    v = validate_presentation(page([0, 1, 2]), CAT, require_diversity=True)
    assert [(x.kind, x.slot) for x in v] == [("consecutive_family", 2)]
    v = validate_presentation(page([0, 0]), CAT)
    assert [x.kind for x in v] == ["duplicate_module"]


def test_presentation_other_violations():
    kinds = {x.kind for x in validate_presentation(page([0, 7], [0.0, 1.5]), CAT)}
    assert kinds == {"unknown_module", "bad_propensity"}
    assert validate_presentation(page([0, 2]), CAT, K=3)[0].kind == "length"


def test_catalog_rejects_gaps():
    with pytest.raises(ValueError):
        Catalog((ModuleFamily(0, ()),), (ModuleCandidate(1, 0, ()),))
    with pytest.raises(ValueError):
        Catalog((ModuleFamily(0, ()),), (ModuleCandidate(0, 3, ()),))


def test_round_trips():
    for obj in (CAT, CTX, page([0, 2]), EngagementEvent(1, 2, 3, "purchase", 4.25),
                LabeledSlot(3, 2, 1, 0, 0.7937005259840998, 1.5, 2.0, 1)):
        assert type(obj).from_dict(obj.to_dict()) == obj


def test_violation_count():
    fam = np.array([0, 0, 1])
    assert consecutive_family_violations(np.array([[0, 1, 2], [0, 2, 1]]), fam) == 1


def test_world_deterministic():
    a = gen_world(SimConfig(seed=3))
    assert a == gen_world(SimConfig(seed=3))
    assert a != gen_world(SimConfig(seed=4))
    assert World.from_dict(a.to_dict()) == a


def test_world_counts():
    w = gen_world(SimConfig(n_families=3, modules_per_family=4, K=4))
    assert w.catalog.n_modules == 12
    assert np.bincount(w.family_of).tolist() == [4, 4, 4]


def test_log_decay_profile():
    pe = examination_profile(SimConfig(K=6))
    np.testing.assert_allclose(pe, [1, 0.6309, 0.5, 0.4307, 0.3869, 0.3562], atol=5e-5)


@pytest.mark.parametrize("bad", [dict(n_families=1), dict(K=0), dict(click_range=[0.5, 0.2]),
                                 dict(pe_shape="custom", pe_custom=[0.9, 0.5, 0.4, 0.3, 0.2, 0.1])])
def test_invalid_config(bad):
    with pytest.raises(InvalidConfig):
        gen_world(SimConfig(**bad))


def test_bucket_frequencies():
    w = gen_world(SimConfig(seed=0))
    ctx = sample_contexts(w, 100_000, stream(0, "t"))
    np.testing.assert_allclose(np.bincount(ctx.bucket) / 1e5, 0.25, atol=0.01)
    one = gen_world(SimConfig(n_buckets=1))
    assert set(sample_contexts(one, 50, stream(0, "t")).bucket.tolist()) == {0}


def test_context_stream_repeatable():
    w = gen_world(SimConfig(seed=0))
    a, b = sample_contexts(w, 20, stream(1, "c")), sample_contexts(w, 20, stream(1, "c"))
    np.testing.assert_array_equal(a.user_features, b.user_features)


def _clamped(world, click):
    w = World.from_dict(world.to_dict())
    w.true_click_prob[:] = click
    return w


def test_engagement_extremes():
    base = gen_world(SimConfig(seed=0))
    ones = _clamped(base, 1.0)
    ev = simulate_batch(ones, np.zeros(50, dtype=int), np.tile(np.arange(6), (50, 1)), np.arange(50),
                        np.zeros(50), stream(0, "e"))
    clicks = ev.slot[ev.event_code == 0]
    assert np.sum(clicks == 1) == 50
    zeros = _clamped(base, 0.0)
    ev = simulate_batch(zeros, np.zeros(50, dtype=int), np.tile(np.arange(6), (50, 1)), np.arange(50),
                        np.zeros(50), stream(0, "e"))
    assert len(ev) == 0


def test_oracle_values_examples():
    w = gen_world(SimConfig(K=2, pe_shape="custom", pe_custom=[1.0, 1.0], n_families=2, modules_per_family=2))
    w.true_click_prob[0, :] = 0.5
    assert oracle_values(w, np.array([0]), np.array([[0]]), "ctr")[0] == 0.5
    assert oracle_values(w, np.array([0]), np.array([[0, 1]]), "ctr")[0] == 0.75
    w.true_click_prob[0, 1] = 1.0
    assert oracle_values(w, np.array([0]), np.array([[0, 1]]), "ctr")[0] == 1.0


def test_oracle_best_slate_brute_force():
    w = gen_world(SimConfig(n_families=3, modules_per_family=3, K=3, seed=5))
    fam = w.family_of
    for metric in ("ctr", "ptr"):
        for b in range(w.n_buckets):
            best = max(oracle_values(w, np.array([b]), np.array([s]), metric)[0]
                       for s in itertools.permutations(range(9), 3)
                       if all(fam[s[i]] != fam[s[i + 1]] for i in range(2)))
            slate, val = oracle_best_slate(w, b, metric)
            assert val == pytest.approx(best, abs=1e-12)
            assert consecutive_family_violations(slate[None], fam) == 0
