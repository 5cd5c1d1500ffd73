import math

import numpy as np
import pytest

from pageopt.baselines import PopularityModel
from pageopt.evaluation import (EvalReport, ZeroPropensity, auc, dm_estimate, dr_estimate, f1_auc, mrpr,
                                ndcg_at_k, ndcg_rows, reciprocal_ranks)
from pageopt.inference import rank_page
from pageopt.simulator import oracle_values


def test_ndcg_examples():
    assert ndcg_at_k([1, 0, 0, 0, 0, 0], 6) == 1.0
    assert ndcg_at_k([0, 0, 0, 0, 0, 1], 6) == pytest.approx(1 / math.log2(7), abs=1e-12)
    assert ndcg_at_k([0] * 6, 6) == 0.0
    y = np.array([[0, 1, 0, 1], [0, 0, 0, 0], [1, 1, 0, 0]])
    np.testing.assert_allclose(ndcg_rows(y, 4), [ndcg_at_k(r, 4) for r in y], atol=1e-15)
    assert ndcg_rows(-np.sort(-y, axis=1), 4)[0] == 1.0


def test_mrpr_examples():
    assert mrpr([1]) == 1.0
    assert mrpr([4]) == 0.25
    assert mrpr([1, 2]) == 0.75
    assert mrpr([1, None, 2]) == 0.75
    rr = reciprocal_ranks(np.array([[0, 1, 0], [0, 0, 0]]))
    assert rr[0] == 0.5 and np.isnan(rr[1])


def test_f1_auc_examples():
    assert f1_auc([0.9, 0.8, 0.3], [1, 0, 1], 0.5)[:3] == (0.5, 0.5, 0.5)
    p, r, f, a = f1_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0], 0.5)
    assert (p, r, f, a) == (1.0, 1.0, 1.0, 1.0)
    assert auc([0.3, 0.3], [1, 0]) == 0.5
    assert auc([0.1, 0.2], [1, 1]) is None


def test_auc_random_labels():
    rng = np.random.default_rng(0)
    s = rng.random(20_000)
    assert abs(auc(s, rng.permutation(s > 0.5)) - 0.5) < 0.02


def test_auc_matches_pairwise():
    rng = np.random.default_rng(1)
    s = rng.integers(0, 5, size=60).astype(float)
    y = rng.random(60) < 0.4
    pos, neg = s[y], s[~y]
    want = np.mean((pos[:, None] > neg[None]) + 0.5 * (pos[:, None] == neg[None]))
    assert auc(s, y) == pytest.approx(want, abs=1e-12)


def test_dr_example():
    est = dr_estimate([[7]], [[1.0]], [[0.5]], [[7]], [[0.4]], [1.0])
    assert est.raw == pytest.approx(1.6, abs=1e-12)
    assert est.value == 1.0
    with pytest.raises(ZeroPropensity):
        dr_estimate([[7]], [[1.0]], [[0.0]], [[7]], [[0.4]], [1.0])


def test_dr_collapses_to_ips():
    rng = np.random.default_rng(0)
    L = rng.integers(0, 5, size=(100, 1))
    r = (rng.random((100, 1)) < 0.3).astype(float)
    mu = np.full((100, 1), 0.25)
    est = dr_estimate(L, r, mu, L, np.zeros((100, 1)), [1.0])
    assert est.raw == pytest.approx(np.mean(r[:, 0] / 0.25), abs=1e-12)


def test_dm_examples(small_world):
    w = small_world
    slates = np.tile(np.arange(w.K), (5, 1))
    b = np.array([0, 1, 0, 1, 1])
    p = w.event_prob("ctr")[b[:, None], slates]
    est = dm_estimate(p, w.examination_prob)
    assert est.raw == pytest.approx(oracle_values(w, b, slates, "ctr").mean(), abs=1e-15)
    assert dm_estimate(np.zeros((3, 2)), [1.0, 0.5]).value == 0.0


def test_report_outputs():
    r = EvalReport()
    r.add("auc", None, 0)
    r.add_mean("ndcg", np.array([0.5, 1.0, np.nan]))
    d = r.to_dict()
    assert d["metrics"]["auc"] is None and d["counts"]["ndcg"] == 2
    assert "ndcg" in r.table() and r.csv().startswith("metric,value")


class _Pages:
    def __init__(self, bucket, slates, y_click):
        self.bucket, self.slates, self.y_click = bucket, slates, y_click


def test_popularity():
    pages = _Pages(np.zeros(10, dtype=int), np.tile([[0, 1]], (10, 1)), np.tile([[1, 0]], (10, 1)))
    pop = PopularityModel.fit(pages, 3, np.array([0, 1, 2]), n_buckets=2)
    assert pop.ctr[0, 0] == 11 / 12 and pop.ctr[0, 1] == 1 / 12 and pop.ctr[0, 2] == 0.5
    np.testing.assert_array_equal(pop.ctr[1], 0.5)
    assert rank_page(pop, None, 0, [0, 1, 2], 1).slate.tolist() == [0]
