import itertools
import warnings

import numpy as np
import pytest

from conftest import micro_problem, tiny_config
from pageopt.inference import (InfeasibleDiversity, InsufficientCandidates, OracleScorer, TableScorer,
                               beam_score_update, beam_vs_greedy_report, rank_page)
from pageopt.trnn import MlpModel, TrnnModel


def test_beam_score_update_examples():
    assert abs(beam_score_update(0.6, 0.5) - 0.8) <= 1e-12
    assert abs(beam_score_update(0.0, 0.5) - 0.5) <= 1e-12
    assert beam_score_update(0.37, 0.0) == 0.37
    with pytest.raises(ValueError):
        beam_score_update(1.0, 0.5)


def test_hand_example():
    s = TableScorer([0.9, 0.5, 0.4], [0, 0, 1])
    r = rank_page(s, None, 0, [0, 1, 2], 2, W=3)
    assert r.slate.tolist() == [0, 2]
    assert abs(r.score - 0.94) <= 1e-12
    assert r.to_dict()["policy_tag"] == "model"


def test_tie_break_prefers_slot1_then_ids():
    # equal phi for (0,1) and (1,0); higher slot-1 probability wins
    s = TableScorer([0.3, 0.5, 0.0], [0, 1, 2])
    assert rank_page(s, None, 0, [0, 1, 2], 2).slate.tolist() == [1, 0]
    # fully tied probabilities: lexicographically smallest slate
    s = TableScorer([0.5, 0.5, 0.5], [0, 1, 2])
    assert rank_page(s, None, 0, [2, 1, 0], 2).slate.tolist() == [0, 1]


def brute_force(model, x, cand, K, diverse):
    """Score every permutation by teacher forcing; best phi with the same tie-break."""
    best = None
    fam = model.family_of
    for s in itertools.permutations(cand, K):
        if diverse and any(fam[s[i]] == fam[s[i + 1]] for i in range(K - 1)):
            continue
        p = model.teacher_forced_probs(x[None], np.array([s]))[0, :, model.purchase_index]
        phi = 1.0 - np.prod(1.0 - p)
        key = (-phi, -p[0], s)
        if best is None or key < best[0]:
            best = (key, s, phi)
    return best[1], best[2]


def greedy(model, x, cand, K, diverse):
    """Independent greedy decoder over teacher-forced prefixes."""
    fam = model.family_of
    chosen = []
    for _ in range(K):
        opts = [m for m in cand if m not in chosen and not (diverse and chosen and fam[m] == fam[chosen[-1]])]
        scores = [model.teacher_forced_probs(x[None], np.array([chosen + [m]]))[0, -1, model.purchase_index]
                  for m in opts]
        chosen.append(opts[int(np.argmax(scores))])
    return chosen


@pytest.mark.parametrize("seed", range(6))
def test_full_width_equals_brute_force(seed):
    x, mf, fam, _, _, _ = micro_problem(seed, N=6, F=3)
    m = TrnnModel(tiny_config(seed=seed), x.shape[1], mf, fam, 3)
    for div in (True, False):
        r = rank_page(m, x[0], 0, np.arange(6), 3, W=None, diversity=div)
        slate, phi = brute_force(m, x[0], range(6), 3, div)
        assert r.slate.tolist() == list(slate)
        assert abs(r.score - phi) <= 1e-12


@pytest.mark.parametrize("seed", range(4))
def test_width_one_is_greedy(seed):
    x, mf, fam, _, _, _ = micro_problem(seed, N=7, F=3)
    for cls in (TrnnModel, MlpModel):
        m = cls(tiny_config(seed=seed), x.shape[1], mf, fam, 4)
        r = rank_page(m, x[1], 0, np.arange(7), 4, W=1)
        assert r.slate.tolist() == greedy(m, x[1], list(range(7)), 4, True)


def test_phi_recomputable_and_monotone_width():
    x, mf, fam, _, _, _ = micro_problem(3, N=8, F=3)
    m = TrnnModel(tiny_config(seed=3), x.shape[1], mf, fam, 4)
    r1 = rank_page(m, x[0], 0, np.arange(8), 4, W=1)
    r3 = rank_page(m, x[0], 0, np.arange(8), 4, W=3)
    for r in (r1, r3):
        assert abs(r.score - (1.0 - np.prod(1.0 - r.probs[:, m.purchase_index]))) <= 1e-12
        assert abs(r.trace[-1] - r.score) <= 1e-12
    full = rank_page(m, x[0], 0, np.arange(8), 4, W=None)
    assert full.score >= r3.score - 1e-15


def test_start_slot_fills_greedily():
    x, mf, fam, _, _, _ = micro_problem(0, N=6, F=3)
    m = TrnnModel(tiny_config(), x.shape[1], mf, fam, 3)
    g = greedy(m, x[0], list(range(6)), 3, True)
    r = rank_page(m, x[0], 0, np.arange(6), 3, W=None, start_slot=2)
    assert r.slate[0] == g[0]


def test_infeasible_diversity_falls_back():
    s = TableScorer([0.9, 0.5, 0.4], [0, 0, 0])
    with pytest.warns(InfeasibleDiversity):
        r = rank_page(s, None, 0, [0, 1, 2], 2)
    assert r.fallback and r.slate.tolist() == [0, 1]


def test_candidate_errors():
    s = TableScorer([0.9, 0.5], [0, 1])
    with pytest.raises(InsufficientCandidates):
        rank_page(s, None, 0, [0, 1], 3)
    with pytest.raises(ValueError):
        rank_page(s, None, 0, [0, 1], 2, W=0)


def test_deterministic():
    x, mf, fam, _, _, _ = micro_problem(5)
    m = TrnnModel(tiny_config(), x.shape[1], mf, fam, 3)
    a = rank_page(m, x[0], 0, np.arange(6), 3).to_dict()
    assert a == rank_page(m, x[0], 0, np.arange(6), 3).to_dict()


def test_oracle_scorer_and_report(small_world):
    sc = OracleScorer(small_world)
    rep = beam_vs_greedy_report(sc, None, [0, 1], np.arange(small_world.catalog.n_modules), small_world.K)
    assert rep["mean_phi"][3] >= rep["mean_phi"][1] - 1e-15


def test_greedy_anchor():
    """A plain width-3 beam can drop the greedy path; the anchored ranker never returns less than W=1."""
    rng = np.random.default_rng(5)
    plain_losses = 0
    for i in range(200):
        K = int(rng.integers(2, 7))
        N = int(rng.integers(K + 1, 9))
        F = int(rng.integers(2, 5))
        x, mf, fam, _, _, _ = micro_problem(1000 + i, N=N, F=F, K=K)
        m = TrnnModel(tiny_config(seed=i), x.shape[1], mf, fam, K)
        w1 = rank_page(m, x[0], 0, np.arange(N), K, W=1).score
        assert rank_page(m, x[0], 0, np.arange(N), K, W=3).score >= w1
        plain_losses += rank_page(m, x[0], 0, np.arange(N), K, W=3, keep_greedy=False).score < w1
    assert plain_losses > 0
