import numpy as np
import pytest

from conftest import micro_problem, overfit_suite, tiny_config
from pageopt.trnn import MlpModel, TrnnConfig, TrnnModel, gradient_check, head_targets, load_model, train


def _trnn(seed=0, **kw):
    x, mf, fam, slates, Y, W = micro_problem(seed)
    return TrnnModel(tiny_config(seed=seed, **kw), x.shape[1], mf, fam, slates.shape[1]), x, slates, Y, W


@pytest.mark.parametrize("kw", [{}, {"head_type": "softmax"}, {"objective_mode": "fixed",
                                                               "fixed_weights": (1.0, 0.5, 2.0)}])
def test_trnn_gradient(kw):
    m, x, slates, Y, W = _trnn(1, **kw)
    assert gradient_check(m, x, slates, Y, W) < 1e-4


def test_mlp_gradient():
    x, mf, fam, slates, Y, W = micro_problem(2)
    m = MlpModel(tiny_config(seed=2), x.shape[1], mf, fam, slates.shape[1])
    assert gradient_check(m, x, slates, Y, W) < 1e-4


def test_zero_params_give_half():
    for cls in (TrnnModel, MlpModel):
        x, mf, fam, slates, _, _ = micro_problem(0)
        m = cls(tiny_config(), x.shape[1], mf, fam, slates.shape[1])
        for v in m.params.values.values():
            v[...] = 0.0
        assert np.all(m.encode_page(x) == 0)
        np.testing.assert_array_equal(m.teacher_forced_probs(x, slates), 0.5)


def test_embedding_cache():
    m, *_ = _trnn()
    assert m.embedding_cache().shape == (6, 4)
    before = m.embedding_cache().copy()
    m.params["mod.W"][0, 0] += 1.0
    after = m.embedding_cache()
    assert not np.array_equal(before, after)
    np.testing.assert_array_equal(after, m.module_embeddings())


def test_decode_state_depends_on_family():
    m, x, *_ = _trnn()
    cand = np.arange(6)
    s0 = m.begin(x[:1])
    _, st = m.step(s0, cand)
    a = m.advance(st, np.array([0, 0]), np.array([0, 1]))  # families 0 and 1
    p, _ = m.step(a, cand)
    assert not np.allclose(p[0], p[1])
    same = m.advance(st, np.array([0, 0]), np.array([0, 3]))  # both family 0
    p, _ = m.step(same, cand)
    np.testing.assert_array_equal(p[0], p[1])


def test_decode_matches_teacher_forcing():
    m, x, slates, *_ = _trnn()
    state = m.begin(x[:1])
    for j, mod in enumerate(slates[0]):
        p, st = m.step(state, np.array([mod]))
        state = m.advance(st, np.array([0]), np.array([mod]))
        np.testing.assert_allclose(p[0, 0], m.teacher_forced_probs(x[:1], slates[:1])[0, j], atol=1e-14)


def test_mlp_parameter_match():
    m = TrnnModel(TrnnConfig(), 23, np.zeros((40, 11)), np.arange(40) % 8, 6)
    mlp = MlpModel.matched_to(m, depth=3)
    ratio = mlp.n_network_params() / m.n_network_params()
    assert 0.8 <= ratio <= 1.2


def test_zero_ips_leaves_params(small_dataset):
    ds = small_dataset.select("train").take(slice(0, 64))
    ds.ips_click[:] = 0.0
    ds.ips_purchase[:] = 0.0
    for cls in (TrnnModel, MlpModel):
        m = cls(tiny_config(objective_mode="fixed", epochs=1), ds.context.shape[1],
                ds.features.module_features, ds.features.family_of, ds.K)
        before = m.params.copy_values()
        train(m, ds)
        for k, v in before.items():
            np.testing.assert_array_equal(m.params[k], v)


def test_head_targets_ips(small_dataset):
    ds = small_dataset.take(slice(0, 10))
    Y, W = head_targets(ds, ("click", "attributed_purchase"))
    np.testing.assert_array_equal(Y[..., 1], ds.y_attr)
    np.testing.assert_array_equal(W[..., 1], ds.ips_purchase)
    _, W = head_targets(ds, ("click",), use_ips=False)
    assert np.all(W == 1.0)


def test_checkpoint_bit_identical(tmp_path, small_dataset):
    ds = small_dataset.select("train").take(slice(0, 200))
    for cls in (TrnnModel, MlpModel):
        m = cls(tiny_config(epochs=2), ds.context.shape[1], ds.features.module_features,
                ds.features.family_of, ds.K)
        m, _ = train(m, ds)
        path = tmp_path / f"{m.kind}.ckpt"
        m.save(path)
        back = load_model(path)
        assert np.array_equal(back.teacher_forced_probs(ds.context, ds.slates),
                              m.teacher_forced_probs(ds.context, ds.slates))
        m2 = cls(tiny_config(epochs=2), ds.context.shape[1], ds.features.module_features,
                 ds.features.family_of, ds.K)
        m2, _ = train(m2, ds)
        m2.save(tmp_path / "again.ckpt")
        assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_trained_model_uses_hero_features(small_dataset):
    ds = small_dataset.select("train")
    m = TrnnModel(tiny_config(epochs=1), ds.context.shape[1], ds.features.module_features,
                  ds.features.family_of, ds.K)
    m, _ = train(m, ds)
    x = ds.context[:1].copy()
    x2 = x.copy()
    du = ds.raw["user_features"].shape[1]
    x2[0, du] += 1.0  # first hero column
    assert not np.array_equal(m.teacher_forced_probs(x, ds.slates[:1]), m.teacher_forced_probs(x2, ds.slates[:1]))


@pytest.mark.parametrize("cls", [TrnnModel, MlpModel])
def test_overfit_suite(cls):
    batch, mf, fam = overfit_suite()
    m = cls(TrnnConfig(lr=0.01, epochs=200, seed=0), batch.context.shape[1], mf, fam, batch.K)
    _, rep = train(m, batch)
    assert rep.epochs[-1].train_loss < 0.05


def test_training_validation_report(small_dataset):
    m = TrnnModel(tiny_config(epochs=2), small_dataset.context.shape[1], small_dataset.features.module_features,
                  small_dataset.features.family_of, small_dataset.K)
    _, rep = train(m, small_dataset.select("train"), small_dataset.select("validation"))
    assert len(rep.epochs) == 2 and rep.best_epoch in (1, 2)
    assert set(rep.epochs[0].val_metrics) == {"precision", "recall", "f1", "auc"}


def test_config_validation():
    with pytest.raises(ValueError):
        TrnnConfig(d_o=7).validate()
    with pytest.raises(ValueError):
        TrnnConfig(heads=("click", "bogus")).validate()
    with pytest.raises(ValueError):
        MlpModel(TrnnConfig(head_type="softmax"), 3, np.zeros((4, 2)), np.arange(4) % 2, 2)


def test_micro_instance_gradient():
    x, mf, fam, slates, Y, W = micro_problem(4, B=2, K=2, N=3, F=2)
    m = TrnnModel(tiny_config(seed=4), x.shape[1], mf, fam, 2)
    assert gradient_check(m, x, slates, Y, W) < 1e-4


def test_planted_family_interaction():
    """Slot-2 click depends only on whether slot 1 showed family 0; the model must pick that up."""
    batch, mf, fam = overfit_suite(seed=1, n=64, K=2, N=8, F=2)
    first_fam0 = fam[batch.slates[:, 0]] == 0
    batch.y_click[:, 1] = first_fam0.astype(np.float64)
    m = TrnnModel(TrnnConfig(lr=0.01, epochs=200, seed=0, heads=("click",)), batch.context.shape[1], mf, fam, 2)
    _, rep = train(m, batch)
    assert rep.epochs[-1].train_loss < rep.epochs[0].train_loss
    state = m.begin(batch.context[:1])
    _, st = m.step(state, np.arange(8))
    nxt = m.advance(st, np.array([0, 0]), np.array([0, 1]))  # module 0 is family 0, module 1 family 1
    p, _ = m.step(nxt, np.array([2]))
    assert p[0, 0, 0] > 0.9 and p[1, 0, 0] < 0.1
