import numpy as np
import pytest

from odst.core import Dataset, InvariantError, one_hot_batch
from odst.model import (ClassifierModel, ConfigError, Mode, TrainConfig, ce_soft, fit, forward,
                        grad_check, init_model, load_temperature, log_softmax, loss_and_grad,
                        predict_proba, softmax, train_base, train_student)


def _model(sizes=(2, 16, 16, 4), seed=0):
    return init_model(list(sizes), seed)


def _batch(n=8, d=2, K=4, seed=1):
    g = np.random.default_rng(seed)
    return g.normal(size=(n, d)), g.dirichlet(np.ones(K), n)


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(softmax([1000.0, 0.0]), [1.0, 0.0])
    np.testing.assert_allclose(log_softmax([0.0, np.log(3.0)]), np.log([0.25, 0.75]), atol=1e-15)
    with pytest.raises(FloatingPointError):
        softmax([np.nan, 0.0])


def test_ce_soft_examples():
    assert ce_soft([0.5, 0.5], [0.0, 0.0]) == pytest.approx(np.log(2))
    assert ce_soft([1.0, 0.0], [0.0, np.log(3.0)]) == pytest.approx(np.log(4))
    with pytest.raises(InvariantError):
        ce_soft([0.4, 0.4], [0.0, 0.0])


def test_forward_single_linear_layer():
    m = ClassifierModel([2, 3], [np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])], [np.array([0.0, 1.0, -1.0])])
    np.testing.assert_array_equal(forward(m, [[2.0, 3.0]]), [[2.0, 4.0, 4.0]])
    with pytest.raises(ValueError):
        forward(m, np.zeros((1, 5)))


def test_forward_hidden_tanh():
    W1, b1 = np.array([[1.0, -1.0]]), np.array([0.5])
    W2, b2 = np.array([[2.0], [-1.0]]), np.array([0.0, 0.0])
    m = ClassifierModel([2, 1, 2], [W1, W2], [b1, b2])
    h = np.tanh(0.3 - 0.1 + 0.5)
    np.testing.assert_allclose(forward(m, [[0.3, 0.1]]), [[2 * h, -h]], rtol=1e-15)


def test_gradient_matches_brute_finite_differences():
    model = _model()
    X, T = _batch()
    _, grads = loss_and_grad(model, X, T)
    # independent central differences on a few coordinates of each parameter
    g = np.random.default_rng(0)
    for k, p in enumerate(model.params):
        for _ in range(3):
            idx = tuple(g.integers(0, s) for s in p.shape)
            orig = p[idx]
            p[idx] = orig + 1e-6
            up = np.mean(ce_soft(T, forward(model, X)))
            p[idx] = orig - 1e-6
            down = np.mean(ce_soft(T, forward(model, X)))
            p[idx] = orig
            assert grads[k][idx] == pytest.approx((up - down) / 2e-6, rel=1e-5, abs=1e-9)


def test_grad_check_passes_and_detects_faults():
    model = _model()
    X, T = _batch()
    report = grad_check(model, X, T)
    assert report.passed and report.max_rel_error <= 1e-5
    _, grads = loss_and_grad(model, X, T)
    grads[2] = grads[2].copy()
    grads[2][0, 0] *= 1.01
    assert not grad_check(model, X, T, grads=grads).passed


def test_weighted_loss_gradient():
    model = _model((2, 8, 3))
    X, T = _batch(6, K=3)
    w = np.array([0.1, 0.5, 0.0, 0.2, 0.1, 0.1])
    loss, grads = loss_and_grad(model, X, T, w)
    assert loss == pytest.approx(float(w @ ce_soft(T, forward(model, X))), rel=1e-14)
    # zero-weight rows do not affect the gradient
    T2 = T.copy()
    T2[2] = np.eye(3)[0]
    for a, b in zip(grads, loss_and_grad(model, X, T2, w)[1]):
        np.testing.assert_array_equal(a, b)


def test_init_is_seeded():
    assert _model(seed=3).checksum() == _model(seed=3).checksum()
    assert _model(seed=3).checksum() != _model(seed=4).checksum()


def test_checkpoint_roundtrip(tmp_path):
    m = _model()
    path = tmp_path / "m.bin"
    m.save(path, temperature=0.7)
    back = ClassifierModel.load(path)
    assert back.checksum() == m.checksum() and back.sizes == m.sizes
    assert load_temperature(path) == 0.7
    with pytest.raises(ValueError):
        ClassifierModel.from_bytes(b"garbage" * 4)


def _labeled(n=60, seed=0, separable=True):
    g = np.random.default_rng(seed)
    y = g.integers(0, 2, n)
    x = g.normal(scale=0.3, size=(n, 2)) + np.where(y[:, None] == 0, -2.0, 2.0)
    return Dataset("train", x, 2, y)


def _small_cfg(**kw):
    base = dict(epochs=20, batch_size=16, lr=0.05, decay_epochs=(15,), hidden=(8,), seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_separable_base_ce_fits_training_set():
    T = _labeled()
    m = train_base(T, None, _small_cfg(mode=Mode.BASE_CE))
    assert np.all(forward(m, T.x).argmax(1) == T.y)


def test_training_is_deterministic():
    T = _labeled()
    U = Dataset("unlabeled", np.random.default_rng(2).normal(scale=4, size=(100, 2)), 2)
    a = train_base(T, U, _small_cfg(mode=Mode.BASE_OE))
    b = train_base(T, U, _small_cfg(mode=Mode.BASE_OE))
    assert a.checksum() == b.checksum()
    assert a.checksum() != train_base(T, U, _small_cfg(mode=Mode.BASE_OE, seed=2)).checksum()


def test_odst_step_loss_is_two_stream_mean():
    T = _labeled(20)
    g = np.random.default_rng(3)
    I_x = g.normal(size=(5, 2))
    I_q = g.dirichlet(np.ones(2), 5)
    rest_x = g.normal(scale=3, size=(30, 2))
    rest_v = 0.5 * (0.5 + g.dirichlet(np.ones(2), 30))
    first_x = np.concatenate([T.x, I_x])
    first_t = np.concatenate([one_hot_batch(T.y, 2), I_q])
    seen = []

    def check(info):
        a = ce_soft(first_t[info.first_idx], forward(info.model, first_x[info.first_idx])).mean()
        b = ce_soft(rest_v[info.second_idx], forward(info.model, rest_x[info.second_idx])).mean()
        assert info.second_idx.size == info.first_idx.size
        assert abs(info.loss - (a + b)) <= 1e-10
        seen.append(info.step)

    train_student(T, I_x, I_q, rest_x, rest_v, _small_cfg(epochs=3, batch_size=8), callback=check)
    assert len(seen) == 3 * 4


def test_st_with_unit_lambda_is_plain_merged_training():
    T = _labeled(20)
    g = np.random.default_rng(4)
    I_x = g.normal(size=(6, 2))
    I_q = one_hot_batch(g.integers(0, 2, 6), 2)
    cfg = _small_cfg(mode=Mode.ST, lam=1.0, epochs=5)
    st = train_student(T, I_x, I_q, None, None, cfg)
    merged = fit(np.concatenate([T.x, I_x]), np.concatenate([one_hot_batch(T.y, 2), I_q]),
                 np.ones(26), cfg)
    assert st.checksum() == merged.checksum()


def test_empty_selection_falls_back(caplog):
    T = _labeled(20)
    rest = np.random.default_rng(5).normal(size=(10, 2))
    m = train_student(T, np.zeros((0, 2)), np.zeros((0, 2)), rest, np.full((10, 2), 0.5), _small_cfg(epochs=2))
    assert m.is_finite()
    assert "no pseudo-labeled samples" in caplog.text


def test_mode_guards():
    T = _labeled(10)
    with pytest.raises(ConfigError):
        train_base(T, None, _small_cfg(mode=Mode.ODST))
    with pytest.raises(ConfigError):
        train_base(T, None, _small_cfg(mode=Mode.BASE_OE))
    with pytest.raises(ConfigError):
        train_student(T, [], [], [], [], _small_cfg(mode=Mode.BASE_CE))
    assert not Mode.ST.two_stream and Mode.ST.base_mode is Mode.BASE_CE
    assert Mode.ODST.two_stream and Mode.ODST.base_mode is Mode.BASE_OE


def test_lr_schedule():
    cfg = TrainConfig()
    assert [cfg.lr_at(e) for e in (0, 79, 80, 120, 199)] == pytest.approx([0.1, 0.1, 0.01, 0.001, 1e-4])


def test_predict_proba_temperature():
    m = _model()
    X, _ = _batch()
    np.testing.assert_allclose(predict_proba(m, X, 2.0), softmax(forward(m, X) / 2.0))
