import numpy as np
import pytest

from scenecaps.regress import (ConvModel, DenseModel, TrainConfig, grad_check,
                               load_weights, save_weights, train)


def test_zero_weight_dense_outputs_bias():
    m = DenseModel([3, 4, 4, 4, 2], seed=0)
    for _, p in m.params():
        p[...] = 0.0
    m.b[3][:] = [0.25, 0.5]
    out = m.forward(np.array([0.1, 0.9, 0.3]))
    assert np.allclose(out, [0.25, 0.5])


def test_forward_deterministic():
    m = DenseModel([3, 8, 8, 8, 2], seed=1)
    x = np.random.default_rng(0).uniform(size=3)
    assert np.array_equal(m.forward(x), m.forward(x))


def test_forward_dim_mismatch():
    m = DenseModel([3, 4, 4, 4, 2], seed=0)
    with pytest.raises(ValueError):
        m.forward(np.zeros(5))


def test_tiny_net_learns_identity():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(256, 1))
    m = DenseModel([1, 1, 1, 1, 1], seed=3)
    train(m, x, x, TrainConfig(lr=0.05, batch=32, steps=4000, seed=0))
    assert abs(float(m.forward(np.array([0.5]))[0]) - 0.5) <= 0.02


def test_constant_target_training():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(512, 2))
    y = np.full((512, 2), 0.6)
    m = DenseModel([2, 8, 8, 8, 2], seed=0)
    res = train(m, x, y, TrainConfig(lr=0.5, batch=512, steps=8000, seed=0))
    pred = m.forward(x)
    assert np.max(np.abs(pred - 0.6)) <= 1e-3
    assert res.final_loss <= 1e-5


def test_linear_map_heldout_mse():
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(512, 1))
    y = 0.3 * x + 0.1
    m = DenseModel([1, 8, 8, 8, 1], seed=0)
    train(m, x[:448], y[:448], TrainConfig(lr=0.05, batch=32, steps=5000, seed=0))
    mse = float(np.mean((m.forward(x[448:]) - y[448:]) ** 2))
    assert mse <= 1e-4


def test_empty_dataset_rejected():
    m = DenseModel([1, 2, 2, 2, 1], seed=0)
    with pytest.raises(ValueError):
        train(m, np.zeros((0, 1)), np.zeros((0, 1)), TrainConfig())


def test_nan_divergence_aborts():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(64, 2))
    y = rng.uniform(size=(64, 2))
    m = DenseModel([2, 8, 8, 8, 2], seed=0)
    with pytest.raises(FloatingPointError):
        train(m, x, y, TrainConfig(lr=1e6, batch=16, steps=500, seed=0))


def test_training_loss_decreases():
    rng = np.random.default_rng(5)
    x = rng.uniform(size=(256, 3))
    y = np.stack([x[:, 0] * 0.5 + 0.2, x.sum(axis=1) / 6], axis=1)
    m = DenseModel([3, 16, 16, 16, 2], seed=0)
    res = train(m, x, y, TrainConfig(lr=0.05, batch=32, steps=2000, seed=0))
    head = float(np.mean(res.losses[:50]))
    tail = float(np.mean(res.losses[-50:]))
    assert tail < head


def test_training_deterministic_bit_identical():
    rng = np.random.default_rng(7)
    x = rng.uniform(size=(128, 3))
    y = rng.uniform(size=(128, 2))
    cfg = TrainConfig(lr=0.05, batch=32, steps=300, seed=11)
    m1 = DenseModel([3, 8, 8, 8, 2], seed=4)
    m2 = DenseModel([3, 8, 8, 8, 2], seed=4)
    train(m1, x, y, cfg)
    train(m2, x, y, cfg)
    for (_, a), (_, b) in zip(m1.params(), m2.params()):
        assert np.array_equal(a, b)


def test_predict_clamps():
    m = DenseModel([2, 4, 4, 4, 1], seed=0)
    m.b[3][:] = 7.0
    assert float(m.predict(np.array([0.2, 0.8]))[0]) == 1.0


def test_grad_check_dense():
    rng = np.random.default_rng(0)
    m = DenseModel([5, 7, 7, 7, 3], seed=2)
    x = rng.uniform(size=(4, 5))
    y = rng.uniform(size=(4, 3))
    assert grad_check(m, x, y, epsilon=1e-5) <= 1e-4


def test_grad_check_zero_gradient_point():
    m = DenseModel([2, 4, 4, 4, 2], seed=0)
    x = np.array([[0.3, 0.7]])
    y = m.forward(x)
    out = m.forward(x, train=True)
    grads = m.backward(np.zeros_like(out) * 0.0 + (2.0 / y.size) * (out - y))
    assert all(np.max(np.abs(g)) <= 1e-12 for g in grads.values())


def test_grad_check_conv():
    rng = np.random.default_rng(3)
    m = ConvModel(in_size=12, channels=(4, 6), hidden=16, out_dim=3, seed=1)
    x = rng.uniform(size=(2, 12, 12))
    y = rng.uniform(size=(2, 3))
    assert grad_check(m, x, y, epsilon=1e-5) <= 1e-3


def test_grad_check_epsilon_bounds():
    m = DenseModel([2, 3, 3, 3, 1], seed=0)
    with pytest.raises(ValueError):
        grad_check(m, np.zeros((1, 2)), np.zeros((1, 1)), epsilon=0.01)


def test_conv_forward_shape_and_determinism():
    m = ConvModel(in_size=28, channels=(8, 12, 12), hidden=32, out_dim=7, seed=0)
    x = np.random.default_rng(0).uniform(size=(5, 28, 28))
    a = m.forward(x)
    assert a.shape == (5, 7)
    assert np.array_equal(a, m.forward(x))


def test_conv_param_budget():
    m = ConvModel(in_size=28, channels=(16, 32, 32), hidden=128, out_dim=7, seed=0)
    assert m.n_params() <= 200_000


def test_conv_trains_on_simple_signal():
    # predict the horizontal center of mass of a bright dot
    rng = np.random.default_rng(9)
    n = 600
    X = np.zeros((n, 12, 12))
    Y = np.zeros((n, 1))
    for i in range(n):
        cx = rng.integers(2, 10)
        cy = rng.integers(2, 10)
        X[i, cy - 1:cy + 2, cx - 1:cx + 2] = 1.0
        Y[i, 0] = cx / 12
    m = ConvModel(in_size=12, channels=(6, 8), hidden=24, out_dim=1, seed=0)
    train(m, X[:500], Y[:500], TrainConfig(lr=0.03, batch=32, steps=1500, seed=0))
    mae = float(np.mean(np.abs(m.forward(X[500:]) - Y[500:])))
    assert mae <= 0.05


def test_save_load_round_trip_dense(tmp_path):
    m = DenseModel([3, 6, 6, 6, 2], seed=5)
    p = tmp_path / "model.bin"
    save_weights(m, p)
    m2 = load_weights(p)
    m3 = load_weights(p)
    x = np.random.default_rng(1).uniform(size=(4, 3))
    assert np.array_equal(m2.forward(x), m3.forward(x))
    # float32 quantization only
    assert np.max(np.abs(m2.forward(x) - m.forward(x))) <= 1e-5


def test_save_load_round_trip_conv(tmp_path):
    m = ConvModel(in_size=12, channels=(4, 6), hidden=16, out_dim=3, seed=2)
    p = tmp_path / "conv.bin"
    save_weights(m, p)
    m2 = load_weights(p)
    save_weights(m2, tmp_path / "conv2.bin")
    assert (tmp_path / "conv.bin").read_bytes() == (tmp_path / "conv2.bin").read_bytes()


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    (tmp_path / "junk.bin.json").write_text('{"kind": "dense", "sizes": [1,1,1,1,1]}')
    with pytest.raises(ValueError):
        load_weights(p)
