import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpriv.model import (
    ClientUpdate,
    Dataset,
    EncoderConfig,
    ParamVector,
    ShapeError,
    evaluate,
    forward_encode,
    init_params,
    layout_for,
    local_train,
    loss_and_grad,
)


def params_from(cfg, matrices):
    """Build a ParamVector from explicit (W, b) pairs."""
    layout = layout_for(cfg)
    total = sum(r * c for _, _, r, c in layout)
    pv = ParamVector(np.zeros(total), layout)
    for layer, (w, b) in enumerate(matrices, start=1):
        pv.slot(f"W{layer}")[:] = w
        pv.slot(f"b{layer}")[:, 0] = b
    return pv


def random_dataset(rng, n=40, d=4, classes=3):
    feats = rng.normal(size=(n, d))
    labels = rng.integers(0, classes, size=n)
    return Dataset(feats, labels, classes)


def test_forward_identity_single_layer():
    cfg = EncoderConfig((2, 2))
    pv = params_from(cfg, [(np.eye(2), np.zeros(2))])
    (h,) = forward_encode([2.0, 3.0], pv, cfg)
    assert np.array_equal(h, [2.0, 3.0])


def test_forward_zero_weights_relu():
    cfg = EncoderConfig((2, 3, 2), ("relu",))
    pv = params_from(cfg, [(np.zeros((3, 2)), np.zeros(3)), (np.zeros((2, 3)), np.zeros(2))])
    hs = forward_encode([5.0, -7.0], pv, cfg)
    for h in hs:
        assert np.array_equal(h, np.zeros_like(h))


def test_forward_hand_evaluated():
    # relu(1*2 + (-1)*3 + 1) = relu(0) = 0
    cfg = EncoderConfig((2, 1))
    pv = params_from(cfg, [(np.array([[1.0, -1.0]]), np.array([1.0]))])
    (h,) = forward_encode([2.0, 3.0], pv, cfg)
    assert np.array_equal(h, [0.0])


def test_forward_relu_hidden_hand_evaluated():
    cfg = EncoderConfig((2, 1, 1), ("relu",))
    pv = params_from(cfg, [(np.array([[1.0, -1.0]]), np.array([-0.5])), (np.array([[2.0]]), np.array([0.25]))])
    h1, h2 = forward_encode([3.0, 1.0], pv, cfg)
    assert np.allclose(h1, [1.5])  # relu(3 - 1 - 0.5)
    assert np.allclose(h2, [3.25])  # 2*1.5 + 0.25


def test_forward_identity_matches_matrix_oracle():
    rng = np.random.default_rng(0)
    cfg = EncoderConfig((3, 4, 2), ("identity",))
    w1, b1 = rng.normal(size=(4, 3)), rng.normal(size=4)
    w2, b2 = rng.normal(size=(2, 4)), rng.normal(size=2)
    pv = params_from(cfg, [(w1, b1), (w2, b2)])
    x = rng.normal(size=3)
    h1, h2 = forward_encode(x, pv, cfg)
    assert np.max(np.abs(h1 - (w1 @ x + b1))) <= 1e-12
    assert np.max(np.abs(h2 - (w2 @ (w1 @ x + b1) + b2))) <= 1e-12


def test_forward_dim_mismatch():
    cfg = EncoderConfig((2, 2))
    pv = params_from(cfg, [(np.eye(2), np.zeros(2))])
    with pytest.raises(ShapeError):
        forward_encode([1.0, 2.0, 3.0], pv, cfg)
    other = EncoderConfig((3, 2))
    with pytest.raises(ShapeError):
        forward_encode([1.0, 2.0, 3.0], pv, other)


def test_layout_invariants():
    with pytest.raises(ShapeError):
        ParamVector(np.zeros(4), (("W1", 1, 1, 3),))  # not starting at 0
    with pytest.raises(ShapeError):
        ParamVector(np.zeros(4), (("W1", 0, 1, 3),))  # does not cover
    with pytest.raises(ValueError):
        ParamVector(np.array([1.0, np.nan]), (("W1", 0, 2, 1),))


def test_epochs_zero_delta_zero():
    rng = np.random.default_rng(1)
    cfg = EncoderConfig((4, 3))
    ds = random_dataset(rng)
    pv = init_params(cfg, 0)
    upd = local_train(ds, pv, cfg, epochs=0, batch=8, lr=0.1, clip_c=None, seed=7)
    assert np.array_equal(upd.delta.values, np.zeros(pv.size))
    assert upd.loss_delta == 0.0


def test_lr_zero_delta_zero():
    rng = np.random.default_rng(2)
    cfg = EncoderConfig((4, 3))
    ds = random_dataset(rng)
    pv = init_params(cfg, 0)
    upd = local_train(ds, pv, cfg, epochs=3, batch=8, lr=0.0, clip_c=None, seed=7)
    assert np.array_equal(upd.delta.values, np.zeros(pv.size))


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_clip_bound(seed):
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig((4, 6, 3), ("relu",))
    ds = random_dataset(rng, n=60)
    pv = init_params(cfg, seed)
    upd = local_train(ds, pv, cfg, epochs=4, batch=16, lr=0.5, clip_c=1.0, seed=seed)
    assert np.linalg.norm(upd.delta.values) <= 1.0 + 1e-9


def test_train_bit_reproducible():
    rng = np.random.default_rng(3)
    cfg = EncoderConfig((4, 5, 3), ("tanh",))
    ds = random_dataset(rng, n=50)
    pv = init_params(cfg, 11)
    a = local_train(ds, pv, cfg, epochs=3, batch=16, lr=0.2, clip_c=None, seed=42)
    b = local_train(ds, pv, cfg, epochs=3, batch=16, lr=0.2, clip_c=None, seed=42)
    assert np.array_equal(a.delta.values, b.delta.values)
    assert a.loss_delta == b.loss_delta


def test_empty_dataset_error():
    cfg = EncoderConfig((4, 3))
    pv = init_params(cfg, 0)
    ds = Dataset(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), 3)
    with pytest.raises(ValueError):
        local_train(ds, pv, cfg, epochs=1, batch=8, lr=0.1, clip_c=None, seed=0)
    with pytest.raises(ValueError):
        evaluate(pv, cfg, ds)


def test_nonfinite_loss_error():
    rng = np.random.default_rng(4)
    cfg = EncoderConfig((4, 4, 3), ("relu",))
    ds = random_dataset(rng, n=40)
    pv = init_params(cfg, 0)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(ArithmeticError):
        local_train(ds, pv, cfg, epochs=50, batch=4, lr=1e18, clip_c=None, seed=0)


def test_evaluate_constant_logit_balanced():
    cfg = EncoderConfig((2, 2))
    pv = params_from(cfg, [(np.zeros((2, 2)), np.zeros(2))])
    feats = np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 2.0], [3.0, 1.0]])
    labels = np.array([0, 0, 1, 1])
    acc, _ = evaluate(pv, cfg, Dataset(feats, labels, 2))
    assert acc == 0.5  # argmax ties break to class 0; half the labels are 0


def test_evaluate_single_sample_correct():
    cfg = EncoderConfig((2, 2))
    pv = params_from(cfg, [(np.zeros((2, 2)), np.array([0.0, 1.0]))])
    acc, _ = evaluate(pv, cfg, Dataset(np.array([[1.0, 1.0]]), np.array([1]), 2))
    assert acc == 1.0


def test_evaluate_trained_separable():
    rng = np.random.default_rng(5)
    n = 200
    labels = np.arange(n) % 2
    feats = np.where(labels[:, None] == 0, -2.0, 2.0) + 0.3 * rng.normal(size=(n, 3))
    ds = Dataset(feats, labels, 2)
    cfg = EncoderConfig((3, 2))
    pv = init_params(cfg, 0)
    upd = local_train(ds, pv, cfg, epochs=40, batch=32, lr=0.5, clip_c=None, seed=0)
    acc, _ = evaluate(pv + upd.delta, cfg, ds)
    assert acc >= 0.9


def finite_difference_grad(pv, cfg, X, y, h=1e-6):
    g = np.zeros(pv.size)
    for i in range(pv.size):
        up = pv.values.copy()
        up[i] += h
        down = pv.values.copy()
        down[i] -= h
        lp, _ = loss_and_grad(pv.with_values(up), cfg, X, y)
        lm, _ = loss_and_grad(pv.with_values(down), cfg, X, y)
        g[i] = (lp - lm) / (2 * h)
    return g


@pytest.mark.parametrize("trial", range(5))
def test_gradient_matches_finite_differences(trial):
    rng = np.random.default_rng(100 + trial)
    dims = (int(rng.integers(2, 5)), int(rng.integers(2, 6)), int(rng.integers(2, 4)))
    act = ["relu", "tanh", "identity"][trial % 3]
    cfg = EncoderConfig(dims, (act,))
    pv = init_params(cfg, trial)
    X = rng.normal(size=(8, dims[0]))
    y = rng.integers(0, dims[-1], size=8)
    _, analytic = loss_and_grad(pv, cfg, X, y)
    numeric = finite_difference_grad(pv, cfg, X, y)
    rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
    assert rel <= 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 5.0))
def test_clip_property(seed, clip_c):
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig((3, 4, 2), ("relu",))
    ds = random_dataset(rng, n=30, d=3, classes=2)
    pv = init_params(cfg, seed % 17)
    upd = local_train(ds, pv, cfg, epochs=2, batch=8, lr=1.0, clip_c=clip_c, seed=seed)
    assert np.linalg.norm(upd.delta.values) <= clip_c + 1e-9


def test_client_update_validation():
    pv = ParamVector(np.zeros(2), (("W1", 0, 2, 1),))
    with pytest.raises(ValueError):
        ClientUpdate(0, pv, 0, 0.0)
    with pytest.raises(ValueError):
        ClientUpdate(0, pv, 1, 0.0, staleness=-1)
