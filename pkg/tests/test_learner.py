import math

import numpy as np
import pytest

from neighborfl.learner import (
    AggregationError,
    ArchError,
    LinearLearner,
    LstmLearner,
    ModelParams,
    RMSProp,
    TrainingError,
    aggregate,
    fedavg,
    load_checkpoint,
    make_learner,
    save_checkpoint,
    train_local,
)


def central_difference(learner, params, x, y, k, h=1e-5):
    up = params.values.copy()
    up[k] += h
    down = params.values.copy()
    down[k] -= h
    return (learner.loss(ModelParams(up, params.arch_tag), x, y)
            - learner.loss(ModelParams(down, params.arch_tag), x, y)) / (2 * h)


def test_init_is_deterministic():
    for learner in (LinearLearner(12, 1), LstmLearner(12, 1, hidden=8)):
        a, b = learner.init_params(7), learner.init_params(7)
        assert a == b and a.values.tobytes() == b.values.tobytes()
        assert not np.array_equal(a.values, learner.init_params(8).values)


def test_parameter_counts():
    assert LinearLearner(12, 1).num_params() == 13
    H = 128
    expected = 4 * H * (1 + H) + 4 * H + 4 * H * (2 * H) + 4 * H + H + 1
    assert LstmLearner(12, 1).num_params() == expected


def test_linear_forward_examples():
    lin = LinearLearner(12, 1)
    zero = ModelParams(np.zeros(13), lin.arch_tag)
    assert lin.forward(zero, np.arange(12.0)).tolist() == [0.0]
    mean = ModelParams(np.r_[np.full(12, 1 / 12), 0.0], lin.arch_tag)
    assert lin.forward(mean, np.full(12, 42.0))[0] == pytest.approx(42.0, rel=1e-15)


def test_forward_shape_errors():
    lin = LinearLearner(12, 1)
    p = lin.init_params(0)
    with pytest.raises(ArchError):
        lin.forward(p, np.zeros(11))
    with pytest.raises(ArchError):
        LstmLearner(12, 1, hidden=4).forward(p, np.zeros(12))


def test_lstm_forward_reproducible_and_finite(rng):
    lstm = LstmLearner(12, 2, hidden=16)
    p = lstm.init_params(3)
    x = rng.normal(size=12) * 50
    a = lstm.forward(p, x)
    b = lstm.forward(p, x)
    assert a.shape == (2,) and a.tobytes() == b.tobytes()
    assert np.all(np.isfinite(lstm.forward(p, np.full(12, 1e6))))


def test_linear_gradient_closed_form(rng):
    lin = LinearLearner(12, 1)
    p = lin.init_params(1)
    x, y = rng.normal(size=12), rng.normal(size=1)
    err = float(p.values[:12] @ x + p.values[12] - y[0])
    expected = np.r_[2 * err * x, 2 * err]
    assert np.allclose(lin.loss_gradient(p, x, y), expected, rtol=1e-12, atol=1e-12)


def test_zero_error_gives_zero_gradient():
    lin = LinearLearner(12, 1)
    p = lin.init_params(1)
    x = np.arange(12.0)
    y = lin.forward(p, x)
    assert np.all(lin.loss_gradient(p, x, y) == 0.0)


@pytest.mark.parametrize("learner", [
    LinearLearner(12, 1), LinearLearner(12, 3), LstmLearner(12, 1, hidden=6), LstmLearner(6, 2, hidden=5, layers=3),
])
def test_gradient_matches_finite_differences(learner, rng):
    p = learner.init_params(11)
    for _ in range(2):
        x, y = rng.normal(size=learner.n_in), rng.normal(size=learner.n_out)
        g = learner.loss_gradient(p, x, y)
        for k in range(learner.num_params()):
            fd = central_difference(learner, p, x, y, k)
            assert abs(g[k] - fd) / max(1.0, abs(fd)) < 1e-4


def test_single_rmsprop_step_matches_hand_computation():
    lin = LinearLearner(12, 1)
    p = lin.init_params(5)
    points = np.linspace(30, 66, 13)
    lr, rho, eps = 1e-3, 0.9, 1e-8
    out = train_local(lin, p, points, 1, RMSProp(lr, rho, eps))

    theta = p.values.tolist()
    x, y = points[:12].tolist(), points[12]
    err = sum(w * xi for w, xi in zip(theta[:12], x)) + theta[12] - y
    grads = [2 * err * xi for xi in x] + [2 * err]
    expected = [t - lr * g / (math.sqrt((1 - rho) * g * g) + eps) for t, g in zip(theta, grads)]
    assert np.allclose(out.values, expected, rtol=0, atol=1e-12)


def test_train_local_guards(rng):
    lin = LinearLearner(12, 1)
    p = lin.init_params(0)
    assert train_local(lin, p, rng.normal(size=12), 5, RMSProp()) is p
    assert train_local(lin, p, rng.normal(size=40), 0, RMSProp()) is p


def test_train_local_leaves_input_untouched_and_is_reproducible(rng):
    lstm = LstmLearner(12, 1, hidden=8)
    p = lstm.init_params(0)
    before = p.values.copy()
    pts = rng.normal(size=20)
    a = train_local(lstm, p, pts, 2, RMSProp(), np.random.default_rng(9))
    b = train_local(lstm, p, pts, 2, RMSProp(), np.random.default_rng(9))
    assert np.array_equal(p.values, before)
    assert a.values.tobytes() == b.values.tobytes()
    c = train_local(lstm, p, pts, 2, RMSProp(), np.random.default_rng(10))
    assert not np.array_equal(a.values, c.values)  # dropout masks differ


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_divergence_raises():
    lin = LinearLearner(12, 1)
    p = lin.init_params(0)
    with pytest.raises(TrainingError, match="device x"):
        train_local(lin, p, np.full(20, 1e308), 1, RMSProp(lr=1e300), context="device x")


def test_fedavg_examples():
    tag = "t"
    m = ModelParams(np.array([0.1, -3.3, 7.0]), tag)
    assert fedavg([m]) == m
    assert fedavg([m, m, m]).values.tobytes() == m.values.tobytes()
    a = ModelParams(np.array([0.0, 2.0, 4.0]), tag)
    b = ModelParams(np.array([2.0, 0.0, 0.0]), tag)
    assert fedavg([a, b]).values.tolist() == [1.0, 1.0, 2.0]


def test_fedavg_errors():
    with pytest.raises(AggregationError):
        fedavg([])
    with pytest.raises(AggregationError):
        fedavg([ModelParams(np.zeros(2), "a"), ModelParams(np.zeros(2), "b")])
    with pytest.raises(AggregationError):
        fedavg([ModelParams(np.zeros(2), "a"), ModelParams(np.zeros(3), "a")])


def test_aggregate_is_order_independent(rng):
    models = {f"d{k}": ModelParams(rng.normal(size=50) * 1e3, "t") for k in range(7)}
    ids = list(models)
    ref = aggregate(models, ids)
    for _ in range(10):
        rng.shuffle(ids)
        assert aggregate(models, ids).values.tobytes() == ref.values.tobytes()


def test_checkpoint_roundtrip(tmp_path):
    p = make_learner("lstm", 12, 1, hidden=4).init_params(2)
    save_checkpoint(tmp_path / "m.npz", p)
    assert load_checkpoint(tmp_path / "m.npz") == p
    assert not list(tmp_path.glob(".*tmp"))


def test_params_are_immutable():
    p = ModelParams(np.zeros(3), "t")
    with pytest.raises(ValueError):
        p.values[0] = 1.0
