import numpy as np
import pytest

from clinutility.core import VitalSeries
from clinutility.models import (
    DimensionMismatch,
    FeatureSpec,
    FeatureWindow,
    ModelError,
    ModelParams,
    SingularSystem,
    StaleCache,
    design_matrix,
    fit_linear_ar,
    forward_batch,
    gradient_net_backward,
    gradient_net_forward,
    init_gradient_net,
    persistence_predict,
    predict_series,
    window_at,
)


def random_net(seed, d=5, h=4):
    r = np.random.default_rng(seed)
    return ModelParams("gradient_net", d, r.normal(size=d), r.normal(), r.normal(size=(h, d)),
                       r.normal(size=h), r.normal(size=h), r.normal(size=d), r.uniform(0.5, 2, d))


def test_persistence_examples():
    assert persistence_predict(FeatureWindow(np.array([3.0, 5.0, 7.0]))) == 7.0


def _target_only(values):
    return {"s": VitalSeries.from_values("p", "s", values)}


def test_persistence_series_rmse():
    spec = FeatureSpec("s", (), 1)
    model = ModelParams("persistence", 1, [0.0], feature_spec=spec)
    for values, expected in ((np.full(20, 4.0), 0.0), (np.arange(20.0), 1.0)):
        signals = _target_only(values)
        pred = predict_series(model, signals, "persist")
        err = signals["s"].values[pred.indices] - pred.values
        assert np.sqrt(np.mean(err ** 2)) == pytest.approx(expected)


def test_design_matrix_layout():
    signals = {"s3": VitalSeries.from_values("p", "s3", [0.0, 1, 2, 3, 4]),
               "s1": VitalSeries.from_values("p", "s1", [10.0, 11, 12, 13, 14])}
    X, idx, y = design_matrix(signals, FeatureSpec("s3", ("s1",), 2))
    assert idx.tolist() == [2, 3, 4]
    assert X[0].tolist() == [0, 1, 10, 11]
    assert y.tolist() == [2, 3, 4]
    w = window_at(signals, FeatureSpec("s3", ("s1",), 2), 4)
    assert w.vector().tolist() == X[2].tolist()


def test_linear_exact_recovery(rng):
    X = rng.normal(size=(50, 2))
    y = 2 * X[:, 0] - X[:, 1] + 3
    m = fit_linear_ar(X, y, 0.0)
    np.testing.assert_allclose(m.w, [2, -1], atol=1e-9)
    assert m.b == pytest.approx(3, abs=1e-9)
    assert m.kind == "linear_ar"


def test_ridge_limit_gives_mean(rng):
    X = rng.normal(size=(40, 3))
    y = X @ [1.0, 2.0, -1.0] + 5
    m = fit_linear_ar(X, y, 1e14)
    assert np.all(np.abs(m.w) < 1e-10)
    np.testing.assert_allclose(m.predict(X), y.mean(), atol=1e-8)


@pytest.mark.parametrize("ridge", [0.0, 3.0])
def test_linear_matches_gradient_descent(ridge, rng):
    X = rng.normal(size=(200, 5))
    y = X @ rng.normal(size=5) + 0.3 * rng.normal(size=200) + 1.0
    m = fit_linear_ar(X, y, ridge)
    A = np.hstack([X, np.ones((200, 1))])
    penalty = np.diag([ridge] * 5 + [0.0])
    theta = np.zeros(6)
    step = 1.0 / np.linalg.eigvalsh(A.T @ A + penalty).max()
    for _ in range(20000):
        theta -= step * (A.T @ (A @ theta - y) + penalty @ theta)
    np.testing.assert_allclose(m.w, theta[:5], atol=1e-5)
    assert m.b == pytest.approx(theta[5], abs=1e-5)


def test_least_squares_residuals_orthogonal(rng):
    X = rng.normal(size=(100, 4))
    y = rng.normal(size=100)
    m = fit_linear_ar(X, y)
    resid = y - m.predict(X)
    np.testing.assert_allclose(X.T @ resid, 0, atol=1e-9)
    assert abs(resid.sum()) < 1e-9


def test_fit_errors():
    X = np.ones((10, 2))
    with pytest.raises(SingularSystem):
        fit_linear_ar(X, np.arange(10.0))
    with pytest.raises(ModelError):
        fit_linear_ar(np.ones((2, 3)), np.ones(2))
    with pytest.raises(DimensionMismatch):
        fit_linear_ar(np.ones((10, 2)), np.ones(9))


def test_forward_zero_weights_is_bias():
    m = ModelParams("gradient_net", 3, np.zeros(3), 2.5, np.zeros((4, 3)), np.zeros(4), np.zeros(4))
    assert gradient_net_forward(m, np.array([1.0, -2.0, 9.0]))[0] == 2.5


def test_zero_width_net_equals_linear(rng):
    X = rng.normal(size=(30, 3))
    lin = fit_linear_ar(X, rng.normal(size=30))
    net = ModelParams("gradient_net", 3, lin.w, lin.b)
    np.testing.assert_allclose(net.predict(X), lin.predict(X), rtol=1e-14)


def test_forward_matches_reference(rng):
    m = random_net(3)
    x = rng.normal(size=5)
    out = m.b
    z = [(x[j] - m.shift[j]) / m.scale[j] for j in range(5)]
    for j in range(5):
        out += z[j] * m.w[j]
    for k in range(m.hidden):
        a = m.b1[k] + sum(m.W1[k, j] * z[j] for j in range(5))
        out += m.w2[k] * np.tanh(a)
    assert gradient_net_forward(m, x)[0] == pytest.approx(out, rel=1e-12)


def test_backward_zero_upstream(rng):
    m = random_net(4)
    _, cache = forward_batch(m, rng.normal(size=(6, 5)))
    for g in gradient_net_backward(cache, np.zeros(6)).values():
        assert np.all(g == 0)


def test_backward_linear_degenerate(rng):
    m = ModelParams("gradient_net", 4, rng.normal(size=4), 0.5)
    x = rng.normal(size=4)
    _, cache = gradient_net_forward(m, x)
    g = gradient_net_backward(cache, 1.0)
    np.testing.assert_array_equal(g["w"], x)
    assert float(g["b"]) == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences(seed):
    m = random_net(seed)
    r = np.random.default_rng(100 + seed)
    X = r.normal(size=(7, 5))
    upstream = r.normal(size=7)

    def objective(params):
        return float(forward_batch(params, X)[0] @ upstream)

    _, cache = forward_batch(m, X)
    grads = gradient_net_backward(cache, upstream)
    for name in ModelParams.trainable:
        base = np.atleast_1d(np.asarray(getattr(m, name), dtype=float))
        analytic = np.atleast_1d(grads[name]).ravel()
        for i in range(base.size):
            h = 1e-6
            vals = []
            for sign in (1, -1):
                q = m.copy()
                arr = base.copy().ravel()
                arr[i] += sign * h
                setattr(q, name, float(arr[0]) if name == "b" else arr.reshape(base.shape))
                vals.append(objective(q))
            fd = (vals[0] - vals[1]) / (2 * h)
            assert analytic[i] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_stale_cache(rng):
    m = random_net(1)
    _, cache = forward_batch(m, rng.normal(size=(2, 5)))
    m.apply_update(gradient_net_backward(cache, np.ones(2)), 0.1)
    with pytest.raises(StaleCache):
        gradient_net_backward(cache, np.ones(2))


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        random_net(0).predict(np.zeros((2, 4)))


def test_init_is_seeded():
    a = init_gradient_net(6, 3, seed=5)
    b = init_gradient_net(6, 3, seed=5)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), init_gradient_net(6, 3, seed=6).flat())
