import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from pdednn.errors import DimensionError, NumericalError, TrainingAbort
from pdednn.neural import (
    ActivationHead,
    AdamState,
    AdvDiffTheta,
    DenseLayer,
    Network,
    RbOutputLayer,
    adam_step,
    baseline_head_size,
    build_baseline,
    build_network,
    build_pdednn,
    gradient_check,
    mlp_forward,
    mse_loss,
    relative_errors,
    train,
)
from pdednn.rom import AffineOperatorSet


def random_ops(rng, n=4, qa=3, qf=2):
    mats = rng.standard_normal((qa, n, n)) * 0.1
    mats[0] += 3 * np.eye(n)
    vecs = rng.standard_normal((qf, n))
    lo = np.concatenate([[1.0], -np.ones(qa - 1), -np.ones(qf)])
    hi = np.concatenate([[2.0], np.ones(qa - 1), np.ones(qf)])
    return AffineOperatorSet(mats, vecs, lo, hi)


def test_mlp_forward_zero_and_identity():
    net = Network([DenseLayer(np.zeros((4, 3)), np.zeros(4)), DenseLayer(np.zeros((2, 4)), np.zeros(2), "identity")],
                  ActivationHead("identity"))
    z, _ = mlp_forward(net, np.random.default_rng(0).random((5, 3)))
    assert not z.any()
    ident = Network([DenseLayer(np.eye(3), np.zeros(3), "identity")], ActivationHead("identity"))
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(mlp_forward(ident, x)[0], x)


def test_mlp_forward_matches_loop(rng):
    net = build_network(3, [5], ActivationHead("identity"), 2, seed=3)
    x = rng.standard_normal((4, 3))
    z, _ = mlp_forward(net, x)
    w1, b1, w2, b2 = net.params()
    for i in range(4):
        h = np.array([max(0.0, sum(w1[r, c] * x[i, c] for c in range(3)) + b1[r]) for r in range(5)])
        zi = np.array([sum(w2[r, c] * h[c] for c in range(5)) + b2[r] for r in range(2)])
        np.testing.assert_allclose(z[i], zi, atol=1e-13)


def test_mlp_forward_names_bad_layer():
    net = Network([DenseLayer(np.full((2, 2), 1e308), np.zeros(2)), DenseLayer(np.ones((1, 2)), np.zeros(1), "identity")],
                  ActivationHead("identity"))
    with pytest.raises(NumericalError, match="layer 1"):
        mlp_forward(net, np.full((1, 2), 1e10))


def test_rb_layer_midpoint(rng):
    ops = random_ops(rng)
    layer = RbOutputLayer(ops, rng.standard_normal((3, 4)))
    xi, scaled, theta, _ = layer.coefficients(np.zeros((1, 5)))
    np.testing.assert_allclose(xi, 0.5)
    np.testing.assert_allclose(theta[0], 0.5 * (ops.lo + ops.hi))


def test_rb_layer_scalar_closed_form():
    a1, f1, p, v = 2.0, 3.0, 0.7, 1.5
    ops = AffineOperatorSet(np.array([[[a1]]]), np.array([[f1]]), np.array([0.5, 0.5]), np.array([2.0, 4.0]))
    layer = RbOutputLayer(ops, np.array([[p * v]]))
    z = np.array([[0.3, -0.4]])
    ta, tf = layer.scale(expit(z))[0]
    y, cache = layer.forward(z)
    assert y[0, 0] == pytest.approx(p * v * tf * f1 / (ta * a1), rel=1e-14)
    dz = layer.backward(cache, np.ones((1, 1)))
    xi = expit(z)[0]
    dy_dta = -p * v * tf * f1 / (a1 * ta ** 2)
    dy_dtf = p * v * f1 / (ta * a1)
    expected = np.array([dy_dta, dy_dtf]) * (ops.hi - ops.lo) * xi * (1 - xi)
    np.testing.assert_allclose(dz[0], expected, rtol=1e-12)


def test_rb_layer_zero_upstream(rng):
    layer = RbOutputLayer(random_ops(rng), rng.standard_normal((3, 4)))
    _, cache = layer.forward(rng.standard_normal((2, 5)))
    assert not layer.backward(cache, np.zeros((2, 3))).any()


@pytest.mark.parametrize("mode", ["affine-coefficients", "physical-parameters"])
def test_rb_layer_finite_differences(rng, mode):
    if mode == "physical-parameters":
        ops = random_ops(rng, qa=3, qf=3)
        layer = RbOutputLayer(ops, rng.standard_normal((3, 4)), mode, [0.5, 0.0], [10.0, 0.6], AdvDiffTheta())
    else:
        layer = RbOutputLayer(random_ops(rng), rng.standard_normal((3, 4)))
    worst = 0.0
    for _ in range(20):
        z = rng.standard_normal((1, layer.s))
        w = rng.standard_normal((1, 3))
        _, cache = layer.forward(z)
        an = layer.backward(cache, w)[0]
        fd = np.empty(layer.s)
        for k in range(layer.s):
            e = np.zeros_like(z)
            e[0, k] = 1e-5
            fd[k] = (np.sum(w * layer.forward(z + e)[0]) - np.sum(w * layer.forward(z - e)[0])) / 2e-5
        worst = max(worst, float(np.max(relative_errors(an, fd))))
    assert worst <= 1e-6


def test_rb_layer_physical_mode_matches_rb(rng):
    ops = random_ops(rng, qa=3, qf=3)
    ext = rng.standard_normal((2, 4))
    lo, hi = np.array([0.5, 0.0]), np.array([10.0, 0.6])
    layer = RbOutputLayer(ops, ext, "physical-parameters", lo, hi, AdvDiffTheta())
    mu = np.array([2.22, 0.48])
    xi = (mu - lo) / (hi - lo)
    z = np.log(xi / (1 - xi))[None, :]
    y, _ = layer.forward(z)
    th = np.array([mu[0], np.sin(mu[1]), np.cos(mu[1])])
    u = np.linalg.solve(np.tensordot(th, ops.matrices, 1), th @ ops.vectors)
    np.testing.assert_allclose(y[0], ext @ u, atol=1e-10)
    np.testing.assert_allclose(layer.latent(z)[0], mu, rtol=1e-12)


def test_rb_layer_validation(rng):
    ops = random_ops(rng)
    with pytest.raises(DimensionError):
        RbOutputLayer(ops, np.ones((2, 3)))
    with pytest.raises(ValueError):
        RbOutputLayer(ops, np.ones((2, 4)), mode="physical-parameters")
    layer = RbOutputLayer(ops, np.ones((2, 4)))
    with pytest.raises(DimensionError):
        layer.forward(np.zeros((1, 3)))


def test_mse_loss():
    loss, g = mse_loss(np.ones((3, 2)), np.ones((3, 2)))
    assert loss == 0.0 and not g.any()
    loss, g = mse_loss(np.array([[0.0]]), np.array([[2.0]]))
    assert loss == 4.0 and g[0, 0] == 4.0
    with pytest.raises(DimensionError):
        mse_loss(np.ones((2, 2)), np.ones((2, 3)))


def test_mse_loss_naive(rng):
    y, p = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    naive = 0.0
    for i in range(6):
        for j in range(4):
            naive += (y[i, j] - p[i, j]) ** 2
    assert mse_loss(y, p)[0] == pytest.approx(naive / 6, rel=1e-13)


def test_adam_first_steps():
    p = [np.array([1.0, -2.0])]
    st_ = AdamState.for_params(p, lr=0.1)
    adam_step(st_, p, [np.zeros(2)])
    np.testing.assert_array_equal(p[0], [1.0, -2.0])

    p = [np.array([1.0, -2.0])]
    g = np.array([0.5, -3.0])
    st_ = AdamState.for_params(p, lr=0.1)
    adam_step(st_, p, [g])
    np.testing.assert_allclose(p[0], [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 3.0 / (3.0 + 1e-8)])
    # second step by hand
    m = 0.9 * (0.1 * g) + 0.1 * g
    v = 0.999 * (0.001 * g * g) + 0.001 * g * g
    expect = p[0] - 0.1 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    adam_step(st_, p, [g])
    np.testing.assert_allclose(p[0], expect, rtol=1e-14)
    assert st_.t == 2


def test_adam_shape_check():
    p = [np.zeros(2)]
    with pytest.raises(DimensionError):
        adam_step(AdamState.for_params(p), p, [np.zeros(3)])


def test_baseline_heads():
    assert [baseline_head_size(k, 20, 2) for k in ("mlp_mu", "mlp_out", "mlp")] == [2, 20, 22]
    net = build_baseline("mlp", 5, [8], 20, 2)
    for prm in net.params():
        prm[...] = 0.0
    np.testing.assert_array_equal(net.predict(np.ones((3, 5))), 0.5)
    with pytest.raises(ValueError):
        build_baseline("cnn", 5, [8], 20, 2)


def test_train_zero_epochs_and_determinism(rng):
    x = rng.random((30, 3))
    y = expit(x @ rng.standard_normal((3, 2)))
    net = build_baseline("mlp_out", 3, [8], 2, 0, seed=1)
    before = net.copy_params()
    assert train(net, x, y, epochs=0) == []
    for a, b in zip(before, net.params()):
        np.testing.assert_array_equal(a, b)
    h1 = train(build_baseline("mlp_out", 3, [8], 2, 0, seed=1), x, y, x, y, epochs=5, batch_size=8, seed=2)
    h2 = train(build_baseline("mlp_out", 3, [8], 2, 0, seed=1), x, y, x, y, epochs=5, batch_size=8, seed=2)
    assert h1 == h2 and len(h1) == 5


def test_train_memorizes_one_sample(rng):
    ops = random_ops(rng)
    layer = RbOutputLayer(ops, rng.standard_normal((3, 4)))
    target_layer = RbOutputLayer(ops, layer.extraction)
    y, _ = target_layer.forward(np.array([[0.4, -0.3, 0.2, 0.1, -0.5]]))
    net = build_pdednn(4, [16, 16], layer, seed=0)
    x = rng.random((1, 4))
    hist = train(net, np.repeat(x, 8, 0), np.repeat(y, 8, 0), epochs=2000, batch_size=None, lr=1e-3)
    assert hist[-1].train_loss < 1e-6


def test_train_memorizes_ten_samples_baseline(rng):
    x = rng.random((10, 4))
    y = rng.uniform(0.2, 0.8, (10, 3))
    net = build_baseline("mlp_out", 4, [64, 64], 3, 0, seed=0)
    hist = train(net, x, y, epochs=3000, batch_size=None, lr=1e-3)
    assert hist[-1].train_loss < 1e-5


def test_train_aborts_on_singular_solves():
    ops = AffineOperatorSet(np.zeros((1, 2, 2)), np.ones((1, 2)), np.array([0.0, 0.0]), np.array([1.0, 1.0]))
    layer = RbOutputLayer(ops, np.eye(2))
    net = build_pdednn(2, [4], layer)
    with pytest.raises(TrainingAbort):
        train(net, np.ones((10, 2)), np.ones((10, 2)), epochs=1)


def test_gradient_check_linear_net(rng):
    net = Network([DenseLayer(rng.standard_normal((4, 3)), rng.standard_normal(4), "identity"),
                   DenseLayer(rng.standard_normal((2, 4)), rng.standard_normal(2), "identity")],
                  ActivationHead("identity"))
    rep = gradient_check(net, rng.standard_normal((1, 3)), rng.standard_normal((1, 2)), step=1e-5, tolerance=1e-8)
    assert rep.passed and rep.n_flagged == 0


def test_gradient_check_pdednn(rng):
    layer = RbOutputLayer(random_ops(rng), rng.standard_normal((3, 4)))
    net = build_pdednn(6, [12, 12], layer, seed=4)
    rep = gradient_check(net, rng.random((1, 6)), rng.standard_normal((1, 3)), tolerance=1e-5)
    assert rep.passed, rep.per_group
    assert set(rep.per_group) >= {"W1", "b1", "W3", "b3", "input"}


def test_gradient_check_flags_kinks():
    net = Network([DenseLayer(np.array([[1.0, -1.0]]), np.zeros(1)), DenseLayer(np.ones((1, 1)), np.zeros(1), "identity")],
                  ActivationHead("identity"))
    rep = gradient_check(net, np.array([[0.5, 0.5]]), np.ones((1, 1)), step=1e-5)
    assert rep.n_flagged > 0


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 10_000))
def test_network_gradient_shapes(n_hidden, width, seed):
    net = build_network(3, [width] * n_hidden, ActivationHead("sigmoid"), 2, seed=seed)
    x = np.random.default_rng(seed).random((4, 3))
    y, cache = net.forward(x)
    grads, dx = net.backward(cache, np.ones_like(y))
    assert [g.shape for g in grads] == [p.shape for p in net.params()]
    assert dx.shape == x.shape


def test_cosine_lr_schedule():
    from pdednn.neural import cosine_lr
    assert cosine_lr(0, 10, 1e-3, 1e-5) == pytest.approx(1e-3)
    assert cosine_lr(9, 10, 1e-3, 1e-5) == pytest.approx(1e-5)
    steps = [cosine_lr(e, 10, 1e-3, 1e-5) for e in range(10)]
    assert all(b < a for a, b in zip(steps, steps[1:]))
    assert cosine_lr(4, 10, 1e-3) == 1e-3


def test_out_scale_shrinks_final_layer():
    from pdednn.neural import ActivationHead, build_network
    a = build_network(3, [5], ActivationHead(), 2, seed=7)
    b = build_network(3, [5], ActivationHead(), 2, seed=7, out_scale=0.1)
    np.testing.assert_allclose(b.layers[-1].W, 0.1 * a.layers[-1].W, rtol=1e-15)
    np.testing.assert_array_equal(b.layers[0].W, a.layers[0].W)
