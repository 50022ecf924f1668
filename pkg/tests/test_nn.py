import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biapnn.nn import (
    ConfigurationError,
    DenseNet,
    NetworkBundle,
    build_bundle,
    g_from_bundle,
    inverse_softplus,
    load_checkpoint,
    loss_gradient,
    mlp_forward,
    net_from_vector,
    parameter_vector,
    propagate,
    required_nets,
    rho_from_bundle,
    save_checkpoint,
    softplus,
    tanh,
    velocity_derivative,
    xavier_init,
)
from biapnn.velocity import build_basis

BOX = ((0.0, 0.1), (0.0, 1.0))


def scalar_fn(net, i):
    return lambda p: mlp_forward(net, p[None, :])[0, i]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["identity", "negexp"]), st.booleans())
def test_tangents_match_autodiff(seed, transform, bounded):
    bounds = BOX + ((-3.0, 3.0),) if bounded else None
    net = xavier_init([3, 7, 5, 2], seed, transform, bounds)
    pts = np.random.default_rng(seed).uniform(0, 1, (6, 3))
    tg = propagate(net, pts, (0, 1, 2), second=True)
    for i in range(2):
        f = scalar_fn(net, i)
        jac = jax.vmap(jax.grad(f))(jnp.asarray(pts))
        hess = jax.vmap(jax.hessian(f))(jnp.asarray(pts))
        np.testing.assert_allclose(tg.d1[:, i, :], jac, rtol=1e-10, atol=1e-11)
        np.testing.assert_allclose(tg.d2[:, i, :], jnp.diagonal(hess, axis1=1, axis2=2), rtol=1e-9, atol=1e-10)
        np.testing.assert_allclose(tg.value[:, i], jax.vmap(f)(jnp.asarray(pts)), rtol=1e-14)


def test_custom_tanh_value_and_gradient():
    a = jnp.linspace(-30, 30, 201)
    np.testing.assert_allclose(tanh(a), jnp.tanh(a), atol=1e-15)
    np.testing.assert_allclose(jax.vmap(jax.grad(tanh))(a), 1 - jnp.tanh(a) ** 2, atol=1e-15)


def test_xavier_bounds_and_determinism():
    a = np.sqrt(6.0 / (2 + 16))
    net = xavier_init([2, 16, 1], seed=5)
    assert np.abs(np.asarray(net.weights[0])).max() <= a
    assert all(np.all(np.asarray(b) == 0) for b in net.biases)
    again = xavier_init([2, 16, 1], seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(net.weights, again.weights))
    other = xavier_init([2, 16, 1], seed=6)
    assert not np.array_equal(net.weights[0], other.weights[0])


def test_zero_hidden_layers_is_affine():
    net = xavier_init([2, 1], seed=0)
    pts = np.array([[0.0, 0.0], [1.0, 2.0]])
    W = np.asarray(net.weights[0])
    np.testing.assert_allclose(mlp_forward(net, pts)[:, 0], pts @ W[0], atol=1e-15)


def test_shape_validation():
    net = xavier_init([2, 4, 1], seed=0)
    with pytest.raises(ValueError):
        DenseNet((2, 3, 1), net.weights, net.biases)
    with pytest.raises(ValueError):
        mlp_forward(net, np.zeros((5, 3)))
    with pytest.raises(ValueError):
        xavier_init([2, 0, 1])
    with pytest.raises(ValueError):
        xavier_init([2, 1], bounds=((0, 1),))
    with pytest.raises(ValueError):
        propagate(net, np.zeros((1, 2)), (2,))


def test_parameter_vector_round_trip():
    net = xavier_init([3, 5, 4, 1], seed=2, transform="negexp", bounds=BOX + ((-1.0, 1.0),))
    vec = parameter_vector(net)
    assert vec.size == net.n_params == 3 * 5 + 5 + 5 * 4 + 4 + 4 + 1
    back = net_from_vector(vec, net.widths, net.transform, net.seed, net.bounds)
    pts = np.random.default_rng(0).uniform(size=(4, 3))
    assert np.array_equal(mlp_forward(back, pts), mlp_forward(net, pts))
    with pytest.raises(ValueError):
        net_from_vector(vec[:-1], net.widths)


def test_checkpoint_round_trip(tmp_path):
    net = xavier_init([2, 6, 1], seed=3, transform="negexp", bounds=BOX)
    save_checkpoint(net, tmp_path / "rho")
    back = load_checkpoint(tmp_path / "rho")
    assert back.widths == net.widths and back.transform == "negexp" and back.bounds == net.bounds
    pts = np.random.default_rng(1).uniform(size=(5, 2))
    assert np.array_equal(mlp_forward(back, pts), mlp_forward(net, pts))


def test_softplus_inverse():
    for y in (1e-3, 0.5, 2.0, 50.0):
        assert float(softplus(inverse_softplus(y))) == pytest.approx(y, rel=1e-12)


def test_loss_gradient_requires_real_scalar():
    net = xavier_init([2, 3, 1], seed=0)
    with pytest.raises(TypeError):
        loss_gradient(lambda p: mlp_forward(p, np.zeros((2, 2))), net)
    val, grad = loss_gradient(lambda p: jnp.sum(mlp_forward(p, np.ones((2, 2)))), net)
    assert np.isfinite(float(val)) and isinstance(grad, DenseNet)


@pytest.mark.parametrize("seed", range(5))
def test_micro_network_is_mean_free(basis, seed):
    bundle = build_bundle("apnn", (16, 16), seed=seed, domain=BOX, v_max=3.0)
    pts = np.random.default_rng(seed).uniform([0, 0], [0.1, 1], (1000, 2))
    g = g_from_bundle(bundle, basis, pts)
    w = basis.weights_maxwellian
    assert np.abs(np.asarray(g.psi) @ w).max() <= 1e-13
    assert np.abs(np.asarray(g.psi_x) @ w).max() <= 1e-13
    assert np.abs(np.asarray(g.psi_t) @ w).max() <= 1e-13


@pytest.mark.parametrize("degree", range(1, 7))
def test_velocity_derivative_of_polynomials(basis, degree):
    v = basis.nodes
    psi = v**degree - np.sum(v**degree * basis.weights_maxwellian)
    mean = 0.0
    expected = degree * v ** (degree - 1) - 2 * v * psi + 2 * v * mean  # d/dv(psi M)/M
    np.testing.assert_allclose(velocity_derivative(psi[None], basis)[0], expected, atol=1e-9)


def test_required_nets():
    assert required_nets("apnn") == ("rho_apnn", "g")
    assert required_nets("bi_implicit", poisson=True) == ("rho_diff", "rho_corr", "g", "phi")
    with pytest.raises(ValueError):
        required_nets("fem")


def test_missing_network_reported():
    bundle = build_bundle("apnn", (4,))
    with pytest.raises(ConfigurationError):
        rho_from_bundle(bundle, "bi_explicit", 0.1, np.zeros((1, 2)))


def test_bundle_split_merge_and_freeze():
    bundle = build_bundle("bi_implicit", (4,), sigma0=1.5).freeze("rho_diff")
    train, fixed = bundle.split()
    assert train.rho_diff is None and fixed.rho_diff is not None
    merged = NetworkBundle.merge(train, fixed)
    assert merged.frozen == frozenset({"rho_diff"})
    assert float(merged.sigma) == pytest.approx(1.5, rel=1e-12)
    assert bundle.unfreeze("rho_diff").frozen == frozenset()


def test_per_network_seeds_differ():
    b = build_bundle("bi_implicit", (8,), seed=0)
    assert not np.array_equal(b.rho_diff.weights[0], b.rho_corr.weights[0])


@pytest.mark.parametrize("method,scale", [("bi_explicit", 0.01), ("bi_implicit", 1.0)])
def test_bi_fidelity_density_composition(method, scale):
    b = build_bundle(method, (6,), seed=1)
    pts = np.random.default_rng(0).uniform(size=(5, 2))
    d = mlp_forward(b.rho_diff, pts)[:, 0]
    c = mlp_forward(b.rho_corr, pts)[:, 0]
    out = rho_from_bundle(b, method, 0.01, pts, second=True)
    np.testing.assert_allclose(out.rho, d + scale * c, rtol=1e-14)
    assert out.rho_xx.shape == (5,)


def test_negexp_density_positive():
    b = build_bundle("apnn", (8, 8), seed=4)
    pts = np.random.default_rng(0).uniform(-5, 5, size=(100, 2))
    assert np.all(np.asarray(rho_from_bundle(b, "apnn", 1.0, pts).rho) > 0)


def test_input_bounds_normalize():
    net = xavier_init([2, 3, 1], seed=0, bounds=BOX)
    plain = DenseNet(net.widths, net.weights, net.biases)
    lo = mlp_forward(net, np.array([[0.0, 0.0]]))
    assert np.array_equal(lo, mlp_forward(plain, np.array([[-1.0, -1.0]])))
