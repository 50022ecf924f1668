"""Miniature problem setups and independent oracles shared by the test modules."""
import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from biapnn.losses import (
    ObservationSet,
    PenaltyWeights,
    apnn_loss,
    biapnn_loss,
    build_collocation,
    data_loss,
    diffusion_loss,
    limit_residuals,
    micro_macro_residuals,
    phi_field_for,
    pinn_loss,
    poisson_residual_loss,
)
from biapnn.nn import NetworkBundle, build_bundle, g_from_bundle, rho_from_bundle
from biapnn.problems import problem_one, problem_two
from biapnn.velocity import build_basis

BOX = ((0.0, 0.1), (0.0, 1.0))


def mini(problem="problem1", nt=3, nx=5):
    prob = problem_one() if problem == "problem1" else problem_two()
    basis = build_basis(Nv=8)
    return prob, basis, build_collocation(prob, basis, nt, nx)


def random_bundle(method, seed=0, hidden=(6, 6), poisson=False, sigma0=None):
    """Networks with perturbed biases so no layer sits at a symmetric point."""
    b = build_bundle(method, hidden, seed=seed, poisson=poisson, phi_hidden=(6,), sigma0=sigma0, domain=BOX, v_max=3.0)
    leaves, treedef = jax.tree_util.tree_flatten(b)
    rng = np.random.default_rng(seed + 17)
    leaves = [jnp.asarray(x) + 0.1 * rng.standard_normal(np.shape(x)) for x in leaves]
    return jax.tree_util.tree_unflatten(treedef, leaves)


def interior_residuals(bundle, method, eps, prob, basis, colloc):
    tx = colloc.interior_tx
    rho = rho_from_bundle(bundle, method, eps, tx)
    g = g_from_bundle(bundle, basis, tx)
    px = jnp.asarray(prob.potential_dx(tx[:, 1]))
    return micro_macro_residuals(rho, g, px, eps, 2.0, basis), limit_residuals(rho, g, px, 2.0, basis)


def loss_cases():
    """Named ``(bundle, loss_fn)`` pairs covering every empirical loss at miniature scale."""
    p1, basis, c1 = mini()
    p2, _, c2 = mini("problem2")
    pf = phi_field_for(p1)
    w = PenaltyWeights()
    obs = ObservationSet(np.array([[0.05, 0.3], [0.1, 0.7]]), np.array([1.2, 0.9]), np.array([[0.05, 0.5]]), np.array([2.0]))
    return {
        "pinn": (random_bundle("pinn", 1), lambda b: pinn_loss(b, 0.5, 2.0, pf, c1, basis, w, p1).total),
        "apnn": (random_bundle("apnn", 2), lambda b: apnn_loss(b, 0.5, 2.0, pf, c1, basis, w, p1).total),
        "bi_explicit": (
            random_bundle("bi_explicit", 3),
            lambda b: biapnn_loss(b, "explicit", 0.5, 2.0, pf, c1, basis, w, p1).total,
        ),
        "bi_implicit": (
            random_bundle("bi_implicit", 4),
            lambda b: biapnn_loss(b, "implicit", 0.5, 2.0, pf, c1, basis, w, p1).total,
        ),
        "diffusion_v1": (
            random_bundle("bi_implicit", 5, sigma0=2.0),
            lambda b: diffusion_loss(b, "v1", b.sigma, pf, c1, basis, w, p1).total,
        ),
        "diffusion_v2": (
            random_bundle("bi_implicit", 6),
            lambda b: diffusion_loss(b, "v2", 2.0, pf, c1, basis, w, p1).total,
        ),
        "data": (random_bundle("bi_implicit", 7, poisson=True), lambda b: sum(data_loss(b, "bi_implicit", 0.5, obs, w))),
        "poisson": (
            random_bundle("bi_implicit", 8, poisson=True),
            lambda b: poisson_residual_loss(b, "bi_implicit", 0.5, p2.poisson, c2),
        ),
    }


def gradient_check(bundle, loss_fn, n_coords=50, seed=0, h=1e-6):
    """Relative l2 mismatch between autodiff and central differences on random coordinates."""
    flat, unravel = ravel_pytree(bundle)
    f = lambda v: loss_fn(unravel(v))
    rng = np.random.default_rng(seed)
    idx = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    steps = h * np.maximum(1.0, np.abs(np.asarray(flat)[idx]))
    E = np.zeros((idx.size, flat.size))
    E[np.arange(idx.size), idx] = steps
    shifted = jnp.concatenate([flat + E, flat - E])
    ad, vals = jax.jit(lambda v, s: (jax.grad(f)(v), jax.vmap(f)(s)))(flat, shifted)
    vals = np.asarray(vals)
    fd = (vals[: idx.size] - vals[idx.size :]) / (2 * steps)
    ad = np.asarray(ad)[idx]
    return float(np.linalg.norm(fd - ad) / max(np.linalg.norm(ad), 1e-300))
