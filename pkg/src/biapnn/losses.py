"""Collocation grids and the physics-informed losses.

Velocity fields are handled as ``g/M`` on the Hermite nodes.  Residuals of
kinetic equations are reported at the level of ``g`` (or ``f``), i.e.
multiplied back by ``M(v_j)``, before squaring.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import jax.numpy as jnp
import numpy as np

from .nn import (
    ConfigurationError,
    GEval,
    NetworkBundle,
    RhoEval,
    g_from_bundle,
    phi_from_bundle,
    rho_from_bundle,
)
from .problems import PoissonProblem, ProblemSpec
from .velocity import HermiteBasis, kernel_matrix

LOSS_COLUMNS = ("macro", "micro", "bc", "ic", "diffusion", "data_rho", "data_phi", "poisson", "total")


@dataclass(frozen=True)
class CollocationSet:
    """Tensor-product collocation points.

    ``interior_tx`` is time-major: row ``k * nx + i`` holds ``(t_k, x_i)``.
    Boundary rows hold ``(t_k, x_min)`` and ``(t_k, x_max)``; the inflow
    half is ``v > 0`` on the left and ``v < 0`` on the right.
    """

    t: np.ndarray
    x: np.ndarray
    interior_tx: np.ndarray
    left_tx: np.ndarray
    right_tx: np.ndarray
    initial_tx: np.ndarray
    inflow_left: np.ndarray  # boolean mask over velocity nodes
    inflow_right: np.ndarray
    num_nodes: int

    @property
    def n_interior(self) -> int:
        return self.interior_tx.shape[0]

    @property
    def n_kinetic(self) -> int:
        return self.n_interior * self.num_nodes

    @property
    def n_boundary(self) -> int:
        return self.t.size * int(self.inflow_left.sum() + self.inflow_right.sum())

    @property
    def n_initial(self) -> int:
        return self.initial_tx.shape[0] * self.num_nodes


def build_collocation(problem: ProblemSpec, basis: HermiteBasis, nt: int = 20, nx: int = 99) -> CollocationSet:
    """``nt`` and ``nx`` evenly spaced interior points of the time and space intervals."""
    if nt < 1 or nx < 1:
        raise ValueError(f"need nt, nx >= 1, got {nt}, {nx}")
    t = np.linspace(0.0, problem.t_final, nt + 2)[1:-1]
    x = np.linspace(problem.x_min, problem.x_max, nx + 2)[1:-1]
    tt, xx = np.meshgrid(t, x, indexing="ij")
    interior = np.stack([tt.ravel(), xx.ravel()], axis=1)
    v = basis.nodes
    return CollocationSet(
        t=t,
        x=x,
        interior_tx=interior,
        left_tx=np.stack([t, np.full(nt, problem.x_min)], axis=1),
        right_tx=np.stack([t, np.full(nt, problem.x_max)], axis=1),
        initial_tx=np.stack([np.zeros(nx), x], axis=1),
        inflow_left=v > 0,
        inflow_right=v < 0,
        num_nodes=basis.num_nodes,
    )


@dataclass(frozen=True)
class PenaltyWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda1_diff: float = 1.0
    lambda2_diff: float = 1.0
    w_d_rho: float = 1.0
    w_d_phi: float = 1.0
    poisson: float = 1.0

    def __post_init__(self):
        for name, val in vars(self).items():
            if not val >= 0:
                raise ValueError(f"penalty weight {name} must be >= 0, got {val}")


class LossBreakdown(NamedTuple):
    macro: jnp.ndarray = 0.0
    micro: jnp.ndarray = 0.0
    bc: jnp.ndarray = 0.0
    ic: jnp.ndarray = 0.0
    diffusion: jnp.ndarray = 0.0
    data_rho: jnp.ndarray = 0.0
    data_phi: jnp.ndarray = 0.0
    poisson: jnp.ndarray = 0.0
    total: jnp.ndarray = 0.0

    @classmethod
    def of(cls, **terms) -> "LossBreakdown":
        total = sum(terms.values(), jnp.zeros(()))
        return cls(**terms, total=total)

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(*(a + b for a, b in zip(self, other)))

    def to_row(self, epoch: int) -> list:
        return [int(epoch)] + [float(v) for v in self]


@dataclass(frozen=True)
class ObservationSet:
    rho_tx: np.ndarray
    rho_values: np.ndarray
    phi_tx: Optional[np.ndarray] = None
    phi_values: Optional[np.ndarray] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.rho_tx.ndim != 2 or self.rho_tx.shape[1] != 2 or self.rho_tx.shape[0] != self.rho_values.size:
            raise ValueError("rho observations must be (N, 2) locations with N values")
        if (self.phi_tx is None) != (self.phi_values is None):
            raise ValueError("phi locations and values must be given together")


class GivenPotential(NamedTuple):
    """Closed-form potential gradient and curvature as functions of ``x``."""

    dx: Callable
    dxx: Optional[Callable] = None


def phi_field_for(problem: ProblemSpec) -> Optional[GivenPotential]:
    """Given potential for fixed-field problems, ``None`` (use the network) for Poisson coupling."""
    if problem.is_poisson:
        return None
    if problem.potential_dx is None:
        raise ConfigurationError(f"problem {problem.name!r} has neither a potential nor a Poisson coupling")
    return GivenPotential(problem.potential_dx, problem.potential_dxx)


def _phi_derivs(bundle: NetworkBundle, phi_field: Optional[GivenPotential], tx, second: bool = False):
    if phi_field is None:
        if bundle.phi is None:
            raise ConfigurationError("no potential: pass a given field or include a phi network")
        ev = phi_from_bundle(bundle, tx)
        return ev.rho_x, ev.rho_xx
    x = np.asarray(tx)[:, 1]
    px = jnp.asarray(phi_field.dx(x))
    if not second:
        return px, None
    if phi_field.dxx is None:
        raise ConfigurationError("given potential lacks a second derivative")
    return px, jnp.asarray(phi_field.dxx(x))


# ---------------------------------------------------------------------------
# velocity-space helpers (traceable)


def bracket(psi, basis: HermiteBasis):
    return psi @ jnp.asarray(basis.weights_maxwellian)


def collision(psi, sigma, basis: HermiteBasis):
    """``Q(g)/M`` at the nodes for ``psi = g/M``; ``sigma`` may be a traced scalar."""
    w = jnp.asarray(basis.weights_maxwellian)
    if callable(sigma):
        S = jnp.asarray(kernel_matrix(sigma, basis))
        lam = S @ w
        return psi @ (S * w[None, :]).T - lam * psi
    return sigma * ((psi @ w)[..., None] - psi)


def diffusion_T(sigma, basis: HermiteBasis):
    """``sum_j v_j^2 / lambda_j w^M_j``, traceable in ``sigma``."""
    v = jnp.asarray(basis.nodes)
    w = jnp.asarray(basis.weights_maxwellian)
    if callable(sigma):
        lam = jnp.asarray(kernel_matrix(sigma, basis)) @ w
    else:
        lam = sigma * jnp.sum(w) * jnp.ones_like(v)
    return jnp.sum(v**2 / lam * w)


# ---------------------------------------------------------------------------
# residuals


def micro_macro_residuals(rho: RhoEval, g: GEval, phi_x, eps, sigma, basis: HermiteBasis):
    """Macro residual per ``(t, x)`` and micro residual per ``(t, x, v_j)`` at the level of ``g``."""
    v = jnp.asarray(basis.nodes)
    M = jnp.asarray(basis.maxwellian_values)
    px = phi_x[:, None]
    macro = rho.rho_t + bracket(v * g.psi_x, basis) + phi_x * bracket(g.dv, basis)
    transport = v * g.psi_x + px * g.dv
    transport = transport - bracket(transport, basis)[:, None]
    micro = (
        eps**2 * g.psi_t
        + eps * transport
        - 2.0 * v * px * rho.rho[:, None]
        + v * rho.rho_x[:, None]
        - collision(g.psi, sigma, basis)
    )
    return macro, micro * M


def limit_residuals(rho: RhoEval, g: GEval, phi_x, sigma, basis: HermiteBasis):
    """Residuals of the small-Knudsen limit system (macro equation plus the algebraic micro relation)."""
    v = jnp.asarray(basis.nodes)
    M = jnp.asarray(basis.maxwellian_values)
    macro = rho.rho_t + bracket(v * g.psi_x, basis) + phi_x * bracket(g.dv, basis)
    micro = (v * rho.rho_x[:, None] - 2.0 * v * phi_x[:, None] * rho.rho[:, None] - collision(g.psi, sigma, basis)) * M
    return macro, micro


def pinn_residual(rho: RhoEval, g: GEval, phi_x, eps, sigma, basis: HermiteBasis):
    """``eps f_t + v f_x + phi_x f_v - Q(f)/eps`` for ``f = rho M + eps g`` at the nodes."""
    if not eps > 0:
        raise ValueError(f"the kinetic residual needs eps > 0, got {eps}")
    v = jnp.asarray(basis.nodes)
    M = jnp.asarray(basis.maxwellian_values)
    r = rho.rho[:, None]
    f = r + eps * g.psi
    f_t = rho.rho_t[:, None] + eps * g.psi_t
    f_x = rho.rho_x[:, None] + eps * g.psi_x
    f_v = -2.0 * v * r + eps * g.dv
    res = eps * f_t + v * f_x + phi_x[:, None] * f_v - collision(f, sigma, basis) / eps
    return res * M


def diffusion_residual(rho: RhoEval, phi_x, phi_xx, T, drift):
    """``rho_t - d/dx (T rho_x - drift rho phi_x)``."""
    return rho.rho_t - T * rho.rho_xx + drift * (rho.rho_x * phi_x + rho.rho * phi_xx)


# ---------------------------------------------------------------------------
# boundary and initial penalties


def _inflow_values(problem: Optional[ProblemSpec], basis: HermiteBasis):
    v = basis.nodes
    if problem is None:
        return np.ones_like(v), np.ones_like(v), lambda x: np.ones((x.size, v.size))
    return (
        problem.inflow_left(v),
        problem.inflow_right(v),
        lambda x: problem.initial(x[:, None], v[None, :]),
    )


def bc_ic_loss(rho_fn, g_fn, eps, colloc: CollocationSet, basis: HermiteBasis, weights: PenaltyWeights, problem=None, diffusion=False):
    """Boundary and initial penalties on ``f = M (rho + eps g/M)``.

    ``rho_fn(tx)`` returns densities, ``g_fn(tx)`` returns ``g/M`` on the
    nodes (or ``None`` to drop the micro part).  Inflow data are ``f/M``.
    """
    M = jnp.asarray(basis.maxwellian_values)
    w_gh = jnp.asarray(basis.weights_gh)
    FL, FR, F0 = _inflow_values(problem, basis)
    l1, l2 = (weights.lambda1_diff, weights.lambda2_diff) if diffusion else (weights.lambda1, weights.lambda2)

    def f_over_M(tx):
        r = rho_fn(tx)[:, None]
        if g_fn is None:
            return jnp.broadcast_to(r, (r.shape[0], basis.num_nodes))
        return r + eps * g_fn(tx)

    sq_left = ((f_over_M(colloc.left_tx) - FL) * M) ** 2 * w_gh
    sq_right = ((f_over_M(colloc.right_tx) - FR) * M) ** 2 * w_gh
    bc_sum = jnp.sum(sq_left[:, colloc.inflow_left]) + jnp.sum(sq_right[:, colloc.inflow_right])
    bc = l1 / colloc.n_boundary * bc_sum
    ic_res = (f_over_M(colloc.initial_tx) - F0(colloc.initial_tx[:, 1])) * M
    ic = l2 / colloc.n_initial * jnp.sum(ic_res**2)
    return bc, ic


def _rho_fn(bundle, method, eps):
    return lambda tx: rho_from_bundle(bundle, method, eps, tx).rho


def _g_fn(bundle, basis):
    return lambda tx: g_from_bundle(bundle, basis, tx).psi


# ---------------------------------------------------------------------------
# method losses


def _check_eps(eps, allow_zero=True):
    if not (eps >= 0 if allow_zero else eps > 0):
        raise ValueError(f"invalid eps={eps}")


def _micro_macro_loss(bundle, method, eps, sigma, phi_field, colloc, basis, weights, problem):
    _check_eps(eps)
    tx = colloc.interior_tx
    rho = rho_from_bundle(bundle, method, eps, tx)
    g = g_from_bundle(bundle, basis, tx)
    px, _ = _phi_derivs(bundle, phi_field, tx)
    macro, micro = micro_macro_residuals(rho, g, px, eps, sigma, basis)
    bc, ic = bc_ic_loss(_rho_fn(bundle, method, eps), _g_fn(bundle, basis), eps, colloc, basis, weights, problem)
    return LossBreakdown.of(macro=jnp.mean(macro**2), micro=jnp.mean(micro**2), bc=bc, ic=ic)


def apnn_loss(bundle, eps, sigma, phi_field, colloc, basis, weights=PenaltyWeights(), problem=None) -> LossBreakdown:
    return _micro_macro_loss(bundle, "apnn", eps, sigma, phi_field, colloc, basis, weights, problem)


def biapnn_loss(bundle, mode, eps, sigma, phi_field, colloc, basis, weights=PenaltyWeights(), problem=None) -> LossBreakdown:
    if mode not in ("explicit", "implicit"):
        raise ValueError(f"mode must be 'explicit' or 'implicit', got {mode!r}")
    return _micro_macro_loss(bundle, f"bi_{mode}", eps, sigma, phi_field, colloc, basis, weights, problem)


def pinn_loss(bundle, eps, sigma, phi_field, colloc, basis, weights=PenaltyWeights(), problem=None) -> LossBreakdown:
    _check_eps(eps, allow_zero=False)
    tx = colloc.interior_tx
    rho = rho_from_bundle(bundle, "pinn", eps, tx)
    g = g_from_bundle(bundle, basis, tx)
    px, _ = _phi_derivs(bundle, phi_field, tx)
    res = pinn_residual(rho, g, px, eps, sigma, basis)
    bc, ic = bc_ic_loss(_rho_fn(bundle, "pinn", eps), _g_fn(bundle, basis), eps, colloc, basis, weights, problem)
    return LossBreakdown.of(macro=jnp.mean(res**2), bc=bc, ic=ic)


def diffusion_loss(bundle, variant, sigma, phi_field, colloc, basis, weights=PenaltyWeights(), problem=None, drift=None) -> LossBreakdown:
    """Pre-training loss for ``rho_diff``.

    ``v1``: drift-diffusion residual, ``T`` from ``sigma``; ``drift`` defaults
    to ``2 T`` (pass ``2.0`` for the ``T``-independent drift).  ``v2``: the
    limit system with the ``g`` network.  Both add boundary and initial
    penalties on ``rho_diff M``.
    """
    bundle.require("rho_diff")
    tx = colloc.interior_tx
    if variant == "v1":
        if isinstance(sigma, (int, float)) and sigma <= 0:
            raise ValueError(f"collision frequency must be positive, got sigma={sigma}")
        T = diffusion_T(sigma, basis)
        d = 2.0 * T if drift is None else drift
        ev = rho_from_bundle(NetworkBundle(rho_apnn=bundle.rho_diff), "apnn", 0.0, tx, second=True)
        px, pxx = _phi_derivs(bundle, phi_field, tx, second=True)
        interior = jnp.mean(diffusion_residual(ev, px, pxx, T, d) ** 2)
    elif variant == "v2":
        bundle.require("g")
        ev = rho_from_bundle(NetworkBundle(rho_apnn=bundle.rho_diff), "apnn", 0.0, tx)
        g = g_from_bundle(bundle, basis, tx)
        px, _ = _phi_derivs(bundle, phi_field, tx)
        macro, micro = limit_residuals(ev, g, px, sigma, basis)
        interior = jnp.mean(macro**2) + jnp.mean(micro**2)
    else:
        raise ValueError(f"unknown diffusion variant {variant!r}")
    rho_diff = lambda p: rho_from_bundle(NetworkBundle(rho_apnn=bundle.rho_diff), "apnn", 0.0, p).rho
    bc, ic = bc_ic_loss(rho_diff, None, 0.0, colloc, basis, weights, problem, diffusion=True)
    return LossBreakdown.of(diffusion=interior + bc + ic)


def data_loss(bundle, method, eps, obs: ObservationSet, weights=PenaltyWeights(), use_phi=None):
    """Mean-square misfit of the density (and potential, when observed) against the observations."""
    if obs.rho_tx.shape[0] == 0:
        raise ValueError("no density observations")
    pred = rho_from_bundle(bundle, method, eps, obs.rho_tx).rho
    d_rho = weights.w_d_rho * jnp.mean((pred - jnp.asarray(obs.rho_values)) ** 2)
    d_phi = jnp.zeros(())
    if use_phi is None:
        use_phi = obs.phi_tx is not None
    if use_phi:
        if obs.phi_tx is None or obs.phi_tx.shape[0] == 0:
            raise ValueError("no potential observations")
        pp = phi_from_bundle(bundle, obs.phi_tx).rho
        d_phi = weights.w_d_phi * jnp.mean((pp - jnp.asarray(obs.phi_values)) ** 2)
    return d_rho, d_phi


def poisson_residual_loss(bundle, method, eps, prob: PoissonProblem, colloc: CollocationSet):
    """Mean ``|beta phi_xx - (rho - c)|^2`` in the interior plus the mean Dirichlet mismatch."""
    if prob is None or prob.doping is None:
        raise ConfigurationError("Poisson penalty needs a doping profile")
    tx = colloc.interior_tx
    ph = phi_from_bundle(bundle, tx)
    rho = rho_from_bundle(bundle, method, eps, tx).rho
    c = jnp.asarray(prob.doping(tx[:, 1]))
    interior = jnp.mean((prob.beta * ph.rho_xx - (rho - c)) ** 2)
    left = phi_from_bundle(bundle, colloc.left_tx).rho
    right = phi_from_bundle(bundle, colloc.right_tx).rho
    boundary = jnp.mean(left**2 + (right - prob.V) ** 2)
    return interior + boundary


def method_loss(bundle, method, eps, sigma, phi_field, colloc, basis, weights=PenaltyWeights(), problem=None) -> LossBreakdown:
    if method == "pinn":
        return pinn_loss(bundle, eps, sigma, phi_field, colloc, basis, weights, problem)
    if method == "apnn":
        return apnn_loss(bundle, eps, sigma, phi_field, colloc, basis, weights, problem)
    if method in ("bi_explicit", "bi_implicit"):
        return biapnn_loss(bundle, method[3:], eps, sigma, phi_field, colloc, basis, weights, problem)
    raise ValueError(f"unknown method {method!r}")


def forward_loss(bundle, method, eps, sigma, problem: ProblemSpec, colloc, basis, weights=PenaltyWeights()) -> LossBreakdown:
    """Method loss plus, for Poisson coupling, the Poisson penalty on the potential network."""
    phi_field = phi_field_for(problem)
    out = method_loss(bundle, method, eps, sigma, phi_field, colloc, basis, weights, problem)
    if problem.is_poisson:
        pois = weights.poisson * poisson_residual_loss(bundle, method, eps, problem.poisson, colloc)
        out = out._replace(poisson=pois, total=out.total + pois)
    return out


def total_inverse_loss(
    bundle,
    mode,
    eps,
    problem: ProblemSpec,
    colloc,
    basis,
    obs: ObservationSet,
    weights=PenaltyWeights(),
    use_poisson=True,
    use_phi_data=True,
    drift=None,
) -> LossBreakdown:
    """Bi-fidelity loss + diffusion v1 + data misfit with ``sigma = softplus(sigma_raw)`` from the bundle."""
    sigma = bundle.sigma
    method = f"bi_{mode}"
    phi_field = phi_field_for(problem)
    main = biapnn_loss(bundle, mode, eps, sigma, phi_field, colloc, basis, weights, problem)
    diff = diffusion_loss(bundle, "v1", sigma, phi_field, colloc, basis, weights, problem, drift=drift)
    d_rho, d_phi = data_loss(bundle, method, eps, obs, weights, use_phi=problem.is_poisson and use_phi_data and obs.phi_tx is not None)
    pois = jnp.zeros(())
    if problem.is_poisson and use_poisson:
        pois = weights.poisson * poisson_residual_loss(bundle, method, eps, problem.poisson, colloc)
    return LossBreakdown.of(
        macro=main.macro, micro=main.micro, bc=main.bc, ic=main.ic,
        diffusion=diff.diffusion, data_rho=d_rho, data_phi=d_phi, poisson=pois,
    )
