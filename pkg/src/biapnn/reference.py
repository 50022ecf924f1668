"""Classical reference solvers.

* a staggered micro-macro asymptotic-preserving scheme (density on grid
  nodes, micro part ``g/M`` on cell interfaces),
* an implicit flux-form drift-diffusion solver,
* a second-order Poisson solver for the Boltzmann-Poisson coupling.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from .problems import PoissonProblem, ProblemSpec
from .velocity import HermiteBasis, Kernel, build_basis, kernel_matrix

logger = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class SpatialGrid:
    x_min: float = 0.0
    x_max: float = 1.0
    nx: int = 101

    def __post_init__(self):
        if self.nx < 2 or not self.x_max > self.x_min:
            raise ValueError(f"invalid grid: [{self.x_min}, {self.x_max}] with nx={self.nx}")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    @property
    def interfaces(self) -> np.ndarray:
        x = self.nodes
        return 0.5 * (x[1:] + x[:-1])

    @classmethod
    def from_spacing(cls, dx: float, x_min: float = 0.0, x_max: float = 1.0) -> "SpatialGrid":
        return cls(x_min, x_max, int(round((x_max - x_min) / dx)) + 1)


@dataclass
class KineticField:
    """Density on the ``nx`` grid nodes and ``g/M`` on the ``nx-1`` interfaces."""

    rho: np.ndarray
    g_over_M: np.ndarray
    time: float = 0.0


def _tridiag_solve(lower, diag, upper, rhs):
    """Solve with sub-diagonal ``lower`` (n-1), ``diag`` (n), super-diagonal ``upper`` (n-1)."""
    n = diag.size
    if not (np.all(np.isfinite(diag)) and np.all(np.isfinite(rhs))):
        raise NumericalFailure("non-finite entries in tridiagonal system")
    ab = np.zeros((3, n))
    ab[0, 1:] = upper
    ab[1] = diag
    ab[2, :-1] = lower
    try:
        out = solve_banded((1, 1), ab, rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalFailure(f"singular tridiagonal system: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise NumericalFailure("tridiagonal solve produced non-finite values")
    return out


def solve_poisson(rho, prob: PoissonProblem, grid: SpatialGrid) -> np.ndarray:
    """Central-difference solve of ``beta phi'' = rho - c`` with Dirichlet data ``0`` and ``V``."""
    if grid.nx < 3:
        raise ValueError("Poisson solve needs at least 3 grid points")
    rho = np.asarray(rho, dtype=np.float64)
    x = grid.nodes
    if rho.shape != x.shape:
        raise ValueError(f"rho has shape {rho.shape}, grid has {x.shape}")
    dx2 = grid.dx**2
    n = grid.nx
    diag = np.full(n, -2.0 * prob.beta / dx2)
    lower = np.full(n - 1, prob.beta / dx2)
    upper = np.full(n - 1, prob.beta / dx2)
    rhs = rho - prob.doping(x)
    diag[0] = diag[-1] = 1.0
    upper[0] = 0.0
    lower[-1] = 0.0
    rhs = rhs.copy()
    rhs[0] = 0.0
    rhs[-1] = prob.V
    return _tridiag_solve(lower, diag, upper, rhs)


def poisson_residual(phi, rho, prob: PoissonProblem, grid: SpatialGrid) -> float:
    """Max-norm residual of the discrete Poisson system, boundary rows included."""
    x = grid.nodes
    lap = (phi[2:] - 2 * phi[1:-1] + phi[:-2]) / grid.dx**2
    r = prob.beta * lap - (rho[1:-1] - prob.doping(x[1:-1]))
    return float(max(np.max(np.abs(r)), abs(phi[0]), abs(phi[-1] - prob.V)))


def potential_gradients(phi: np.ndarray, grid: SpatialGrid) -> tuple[np.ndarray, np.ndarray]:
    """``phi_x`` at interfaces (two-point) and at nodes (central, one-sided at the ends)."""
    return np.diff(phi) / grid.dx, np.gradient(phi, grid.dx)


@dataclass
class DriftDiffusionResult:
    times: np.ndarray
    rho: np.ndarray
    phi: Optional[np.ndarray] = None


def drift_diffusion_flux(rho, phi_x_faces, T: float, drift: float, dx: float) -> np.ndarray:
    """Interface flux ``T rho_x - drift * rho_avg * phi_x``."""
    return T * np.diff(rho) / dx - drift * 0.5 * (rho[1:] + rho[:-1]) * phi_x_faces


def solve_drift_diffusion(
    T: float,
    phi_x: Optional[Callable[[float, np.ndarray], np.ndarray]],
    grid: SpatialGrid,
    dt: float,
    t_final: float,
    rho0,
    bc=(1.0, 1.0),
    drift: Optional[float] = None,
    poisson: Optional[PoissonProblem] = None,
) -> DriftDiffusionResult:
    """Implicit Euler for ``rho_t = d/dx (T rho_x - drift rho phi_x)`` with Dirichlet ends.

    ``drift`` defaults to ``2 T``, the value produced by the small-Knudsen
    limit of the kinetic model (equilibria ``rho ~ exp(2 phi)``); pass
    ``drift=2.0`` for the variant with a ``T``-independent drift.  The
    potential gradient comes either from ``phi_x(t, x_faces)`` or, with
    ``poisson``, from a Poisson solve on the previous density.
    """
    if not dt > 0 or not T > 0:
        raise ValueError(f"need dt > 0 and T > 0, got dt={dt}, T={T}")
    if drift is None:
        drift = 2.0 * T
    rho = np.array(rho0, dtype=np.float64)
    faces = grid.interfaces
    dx = grid.dx
    n_steps = int(round(t_final / dt))
    times = [0.0]
    traj = [rho.copy()]
    phis = []
    n = grid.nx
    for step in range(1, n_steps + 1):
        t = step * dt
        if poisson is not None:
            phi = solve_poisson(rho, poisson, grid)
            phis.append(phi)
            px = np.diff(phi) / dx
        elif phi_x is not None:
            px = np.asarray(phi_x(t, faces), dtype=np.float64)
        else:
            px = np.zeros(n - 1)
        # flux F_{i+1/2} = a_i rho_i + b_i rho_{i+1}
        a = -T / dx - 0.5 * drift * px
        b = T / dx - 0.5 * drift * px
        r = dt / dx
        diag = np.ones(n)
        lower = np.zeros(n - 1)
        upper = np.zeros(n - 1)
        diag[1:-1] = 1.0 - r * (a[1:] - b[:-1])
        lower[:-1] = r * a[:-1]
        upper[1:] = -r * b[1:]
        rhs = rho.copy()
        rhs[0], rhs[-1] = bc
        rho = _tridiag_solve(lower, diag, upper, rhs)
        times.append(t)
        traj.append(rho.copy())
    phi_traj = None
    if poisson is not None:
        phis.append(solve_poisson(rho, poisson, grid))
        phi_traj = np.array(phis)
    return DriftDiffusionResult(np.array(times), np.array(traj), phi_traj)


@dataclass
class _SchemeOperators:
    """Per-face matrices of the implicit micro solve."""

    B: np.ndarray  # (nf, nv, nv) inverse of the micro operator on the mean-zero subspace
    Bv: np.ndarray  # (nf, nv)
    a: np.ndarray  # (nf,) <v B v>
    e: np.ndarray  # (nf,) <(d_v - 2v) B v>
    c: np.ndarray  # (nv,) row functional for <d_v g / M>


def _operators(basis: HermiteBasis, sigma: Kernel, eps: float, dt: float, phi_x_faces: np.ndarray) -> _SchemeOperators:
    S = kernel_matrix(sigma, basis)
    w = basis.weights_maxwellian
    v = basis.nodes
    nv = v.size
    lam = S @ w
    if np.any(lam <= 0):
        raise ValueError("collision frequency must be positive at every node")
    proj = np.eye(nv) - np.ones((nv, 1)) * w[None, :]
    Dv = proj @ (basis.deriv_operator - 2.0 * np.diag(v)) @ proj
    base = np.diag(eps**2 / dt + lam) - S * w[None, :]
    # rank-one shift pins the mean; exact on mean-zero solutions and keeps the operator invertible as eps -> 0
    base = base + np.ones((nv, 1)) * w[None, :]
    M = base[None, :, :] + eps * phi_x_faces[:, None, None] * Dv[None, :, :]
    try:
        B = np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"micro operator is singular (eps={eps}): {exc}") from exc
    Bv = B @ v
    c = basis.deriv_operator.T @ w - 2.0 * w * v
    return _SchemeOperators(B=B, Bv=Bv, a=Bv @ (w * v), e=Bv @ c, c=c)


def _stable_substep(basis: HermiteBasis, lam_min: float, eps: float, dt: float, dx: float) -> int:
    # explicit upwind transport against implicit relaxation; boundary cells have width dx/2
    v_max = float(np.max(np.abs(basis.nodes)))
    excess = 2.0 * eps * v_max / (0.5 * dx) - lam_min
    if excess <= 0:
        return 1
    dt_max = 0.9 * 2.0 * eps**2 / excess
    return max(1, int(np.ceil(dt / dt_max)))


def step_micro_macro_ap(
    state: KineticField,
    eps: float,
    sigma: Kernel,
    phi_x_faces: np.ndarray,
    phi_x_nodes: np.ndarray,
    grid: SpatialGrid,
    basis: HermiteBasis,
    dt: float,
    inflow_left: Optional[np.ndarray] = None,
    inflow_right: Optional[np.ndarray] = None,
    substeps: Optional[int] = None,
) -> KineticField:
    """Advance the micro-macro system by ``dt``.

    Micro: ``(eps^2/dt + lambda - K + eps phi_x (I-Pi) d_v) g_new = eps^2/dt g
    - eps (I-Pi) v g_x - v (rho_x - 2 rho phi_x) M`` with upwinded explicit
    spatial transport and the new density in the source; substituting
    ``g_new`` into the macro equation gives one tridiagonal solve for
    ``rho_new``.  The interval is split into substeps when the explicit
    transport would be unstable; the split depends only on ``eps`` and the
    mesh and disappears for small ``eps``.

    ``inflow_left``/``inflow_right`` are ``f/M`` on the nodes (Maxwellian
    inflow when omitted).  Boundary densities follow from matching
    ``rho M + eps g`` to the inflow data on the incoming half.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    v = basis.nodes
    w = basis.weights_maxwellian
    nv = v.size
    if inflow_left is None:
        inflow_left = np.ones(nv)
    if inflow_right is None:
        inflow_right = np.ones(nv)
    phi_x_faces = np.asarray(phi_x_faces, dtype=np.float64)
    phi_x_nodes = np.asarray(phi_x_nodes, dtype=np.float64)
    lam_min = float(np.min(kernel_matrix(sigma, basis) @ w))
    if lam_min <= 0:
        raise ValueError("collision frequency must be positive at every node")
    if substeps is None:
        substeps = _stable_substep(basis, lam_min, eps, dt, grid.dx)
    h = dt / substeps
    ops = _operators(basis, sigma, eps, h, phi_x_faces)
    rho = np.array(state.rho, dtype=np.float64)
    psi = np.array(state.g_over_M, dtype=np.float64)
    for _ in range(substeps):
        rho, psi = _substep(rho, psi, eps, h, grid, basis, ops, phi_x_faces, phi_x_nodes, inflow_left, inflow_right)
    return KineticField(rho=rho, g_over_M=psi, time=state.time + dt)


def _substep(rho, psi, eps, dt, grid, basis, ops, px_f, px_n, inflow_left, inflow_right):
    v = basis.nodes
    w = basis.weights_maxwellian
    dx = grid.dx
    n = rho.size
    pos = v > 0
    neg = v < 0

    # boundary values of psi: inflow from data, outflow extrapolated from the first interface
    psi_L = psi[0].copy()
    psi_R = psi[-1].copy()
    psi_L[pos] = (inflow_left[pos] - rho[0]) / eps
    psi_R[neg] = (inflow_right[neg] - rho[-1]) / eps
    ext = np.vstack([psi_L, psi, psi_R])  # positions x_0, faces..., x_{n-1}
    spacing = np.full(n, dx)
    spacing[0] = spacing[-1] = 0.5 * dx
    back = (ext[1:-1] - ext[:-2]) / spacing[:-1, None]
    fwd = (ext[2:] - ext[1:-1]) / spacing[1:, None]
    A = v * np.where(pos, back, fwd)
    A = A - (A @ w)[:, None]
    hvec = (eps**2 / dt) * psi - eps * A
    hvec = hvec - (hvec @ w)[:, None]
    Bh = np.einsum("kij,kj->ki", ops.B, hvec)
    Fh = Bh @ (w * v)
    Gh = Bh @ ops.c

    # s_{k+1/2} = al_k rho_k + be_k rho_{k+1}
    al = -1.0 / dx - px_f
    be = 1.0 / dx - px_f
    i = np.arange(1, n - 1)
    P = dt / dx * ops.a[i] + 0.5 * dt * px_n[i] * ops.e[i]
    R = dt / dx * ops.a[i - 1] - 0.5 * dt * px_n[i] * ops.e[i - 1]
    diag = np.ones(n)
    lower = np.zeros(n - 1)
    upper = np.zeros(n - 1)
    lower[i - 1] = R * al[i - 1]
    diag[i] = 1.0 - P * al[i] + R * be[i - 1]
    upper[i] = -P * be[i]
    rhs = rho.copy()
    rhs[i] = rho[i] - dt / dx * (Fh[i] - Fh[i - 1]) - 0.5 * dt * px_n[i] * (Gh[i] + Gh[i - 1])
    rhs[0] = np.sum(w[pos] * (inflow_left[pos] - eps * psi[0, pos])) / np.sum(w[pos])
    rhs[-1] = np.sum(w[neg] * (inflow_right[neg] - eps * psi[-1, neg])) / np.sum(w[neg])
    rho_new = _tridiag_solve(lower, diag, upper, rhs)

    s = al * rho_new[:-1] + be * rho_new[1:]
    psi_new = Bh - s[:, None] * ops.Bv
    psi_new = psi_new - (psi_new @ w)[:, None]
    return rho_new, psi_new


@dataclass
class ReferenceSolution:
    problem: str
    eps: float
    times: np.ndarray
    x: np.ndarray
    x_faces: np.ndarray
    v: np.ndarray
    rho: np.ndarray  # (nt, nx)
    g_over_M: np.ndarray  # (nt, nx-1, nv)
    phi: np.ndarray  # (nt, nx)
    meta: dict = field(default_factory=dict)

    @property
    def rho_final(self) -> np.ndarray:
        return self.rho[-1]

    @property
    def phi_final(self) -> np.ndarray:
        return self.phi[-1]

    def rho_at(self, t, x) -> np.ndarray:
        """Bilinear interpolation of the density trajectory."""
        from scipy.interpolate import RegularGridInterpolator

        f = RegularGridInterpolator((self.times, self.x), self.rho)
        return f(np.column_stack([np.ravel(t), np.ravel(x)]))

    def phi_at(self, t, x) -> np.ndarray:
        from scipy.interpolate import RegularGridInterpolator

        f = RegularGridInterpolator((self.times, self.x), self.phi)
        return f(np.column_stack([np.ravel(t), np.ravel(x)]))


def run_reference(
    problem: ProblemSpec,
    eps: float,
    grid: Optional[SpatialGrid] = None,
    dt: float = 0.005,
    t_final: Optional[float] = None,
    basis: Optional[HermiteBasis] = None,
) -> ReferenceSolution:
    """March the micro-macro scheme from Maxwellian initial data.

    For a Poisson-coupled problem the potential is recomputed from the
    current density before every step (lagged coupling).
    """
    grid = grid or SpatialGrid(problem.x_min, problem.x_max, 101)
    basis = basis or build_basis(Nv=8)
    t_final = problem.t_final if t_final is None else t_final
    v = basis.nodes
    x = grid.nodes
    f0 = problem.initial(x[:, None], v[None, :])
    rho = f0 @ basis.weights_maxwellian
    psi0 = (0.5 * (f0[1:] + f0[:-1]) - 0.5 * (rho[1:] + rho[:-1])[:, None]) / eps
    state = KineticField(rho=rho, g_over_M=psi0, time=0.0)
    F_L = problem.inflow_left(v)
    F_R = problem.inflow_right(v)
    n_steps = int(round(t_final / dt))

    def potential(rho_now):
        if problem.is_poisson:
            phi = solve_poisson(rho_now, problem.poisson, grid)
            return phi, *potential_gradients(phi, grid)
        return problem.potential(x), problem.potential_dx(grid.interfaces), problem.potential_dx(x)

    times = [0.0]
    rhos = [state.rho.copy()]
    gs = [state.g_over_M.copy()]
    phi, pxf, pxn = potential(state.rho)
    phis = [phi]
    for step in range(n_steps):
        state = step_micro_macro_ap(state, eps, problem.sigma, pxf, pxn, grid, basis, dt, F_L, F_R)
        if not np.all(np.isfinite(state.rho)):
            raise NumericalFailure(f"non-finite density at step {step + 1} (eps={eps})")
        phi, pxf, pxn = potential(state.rho)
        times.append((step + 1) * dt)
        rhos.append(state.rho.copy())
        gs.append(state.g_over_M.copy())
        phis.append(phi)
    return ReferenceSolution(
        problem=problem.name,
        eps=eps,
        times=np.array(times),
        x=x,
        x_faces=grid.interfaces,
        v=v,
        rho=np.array(rhos),
        g_over_M=np.array(gs),
        phi=np.array(phis),
        meta={"dx": grid.dx, "dt": dt, "sigma": problem.sigma, "Nv": basis.num_nodes},
    )


def write_trajectory_csv(sol: ReferenceSolution, rho_path, g_path=None, include_phi: Optional[bool] = None):
    """Emit ``t,x,rho[,phi]`` and optionally ``t,x,v,g`` (g, not g/M) at 17 significant digits."""
    if include_phi is None:
        include_phi = sol.problem == "problem2"
    fmt = "{:.17g}".format
    with open(rho_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "x", "rho"] + (["phi"] if include_phi else []))
        for k, t in enumerate(sol.times):
            for i, xi in enumerate(sol.x):
                row = [fmt(t), fmt(xi), fmt(sol.rho[k, i])]
                if include_phi:
                    row.append(fmt(sol.phi[k, i]))
                wr.writerow(row)
    if g_path is not None:
        M = np.exp(-sol.v**2) / np.sqrt(np.pi)
        with open(g_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "x", "v", "g"])
            for k, t in enumerate(sol.times):
                for i, xi in enumerate(sol.x_faces):
                    for j, vj in enumerate(sol.v):
                        wr.writerow([fmt(t), fmt(xi), fmt(vj), fmt(sol.g_over_M[k, i, j] * M[j])])
    return [Path(rho_path)] + ([Path(g_path)] if g_path is not None else [])
