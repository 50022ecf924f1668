"""Hermite velocity discretization.

Velocity-space fields are stored as ratios ``psi = f / M`` sampled at the
Gauss-Hermite nodes, with ``M(v) = exp(-v**2) / sqrt(pi)``.  Two weight
vectors are kept: the raw Gauss-Hermite weights (for the spectral transform
and the derivative matrix) and the Maxwellian-absorbed weights
``w_M = w_GH / sqrt(pi)`` (for moments, projections and collisions).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from scipy.linalg import eigh_tridiagonal

SQRT_PI = np.sqrt(np.pi)

Kernel = Union[float, Callable[[np.ndarray, np.ndarray], np.ndarray]]


def gauss_hermite_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Return the ``n``-point Gauss-Hermite rule for the weight ``exp(-v**2)``.

    Nodes come from the eigenvalues of the symmetric Jacobi matrix
    (Golub-Welsch) and are symmetrized so that ``nodes == -nodes[::-1]``
    holds bit-for-bit.
    """
    n = int(n)
    if n < 1:
        raise ValueError(f"number of quadrature points must be >= 1, got {n}")
    if n == 1:
        return np.zeros(1), np.array([SQRT_PI])
    off = np.sqrt(np.arange(1, n) / 2.0)
    nodes, vecs = eigh_tridiagonal(np.zeros(n), off)
    weights = SQRT_PI * vecs[0, :] ** 2
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    if n % 2 == 1:
        nodes[n // 2] = 0.0
    return nodes, weights


def hermite_renormalized(k: int, v) -> np.ndarray:
    """Evaluate the orthonormal Hermite function polynomial ``H~_k`` at ``v``.

    ``H~_{-1} = 0``, ``H~_0 = pi**-0.25`` and
    ``H~_{j+1} = v sqrt(2/(j+1)) H~_j - sqrt(j/(j+1)) H~_{j-1}``.
    """
    if k < -1:
        raise ValueError(f"Hermite index must be >= -1, got {k}")
    v = np.asarray(v, dtype=np.float64)
    return hermite_table(k, v)[k + 1]


def hermite_table(k_max: int, v) -> np.ndarray:
    """Rows ``H~_{-1} .. H~_{k_max}`` evaluated at ``v`` (shape ``(k_max+2, *v.shape)``)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros((k_max + 2,) + v.shape)
    if k_max >= 0:
        out[1] = np.pi ** -0.25
    for j in range(0, k_max):
        out[j + 2] = v * np.sqrt(2.0 / (j + 1)) * out[j + 1] - np.sqrt(j / (j + 1)) * out[j]
    return out


def maxwellian(v):
    return np.exp(-np.asarray(v, dtype=np.float64) ** 2) / SQRT_PI


@dataclass(frozen=True)
class HermiteBasis:
    order_N: int
    num_nodes: int
    nodes: np.ndarray
    weights_gh: np.ndarray
    weights_maxwellian: np.ndarray
    basis_values: np.ndarray
    deriv_matrix_C: np.ndarray

    @property
    def deriv_operator(self) -> np.ndarray:
        """Matrix ``D`` with ``(D @ psi)_i = d psi / dv (v_i)``; the transpose of ``C``."""
        return self.deriv_matrix_C.T

    @property
    def maxwellian_values(self) -> np.ndarray:
        return maxwellian(self.nodes)


def build_basis(N: int | None = None, Nv: int = 8) -> HermiteBasis:
    """Assemble nodes, weights, renormalized Hermite values and ``C``.

    ``C[j, i] = sum_k sqrt(2k) H~_k(v_j) H~_{k-1}(v_i) w_j``.  ``N`` defaults
    to ``Nv - 1``, the largest order that does not alias on ``Nv`` nodes.
    """
    if N is None:
        N = Nv - 1
    if N < 0 or Nv < 1:
        raise ValueError(f"need N >= 0 and Nv >= 1, got N={N}, Nv={Nv}")
    if N > Nv - 1:
        raise ValueError(f"order N={N} aliases on {Nv} nodes (need N <= Nv-1)")
    nodes, w_gh = gauss_hermite_rule(Nv)
    table = hermite_table(N, nodes)  # rows H~_{-1}..H~_N
    H = table[1:]  # H~_0..H~_N
    Hm1 = table[:-1]  # H~_{-1}..H~_{N-1}
    scale = np.sqrt(2.0 * np.arange(N + 1))
    C = np.einsum("k,kj,ki->ji", scale, H, Hm1) * w_gh[:, None]
    return HermiteBasis(
        order_N=N,
        num_nodes=Nv,
        nodes=nodes,
        weights_gh=w_gh,
        weights_maxwellian=w_gh / SQRT_PI,
        basis_values=H,
        deriv_matrix_C=C,
    )


def _check_len(x: np.ndarray, basis: HermiteBasis) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != basis.num_nodes:
        raise ValueError(f"expected trailing length {basis.num_nodes}, got shape {x.shape}")
    return x


def bracket_moment(f_over_M, basis: HermiteBasis):
    """``<f> = sum_j (f/M)(v_j) w^M_j``; reduces the trailing axis."""
    x = _check_len(f_over_M, basis)
    return x @ basis.weights_maxwellian


def project_pi(f_over_M, basis: HermiteBasis) -> np.ndarray:
    """``(Pi f)/M`` at nodes: the moment broadcast over the velocity axis."""
    x = _check_len(f_over_M, basis)
    return np.broadcast_to(bracket_moment(x, basis)[..., None], x.shape).copy()


def kernel_matrix(sigma: Kernel, basis: HermiteBasis) -> np.ndarray:
    """``sigma(v_i, v_j)`` on the node grid; a scalar means a constant kernel."""
    v = basis.nodes
    if callable(sigma):
        S = np.asarray(sigma(v[:, None], v[None, :]), dtype=np.float64)
        S = np.broadcast_to(S, (v.size, v.size)).copy()
    else:
        S = np.full((v.size, v.size), float(sigma))
    if np.any(S < 0):
        raise ValueError("scattering kernel must be non-negative")
    return S


def collision_frequency(sigma: Kernel, basis: HermiteBasis) -> np.ndarray:
    return kernel_matrix(sigma, basis) @ basis.weights_maxwellian


def collision_Q(psi, sigma: Kernel, basis: HermiteBasis) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(Q(g)/M, lambda)`` at the nodes for ``psi = g/M``.

    ``(Q(g)/M)_i = sum_j sigma_ij psi_j w^M_j - lambda_i psi_i``.
    """
    psi = _check_len(psi, basis)
    S = kernel_matrix(sigma, basis)
    lam = S @ basis.weights_maxwellian
    gain = psi @ (S * basis.weights_maxwellian[None, :]).T
    return gain - lam * psi, lam


def diffusion_coefficient_T(sigma: Kernel, basis: HermiteBasis) -> float:
    """``T = sum_j v_j**2 / lambda(v_j) w^M_j``."""
    lam = collision_frequency(sigma, basis)
    if np.any(lam <= 0):
        raise ValueError("collision frequency must be positive at every node")
    v = basis.nodes
    return float(np.sum(v**2 / lam * basis.weights_maxwellian))
