"""Benchmark problem definitions (given potential and Boltzmann-Poisson diode)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

X_MIN, X_MAX = 0.0, 1.0
T_FINAL = 0.1
_A = 50.0 * np.e


def given_potential(x):
    """``phi(x) = exp(-50 e (1/4 - x)**2)``."""
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-_A * (0.25 - x) ** 2)


def given_potential_dx(x):
    x = np.asarray(x, dtype=np.float64)
    return 2.0 * _A * (0.25 - x) * given_potential(x)


def given_potential_dxx(x):
    x = np.asarray(x, dtype=np.float64)
    return (4.0 * _A**2 * (0.25 - x) ** 2 - 2.0 * _A) * given_potential(x)


def diode_doping(x, m: float = (1.0 - 0.001) / 2.0, rho_init: float = 1.0):
    """``c(x) = 1 - (1 - m) rho(0, t=0) [tanh((x-0.3)/0.02) - tanh((x-0.7)/0.02)]``."""
    x = np.asarray(x, dtype=np.float64)
    return 1.0 - (1.0 - m) * rho_init * (np.tanh((x - 0.3) / 0.02) - np.tanh((x - 0.7) / 0.02))


@dataclass(frozen=True)
class PoissonProblem:
    """``beta phi'' = rho - c`` on ``[x_min, x_max]`` with ``phi = 0`` left, ``phi = V`` right."""

    beta: float
    V: float
    doping: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")


@dataclass(frozen=True)
class ProblemSpec:
    """Data of one benchmark: domain, scattering, potential or Poisson coupling, inflow and initial data.

    ``inflow_left`` / ``inflow_right`` and ``initial`` return ``f/M`` on the
    velocity nodes; with Maxwellian data they are identically one.
    """

    name: str
    sigma: float = 2.0
    x_min: float = X_MIN
    x_max: float = X_MAX
    t_final: float = T_FINAL
    potential: Optional[Callable[[np.ndarray], np.ndarray]] = None
    potential_dx: Optional[Callable[[np.ndarray], np.ndarray]] = None
    potential_dxx: Optional[Callable[[np.ndarray], np.ndarray]] = None
    poisson: Optional[PoissonProblem] = None
    inflow_left: Callable[[np.ndarray], np.ndarray] = field(default=lambda v: np.ones_like(v))
    inflow_right: Callable[[np.ndarray], np.ndarray] = field(default=lambda v: np.ones_like(v))
    initial: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(
        default=lambda x, v: np.ones(np.broadcast(x, v).shape)
    )

    @property
    def is_poisson(self) -> bool:
        return self.poisson is not None

    def with_sigma(self, sigma: float) -> "ProblemSpec":
        from dataclasses import replace

        return replace(self, sigma=float(sigma))


def problem_one(sigma: float = 2.0) -> ProblemSpec:
    return ProblemSpec(
        name="problem1",
        sigma=sigma,
        potential=given_potential,
        potential_dx=given_potential_dx,
        potential_dxx=given_potential_dxx,
    )


def problem_two(sigma: float = 2.0, beta: float = 0.002, V: float = 5.0) -> ProblemSpec:
    return ProblemSpec(
        name="problem2",
        sigma=sigma,
        poisson=PoissonProblem(beta=beta, V=V, doping=diode_doping),
    )


def get_problem(name: str, sigma: float = 2.0) -> ProblemSpec:
    if name == "problem1":
        return problem_one(sigma)
    if name == "problem2":
        return problem_two(sigma)
    raise ValueError(f"unknown problem {name!r}")
