"""scikit-learn style wrappers around the training workflows.

``KineticForwardSolver`` trains on the physics alone and predicts the
density at ``(t, x)`` points.  ``SigmaEstimator`` fits density observations
and exposes the recovered scattering strength as ``sigma_``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import ExperimentConfig
from .losses import ObservationSet
from .nn import phi_from_bundle, rho_from_bundle
from .problems import get_problem
from .training import train_forward, train_inverse


class _KineticBase(BaseEstimator):
    def __init__(
        self,
        problem="problem1",
        method="bi_implicit",
        eps=1e-8,
        hidden_layers=4,
        neurons=128,
        epochs=20000,
        pretrain_epochs=20000,
        lr=1e-4,
        nt=20,
        nx=99,
        seed=0,
    ):
        self.problem = problem
        self.method = method
        self.eps = eps
        self.hidden_layers = hidden_layers
        self.neurons = neurons
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.lr = lr
        self.nt = nt
        self.nx = nx
        self.seed = seed

    def _config(self, **extra) -> ExperimentConfig:
        # ExperimentConfig validates every field and raises ConfigError (a ValueError)
        return ExperimentConfig(
            problem=self.problem, method=self.method, eps=float(self.eps), hidden_layers=int(self.hidden_layers),
            neurons=int(self.neurons), epochs=int(self.epochs), pretrain_epochs=int(self.pretrain_epochs),
            lr=float(self.lr), nt=int(self.nt), nx=int(self.nx), seed=int(self.seed), **extra,
        )

    def _points(self, X) -> np.ndarray:
        return check_array(X, dtype=np.float64, ensure_min_features=2)

    def predict(self, X) -> np.ndarray:
        """Density at the rows ``(t, x)`` of ``X``."""
        check_is_fitted(self, "bundle_")
        X = self._points(X)
        if X.shape[1] != 2:
            raise ValueError(f"X must have columns (t, x), got {X.shape[1]} columns")
        return np.asarray(rho_from_bundle(self.bundle_, self.method, self.eps, X).rho)

    def predict_potential(self, X) -> np.ndarray:
        check_is_fitted(self, "bundle_")
        if self.bundle_.phi is None:
            raise ValueError("this problem has a given potential; no potential network was trained")
        return np.asarray(phi_from_bundle(self.bundle_, self._points(X)).rho)


class KineticForwardSolver(RegressorMixin, _KineticBase):
    """Physics-only solver; ``fit`` ignores ``X`` and ``y`` apart from an optional reference for logging."""

    def fit(self, X=None, y=None, reference=None):
        cfg = self._config()
        if cfg.method not in ("pinn", "apnn", "bi_explicit", "bi_implicit"):
            raise ValueError(f"method must be a neural method, got {cfg.method!r}")
        problem = get_problem(cfg.problem)
        res = train_forward(cfg.train_config("forward"), problem, reference)
        self.bundle_ = res.bundle
        self.log_ = res.log
        self.rel_error_ = res.rel_error_rho
        return self


class SigmaEstimator(_KineticBase):
    """Inverse solver: ``fit(X, y)`` with ``X`` rows ``(t, x)`` and ``y`` observed densities."""

    def __init__(
        self,
        problem="problem1",
        method="bi_implicit",
        eps=1e-8,
        sigma0=1.0,
        hidden_layers=4,
        neurons=128,
        epochs=20000,
        pretrain_epochs=0,
        lr=1e-4,
        nt=20,
        nx=99,
        seed=0,
    ):
        super().__init__(problem, method, eps, hidden_layers, neurons, epochs, pretrain_epochs, lr, nt, nx, seed)
        self.sigma0 = sigma0

    def fit(self, X, y, phi_X=None, phi_y=None):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if X.shape[1] != 2:
            raise ValueError(f"X must have columns (t, x), got {X.shape[1]} columns")
        if not float(self.sigma0) > 0:
            raise ValueError(f"sigma0 must be positive, got {self.sigma0}")
        cfg = self._config()
        if cfg.method not in ("apnn", "bi_explicit", "bi_implicit"):
            raise ValueError(f"method must be apnn or bi-fidelity, got {cfg.method!r}")
        if phi_X is not None:
            phi_X, phi_y = check_X_y(phi_X, phi_y, dtype=np.float64, y_numeric=True)
        obs = ObservationSet(X, y, phi_X, phi_y, int(self.seed))
        res = train_inverse(cfg.train_config("inverse"), get_problem(cfg.problem), obs, float(self.sigma0))
        self.bundle_ = res.bundle
        self.log_ = res.log
        self.sigma_ = res.sigma_hat
        self.sigma_trajectory_ = res.sigma_trajectory
        return self
