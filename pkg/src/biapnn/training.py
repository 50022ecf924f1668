"""Adam, learning-rate schedules and the forward / inverse training workflows."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .losses import (
    LOSS_COLUMNS,
    CollocationSet,
    LossBreakdown,
    ObservationSet,
    PenaltyWeights,
    apnn_loss,
    build_collocation,
    data_loss,
    diffusion_loss,
    forward_loss,
    phi_field_for,
    poisson_residual_loss,
    total_inverse_loss,
)
from .nn import METHODS, NetworkBundle, build_bundle, phi_from_bundle, rho_from_bundle
from .problems import ProblemSpec
from .reference import ReferenceSolution
from .velocity import build_basis

logger = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1e6


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, breakdown: LossBreakdown, reason: str):
        terms = ", ".join(f"{k}={float(v):.3e}" for k, v in zip(LOSS_COLUMNS, breakdown))
        super().__init__(f"training diverged at epoch {epoch} ({reason}): {terms}")
        self.epoch = epoch
        self.breakdown = breakdown


# ---------------------------------------------------------------------------
# Adam


@jax.tree_util.register_pytree_node_class
@dataclass(frozen=True)
class AdamState:
    m: object
    v: object
    t: jnp.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def tree_flatten(self):
        return (self.m, self.v, self.t), (self.beta1, self.beta2, self.eps_adam)

    @classmethod
    def tree_unflatten(cls, aux, children):
        return cls(*children, *aux)


def adam_init(params, beta1: float = 0.9, beta2: float = 0.999, eps_adam: float = 1e-8) -> AdamState:
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return AdamState(zeros, zeros, jnp.zeros((), dtype=jnp.int64), beta1, beta2, eps_adam)


def adam_step(state: AdamState, params, grad, lr):
    """One bias-corrected Adam update; returns ``(state', params')``."""
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    m = jax.tree_util.tree_map(lambda m, g: b1 * m + (1 - b1) * g, state.m, grad)
    v = jax.tree_util.tree_map(lambda v, g: b2 * v + (1 - b2) * g * g, state.v, grad)
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    new = jax.tree_util.tree_map(
        lambda p, m, v: p - lr * (m / c1) / (jnp.sqrt(v / c2) + state.eps_adam), params, m, v
    )
    return replace(state, m=m, v=v, t=t), new


# ---------------------------------------------------------------------------
# schedules and metrics


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "constant"
    base_lr: float = 1e-4
    decay_factor: float = 0.8
    decay_interval: int = 1000
    floor: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("constant", "step_decay"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if not self.base_lr > 0 or self.decay_interval < 1 or not 0 < self.decay_factor <= 1:
            raise ValueError(f"invalid schedule {self}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if schedule.kind == "constant":
        return schedule.base_lr
    return max(schedule.floor, schedule.base_lr * schedule.decay_factor ** (epoch // schedule.decay_interval))


def relative_l2_error(pred, ref) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if pred.shape != ref.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {ref.size}")
    den = np.sum(ref**2)
    if den == 0:
        raise ValueError("reference has zero norm")
    return float(np.sqrt(np.sum((pred - ref) ** 2) / den))


# ---------------------------------------------------------------------------
# logging

LOG_COLUMNS = ("epoch",) + LOSS_COLUMNS + ("lr", "sigma", "rel_error", "wall_time")


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def append(self, epoch, breakdown: LossBreakdown, lr, sigma=None, rel_error=None, wall_time=0.0, stage=""):
        self.rows.append(
            {
                "epoch": int(epoch),
                **{k: float(v) for k, v in zip(LOSS_COLUMNS, breakdown)},
                "lr": float(lr),
                "sigma": None if sigma is None else float(sigma),
                "rel_error": None if rel_error is None else float(rel_error),
                "wall_time": float(wall_time),
                "stage": stage,
            }
        )

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=np.float64)

    def last(self, name: str):
        for r in reversed(self.rows):
            if r[name] is not None:
                return r[name]
        return None

    def write_csv(self, path, stage: Optional[str] = None, timing: bool = False) -> Path:
        """One row per epoch; ``wall_time`` only with ``timing`` (it breaks byte-for-byte reproducibility)."""
        path = Path(path)
        cols = LOG_COLUMNS if timing else LOG_COLUMNS[:-1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                if stage is not None and r["stage"] != stage:
                    continue
                w.writerow(["" if r[c] is None else (r[c] if c == "epoch" else repr(r[c])) for c in cols])
        return path


# ---------------------------------------------------------------------------
# generic loop


def _global_norm(tree):
    leaves = jax.tree_util.tree_leaves(tree)
    return jnp.sqrt(sum(jnp.sum(x * x) for x in leaves)) if leaves else jnp.zeros(())


def make_step(loss_fn: Callable[[NetworkBundle], LossBreakdown]):
    """Jitted ``(trainable, fixed, opt, lr) -> (trainable', opt', breakdown, grad_norm)``."""

    def objective(train, fixed):
        lb = loss_fn(NetworkBundle.merge(train, fixed))
        return lb.total, lb

    @jax.jit
    def step(train, fixed, opt, lr):
        (_, lb), g = jax.value_and_grad(objective, has_aux=True)(train, fixed)
        gnorm = _global_norm(g)
        opt, train = adam_step(opt, train, g, lr)
        return train, opt, lb, gnorm

    return step


def run_training(
    bundle: NetworkBundle,
    loss_fn: Callable[[NetworkBundle], LossBreakdown],
    epochs: int,
    schedule: LrSchedule,
    log: Optional[TrainingLog] = None,
    eval_fn: Optional[Callable[[NetworkBundle], float]] = None,
    eval_every: int = 100,
    stage: str = "",
    epoch_offset: int = 0,
    callback: Optional[Callable[[int, NetworkBundle], None]] = None,
) -> tuple[NetworkBundle, TrainingLog]:
    """Full-batch Adam on the non-frozen members of ``bundle``.

    Each log row holds the loss at the parameters entering that epoch.
    Raises ``TrainingDiverged`` on a non-finite loss or gradient, or when the
    total loss exceeds ``DIVERGENCE_THRESHOLD``.
    """
    log = TrainingLog() if log is None else log
    if epochs <= 0:
        return bundle, log
    train, fixed = bundle.split()
    step = make_step(loss_fn)
    opt = adam_init(train)
    has_sigma = bundle.sigma_raw is not None
    for k in range(epochs):
        epoch = epoch_offset + k
        lr = lr_at(schedule, k)
        t0 = time.perf_counter()
        new_train, opt, lb, gnorm = step(train, fixed, opt, lr)
        total = float(lb.total)
        if not math.isfinite(total) or total > DIVERGENCE_THRESHOLD:
            raise TrainingDiverged(epoch, lb, "loss above threshold" if math.isfinite(total) else "non-finite loss")
        if not math.isfinite(float(gnorm)):
            raise TrainingDiverged(epoch, lb, "non-finite gradient")
        current = NetworkBundle.merge(train, fixed)
        sigma = float(current.sigma) if has_sigma else None
        rel = None
        if eval_fn is not None and (k % eval_every == 0 or k == epochs - 1):
            rel = eval_fn(current)
        log.append(epoch, lb, lr, sigma, rel, time.perf_counter() - t0, stage)
        if callback is not None:
            callback(epoch, current)
        train = new_train
    out = NetworkBundle.merge(train, fixed)
    return out, log


# ---------------------------------------------------------------------------
# configuration of a training run


@dataclass(frozen=True)
class TrainConfig:
    method: str = "bi_implicit"
    eps: float = 1e-8
    hidden: tuple = (128, 128, 128, 128)
    corr_hidden: Optional[tuple] = None
    phi_hidden: tuple = (128,) * 14
    epochs: int = 20000
    pretrain_epochs: int = 20000
    lr: float = 1e-4
    schedule: str = "constant"
    decay_factor: float = 0.8
    decay_interval: int = 1000
    lr_floor: float = 1e-6
    seed: int = 0
    diffusion_variant: Optional[str] = None
    eval_every: int = 100
    nt: int = 20
    nx: int = 99
    nv: int = 8
    drift: str = "consistent"
    normalize_inputs: bool = False
    weights: PenaltyWeights = PenaltyWeights()

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch budgets must be >= 0")
        if self.drift not in ("consistent", "literal"):
            raise ValueError(f"drift must be 'consistent' or 'literal', got {self.drift!r}")

    def lr_schedule(self) -> LrSchedule:
        return LrSchedule(self.schedule, self.lr, self.decay_factor, self.decay_interval, self.lr_floor)

    def drift_value(self) -> Optional[float]:
        return None if self.drift == "consistent" else 2.0

    def variant_for(self, problem: ProblemSpec) -> str:
        if self.diffusion_variant is not None:
            return self.diffusion_variant
        return "v2" if problem.is_poisson else "v1"


def final_slice_evaluator(reference: ReferenceSolution, method: str, eps: float, which: str = "rho"):
    """Relative l2 error of the network at the reference's final time on its spatial nodes."""
    x = np.asarray(reference.x)
    tx = np.stack([np.full(x.size, reference.times[-1]), x], axis=1)
    target = reference.rho_final if which == "rho" else reference.phi_final

    def evaluate(bundle: NetworkBundle) -> float:
        if which == "rho":
            pred = rho_from_bundle(bundle, method, eps, tx).rho
        else:
            pred = phi_from_bundle(bundle, tx).rho
        return relative_l2_error(np.asarray(pred), target)

    return evaluate


@dataclass
class ForwardResult:
    bundle: NetworkBundle
    log: TrainingLog
    rel_error_rho: Optional[float] = None
    rel_error_phi: Optional[float] = None


def _setup(problem: ProblemSpec, config: TrainConfig):
    basis = build_basis(Nv=config.nv)
    colloc = build_collocation(problem, basis, config.nt, config.nx)
    return basis, colloc


def _bundle_for(config: TrainConfig, problem: ProblemSpec, basis, sigma0: Optional[float] = None) -> NetworkBundle:
    """Fresh networks; with ``normalize_inputs`` their inputs are mapped from the problem box to ``[-1, 1]``."""
    domain = ((0.0, problem.t_final), (problem.x_min, problem.x_max)) if config.normalize_inputs else None
    return build_bundle(
        config.method, config.hidden, config.seed, problem.is_poisson, config.phi_hidden, config.corr_hidden,
        sigma0=sigma0, domain=domain, v_max=float(np.max(np.abs(basis.nodes))),
    )


def train_forward(config: TrainConfig, problem: ProblemSpec, reference: Optional[ReferenceSolution] = None) -> ForwardResult:
    """Train the chosen method on the forward problem.

    Bi-fidelity methods first fit ``rho_diff`` to the diffusion loss, freeze
    it and then train the remaining networks on the micro-macro loss.
    """
    basis, colloc = _setup(problem, config)
    method, eps, w = config.method, config.eps, config.weights
    bundle = _bundle_for(config, problem, basis)
    sigma = problem.sigma
    phi_field = phi_field_for(problem)
    log = TrainingLog()
    eval_fn = final_slice_evaluator(reference, method, eps) if reference is not None else None
    offset = 0

    if method in ("bi_explicit", "bi_implicit"):
        variant = config.variant_for(problem)
        drift = config.drift_value()

        def stage1(b: NetworkBundle) -> LossBreakdown:
            out = diffusion_loss(b, variant, sigma, phi_field, colloc, basis, w, problem, drift=drift)
            if problem.is_poisson:
                view = NetworkBundle(rho_apnn=b.rho_diff, phi=b.phi)
                pois = w.poisson * poisson_residual_loss(view, "apnn", eps, problem.poisson, colloc)
                out = out._replace(poisson=pois, total=out.total + pois)
            return out

        pre = bundle.freeze("rho_corr")
        if variant == "v1" and not problem.is_poisson:
            pre = pre.freeze("g")
        bundle, log = run_training(pre, stage1, config.pretrain_epochs, config.lr_schedule(), log, stage="pretrain")
        bundle = bundle.unfreeze("rho_corr", "g").freeze("rho_diff")
        offset = config.pretrain_epochs

    def stage2(b: NetworkBundle) -> LossBreakdown:
        return forward_loss(b, method, eps, sigma, problem, colloc, basis, w)

    bundle, log = run_training(
        bundle, stage2, config.epochs, config.lr_schedule(), log, eval_fn, config.eval_every,
        stage="main", epoch_offset=offset,
    )
    result = ForwardResult(bundle, log)
    if reference is not None:
        result.rel_error_rho = eval_fn(bundle)
        if problem.is_poisson:
            result.rel_error_phi = final_slice_evaluator(reference, method, eps, "phi")(bundle)
    return result


# ---------------------------------------------------------------------------
# inverse problem


def make_observations(
    reference: ReferenceSolution,
    n_rho: int = 100,
    n_phi: int = 0,
    seed: int = 0,
    noise: float = 0.0,
    include_initial: bool = False,
) -> ObservationSet:
    """Sample the reference trajectory at grid points drawn uniformly without replacement."""
    rng = np.random.default_rng(seed)
    times = np.asarray(reference.times)
    x = np.asarray(reference.x)
    t_idx0 = 0 if include_initial else 1
    nt = times.size - t_idx0
    total = nt * x.size

    def draw(n, field):
        if n > total:
            raise ValueError(f"asked for {n} observations, grid has {total}")
        flat = rng.choice(total, size=n, replace=False)
        ti, xi = np.divmod(flat, x.size)
        ti = ti + t_idx0
        vals = field[ti, xi].astype(np.float64)
        if noise > 0:
            vals = vals + noise * rng.standard_normal(n)
        return np.stack([times[ti], x[xi]], axis=1), vals

    rho_tx, rho_v = draw(n_rho, np.asarray(reference.rho))
    phi_tx = phi_v = None
    if n_phi > 0:
        phi_tx, phi_v = draw(n_phi, np.asarray(reference.phi))
    return ObservationSet(rho_tx, rho_v, phi_tx, phi_v, seed)


@dataclass
class InverseResult:
    sigma_hat: float
    bundle: NetworkBundle
    log: TrainingLog

    @property
    def sigma_trajectory(self) -> np.ndarray:
        return self.log.column("sigma")


def inverse_loss(bundle, method, eps, problem, colloc, basis, obs, weights, drift=None) -> LossBreakdown:
    """Composite inverse loss; APNN uses its own residual plus the data misfit (no diffusion term)."""
    if method in ("bi_explicit", "bi_implicit"):
        return total_inverse_loss(bundle, method[3:], eps, problem, colloc, basis, obs, weights, drift=drift)
    if method != "apnn":
        raise ValueError(f"inverse problem supports apnn and bi-fidelity methods, got {method!r}")
    sigma = bundle.sigma
    main = apnn_loss(bundle, eps, sigma, phi_field_for(problem), colloc, basis, weights, problem)
    d_rho, d_phi = data_loss(bundle, method, eps, obs, weights, use_phi=problem.is_poisson and obs.phi_tx is not None)
    pois = jnp.zeros(())
    if problem.is_poisson:
        pois = weights.poisson * poisson_residual_loss(bundle, method, eps, problem.poisson, colloc)
    return LossBreakdown.of(macro=main.macro, micro=main.micro, bc=main.bc, ic=main.ic, data_rho=d_rho, data_phi=d_phi, poisson=pois)


def train_inverse(config: TrainConfig, problem: ProblemSpec, obs: ObservationSet, sigma0: float) -> InverseResult:
    """Jointly fit all networks and ``sigma = softplus(s)``, starting from ``softplus(s0) = sigma0``."""
    if not sigma0 > 0:
        raise ValueError(f"initial sigma must be positive, got {sigma0}")
    basis, colloc = _setup(problem, config)
    bundle = _bundle_for(config, problem, basis, sigma0)
    drift = config.drift_value()

    def loss(b: NetworkBundle) -> LossBreakdown:
        return inverse_loss(b, config.method, config.eps, problem, colloc, basis, obs, config.weights, drift)

    bundle, log = run_training(bundle, loss, config.epochs, config.lr_schedule(), stage="inverse")
    return InverseResult(float(bundle.sigma), bundle, log)
