"""Flat ``key=value`` experiment configuration.

Pairs may share a line (whitespace separated) or sit one per line; ``#``
starts a comment.  Unknown keys and ill-typed values are rejected with the
offending key named.  Defaults are the full-scale training settings.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .losses import PenaltyWeights
from .nn import METHODS
from .training import TrainConfig

PROBLEMS = ("problem1", "problem2")
ALL_METHODS = METHODS + ("reference", "drift_diffusion")


class ConfigError(ValueError):
    pass


def _float_tuple(text: str) -> tuple:
    return tuple(float(s) for s in text.split(",") if s.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str = "problem1"
    method: str = "bi_implicit"
    eps: float = 1e-8
    sigma_true: float = 2.0
    hidden_layers: int = 4
    neurons: int = 128
    corr_hidden_layers: Optional[int] = None
    corr_neurons: Optional[int] = None
    phi_hidden_layers: int = 14
    phi_neurons: int = 128
    diffusion_variant: Optional[str] = None
    drift: str = "consistent"
    normalize_inputs: bool = False
    epochs: int = 20000
    pretrain_epochs: int = 20000
    lr: float = 1e-4
    schedule: str = "auto"
    decay_factor: float = 0.8
    decay_interval: int = 1000
    lr_floor: float = 1e-6
    seed: int = 0
    nt: int = 20
    nx: int = 99
    nv: int = 8
    eval_every: int = 100
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda1_diff: float = 1.0
    lambda2_diff: float = 1.0
    w_d_rho: float = 1.0
    w_d_phi: float = 1.0
    w_poisson: float = 1.0
    n_obs_rho: int = 100
    n_obs_phi: int = 100
    noise: float = 0.0
    sigma0_list: tuple = (0.5, 1.0, 1.5, 1.7, 1.9)
    eps_list: tuple = (1.0, 1e-1, 1e-3, 1e-8)
    ref_dt: float = 0.005
    ref_nx: int = 101

    def __post_init__(self):
        _validate(self)

    def schedule_for(self, mode: str) -> str:
        if self.schedule != "auto":
            return self.schedule
        return "step_decay" if mode == "inverse" else "constant"

    def train_config(self, mode: str = "forward") -> TrainConfig:
        hidden = (self.neurons,) * self.hidden_layers
        corr = None
        if self.corr_hidden_layers is not None or self.corr_neurons is not None:
            n_layers = self.hidden_layers if self.corr_hidden_layers is None else self.corr_hidden_layers
            width = self.neurons if self.corr_neurons is None else self.corr_neurons
            corr = (width,) * n_layers
        return TrainConfig(
            method=self.method,
            eps=self.eps,
            hidden=hidden,
            corr_hidden=corr,
            phi_hidden=(self.phi_neurons,) * self.phi_hidden_layers,
            epochs=self.epochs,
            pretrain_epochs=self.pretrain_epochs,
            lr=self.lr,
            schedule=self.schedule_for(mode),
            decay_factor=self.decay_factor,
            decay_interval=self.decay_interval,
            lr_floor=self.lr_floor,
            seed=self.seed,
            diffusion_variant=self.diffusion_variant,
            eval_every=self.eval_every,
            nt=self.nt,
            nx=self.nx,
            nv=self.nv,
            drift=self.drift,
            normalize_inputs=self.normalize_inputs,
            weights=PenaltyWeights(
                self.lambda1, self.lambda2, self.lambda1_diff, self.lambda2_diff,
                self.w_d_rho, self.w_d_phi, self.w_poisson,
            ),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma0_list"] = list(self.sigma0_list)
        d["eps_list"] = list(self.eps_list)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def override(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        try:
            return replace(self, **kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _validate(c: ExperimentConfig) -> None:
    def bad(key, msg):
        raise ConfigError(f"{key}: {msg}")

    if c.problem not in PROBLEMS:
        bad("problem", f"must be one of {PROBLEMS}, got {c.problem!r}")
    if c.method not in ALL_METHODS:
        bad("method", f"must be one of {ALL_METHODS}, got {c.method!r}")
    if not c.eps > 0:
        bad("eps", f"must be > 0, got {c.eps}")
    if not c.sigma_true > 0:
        bad("sigma_true", f"must be > 0, got {c.sigma_true}")
    for key in ("epochs", "pretrain_epochs", "hidden_layers", "phi_hidden_layers", "n_obs_rho", "n_obs_phi"):
        if getattr(c, key) < 0:
            bad(key, "must be >= 0")
    for key in ("neurons", "phi_neurons", "nt", "nx", "nv", "eval_every", "decay_interval", "ref_nx"):
        if getattr(c, key) < 1:
            bad(key, "must be >= 1")
    if c.corr_hidden_layers is not None and c.corr_hidden_layers < 0:
        bad("corr_hidden_layers", "must be >= 0")
    if c.corr_neurons is not None and c.corr_neurons < 1:
        bad("corr_neurons", "must be >= 1")
    if c.diffusion_variant not in (None, "v1", "v2"):
        bad("diffusion_variant", f"must be v1 or v2, got {c.diffusion_variant!r}")
    if c.drift not in ("consistent", "literal"):
        bad("drift", f"must be consistent or literal, got {c.drift!r}")
    if c.schedule not in ("auto", "constant", "step_decay"):
        bad("schedule", f"must be auto, constant or step_decay, got {c.schedule!r}")
    if not c.lr > 0 or not c.lr_floor >= 0 or not 0 < c.decay_factor <= 1:
        bad("lr", "learning-rate settings out of range")
    for key in ("lambda1", "lambda2", "lambda1_diff", "lambda2_diff", "w_d_rho", "w_d_phi", "w_poisson", "noise"):
        if not getattr(c, key) >= 0:
            bad(key, "must be >= 0")
    if not c.sigma0_list or any(not s > 0 for s in c.sigma0_list):
        bad("sigma0_list", "needs at least one positive value")
    if any(not e > 0 for e in c.eps_list):
        bad("eps_list", "values must be > 0")
    if not c.ref_dt > 0:
        bad("ref_dt", "must be > 0")


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, text: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind in ("str",):
            return text
        if kind in ("float",):
            return float(text)
        if kind in ("int",):
            return int(text)
        if kind == "bool":
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError("expected true or false")
            return text.lower() in ("true", "1", "yes")
        if kind == "Optional[int]":
            return None if text.lower() in ("", "none") else int(text)
        if kind == "Optional[str]":
            return None if text.lower() in ("", "none", "auto") else text
        if kind == "tuple":
            return _float_tuple(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from exc
    raise ConfigError(f"{key}: unsupported field type {kind}")


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        for token in line.split():
            if "=" not in token:
                raise ConfigError(f"line {lineno}: expected key=value, got {token!r}")
            key, val = token.split("=", 1)
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{key}: unknown key (line {lineno})")
            if key in values:
                raise ConfigError(f"{key}: given twice (line {lineno})")
            values[key] = _coerce(key, val.strip())
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
