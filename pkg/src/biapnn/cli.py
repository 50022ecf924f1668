"""Command-line driver: reference runs, forward and inverse training, sweeps and comparisons.

Exit codes: 0 success, 2 invalid configuration, 3 training divergence or
numerical failure of a solver.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, parse_config
from .problems import get_problem
from .reference import NumericalFailure, ReferenceSolution, SpatialGrid, run_reference, solve_drift_diffusion
from .training import (
    LOG_COLUMNS,
    TrainingDiverged,
    TrainingLog,
    make_observations,
    relative_l2_error,
    train_forward,
    train_inverse,
)
from .velocity import build_basis, diffusion_coefficient_T

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


class ExperimentError(RuntimeError):
    """A run failed; the message carries the config hash."""

    def __init__(self, config_hash: str, cause: Exception):
        super().__init__(f"[config {config_hash}] {cause}")
        self.config_hash = config_hash
        self.cause = cause


@dataclass
class ResultsBundle:
    config: ExperimentConfig
    mode: str
    x: np.ndarray
    rho_final: np.ndarray
    rho_ref: Optional[np.ndarray] = None
    phi_final: Optional[np.ndarray] = None
    phi_ref: Optional[np.ndarray] = None
    rel_error_rho: Optional[float] = None
    rel_error_phi: Optional[float] = None
    sigma_hat: Optional[float] = None
    sigma_runs: dict = field(default_factory=dict)  # sigma0 -> (epochs, sigma trajectory)
    logs: dict = field(default_factory=dict)  # run label -> TrainingLog
    epochs: int = 0
    wall_time_s: float = 0.0

    def summary(self) -> dict:
        c = self.config
        out = {
            "config_hash": c.config_hash(),
            "problem": c.problem,
            "method": c.method,
            "mode": self.mode,
            "eps": c.eps,
            "rel_error_rho": self.rel_error_rho,
            "epochs": self.epochs,
            "wall_time_s": self.wall_time_s,
        }
        if self.rel_error_phi is not None:
            out["rel_error_phi"] = self.rel_error_phi
        if self.sigma_hat is not None:
            out["sigma_hat"] = self.sigma_hat
            out["sigma_hat_runs"] = {_label(s0): float(tr[-1]) for s0, (_, tr) in self.sigma_runs.items()}
        out["provenance"] = {
            "config_hash": c.config_hash(),
            "seed": c.seed,
            "version": f"biapnn-{__version__}",
            "config": c.to_dict(),
        }
        return out


def _label(s0: float) -> str:
    return f"{s0:g}"


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


# ---------------------------------------------------------------------------
# dispatch


def _grid(cfg: ExperimentConfig, problem) -> SpatialGrid:
    return SpatialGrid(problem.x_min, problem.x_max, cfg.ref_nx)


def _reference(cfg: ExperimentConfig, problem) -> ReferenceSolution:
    return run_reference(problem, cfg.eps, _grid(cfg, problem), cfg.ref_dt, basis=build_basis(Nv=cfg.nv))


def _run_reference(cfg: ExperimentConfig, problem) -> ResultsBundle:
    ref = _reference(cfg, problem)
    phi = ref.phi_final if problem.is_poisson else None
    return ResultsBundle(cfg, "reference", ref.x, ref.rho_final, phi_final=phi)


def _run_drift_diffusion(cfg: ExperimentConfig, problem) -> ResultsBundle:
    grid = _grid(cfg, problem)
    T = diffusion_coefficient_T(problem.sigma, build_basis(Nv=cfg.nv))
    drift = None if cfg.drift == "consistent" else 2.0
    phi_x = None if problem.is_poisson else (lambda t, xf: problem.potential_dx(xf))
    res = solve_drift_diffusion(
        T, phi_x, grid, cfg.ref_dt, problem.t_final, np.ones(grid.nx), drift=drift, poisson=problem.poisson
    )
    phi = res.phi[-1] if res.phi is not None else None
    return ResultsBundle(cfg, "reference", grid.nodes, res.rho[-1], phi_final=phi)


def _eval_slice(bundle, method, eps, x, t, which="rho") -> np.ndarray:
    from .nn import phi_from_bundle, rho_from_bundle

    tx = np.stack([np.full(x.size, t), x], axis=1)
    if which == "rho":
        return np.asarray(rho_from_bundle(bundle, method, eps, tx).rho)
    return np.asarray(phi_from_bundle(bundle, tx).rho)


def _run_forward(cfg: ExperimentConfig, problem) -> ResultsBundle:
    ref = _reference(cfg, problem)
    res = train_forward(cfg.train_config("forward"), problem, ref)
    t = ref.times[-1]
    out = ResultsBundle(
        cfg, "forward", ref.x, _eval_slice(res.bundle, cfg.method, cfg.eps, ref.x, t), rho_ref=ref.rho_final,
        rel_error_rho=res.rel_error_rho, rel_error_phi=res.rel_error_phi, logs={"": res.log},
        epochs=cfg.epochs,
    )
    if problem.is_poisson:
        out.phi_final = _eval_slice(res.bundle, cfg.method, cfg.eps, ref.x, t, "phi")
        out.phi_ref = ref.phi_final
    return out


def _run_inverse(cfg: ExperimentConfig, problem) -> ResultsBundle:
    truth = problem.with_sigma(cfg.sigma_true)
    ref = _reference(cfg, truth)
    n_phi = cfg.n_obs_phi if problem.is_poisson else 0
    obs = make_observations(ref, cfg.n_obs_rho, n_phi, cfg.seed, cfg.noise)
    tc = cfg.train_config("inverse")
    runs, logs, last = {}, {}, None
    for s0 in cfg.sigma0_list:
        res = train_inverse(tc, truth, obs, s0)
        runs[s0] = (res.log.column("epoch"), np.append(res.sigma_trajectory, res.sigma_hat))
        logs[_label(s0)] = res.log
        last = res
    sigma_hat = float(np.mean([tr[-1] for _, tr in runs.values()]))
    t = ref.times[-1]
    rho = _eval_slice(last.bundle, cfg.method, cfg.eps, ref.x, t)
    out = ResultsBundle(
        cfg, "inverse", ref.x, rho, rho_ref=ref.rho_final, rel_error_rho=relative_l2_error(rho, ref.rho_final),
        sigma_hat=sigma_hat, sigma_runs=runs, logs=logs, epochs=cfg.epochs,
    )
    if problem.is_poisson:
        out.phi_final = _eval_slice(last.bundle, cfg.method, cfg.eps, ref.x, t, "phi")
        out.phi_ref = ref.phi_final
        out.rel_error_phi = relative_l2_error(out.phi_final, ref.phi_final)
    return out


def run_experiment(cfg: ExperimentConfig, mode: str = "forward") -> ResultsBundle:
    """Dispatch one experiment.  ``reference``/``drift_diffusion`` methods ignore ``mode``."""
    if mode not in ("forward", "inverse", "reference"):
        raise ConfigError(f"mode: must be forward, inverse or reference, got {mode!r}")
    problem = get_problem(cfg.problem, cfg.sigma_true)
    t0 = time.perf_counter()
    try:
        if cfg.method == "reference" or mode == "reference":
            out = _run_reference(cfg, problem)
        elif cfg.method == "drift_diffusion":
            out = _run_drift_diffusion(cfg, problem)
        elif mode == "inverse":
            if cfg.method == "pinn":
                raise ConfigError("method: the inverse problem supports apnn, bi_explicit and bi_implicit")
            out = _run_inverse(cfg, problem)
        else:
            out = _run_forward(cfg, problem)
    except (TrainingDiverged, NumericalFailure) as exc:
        raise ExperimentError(cfg.config_hash(), exc) from exc
    out.wall_time_s = time.perf_counter() - t0
    return out


# ---------------------------------------------------------------------------
# results files


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def emit_results(bundle: ResultsBundle, out_dir) -> list[str]:
    """Write the result files into ``out_dir``; returns the sorted file names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def fields_for(values, ref):
        header = ["x", "value"] + (["reference"] if ref is not None else [])
        rows = []
        for i, xi in enumerate(bundle.x):
            row = [_fmt(xi), _fmt(values[i])]
            if ref is not None:
                row.append(_fmt(ref[i]))
            rows.append(row)
        return header, rows

    header, rows = fields_for(bundle.rho_final, bundle.rho_ref)
    header[1:] = ["rho"] + (["rho_ref"] if bundle.rho_ref is not None else [])
    _write_rows(out / "rho_final.csv", header, rows)
    written.append("rho_final.csv")
    if bundle.phi_final is not None:
        header, rows = fields_for(bundle.phi_final, bundle.phi_ref)
        header[1:] = ["phi"] + (["phi_ref"] if bundle.phi_ref is not None else [])
        _write_rows(out / "phi_final.csv", header, rows)
        written.append("phi_final.csv")
    if bundle.logs:
        cols = LOG_COLUMNS[:-1]
        multi = len(bundle.logs) > 1 or next(iter(bundle.logs)) != ""
        header = (["sigma0"] if multi else []) + ["stage"] + list(cols)
        rows = []
        for label, log in bundle.logs.items():
            for r in log.rows:
                vals = [r[c] if c == "epoch" else _fmt(r[c]) for c in cols]
                rows.append(([label] if multi else []) + [r["stage"]] + vals)
        _write_rows(out / "loss_history.csv", header, rows)
        written.append("loss_history.csv")
    if bundle.sigma_runs:
        labels = list(bundle.sigma_runs)
        n = max(len(tr) for _, tr in bundle.sigma_runs.values())
        rows = []
        for k in range(n):
            vals = [bundle.sigma_runs[s][1][k] if k < len(bundle.sigma_runs[s][1]) else math.nan for s in labels]
            rows.append([k] + [_fmt(v) for v in vals] + [_fmt(np.mean(vals))])
        _write_rows(out / "sigma_trajectory.csv", ["epoch"] + [f"sigma0={_label(s)}" for s in labels] + ["mean"], rows)
        written.append("sigma_trajectory.csv")
    (out / "summary.json").write_text(json.dumps(bundle.summary(), indent=2, sort_keys=True, allow_nan=False) + "\n")
    written.append("summary.json")
    return sorted(written)


# ---------------------------------------------------------------------------
# compare


COMPARE_COLUMNS = ("problem", "method", "mode", "eps", "rel_error_rho", "rel_error_phi", "sigma_hat", "config_hash")


def compare(dirs: Sequence) -> list[dict]:
    rows = []
    for d in dirs:
        path = Path(d) / "summary.json"
        s = json.loads(path.read_text())
        rows.append({k: s.get(k) for k in COMPARE_COLUMNS})
    return rows


def _print_table(rows: list[dict], stream) -> None:
    w = csv.writer(stream)
    w.writerow(COMPARE_COLUMNS)
    for r in rows:
        w.writerow(["" if r[k] is None else r[k] for k in COMPARE_COLUMNS])


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="biapnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"biapnn {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="extra config entry")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--eps", type=float)
        sp.add_argument("--method")

    for name, help_ in (
        ("forward", "train a solver on the forward problem"),
        ("inverse", "recover sigma from density (and potential) observations"),
        ("reference", "run the classical reference solver"),
        ("sweep", "forward runs over the configured eps list"),
    ):
        common(sub.add_parser(name, help=help_))
    cp = sub.add_parser("compare", help="error table from several result directories")
    cp.add_argument("dirs", nargs="+")
    cp.add_argument("--out", help="write the table as CSV here instead of stdout")
    return p


def _config_from_args(args) -> ExperimentConfig:
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    cfg = parse_config(text + "\n" + "\n".join(args.set))
    return cfg.override(seed=args.seed, eps=args.eps, method=args.method)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "compare":
            rows = compare(args.dirs)
            if args.out:
                with open(args.out, "w", newline="") as fh:
                    _print_table(rows, fh)
            else:
                _print_table(rows, sys.stdout)
            return EXIT_OK
        cfg = _config_from_args(args)
        if args.command == "sweep":
            for eps in cfg.eps_list:
                sub_cfg = cfg.override(eps=eps)
                emit_results(run_experiment(sub_cfg, "forward"), Path(args.out) / f"eps={eps:g}")
        else:
            res = run_experiment(cfg, args.command)
            emit_results(res, args.out)
            print(json.dumps({k: v for k, v in res.summary().items() if k != "provenance"}))
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
