"""Desk-scale runs for the training-based acceptance criteria (7 to 13).

Every run goes through ``run_experiment`` and is emitted under
``<out>/runs/<name>``; the verdicts land in ``<out>/manifest.json``, which
``tests/test_acceptance.py`` reads.  Budgets are far below the full-scale
ones (see ``DESK``), so failures here are recorded, not tuned away.

    python scripts/desk_acceptance.py --out results/desk [--only 7 9]
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np

from biapnn.cli import emit_results, run_experiment
from biapnn.config import ExperimentConfig

DESK = dict(
    hidden_layers=2,
    neurons=32,
    phi_hidden_layers=4,
    phi_neurons=32,
    nt=20,
    nx=49,
    epochs=2000,
    pretrain_epochs=2000,
    lr=1e-3,
    eval_every=100,
)
INVERSE_EPOCHS = 1000


class Runner:
    def __init__(self, out: Path):
        self.out = out
        self.runs = {}

    def __call__(self, name, mode="forward", **kw):
        cfg = ExperimentConfig(**{**DESK, **kw})
        t0 = time.perf_counter()
        try:
            res = run_experiment(cfg, mode)
        except Exception as exc:  # recorded in the manifest, never swallowed silently
            self.runs[name] = {"config_hash": cfg.config_hash(), "error": str(exc)}
            print(f"{name}: error {exc}", flush=True)
            return None
        emit_results(res, self.out / "runs" / name)
        rec = {
            "config_hash": cfg.config_hash(),
            "rel_error_rho": res.rel_error_rho,
            "rel_error_phi": res.rel_error_phi,
            "sigma_hat": res.sigma_hat,
            "wall_time_s": time.perf_counter() - t0,
        }
        if res.sigma_runs:
            rec["sigma_hat_runs"] = {f"{s:g}": float(tr[-1]) for s, (_, tr) in res.sigma_runs.items()}
        self.runs[name] = rec
        print(f"{name}: {json.dumps(rec)}", flush=True)
        return rec


def _val(rec, key):
    return None if rec is None else rec.get(key)


def _le(v, bound):
    return v is not None and v <= bound


def _ge(v, bound):
    return v is not None and v >= bound


def crit7(run):
    e = {m: _val(run(f"c7_{m}", problem="problem1", method=m, eps=1e-8), "rel_error_rho")
         for m in ("pinn", "apnn", "bi_explicit", "bi_implicit")}
    ok = _ge(e["pinn"], 0.2) and _le(e["apnn"], 5e-2) and _le(e["bi_explicit"], 2e-2) and _le(e["bi_implicit"], 2e-2)
    return ok, e


def crit8(run):
    e = {m: _val(run(f"c8_{m}", problem="problem1", method=m, eps=1.0), "rel_error_rho")
         for m in ("pinn", "apnn", "bi_explicit", "bi_implicit")}
    return all(_le(v, 5e-2) for v in e.values()), e


def crit9(run):
    bi = _val(run("c9_bi_explicit_0hidden", problem="problem1", method="bi_explicit", eps=1e-8, corr_hidden_layers=0),
              "rel_error_rho")
    ap = _val(run("c9_apnn_0hidden", problem="problem1", method="apnn", eps=1e-8, hidden_layers=0), "rel_error_rho")
    return _le(bi, 2e-2) and _ge(ap, 0.3), {"bi_explicit_0hidden": bi, "apnn_0hidden": ap}


def crit10(run):
    out = {}
    wins = 0
    for seed in range(3):
        bi = _val(run(f"c10_bi_implicit_s{seed}", problem="problem1", method="bi_implicit", eps=1e-8, seed=seed),
                  "rel_error_rho")
        ap = _val(run(f"c10_apnn_s{seed}", problem="problem1", method="apnn", eps=1e-8, seed=seed), "rel_error_rho")
        out[f"seed{seed}"] = {"bi_implicit": bi, "apnn": ap}
        wins += bi is not None and ap is not None and bi < ap
    return wins == 3, out


def _inverse(run, tag, problem, method, eps):
    return _val(run(f"{tag}_{method}_eps{eps:g}", "inverse", problem=problem, method=method, eps=eps,
                    epochs=INVERSE_EPOCHS), "sigma_hat")


def crit11(run):
    out, ok = {}, True
    for eps in (1e-3, 1e-8):
        bi = _inverse(run, "c11", "problem1", "bi_implicit", eps)
        ap = _inverse(run, "c11", "problem1", "apnn", eps)
        out[f"eps{eps:g}"] = {"bi_implicit": bi, "apnn": ap}
        ok &= bi is not None and 1.95 <= bi <= 2.05 and ap is not None and abs(bi - 2) < abs(ap - 2)
    return ok, out


def crit12(run):
    bi = run("c12_bi_implicit", problem="problem2", method="bi_implicit", eps=1e-8)
    ap = run("c12_apnn", problem="problem2", method="apnn", eps=1e-8)
    e = {
        "bi_implicit": [_val(bi, "rel_error_rho"), _val(bi, "rel_error_phi")],
        "apnn": [_val(ap, "rel_error_rho"), _val(ap, "rel_error_phi")],
    }
    ok = all(_le(v, 8e-2) for v in e["bi_implicit"])
    ok &= _le(e["apnn"][0], 3 * 6.23e-2) and _le(e["apnn"][1], 3 * 6.16e-2)
    return ok, e


def crit13(run):
    out, ok = {}, True
    for eps in (1e-3, 1e-8):
        for m in ("bi_explicit", "bi_implicit"):
            s = _inverse(run, "c13", "problem2", m, eps)
            out[f"{m}_eps{eps:g}"] = s
            ok &= s is not None and 1.94 <= s <= 2.06
    return ok, out


CRITERIA = {7: crit7, 8: crit8, 9: crit9, 10: crit10, 11: crit11, 12: crit12, 13: crit13}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results/desk")
    p.add_argument("--only", type=int, nargs="*", default=sorted(CRITERIA))
    args = p.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"budget": {}, "criteria": {}, "runs": {}}
    manifest["budget"] = {**DESK, "inverse_epochs": INVERSE_EPOCHS}
    for k in args.only:
        run = Runner(out)
        t0 = time.perf_counter()
        ok, measured = CRITERIA[k](run)
        manifest["criteria"][str(k)] = {
            "verdict": "PASS" if ok else "FAIL",
            "measured": measured,
            "wall_time_s": time.perf_counter() - t0,
        }
        manifest["runs"].update(run.runs)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=lambda o: None) + "\n")
        print(f"criterion {k}: {'PASS' if ok else 'FAIL'} {json.dumps(measured)}", flush=True)


if __name__ == "__main__":
    main()
