"""Command-line entry point: ``replica-sync <command> [options]``.

Each command merges its defaults, an optional JSON config file and flag
overrides (in that order), validates every field before computing, and
writes its artifacts plus ``manifest.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from threadpoolctl import threadpool_limits

from .diffusion import (AnalyticPairBackend, ConfigError, LinearScore, MixtureScore, make_vp_schedule,
                        simulate_coupled_ou, uv_transform)
from .dit import DiT, DitConfig, DitPairBackend, RegressionError, calibrate_decoder
from .io import Emitter
from .linear_response import bounds_check, linearization_report
from .protocols import default_bands, default_mixture, run_protocol1, run_protocol2
from .speciation import RoutingDominantModel, solve_self_consistency

EXIT_CONFIG = 3

DEFAULTS = {
    "simulate-ou": {"g_grid": [0.0, 0.25, 0.5, 0.75, 1.0], "steps": 100, "seeds": 10000,
                    "sigma": 1.0, "sigma0": 0.5, "d_z": 4, "beta_min": 0.1, "beta_max": 20.0, "horizon": 1.0},
    "verify-linearization": {"g_grid": [0.0, 0.3, 0.7, 1.0], "n_states": 5, "fd_eps": 1e-5,
                             "scales": [1e-1, 1e-2, 1e-3, 1e-4], "prefactor_scale": 1e-5,
                             "n_bound": 200},
    "bounds-check": {"instances": 1000, "tokens": 16},
    "bifurcation": {"kappa": None, "g_grid": [round(0.1 * i, 10) for i in range(11)],
                    "chi_hi": 0.03, "chi_lo": 0.01, "lambda_mlp": 0.04, "m_init": 0.05,
                    "c": 1.0, "gamma": 1.0, "steps": 100},
    "protocol1": {"backend": "analytic", "g_grid": [0.1, 0.3, 0.5, 0.7, 0.9, 1.0], "sigma": 1.0,
                  "steps": 100, "seeds": 32, "eta": 1.0, "pool": 2, "t_stride": 2,
                  "n_boot": 200, "model": None},
    "protocol2": {"backend": "analytic", "g_grid": [0.0, 0.5, 1.0], "tau_spec": 50, "layers": None,
                  "bands": None, "modes": 16, "sigma": 1.0, "steps": 100, "seeds": 32,
                  "model": None},
    "calibrate": {"steps": 100, "n_samples": 2048, "ridge": 1e-3},
}
COMMON = {"seed": 0, "out": None}


class ConfigValidationError(ValueError):
    def __init__(self, problems):
        super().__init__("; ".join(problems))
        self.problems = problems


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _bands(text):
    try:
        lead, trail = text.split(":")
        return [_int_list(lead), _int_list(trail)]
    except ValueError:
        raise argparse.ArgumentTypeError("bands must look like '1,2,3,4:13,14,15,16'")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="replica-sync",
                                description="Coupled replica diffusion experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="master RNG seed")
        return sp

    sp = add("simulate-ou", "coupled OU variance sweep")
    sp.add_argument("--g", type=float)
    sp.add_argument("--g-grid", type=_float_list)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seeds", type=int, help="number of trajectories")
    sp.add_argument("--d-z", type=int)

    sp = add("verify-linearization", "linear-response report on the toy DiT")
    sp.add_argument("--g", type=float)
    sp.add_argument("--g-grid", type=_float_list)
    sp.add_argument("--fd-eps", type=float)
    sp.add_argument("--n-states", type=int)
    sp.add_argument("--n-bound", type=int)

    sp = add("bounds-check", "Monte-Carlo check of softmax identities and routing bound")
    sp.add_argument("--instances", type=int)
    sp.add_argument("--tokens", type=int)

    sp = add("bifurcation", "self-consistency root and routing-dominant gap tables")
    sp.add_argument("--kappa", type=float)
    sp.add_argument("--g", type=float)
    sp.add_argument("--g-grid", type=_float_list)
    sp.add_argument("--steps", type=int)

    for name, text in (("protocol1", "intervention sweep"), ("protocol2", "internal mode energies")):
        sp = add(name, text)
        sp.add_argument("--backend", choices=["analytic", "dit"])
        sp.add_argument("--model", help="calibrated DiT JSON (dit backend)")
        sp.add_argument("--g", type=float)
        sp.add_argument("--g-grid", type=_float_list)
        sp.add_argument("--sigma", type=float)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--seeds", type=int)
        if name == "protocol1":
            sp.add_argument("--eta", type=float)
            sp.add_argument("--pool", type=int)
            sp.add_argument("--t-stride", type=int)
            sp.add_argument("--n-boot", type=int)
        else:
            sp.add_argument("--tau-spec", type=float)
            sp.add_argument("--layers", type=_int_list)
            sp.add_argument("--bands", type=_bands)
            sp.add_argument("--modes", type=int)

    sp = add("calibrate", "ridge-calibrate the toy DiT decoder")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--n-samples", type=int)
    sp.add_argument("--ridge", type=float)
    return p


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    cfg = dict(COMMON)
    cfg.update(DEFAULTS[command])
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigValidationError(["config: top level must be a JSON object"])
        unknown = [k for k in data if k.replace("-", "_") not in cfg]
        if unknown:
            raise ConfigValidationError([f"{k}: unknown field" for k in unknown])
        cfg.update({k.replace("-", "_"): v for k, v in data.items()})
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        if key == "g":
            cfg["g_grid"] = [value]
        else:
            cfg[key] = value
    return cfg


def _positive_int(cfg, key, problems, minimum=1):
    v = cfg.get(key)
    if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < minimum:
        problems.append(f"{key}: must be an integer >= {minimum}, got {v!r}")


def _in_range(cfg, key, problems, lo, hi, lo_open=False):
    v = cfg.get(key)
    ok = isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)
    ok = ok and (v > lo if lo_open else v >= lo) and v <= hi
    if not ok:
        problems.append(f"{key}: must lie in {'(' if lo_open else '['}{lo}, {hi}], got {v!r}")


def validate(command: str, cfg: dict) -> dict:
    """Check every numeric field; raise with field-level diagnostics."""
    problems = []
    if not isinstance(cfg.get("seed"), int) or cfg["seed"] < 0:
        problems.append(f"seed: must be a non-negative integer, got {cfg.get('seed')!r}")
    if "g_grid" in cfg:
        grid = cfg["g_grid"]
        if not isinstance(grid, list) or not grid or not all(
                isinstance(g, (int, float)) and 0.0 <= g <= 1.0 for g in grid):
            problems.append(f"g_grid: must be a non-empty list of values in [0, 1], got {grid!r}")
    if "steps" in cfg:
        _positive_int(cfg, "steps", problems, 2)
    if "sigma" in cfg:
        _in_range(cfg, "sigma", problems, 0.0, 1e6)
    if command == "simulate-ou":
        _positive_int(cfg, "seeds", problems, 2)
        _positive_int(cfg, "d_z", problems)
    elif command == "verify-linearization":
        _in_range(cfg, "fd_eps", problems, 1e-8, 1e-3)
        _positive_int(cfg, "n_states", problems)
        _positive_int(cfg, "n_bound", problems)
    elif command == "bounds-check":
        _positive_int(cfg, "instances", problems)
        _positive_int(cfg, "tokens", problems, 2)
    elif command == "bifurcation":
        if cfg["kappa"] is not None:
            _in_range(cfg, "kappa", problems, 0.0, 1e12)
        for key in ("chi_hi", "chi_lo", "lambda_mlp"):
            _in_range(cfg, key, problems, -10.0, 10.0)
        _in_range(cfg, "gamma", problems, 0.0, 1e6, lo_open=True)
        _in_range(cfg, "c", problems, 0.0, 1e6, lo_open=True)
    elif command in ("protocol1", "protocol2"):
        if cfg["backend"] not in ("analytic", "dit"):
            problems.append(f"backend: must be 'analytic' or 'dit', got {cfg['backend']!r}")
        if command == "protocol1":
            _positive_int(cfg, "seeds", problems, 8)
            _in_range(cfg, "eta", problems, 0.0, 1.0)
            _positive_int(cfg, "pool", problems)
            if cfg.get("pool") and 8 % cfg["pool"]:
                problems.append(f"pool: must divide the 8x8 latent, got {cfg['pool']}")
            _positive_int(cfg, "t_stride", problems)
            _positive_int(cfg, "n_boot", problems, 100)
        else:
            _positive_int(cfg, "seeds", problems, 2)
            _positive_int(cfg, "modes", problems)
            if isinstance(cfg.get("steps"), int):
                _in_range(cfg, "tau_spec", problems, 0, cfg["steps"] - 1)
            if isinstance(cfg.get("modes"), int) and isinstance(cfg.get("seeds"), int) \
                    and cfg["modes"] > cfg["seeds"]:
                problems.append(f"modes: {cfg['modes']} exceeds seeds {cfg['seeds']}")
            bands = cfg.get("bands")
            if bands is not None:
                if len(bands) != 2 or set(bands[0]) & set(bands[1]):
                    problems.append("bands: need two disjoint index lists")
                elif min(bands[0] + bands[1]) < 1 or max(bands[0] + bands[1]) > cfg.get("modes", 0):
                    problems.append(f"bands: indices must lie in 1..{cfg.get('modes')}")
    elif command == "calibrate":
        _positive_int(cfg, "n_samples", problems, 16)
        _in_range(cfg, "ridge", problems, 0.0, 1e6, lo_open=True)
    if problems:
        raise ConfigValidationError(problems)
    return cfg


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def thread_cap() -> int:
    raw = os.environ.get("REPLICA_SYNC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigValidationError([f"REPLICA_SYNC_THREADS: not an integer: {raw!r}"])
    if n < 1:
        raise ConfigValidationError([f"REPLICA_SYNC_THREADS: must be >= 1, got {n}"])
    return n


def parallel_map(fn, items):
    """Map ``fn`` over independent cells, returning results in input order.

    Workers are capped by ``REPLICA_SYNC_THREADS``; BLAS is pinned to one
    thread so floating-point reductions do not depend on the cap.
    """
    items = list(items)
    n = min(thread_cap(), max(len(items), 1))
    with threadpool_limits(limits=1):
        if n == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(fn, items))


def _backend(cfg, sched):
    mix = default_mixture()
    if cfg["backend"] == "analytic":
        return AnalyticPairBackend(MixtureScore(sched, mix), (1, 8, 8)), mix
    if cfg.get("model"):
        model = DiT.load(cfg["model"])
    else:
        model = calibrate_decoder(DitConfig(rng_seed=cfg["seed"]), sched, mix, rng_seed=cfg["seed"]).model
    return DitPairBackend(model, sched), mix


def cmd_simulate_ou(cfg, em):
    sched = make_vp_schedule(cfg["steps"], cfg["beta_min"], cfg["beta_max"], horizon=cfg["horizon"])
    score = LinearScore(sched, cfg["sigma0"])

    def cell(g):
        traj = simulate_coupled_ou(sched, score.score, g, cfg["seeds"], cfg["d_z"], cfg["sigma"],
                                   rng_seed=cfg["seed"])
        rows = []
        for step in sorted(traj, reverse=True):
            u, v = uv_transform(traj[step])
            rows.append({"g": g, "step": step, "v_var": float(np.var(v, axis=0).mean()),
                         "u_var": float(np.var(u, axis=0).mean())})
        return rows

    rows = [r for block in parallel_map(cell, cfg["g_grid"]) for r in block]
    em.write_csv("ou_variance.csv", rows)
    mid = cfg["steps"] // 2
    em.write_json("ou_summary.json", {"mid_step": mid, "v_var_mid": {
        str(r["g"]): r["v_var"] for r in rows if r["step"] == mid}})


def cmd_verify_linearization(cfg, em):
    model = DiT(DitConfig(rng_seed=cfg["seed"]))
    report = linearization_report(model, cfg["g_grid"], cfg["n_states"], cfg["scales"],
                                  cfg["prefactor_scale"], cfg["fd_eps"], cfg["n_bound"],
                                  rng_seed=cfg["seed"])
    slopes, pref = [], []
    for entry in report["layers"]:
        for s in entry["slopes"]:
            slopes.append({"layer": entry["layer"], **s})
        for p in entry["prefactors"]:
            pref.append({"layer": entry["layer"], **p})
    em.write_csv("linearization_slopes.csv", slopes)
    em.write_csv("linearization_prefactors.csv", pref)
    em.write_json("linearization.json", report)


def cmd_bounds_check(cfg, em):
    em.write_json("bounds.json", bounds_check(cfg["instances"], cfg["tokens"], rng_seed=cfg["seed"]))


def cmd_bifurcation(cfg, em):
    if cfg["kappa"] is not None:
        print("%.12f" % solve_self_consistency(cfg["kappa"]))
    if em is None:
        return
    model = RoutingDominantModel(chi_hi=cfg["chi_hi"], chi_lo=cfg["chi_lo"],
                                 lambda_mlp=cfg["lambda_mlp"], c=cfg["c"], m_init=cfg["m_init"],
                                 gamma=cfg["gamma"], steps=cfg["steps"])
    reports = parallel_map(model.gap_report, cfg["g_grid"])
    rows = []
    for rep in reports:
        for mode in ("hi", "lo"):
            censored = rep.steps[mode] is None
            for step, (k, s) in enumerate(zip(rep.kappa_curves[mode], rep.snr_curves[mode])):
                rows.append({"mode": mode, "step": step, "layer": rep.layer, "g": rep.g,
                             "kappa": k, "snr": s, "censored": censored})
    em.write_csv("kappa_snr.csv", rows)
    em.write_json("gaps.json", {"reports": [r.to_dict() for r in reports],
                                "snr_split": {str(g): model.snr_split(g) for g in cfg["g_grid"]}})


def cmd_protocol1(cfg, em):
    sched = make_vp_schedule(cfg["steps"])
    backend, mix = _backend(cfg, sched)
    t_grid = np.arange(0, cfg["steps"] + 1, cfg["t_stride"])

    def cell(g):
        return run_protocol1(backend, sched, g, t_grid, cfg["seeds"], cfg["sigma"], cfg["eta"],
                             cfg["seed"], mix=mix, pool_size=cfg["pool"], n_boot=cfg["n_boot"])

    runs = parallel_map(cell, cfg["g_grid"])
    rows, fits, summary = [], [], []
    for run in runs:
        for j, t in enumerate(run.t_grid):
            for m in range(run.seeds):
                rows.append({"g": run.g, "t_int": int(t), "seed": m, "a_feat": run.a_feat[m, j],
                             "d_low": run.d_low[m, j], "d_high": run.d_high[m, j]})
        fits.append({"g": run.g, "tau_spec": run.tau_spec, "ci_lo": run.ci[0], "ci_hi": run.ci[1],
                     "tau_g": run.tau_g, "tau_l": run.tau_l, "delta_tau": run.delta_tau})
        summary.append({"g": run.g, "flags": run.flags,
                        "baseline_median": float(np.nanmedian(run.baseline)),
                        "baseline": run.baseline,
                        "median_agreement": run.median_agreement,
                        "fits": {k: (None if f is None else
                                     {"a": f.a, "b": f.b, "tau": f.tau, "w": f.w, "residual": f.residual})
                                 for k, f in run.fits.items()}})
    em.write_csv("protocol1.csv", rows)
    em.write_csv("protocol1_fits.csv", fits)
    em.write_json("protocol1_summary.json", {"t_grid": t_grid, "runs": summary})


def cmd_protocol2(cfg, em):
    sched = make_vp_schedule(cfg["steps"])
    backend, _ = _backend(cfg, sched)
    bands = cfg["bands"] or default_bands(cfg["modes"])
    layers = cfg["layers"] if cfg["layers"] is not None else list(range(backend.layers))
    bad = [l for l in layers if not 0 <= l < backend.layers]
    if bad:
        raise ConfigValidationError([f"layers: {bad} outside 0..{backend.layers - 1}"])

    def cell(g):
        return run_protocol2(backend, sched, g, cfg["tau_spec"], layers, cfg["seeds"], bands,
                             cfg["seed"], cfg["sigma"], cfg["modes"])

    runs = parallel_map(cell, cfg["g_grid"])
    rows, summary, extra = [], [], []
    for run in runs:
        for layer, E in run.energies.items():
            for step in range(E.shape[0]):
                for k in range(E.shape[1]):
                    rows.append({"g": run.g, "layer": layer, "step": step, "mode": k + 1,
                                 "energy": E[step, k]})
            summary.append({"g": run.g, "layer": layer, "lead_mean": run.lead_mean[layer],
                            "trail_mean": run.trail_mean[layer], "gint": run.gint[layer],
                            "spread": run.spread[layer]})
        extra.append({"g": run.g, "tau_spec": run.tau_spec, "flags": run.flags,
                      "lead_std": run.lead_std, "trail_std": run.trail_std})
    em.write_csv("protocol2.csv", rows)
    em.write_csv("protocol2_summary.csv", summary)
    em.write_json("protocol2_summary.json", {"bands": bands, "runs": extra})


def cmd_calibrate(cfg, em):
    sched = make_vp_schedule(cfg["steps"])
    cal = calibrate_decoder(DitConfig(rng_seed=cfg["seed"]), sched, default_mixture(),
                            n_samples=cfg["n_samples"], ridge=cfg["ridge"], rng_seed=cfg["seed"])
    cal.model.save(em.out / "model.json")
    em.register("model.json")
    em.write_json("calibration.json", {"r2_train": cal.r2_train, "r2_holdout": cal.r2_holdout,
                                       "condition_number": cal.condition_number})


COMMANDS = {
    "simulate-ou": cmd_simulate_ou,
    "verify-linearization": cmd_verify_linearization,
    "bounds-check": cmd_bounds_check,
    "bifurcation": cmd_bifurcation,
    "protocol1": cmd_protocol1,
    "protocol2": cmd_protocol2,
    "calibrate": cmd_calibrate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = validate(args.command, resolve_config(args.command, args))
        needs_out = not (args.command == "bifurcation" and cfg["kappa"] is not None)
        if cfg["out"] is None and needs_out:
            parser.error(f"{args.command}: --out is required")
        em = Emitter(cfg["out"]) if cfg["out"] is not None else None
        COMMANDS[args.command](cfg, em)
    except ConfigValidationError as err:
        for problem in err.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except RegressionError as err:
        print(f"calibration failed: {err}", file=sys.stderr)
        return 1
    if em is not None:
        echo = {k: v for k, v in cfg.items() if k != "out"}
        em.finalize(args.command, echo, cfg["seed"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
