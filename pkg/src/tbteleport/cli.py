"""Command-line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure
(no herald, truncation overflow, non-converged fit, selftest breach).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import analytics as an
from .data_io import (
    ConfigError, RunConfig, load_config, parse_config, read_csv, render_csv, write_csv, write_timetags,
)
from .errors import DomainError, NoHeraldError, TruncationError, UndefinedVisibilityError
from .fitting import DataSeries, fit_noise_linear, fit_phase_modulator, fit_saturation, fit_visibility
from .fock import NoiseParams, teleport_oracle, tpqi_oracle
from .sequence import expected_histograms, run_teleport_experiment, run_tpqi_experiment
from .sources import CARDINAL_STATES, NvParams, WcsParams

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# Default physical parameters of the TPQI and teleportation runs.
TPQI_DEFAULTS = dict(p_nv=5.76e-4, g2=0.011, eta=0.895, p_noise=3.51e-7)
TELEPORT_DEFAULTS = dict(p_nv=4.5e-4, g2=0.011, eta=0.895, p_noise=5.5e-6, leak_epsilon=0.04)


class NumericalFailure(RuntimeError):
    pass


def _emit(table: dict, out: str | None) -> None:
    if out:
        write_csv(table, out)
    else:
        sys.stdout.write(render_csv(list(table), list(zip(*table.values()))))


def _x_grid(args) -> list[float]:
    if args.x:
        return list(args.x)
    return np.linspace(args.x_min, args.x_max, args.n).tolist()


def _add_x_grid(p: argparse.ArgumentParser, lo: float, hi: float, n: int) -> None:
    p.add_argument("--x", type=float, nargs="+", help="explicit flux ratios x = mu/p_nv")
    p.add_argument("--x-min", type=float, default=lo)
    p.add_argument("--x-max", type=float, default=hi)
    p.add_argument("--n", type=int, default=n, help="number of grid points")


def _add_physics(p: argparse.ArgumentParser, defaults: dict) -> None:
    p.add_argument("--config", help="YAML/JSON run config; explicit flags override it")
    p.add_argument("--p-nv", type=float, default=None, help=f"default {defaults['p_nv']}")
    p.add_argument("--g2", type=float, default=None, help=f"default {defaults['g2']}")
    p.add_argument("--eta", type=float, default=None, help=f"default {defaults['eta']}")
    p.add_argument("--p-noise", type=float, default=None, help=f"default {defaults['p_noise']}")
    if "leak_epsilon" in defaults:
        p.add_argument("--leak-epsilon", type=float, default=None, help=f"default {defaults['leak_epsilon']}")


def _resolve(args, defaults: dict, x_default: float | None = None) -> RunConfig:
    """Merge the optional config file, command-line flags and defaults into a RunConfig."""
    base = load_config(args.config).model_dump(exclude_none=True) if getattr(args, "config", None) else {}
    nv = dict(base.get("nv", {}))
    wcs = dict(base.get("wcs", {}))
    noise = dict(base.get("noise", {}))
    nv.setdefault("p_nv", defaults["p_nv"])
    nv.setdefault("g2", defaults["g2"])
    if args.p_nv is not None:
        nv["p_nv"] = args.p_nv
    if args.g2 is not None:
        nv["g2"] = args.g2
        nv.pop("p_de", None)
    noise.setdefault("p_noise", defaults["p_noise"])
    if args.p_noise is not None:
        noise["p_noise"] = args.p_noise
    wcs.setdefault("leak_epsilon", defaults.get("leak_epsilon", 0.0))
    if getattr(args, "leak_epsilon", None) is not None:
        wcs["leak_epsilon"] = args.leak_epsilon
    if getattr(args, "mu", None) is not None:
        wcs.pop("x", None)
        wcs["mu"] = args.mu
    elif getattr(args, "x_ratio", None) is not None:
        wcs.pop("mu", None)
        wcs["x"] = args.x_ratio
    elif "mu" not in wcs and "x" not in wcs:
        wcs["x"] = x_default if x_default is not None else 1.0
    merged = dict(base, nv=nv, wcs=wcs, noise=noise)
    merged["eta"] = args.eta if args.eta is not None else base.get("eta", defaults["eta"])
    seq = dict(base.get("sequence", {}))
    for k in ("cr_pass_prob", "teleport_attempt_cap"):
        v = getattr(args, k, None)
        if v is not None:
            seq[k] = v
    merged["sequence"] = seq
    if getattr(args, "seed", None) is not None:
        merged["seed"] = args.seed
    if getattr(args, "shots", None) is not None:
        merged["shots"] = args.shots
    if getattr(args, "no_correction", False):
        merged["correction"] = False
    return parse_config(json.dumps(merged), fmt="json", source="arguments")


# --- commands ----------------------------------------------------------------


def cmd_classical_bound(args) -> int:
    values = [an.classical_bound(mu) for mu in args.mu]
    if args.out:
        write_csv({"mu": list(args.mu), "F_max": values}, args.out)
    if len(values) == 1 and not args.out:
        print(f"{values[0]:.6f}")
    elif not args.out:
        for mu, f in zip(args.mu, values):
            print(f"{mu!r},{f:.6f}")
    return EXIT_OK


def _tpqi_p_nv(x: float, p_nv: float, mu_max: float | None) -> float:
    """Emission probability used at flux ratio x: p_nv, lowered if needed to keep mu <= mu_max."""
    return p_nv if mu_max is None else min(p_nv, mu_max / x) if x > 0 else p_nv


def cmd_visibility_curve(args) -> int:
    cfg = _resolve(args, TPQI_DEFAULTS)
    xs = _x_grid(args)
    cols = {k: [] for k in ("x", "p_nv", "mu", "eta", "V_analytic", "V_oracle", "abs_diff")}
    for x in xs:
        p = _tpqi_p_nv(x, cfg.nv.p_nv, args.mu_max)
        mu = x * p
        va = an.visibility_model(an.VisibilityParams(x, cfg.nv.g2, p, cfg.noise.p_noise, cfg.eta))
        cols["x"].append(x)
        cols["p_nv"].append(p)
        cols["mu"].append(mu)
        cols["eta"].append(cfg.eta)
        cols["V_analytic"].append(va)
        if args.no_oracle:
            vo = math.nan
        else:
            vo = tpqi_oracle(NvParams.from_g2(p, cfg.nv.g2), mu, cfg.eta, cfg.noise_params()).visibility
        cols["V_oracle"].append(vo)
        cols["abs_diff"].append(abs(va - vo))
    _emit(cols, args.out)
    return EXIT_OK


def cmd_teleport_fidelity(args) -> int:
    cfg = _resolve(args, TELEPORT_DEFAULTS)
    nv = cfg.nv_params()
    cols: dict[str, list] = {k: [] for k in ("x", "mu", "F_pole_model", "F_eq_model", "F_avg_model")}
    if not args.no_oracle:
        for s in CARDINAL_STATES:
            cols[f"F_{s}_oracle"] = []
        cols["F_avg_oracle"] = []
    cols["F_classical"] = []
    for x in _x_grid(args):
        mu = x * nv.p_nv
        params = an.TeleportModelParams(nv, WcsParams(mu, cfg.wcs.leak_epsilon), cfg.eta, cfg.noise.p_noise)
        m = an.fidelity_model(params)
        cols["x"].append(x)
        cols["mu"].append(mu)
        cols["F_pole_model"].append(m["+Z"])
        cols["F_eq_model"].append(m["+X"])
        cols["F_avg_model"].append(m["avg"])
        if not args.no_oracle:
            o = teleport_oracle(nv, params.wcs, cfg.eta, NoiseParams(cfg.noise.p_noise), correction=cfg.correction)
            for s, f in o.fidelities.items():
                cols[f"F_{s}_oracle"].append(math.nan if f is None else f)
            cols["F_avg_oracle"].append(math.nan if o.f_avg is None else o.f_avg)
        cols["F_classical"].append(an.classical_bound(mu) if mu > 0 else math.nan)
    _emit(cols, args.out)
    return EXIT_OK


def _require_seed(cfg: RunConfig) -> int:
    if cfg.seed is None:
        raise ConfigError(["seed: randomized commands need an explicit --seed (or 'seed' in the config)"], "arguments")
    return cfg.seed


def _out_path(cfg: RunConfig, args, name: str) -> Path:
    root = Path(args.out_dir) if args.out_dir else Path(cfg.output.dir)
    return root / f"{cfg.output.prefix}{name}"


def cmd_simulate_tpqi(args) -> int:
    cfg = _resolve(args, TPQI_DEFAULTS, x_default=1.19)
    seed = _require_seed(cfg)
    seq = cfg.sequence_config()
    shots = cfg.shots or 1_000_000
    eta_ind = 0.0 if args.force_distinguishable else cfg.eta
    run = run_tpqi_experiment(
        seq, cfg.nv_params(), cfg.mu, eta_ind, cfg.noise_params(), seed, shots,
        workers=args.workers, record_timetags=args.timetags or cfg.output.timetags,
    )
    e_ind, e_dis = expected_histograms(seq, run.window_probs, run.valid_repetitions)
    hist = {
        "delta": run.indistinguishable.deltas.tolist(),
        "indistinguishable": run.indistinguishable.counts.tolist(),
        "distinguishable": run.distinguishable.counts.tolist(),
        "dist_nv_window": run.distinguishable.by_window["nv"].tolist(),
        "dist_converted_window": run.distinguishable.by_window["converted"].tolist(),
        "dist_combined": run.distinguishable.by_window["combined"].tolist(),
        "expected_indistinguishable": e_ind.tolist(),
        "expected_distinguishable": e_dis.tolist(),
    }
    write_csv(hist, _out_path(cfg, args, "tpqi_histogram.csv"))
    summary = {
        "seed": [seed],
        "shots": [shots],
        "valid_repetitions": [run.valid_repetitions],
        "x": [cfg.mu / cfg.nv.p_nv],
        "eta": [eta_ind],
        "V_estimate": [run.visibility],
        "V_stderr": [run.visibility_stderr],
        "V_expected": [run.expected_visibility],
        "V_model": [an.visibility_model(an.VisibilityParams(cfg.mu / cfg.nv.p_nv, cfg.nv.g2, cfg.nv.p_nv, cfg.noise.p_noise, eta_ind))],
    }
    write_csv(summary, _out_path(cfg, args, "tpqi_summary.csv"))
    if run.timetags is not None:
        write_timetags(run.timetags, _out_path(cfg, args, "tpqi_timetags.csv"))
    if math.isnan(run.visibility):
        print("no data: no zero-delay coincidences in the distinguishable train")
    else:
        print(f"V = {run.visibility:.4f} +- {run.visibility_stderr:.4f} (expected {run.expected_visibility:.4f})")
    return EXIT_OK


def cmd_simulate_teleport(args) -> int:
    cfg = _resolve(args, TELEPORT_DEFAULTS, x_default=1.2)
    seed = _require_seed(cfg)
    run = run_teleport_experiment(
        cfg.sequence_config(), cfg.teleport_params(), seed, cfg.shots or 10**7,
        correction=cfg.correction, workers=args.workers,
    )
    cols: dict[str, list] = {k: [] for k in (
        "state", "episodes", "valid_episodes", "attempts", "heralds_psi_plus", "heralds_psi_minus",
        "R_ii", "R_ji", "F", "F_stderr", "F_expected",
    )}
    for label, t in run.states.items():
        cols["state"].append(label)
        cols["episodes"].append(t.episodes)
        cols["valid_episodes"].append(t.valid_episodes)
        cols["attempts"].append(t.attempts)
        cols["heralds_psi_plus"].append(t.heralds_plus)
        cols["heralds_psi_minus"].append(t.heralds_minus)
        cols["R_ii"].append(t.r_ii)
        cols["R_ji"].append(t.r_ji)
        cols["F"].append(t.fidelity if t.has_data else math.nan)
        cols["F_stderr"].append(t.fidelity_stderr if t.has_data else math.nan)
        cols["F_expected"].append(math.nan if t.expected_fidelity is None else t.expected_fidelity)
    write_csv(cols, _out_path(cfg, args, "teleport_states.csv"))
    if run.has_data:
        print(f"F_avg = {run.f_avg:.4f} +- {run.f_avg_stderr:.4f} (expected {run.expected_f_avg:.4f})")
    else:
        print("no data: at least one input state collected no heralds")
    return EXIT_OK


def _series(path: str, xcol: str, ycol: str) -> DataSeries:
    cols = read_csv(path)
    for c in (xcol, ycol):
        if c not in cols:
            raise ConfigError([f"{path}: missing column {c!r}"], path)
    return DataSeries(cols[xcol], cols[ycol], cols.get("sigma"))


def _fit_report(res, out: str | None) -> int:
    cols: dict[str, list] = {"name": [], "value": [], "stderr": []}
    err = res.stderr
    for k, v in res.params.items():
        cols["name"].append(k)
        cols["value"].append(v)
        cols["stderr"].append(err[k])
    for k, v in res.derived.items():
        if k.endswith("_err"):
            continue
        cols["name"].append(k)
        cols["value"].append(v)
        cols["stderr"].append(res.derived.get(f"{k}_err", math.nan))
    _emit(cols, out)
    if res.flags:
        print("flags: " + ",".join(sorted(res.flags)), file=sys.stderr)
    if not res.converged:
        raise NumericalFailure(f"fit did not converge: {res.message}")
    return EXIT_OK


def cmd_fit(args) -> int:
    if args.kind == "visibility":
        res = fit_visibility(_series(args.data, "x", "V"), args.g2, args.p_nv, args.p_noise)
    elif args.kind == "saturation":
        res = fit_saturation(_series(args.data, "power", "eta"))
    elif args.kind == "noise":
        res = fit_noise_linear(_series(args.data, "setting", "rate"))
    else:
        cols = read_csv(args.data)
        missing = [c for c in ("voltage", "cps1", "cps2") if c not in cols]
        if missing:
            raise ConfigError([f"{args.data}: missing column {c!r}" for c in missing], args.data)
        res = fit_phase_modulator(cols["voltage"], cols["cps1"], cols["cps2"], cols.get("sigma1"), cols.get("sigma2"))
    return _fit_report(res, args.out)


# Acceptance grids shared with the test-suite.
VIS_GRID_X = (0.25, 0.5, 1.0, 1.19, 2.0, 4.0)
VIS_GRID_ETA = (0.0, 0.5, 0.895, 1.0)
VIS_GRID_G2 = (0.0, 0.011)
VIS_TOL = 1e-3
TELEPORT_GRID_X = tuple(np.round(np.linspace(0.25, 4.0, 16), 6))
TELEPORT_TOL = 2e-3


def visibility_grid() -> list[tuple[float, float, float, float, float]]:
    """Rows (x, eta, g2, V_analytic, V_oracle) over the acceptance grid."""
    rows = []
    q = TPQI_DEFAULTS["p_noise"]
    for g2 in VIS_GRID_G2:
        for x in VIS_GRID_X:
            p = _tpqi_p_nv(x, TPQI_DEFAULTS["p_nv"], 1e-3)
            nv = NvParams.from_g2(p, g2)
            for eta in VIS_GRID_ETA:
                va = an.visibility_model(an.VisibilityParams(x, g2, p, q, eta))
                vo = tpqi_oracle(nv, x * p, eta, NoiseParams(q)).visibility
                rows.append((x, eta, g2, va, vo))
    return rows


def teleport_grid() -> list[tuple[float, str, float, float]]:
    """Rows (x, state, F_analytic, F_oracle) over the teleportation sweep."""
    d = TELEPORT_DEFAULTS
    nv = NvParams.from_g2(d["p_nv"], d["g2"])
    rows = []
    for x in TELEPORT_GRID_X:
        wcs = WcsParams(float(x) * d["p_nv"], d["leak_epsilon"])
        m = an.fidelity_model(an.TeleportModelParams(nv, wcs, d["eta"], d["p_noise"]))
        o = teleport_oracle(nv, wcs, d["eta"], NoiseParams(d["p_noise"]))
        for s, f in o.fidelities.items():
            rows.append((float(x), s, m[s], f))
        rows.append((float(x), "avg", m["avg"], o.f_avg))
    return rows


def cmd_selftest(args) -> int:
    t0 = time.perf_counter()
    failures = 0
    worst = max(abs(va - vo) for *_, va, vo in visibility_grid())
    ok = worst <= VIS_TOL
    failures += not ok
    print(f"[{'PASS' if ok else 'FAIL'}] visibility analytic vs oracle: max |dV| = {worst:.2e} (tol {VIS_TOL:g})")
    worst = max(abs(fa - fo) for _, _, fa, fo in teleport_grid())
    ok = worst <= TELEPORT_TOL
    failures += not ok
    print(f"[{'PASS' if ok else 'FAIL'}] teleport fidelity analytic vs oracle: max |dF| = {worst:.2e} (tol {TELEPORT_TOL:g})")
    fb = an.classical_bound(6.5e-4)
    ok = f"{fb:.6f}" == "0.666694" and abs(an.classical_bound(1e-12) - 2 / 3) < 1e-9
    failures += not ok
    print(f"[{'PASS' if ok else 'FAIL'}] classical bound: F_max(6.5e-4) = {fb:.6f}")
    print(f"selftest finished in {time.perf_counter() - t0:.1f} s, {failures} failure(s)")
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


# --- parser ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tbteleport", description="Time-bin teleportation models, oracle and simulations.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("classical-bound", help="maximal classical fidelity for Poissonian input")
    p.add_argument("--mu", type=float, nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_classical_bound)

    p = sub.add_parser("visibility-curve", help="TPQI visibility versus x, model and oracle")
    _add_physics(p, TPQI_DEFAULTS)
    _add_x_grid(p, 0.1, 4.0, 40)
    p.add_argument("--mu-max", type=float, default=None, help="lower p_nv where needed so that mu <= mu_max")
    p.add_argument("--no-oracle", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_visibility_curve)

    p = sub.add_parser("teleport-fidelity", help="teleportation fidelity per state and average versus x")
    _add_physics(p, TELEPORT_DEFAULTS)
    _add_x_grid(p, 0.25, 4.0, 16)
    p.add_argument("--no-oracle", action="store_true")
    p.add_argument("--no-correction", action="store_true", help="oracle without feedforward")
    p.add_argument("--out")
    p.set_defaults(func=cmd_teleport_fidelity)

    for name, defaults, func in (
        ("simulate-tpqi", TPQI_DEFAULTS, cmd_simulate_tpqi),
        ("simulate-teleport", TELEPORT_DEFAULTS, cmd_simulate_teleport),
    ):
        p = sub.add_parser(name, help="Monte Carlo run of the experiment sequence")
        _add_physics(p, defaults)
        g = p.add_mutually_exclusive_group()
        g.add_argument("--mu", type=float)
        g.add_argument("--x-ratio", type=float, help="x = mu / p_nv")
        p.add_argument("--seed", type=int)
        p.add_argument("--shots", type=int)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--cr-pass-prob", dest="cr_pass_prob", type=float)
        p.add_argument("--out-dir")
        if name == "simulate-tpqi":
            p.add_argument("--timetags", action="store_true", help="also export raw timetags")
            p.add_argument("--force-distinguishable", action="store_true", help="eta = 0 in both trains")
        else:
            p.add_argument("--attempt-cap", dest="teleport_attempt_cap", type=int)
            p.add_argument("--no-correction", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("fit", help="fit measured data")
    p.add_argument("kind", choices=("visibility", "saturation", "pm", "noise"))
    p.add_argument("--data", required=True, help="input CSV, see docs/formats.md")
    p.add_argument("--g2", type=float, default=TPQI_DEFAULTS["g2"])
    p.add_argument("--p-nv", type=float, default=TPQI_DEFAULTS["p_nv"])
    p.add_argument("--p-noise", type=float, default=0.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("selftest", help="oracle versus analytic acceptance grid")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    func: Callable = args.func
    try:
        return func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NoHeraldError, TruncationError, UndefinedVisibilityError, NumericalFailure, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
