"""Command-line entry point.

Every mode reads parameters from a preset, a TOML file and flags (flags win),
writes a comma-separated table plus a JSON manifest into ``--out`` and exits
with 0 on success, 2 on invalid input and 3 on a runtime failure.

Config file layout::

    mode = "simulate"          # optional; the subcommand wins

    [params]                   # either omega or B0, either g or feedback
    omega = 1.494
    g = 5.0
    r = 1.0

    [run]
    seed = 0
    out = "runs"
    workers = 1

    [simulate]                 # one table per mode, keys as in --help
    t_end = 200.0
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from ._io import atomic_write_json, atomic_write_text, format_table
from .model import DEFAULT_GAMMA_T2, DimensionlessParams

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUNTIME = 3

MODES = ("simulate", "fixed-points", "sweep", "ctc-trials", "noise-scan", "floquet", "lyapunov")

# (omega, g, r) under the default calibration of 0.3 rad/nT
MODE_HELP = {
    "simulate": "integrate one trajectory",
    "fixed-points": "list fixed points with eigenvalues and stability",
    "sweep": "phase diagram over an (omega, g) grid",
    "ctc-trials": "repeated kicked trials and circular phase statistics",
    "noise-scan": "oscillation frequency and amplitude under pump noise",
    "floquet": "periodic orbits and Floquet multipliers",
    "lyapunov": "largest Lyapunov exponent",
}

PRESETS = {
    "fig2c": (1.494, 5.0, 1.0),
    "fig2d": (1.494, 20.0, 1.0),
    "fig2e": (1.494, 40.0, 1.0),
    "fig3b": (1.956, 2.4, 1.0),
    "fig3c": (1.956, 13.4, 1.0),
    "fig3e": (1.494, 17.6, 1.0),
}

PARAM_KEYS = {"omega": float, "g": float, "r": float, "B0": float, "feedback": float, "gamma_T2": float}
RUN_DEFAULTS = {"seed": 0, "out": "runs", "workers": 1}

# mode -> key -> (type, default, help)
OPTIONS: dict[str, dict[str, tuple]] = {
    "simulate": {
        "t_end": (float, 100.0, "integration horizon in units of T2"),
        "dt": (float, 1e-3, "RK4 step"),
        "stride": (int, 10, "store every n-th step"),
        "integrator": (str, "rk4", "rk4 or dop853"),
        "tol": (float, 1e-8, "relative tolerance of dop853"),
        "kick": (float, 1e-6, "scale of the Gaussian kick off P0 (times r)"),
        "x0": (str, "", "explicit initial state 'px,py,pz' (overrides kick)"),
        "eta": (float, 0.0, "pump-noise RMS fraction"),
        "cutoff": (float, 0.17, "pump-noise bandwidth in 1/T2"),
    },
    "fixed-points": {},
    "sweep": {
        "grid": (str, "64x64", "cells as N_omega x N_g"),
        "omega_min": (float, 0.2, "lowest omega"),
        "omega_max": (float, 2.5, "highest omega"),
        "g_min": (float, 0.0, "lowest g"),
        "g_max": (float, 45.0, "highest g"),
        "n_init": (int, 3, "initial conditions per cell (P0 + random box)"),
        "checkpoint": (str, "", "row checkpoint file; resumed if present"),
        "t_transient": (float, 200.0, "transient discarded before analysis"),
        "t_analysis": (float, 100.0, "analysis window"),
    },
    "ctc-trials": {
        "trials": (int, 100, "number of trials"),
        "sigma_init": (float, 1e-6, "kick scale (times r)"),
        "horizon": (float, 400.0, "initial horizon; doubled until steady"),
        "max_horizon": (float, 6400.0, "largest horizon"),
        "window_periods": (int, 20, "periods in the phase-extraction window"),
        "profile": (bool, False, "record LC1/LC2 transient epochs"),
    },
    "noise-scan": {
        "bandwidths": (str, "0.05,0.17,1.7", "noise cutoffs in 1/T2"),
        "intensities": (str, "0.1,0.3,0.5", "noise RMS fractions"),
        "trials": (int, 10, "trials per cell"),
        "horizon": (float, 400.0, "horizon per trial"),
    },
    "floquet": {
        "t_transient": (float, 200.0, "transient before orbit search"),
        "t_search": (float, 500.0, "trajectory length scanned for close returns"),
        "dt": (float, 1e-3, "RK4 step"),
    },
    "lyapunov": {
        "t_transient": (float, 200.0, "transient before averaging"),
        "t_total": (float, 1000.0, "averaging time"),
        "dt": (float, 1e-3, "RK4 step"),
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str
    params: DimensionlessParams
    options: dict
    seed: int = 0
    out: Path = Path("runs")
    workers: int = 1
    preset: str | None = None
    source: dict = field(default_factory=dict)

    def resolved(self) -> dict:
        return {
            "mode": self.mode,
            "params": {"omega": self.params.omega, "g": self.params.g, "r": self.params.r},
            "options": dict(self.options),
            "seed": self.seed,
            "out": str(self.out),
            "workers": self.workers,
            "preset": self.preset,
        }


# ---------------------------------------------------------------------------
# Parsing

def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--seed", type=int, help=f"master seed (default: {RUN_DEFAULTS['seed']})")
    common.add_argument("--out", type=Path, help=f"output directory (default: {RUN_DEFAULTS['out']})")
    common.add_argument("--workers", type=int, help=f"worker processes (default: {RUN_DEFAULTS['workers']})")
    common.add_argument("--preset", choices=sorted(PRESETS), help="named (omega, g, r) point")
    common.add_argument("--omega", type=float, help="dimensionless Larmor frequency")
    common.add_argument("--g", type=float, help="dimensionless feedback gain")
    common.add_argument("--r", type=float, help="T1/T2 (default: 1.0)")
    common.add_argument("--B0", type=float, help="field in nT (alternative to --omega)")
    common.add_argument("--feedback", type=float, help="feedback factor (alternative to --g)")
    common.add_argument("--gamma-T2", dest="gamma_T2", type=float,
                        help=f"calibration in rad/nT (default: {DEFAULT_GAMMA_T2})")

    parser = argparse.ArgumentParser(prog="ctcsim", description="Feedback Bloch dynamics toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        sp = sub.add_parser(mode, parents=[common], help=MODE_HELP[mode])
        for key, (typ, default, text) in OPTIONS[mode].items():
            if typ is bool:
                sp.add_argument(_flag(key), dest=key, action=argparse.BooleanOptionalAction,
                                default=None, help=f"{text} (default: {default})")
            else:
                sp.add_argument(_flag(key), dest=key, type=typ, default=None, help=f"{text} (default: {default})")
    return parser


def _load_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _check_section(name: str, table, allowed) -> dict:
    if not isinstance(table, dict):
        raise ConfigError(f"{name}: expected a table")
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown key")
    return table


def _coerce(path: str, typ, value):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if typ is str and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string")
    if typ in (int, float, bool) and not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
        raise ConfigError(f"{path}: expected {typ.__name__}, got {value!r}")
    return value


def resolve_params(values: dict, preset: str | None) -> DimensionlessParams:
    if "B0" in values and "omega" in values:
        raise ConfigError("params: both B0 and omega given (ambiguous)")
    if "feedback" in values and "g" in values:
        raise ConfigError("params: both feedback and g given (ambiguous)")
    omega, g, r = PRESETS[preset] if preset else (None, None, 1.0)
    gamma_T2 = values.get("gamma_T2", DEFAULT_GAMMA_T2)
    if "B0" in values:
        omega = gamma_T2 * values["B0"]
    omega = values.get("omega", omega)
    g = values.get("feedback", values.get("g", g))
    r = values.get("r", r)
    if omega is None:
        raise ConfigError("params.omega: missing (give omega, B0 or --preset)")
    if g is None:
        raise ConfigError("params.g: missing (give g, feedback or --preset)")
    try:
        return DimensionlessParams(omega, g, r)
    except ValueError as exc:
        raise ConfigError(f"params: {exc}") from exc


def parse_config(argv=None) -> RunConfig:
    """Merge preset, config file and flags into a validated RunConfig."""
    parser = build_parser()
    ns = parser.parse_args(argv)
    mode = ns.mode
    file_cfg: dict = {}
    if ns.config is not None:
        file_cfg = _load_toml(ns.config)
        allowed = {"mode", "params", "run", *MODES}
        _check_section("config", file_cfg, allowed)
        if "mode" in file_cfg and file_cfg["mode"] not in MODES:
            raise ConfigError(f"mode: unknown mode {file_cfg['mode']!r}")
        for other in MODES:
            if other != mode and other in file_cfg:
                raise ConfigError(f"{other}: section does not apply to mode {mode!r}")

    params_in = dict(_check_section("params", file_cfg.get("params", {}), PARAM_KEYS))
    for key, typ in PARAM_KEYS.items():
        if key in params_in:
            params_in[key] = _coerce(f"params.{key}", typ, params_in[key])
        flag_value = getattr(ns, key)
        if flag_value is not None:
            params_in[key] = flag_value
    preset = ns.preset or file_cfg.get("run", {}).get("preset")
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"run.preset: unknown preset {preset!r}")

    run_in = _check_section("run", file_cfg.get("run", {}), {*RUN_DEFAULTS, "preset"})
    run = {}
    for key, default in RUN_DEFAULTS.items():
        value = run_in.get(key, default)
        if getattr(ns, key) is not None:
            value = getattr(ns, key)
        run[key] = value
    if not isinstance(run["seed"], int) or run["seed"] < 0:
        raise ConfigError("run.seed: expected a non-negative integer")
    if not isinstance(run["workers"], int) or run["workers"] < 1:
        raise ConfigError("run.workers: expected a positive integer")

    spec = OPTIONS[mode]
    opts_in = _check_section(mode, file_cfg.get(mode, {}), spec)
    options = {}
    for key, (typ, default, _) in spec.items():
        value = _coerce(f"{mode}.{key}", typ, opts_in[key]) if key in opts_in else default
        if getattr(ns, key) is not None:
            value = getattr(ns, key)
        options[key] = value

    return RunConfig(
        mode=mode,
        params=resolve_params(params_in, preset),
        options=options,
        seed=run["seed"],
        out=Path(run["out"]),
        workers=run["workers"],
        preset=preset,
        source={"config": str(ns.config) if ns.config else None, "argv": list(argv) if argv is not None else sys.argv[1:]},
    )


def _floats(path: str, text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"{path}: expected comma-separated numbers") from exc
    if not values:
        raise ConfigError(f"{path}: empty list")
    return values


# ---------------------------------------------------------------------------
# Modes

def _kick_state(cfg: RunConfig, scale: float) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    return np.array([0.0, 0.0, cfg.params.r]) + scale * cfg.params.r * rng.standard_normal(3)


def run_simulate(cfg: RunConfig):
    from .integrate import NoiseSpec, integrate_adaptive, integrate_fixed, trajectory_csv
    from .orbits import TooFewCrossings, estimate_period

    o = cfg.options
    if o["x0"]:
        x0 = np.array(_floats("simulate.x0", o["x0"]))
        if x0.size != 3:
            raise ConfigError("simulate.x0: expected three numbers")
    else:
        x0 = _kick_state(cfg, o["kick"])
    if o["integrator"] == "rk4":
        noise = NoiseSpec(o["eta"], o["cutoff"], cfg.seed) if o["eta"] > 0 else None
        traj = integrate_fixed(x0, cfg.params, dt=o["dt"], t_end=o["t_end"], noise=noise, stride=o["stride"])
    elif o["integrator"] == "dop853":
        traj = integrate_adaptive(x0, cfg.params, tol=o["tol"], t_end=o["t_end"], sample_dt=o["dt"] * o["stride"])
    else:
        raise ConfigError("simulate.integrator: expected 'rk4' or 'dop853'")
    summary = {"t_end": traj.t_end, "final_state": traj.final_state.tolist()}
    try:
        est = estimate_period(traj, tail_fraction=0.25)
        summary.update(period=est.period, return_residual=est.residual, closed=est.periodic)
    except TooFewCrossings:
        summary.update(period=None, return_residual=None, closed=False)
    return trajectory_csv(traj, cfg.params), summary


def run_fixed_points(cfg: RunConfig):
    from .equilibria import all_fixed_points, analytic_boundaries

    header = ("kind", "px", "py", "pz", "unstable_dim", "marginal",
              "re1", "im1", "re2", "im2", "re3", "im3")
    rows = []
    for fp in all_fixed_points(cfg.params):
        eig = [x for v in fp.eigenvalues for x in (float(v.real), float(v.imag))]
        rows.append((fp.kind, *map(float, fp.state), fp.unstable_dim, int(fp.marginal), *eig))
    b = analytic_boundaries(cfg.params.omega, cfg.params.r)
    summary = {"hopf": float(b.hopf[0]), "pitchfork": float(b.pitchfork[0]), "manifold_dim": float(b.manifold_dim[0])}
    return format_table(header, rows), summary


def run_sweep(cfg: RunConfig):
    from .orbits import DetectProtocol
    from .sweep import GridSpec, PhaseGrid, phase_diagram

    o = cfg.options
    try:
        n_w, n_g = (int(v) for v in o["grid"].lower().split("x"))
    except ValueError as exc:
        raise ConfigError("sweep.grid: expected NxM") from exc
    if n_w < 1 or n_g < 1:
        raise ConfigError("sweep.grid: sizes must be positive")
    try:
        spec = GridSpec(
            tuple(np.linspace(o["omega_min"], o["omega_max"], n_w)),
            tuple(np.linspace(o["g_min"], o["g_max"], n_g)),
            r=cfg.params.r,
            n_init=o["n_init"],
            master_seed=cfg.seed,
            protocol=DetectProtocol(t_transient=o["t_transient"], t_analysis=o["t_analysis"]),
        )
    except ValueError as exc:
        raise ConfigError(f"sweep: {exc}") from exc
    grid = phase_diagram(spec, workers=cfg.workers, checkpoint=o["checkpoint"] or None)
    return format_table(PhaseGrid.HEADER, grid.rows()), {"shape": list(spec.shape), "complete": grid.complete}


def run_ctc_trials(cfg: RunConfig):
    from .ctc import TrialProtocol, classify_ctc, run_trials, transient_diagnostics

    o = cfg.options
    protocol = TrialProtocol(horizon=o["horizon"], max_horizon=o["max_horizon"],
                             window_periods=o["window_periods"], profile=o["profile"])
    ens = run_trials(cfg.params, o["trials"], sigma_init=o["sigma_init"] * cfg.params.r,
                     master_seed=cfg.seed, protocol=protocol, workers=cfg.workers)
    diag = transient_diagnostics(ens) if o["profile"] else None
    verdict = classify_ctc(cfg.params, ens, transient_diag=diag)
    header = ("index", "seed", "status", "re", "im", "omega0", "amplitude", "transient_time", "epochs")
    rows = [("%d" % s.index, s.seed, "ok", *(s.to_record()[k] for k in header[3:])) for s in ens.samples]
    rows += [(f.index, f.seed, "failed", "", "", "", "", "", f.reason.replace(",", ";")) for f in ens.failures]
    rows.sort(key=lambda row: int(row[0]))
    return format_table(header, rows), verdict.to_record()


def run_noise_scan(cfg: RunConfig):
    from .ctc import NoiseTable, TrialProtocol, noise_robustness

    o = cfg.options
    try:
        table = noise_robustness(
            cfg.params,
            _floats("noise-scan.bandwidths", o["bandwidths"]),
            _floats("noise-scan.intensities", o["intensities"]),
            n_trials=o["trials"],
            master_seed=cfg.seed,
            protocol=TrialProtocol(horizon=o["horizon"]),
            workers=cfg.workers,
        )
    except ValueError as exc:
        raise ConfigError(f"noise-scan: {exc}") from exc
    return format_table(NoiseTable.HEADER, table.rows()), {"cells": len(table.cells)}


def run_floquet(cfg: RunConfig):
    from .integrate import integrate_fixed
    from .orbits import floquet_multipliers, orbits_from_returns

    o = cfg.options
    pre = integrate_fixed(_kick_state(cfg, 1e-6), cfg.params, dt=o["dt"], t_end=o["t_transient"])
    traj = integrate_fixed(pre.final_state, cfg.params, dt=o["dt"], t_end=o["t_search"], t0=pre.t_end, stride=5)
    orbits = orbits_from_returns(traj, cfg.params, h=o["dt"])
    header = ("orbit", "cycle_class", "period", "px", "pz", "stable", "weakly_unstable",
              "max_multiplier", "m1_re", "m1_im", "m2_re", "m2_im", "m3_re", "m3_im")
    rows = []
    for k, orb in enumerate(orbits):
        mult = floquet_multipliers(orb, cfg.params, h=o["dt"])
        flat = [x for m in mult for x in (float(m.real), float(m.imag))]
        rows.append((k, orb.cycle_class, orb.period, orb.anchor.px, orb.anchor.pz, int(orb.stable),
                     int(orb.weakly_unstable), orb.max_multiplier, *flat))
    return format_table(header, rows), {"orbits": len(rows)}


def run_lyapunov(cfg: RunConfig):
    from .integrate import integrate_fixed
    from .orbits import largest_lyapunov

    o = cfg.options
    pre = integrate_fixed(_kick_state(cfg, 1e-6), cfg.params, dt=o["dt"], t_end=o["t_transient"])
    lam = largest_lyapunov(cfg.params, pre.final_state, t_total=o["t_total"], dt=o["dt"])
    return format_table(("omega", "g", "r", "lyapunov"), [(*cfg.params.as_tuple(), lam)]), {"lyapunov": lam}


RUNNERS = {
    "simulate": run_simulate,
    "fixed-points": run_fixed_points,
    "sweep": run_sweep,
    "ctc-trials": run_ctc_trials,
    "noise-scan": run_noise_scan,
    "floquet": run_floquet,
    "lyapunov": run_lyapunov,
}


def run(cfg: RunConfig) -> tuple[Path, Path]:
    """Execute a resolved config; returns (table path, manifest path)."""
    start = time.perf_counter()
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    table, summary = RUNNERS[cfg.mode](cfg)
    stem = f"{cfg.mode}_{stamp}"
    table_path = atomic_write_text(cfg.out / f"{stem}.csv", table)
    manifest = {
        "mode": cfg.mode,
        "config": cfg.resolved(),
        "source": cfg.source,
        "version": __version__,
        "timestamp": stamp,
        "wall_time": time.perf_counter() - start,
        "outputs": [table_path.name],
        "summary": summary,
    }
    manifest_path = atomic_write_json(cfg.out / f"{stem}_manifest.json", manifest)
    return table_path, manifest_path


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"ctcsim: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # argparse
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        table_path, manifest_path = run(cfg)
    except ConfigError as exc:
        print(f"ctcsim: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"ctcsim: {cfg.mode} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(table_path)
    print(manifest_path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
