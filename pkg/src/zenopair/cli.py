"""Command-line front end.

Configuration is an INI file with sections ``physical``, ``ramp``,
``numerics``, ``output`` and ``ensemble``; frequencies are ordinary
frequencies (Hz, Hz/ms) and times are in ms.  Command-line flags override
file values.  Every command writes its data files plus a JSON summary
``<command>_summary.json`` to the output directory.

Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure,
3 failed ``--check``.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import math
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .adiabatic import adiabatic_vs_exact, transport_integrals
from .dynamics import (
    GG_STATE,
    IntegrationError,
    METHOD,
    RampProtocol,
    evolve_lindblad,
    evolve_nonhermitian,
    evolve_trajectories,
    prepared_state_lifetime,
    pure_density,
)
from .experiment import (
    Check,
    Dataset,
    EnsembleModel,
    FitError,
    figure1_pipeline,
    figure2_pipeline,
    figure3_pipeline,
    figure4_pipeline,
    fit_decay,
)
from .hamiltonian import (
    PQ_CONVENTIONS,
    NOMINAL_GAMMA_RATIO,
    NOMINAL_U_EE_RATIO,
    NOMINAL_U_EG_RATIO,
    NOMINAL_U_GG_HZ,
    PairParams,
    hz,
    to_hz,
)
from .spectrum import BranchTrackingError, NearExceptionalPointWarning, sweep_spectrum

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_CHECK = 0, 1, 2, 3
METHODS = ("nh", "lindblad", "mc")
FIGURES = ("fig1", "fig2", "fig3", "fig4")


class UsageError(Exception):
    pass


class NumericalError(Exception):
    pass


# name -> (type, default); "" means unset for optional values
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "physical": {
        "u_gg_hz": (float, NOMINAL_U_GG_HZ),
        "u_eg_hz": (float, NOMINAL_U_EG_RATIO * NOMINAL_U_GG_HZ),
        "u_ee_hz": (float, NOMINAL_U_EE_RATIO * NOMINAL_U_GG_HZ),
        "gamma_ee_hz": (float, NOMINAL_GAMMA_RATIO * NOMINAL_U_GG_HZ),
        "omega_hz": (float, 150.0),
        "pq_convention": (str, "main_text"),
    },
    "ramp": {
        "delta_i_hz": (float, 1500.0),
        "delta_f_hz": (float, -1500.0),
        "delta_dot_hz_per_ms": (float, 11.1),
        "t_omega_ms": (str, ""),
        "t_hold_ms": (float, 0.0),
        "omega_ramp_shape": (str, "linear"),
    },
    "numerics": {
        "rtol": (float, 1e-9),
        "atol": (float, 1e-12),
        "method": (str, METHOD),
        "quad_rtol": (float, 1e-8),
        "fd_step": (float, 1e-4),
        "grid_min_hz": (float, -1500.0),
        "grid_max_hz": (float, 1500.0),
        "grid_points": (int, 601),
        "final_grid_hz": (str, ""),
        "time_samples": (int, 201),
        "n_traj": (int, 10000),
        "seed": (int, 7),
    },
    "output": {
        "directory": (str, "out"),
        "format": (str, "csv"),
        "precision": (int, 12),
    },
    "ensemble": {
        "n1": (float, 1000.0),
        "n2": (float, 1000.0),
        "eta_rp": (float, 0.8),
        "noise": (float, 0.0),
    },
}


@dataclass
class RunConfig:
    """Resolved configuration; ``values[section][key]`` holds typed values."""

    values: dict

    def __getitem__(self, section):
        return self.values[section]

    @property
    def params(self) -> PairParams:
        ph = self["physical"]
        return PairParams(
            u_gg=hz(ph["u_gg_hz"]),
            u_eg=hz(ph["u_eg_hz"]),
            u_ee=hz(ph["u_ee_hz"]),
            gamma_ee=hz(ph["gamma_ee_hz"]),
            omega=hz(ph["omega_hz"]),
            pq_convention=ph["pq_convention"],
        )

    def ramp(self, delta_f_hz: float | None = None, delta_i_hz: float | None = None) -> RampProtocol:
        rp = self["ramp"]
        d_i = hz(rp["delta_i_hz"] if delta_i_hz is None else delta_i_hz)
        d_f = hz(rp["delta_f_hz"] if delta_f_hz is None else delta_f_hz)
        speed = hz(rp["delta_dot_hz_per_ms"] * 1e3)
        omega = hz(self["physical"]["omega_hz"])
        t_hold = rp["t_hold_ms"] * 1e-3
        shape = rp["omega_ramp_shape"]
        if rp["t_omega_ms"] == "":
            return RampProtocol.two_leg(d_i, d_f, speed, omega, t_hold, shape)
        span = d_f - d_i
        delta_dot = math.copysign(speed, span) if span != 0 else speed
        return RampProtocol(d_i, d_f, delta_dot, omega, float(rp["t_omega_ms"]) * 1e-3, t_hold,
                            shape)

    @property
    def model(self) -> EnsembleModel:
        en = self["ensemble"]
        return EnsembleModel(en["n1"], en["n2"], en["eta_rp"])

    def detuning_grid(self) -> np.ndarray:
        nm = self["numerics"]
        if nm["grid_points"] < 1:
            raise UsageError("detuning grid is empty (grid_points < 1)")
        return hz(np.linspace(nm["grid_min_hz"], nm["grid_max_hz"], nm["grid_points"]))

    def final_grid(self) -> np.ndarray | None:
        raw = self["numerics"]["final_grid_hz"].strip()
        if not raw:
            return None
        try:
            vals = [float(v) for v in raw.replace(";", ",").split(",") if v.strip()]
        except ValueError as exc:
            raise UsageError(f"final_grid_hz: {exc}") from None
        if not vals:
            raise UsageError("final_grid_hz is empty")
        return hz(np.array(vals))

    def to_ini(self, provenance: bool = False) -> str:
        cp = configparser.ConfigParser()
        for sec, items in self.as_dict(provenance).items():
            cp[sec] = {k: _fmt_value(v) for k, v in items.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue().strip() + "\n"

    def as_dict(self, provenance: bool = False) -> dict:
        """Plain copy; ``provenance`` drops the output directory so files do
        not depend on where they are written."""
        out = {sec: dict(items) for sec, items in self.values.items()}
        if provenance:
            out["output"].pop("directory")
        return out


def _fmt_value(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _convert(section: str, key: str, raw: str):
    typ, _ = SCHEMA[section][key]
    try:
        if typ is float:
            val = float(raw)
            if not math.isfinite(val):
                raise ValueError("must be finite")
            return val
        if typ is int:
            return int(raw)
        return raw.strip()
    except ValueError as exc:
        raise UsageError(f"[{section}] {key} = {raw!r}: {exc}") from None


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the INI file, then ``overrides[(section, key)]``.

    Unknown sections or keys are rejected; the result is validated by
    building the parameter, ramp and ensemble objects.
    """
    values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise UsageError(f"malformed config {path}: {exc}") from None
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise UsageError(f"unknown config section [{sec}]")
            for key, raw in cp[sec].items():
                if key not in SCHEMA[sec]:
                    raise UsageError(f"unknown key {key!r} in section [{sec}]")
                values[sec][key] = _convert(sec, key, raw)
    for (sec, key), raw in (overrides or {}).items():
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise UsageError(f"unknown setting {sec}.{key}")
        values[sec][key] = raw if not isinstance(raw, str) else _convert(sec, key, raw)
    cfg = RunConfig(values)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg["physical"]["pq_convention"] not in PQ_CONVENTIONS:
        raise UsageError(f"pq_convention must be one of {PQ_CONVENTIONS}")
    if cfg["output"]["format"] not in ("csv", "json"):
        raise UsageError("output format must be csv or json")
    if cfg["output"]["precision"] < 1:
        raise UsageError("output precision must be positive")
    nm = cfg["numerics"]
    if nm["rtol"] <= 0 or nm["atol"] <= 0:
        raise UsageError("integrator tolerances must be positive")
    if nm["n_traj"] < 1 or nm["time_samples"] < 2:
        raise UsageError("n_traj must be >= 1 and time_samples >= 2")
    if cfg["ramp"]["delta_dot_hz_per_ms"] <= 0:
        raise UsageError("delta_dot_hz_per_ms must be positive (the sign follows the sweep)")
    try:
        cfg.params
        cfg.ramp()
        cfg.model
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- output ---------------------------------------------------------------


def _header(cfg: RunConfig, command: str) -> str:
    lines = [f"zenopair {__version__}", f"command: {command}"]
    lines += cfg.to_ini(provenance=True).splitlines()
    return "".join(f"# {ln}\n" for ln in lines)


def _check_finite(ds: Dataset) -> None:
    for key, col in ds.columns.items():
        if not np.all(np.isfinite(col)):
            bad = int(np.argmax(~np.isfinite(col)))
            raise NumericalError(f"non-finite value in {ds.name}:{key} at row {bad}")


def _format_table(ds: Dataset, precision: int) -> str:
    keys = list(ds.columns)
    cols = [ds.columns[k] for k in keys]
    out = [",".join(keys)]
    fmt = f"{{:.{precision}g}}"
    for i in range(ds.n_rows):
        out.append(",".join(fmt.format(float(c[i])) for c in cols))
    return "\n".join(out) + "\n"


class Writer:
    """Collects outputs and writes them once, in order, after the run."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.outdir = Path(cfg["output"]["directory"])
        self.files: list[tuple[str, str]] = []

    def add(self, ds: Dataset, stem: str) -> None:
        _check_finite(ds)
        fmt = self.cfg["output"]["format"]
        prec = self.cfg["output"]["precision"]
        if fmt == "csv":
            text = _header(self.cfg, self.command) + _format_table(ds, prec)
            self.files.append((f"{stem}.csv", text))
        else:
            payload = {
                "version": __version__,
                "command": self.command,
                "config": self.cfg.as_dict(provenance=True),
                "meta": ds.meta,
                "columns": {k: [float(f"{v:.{prec}g}") for v in c] for k, c in ds.columns.items()},
            }
            self.files.append((f"{stem}.json", json.dumps(payload, indent=1, sort_keys=True) + "\n"))

    def summary(self, metrics: dict, checks: list[Check], notes: list[str]) -> dict:
        doc = {
            "command": self.command,
            "version": __version__,
            "config": self.cfg.as_dict(provenance=True),
            "metrics": _jsonable(metrics),
            "checks": [c.as_dict() for c in checks],
            "warnings": notes,
        }
        self.files.append((f"{self.command}_summary.json",
                           json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"))
        return doc

    def flush(self) -> list[Path]:
        try:
            self.outdir.mkdir(parents=True, exist_ok=True)
            paths = []
            for name, text in self.files:
                p = self.outdir / name
                p.write_text(text, encoding="utf-8")
                paths.append(p)
        except OSError as exc:
            raise UsageError(f"cannot write to {self.outdir}: {exc.strerror or exc}") from None
        return paths


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if not math.isfinite(v):
            raise NumericalError(f"non-finite metric value {v}")
        return v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# -- commands -------------------------------------------------------------


def cmd_spectrum(cfg: RunConfig, args, out: Writer):
    params = cfg.params
    d = cfg.detuning_grid()
    res = figure1_pipeline(params, (args.strong_ratio, args.omega_ratio), d)
    for name, ds in res.datasets.items():
        out.add(ds, f"spectrum_{name}")
    return res.metrics, res.checks


def cmd_sweep(cfg: RunConfig, args, out: Writer):
    params = cfg.params
    d = cfg.detuning_grid()
    sw = sweep_spectrum(params, d)
    n = d.size
    pops = sw.populations
    cols = {
        "delta_hz": np.repeat(to_hz(d), 3),
        "branch_id": np.tile(np.arange(3.0), n),
        "epsilon_hz": to_hz(sw.epsilon).reshape(-1),
        "gamma_hz": to_hz(sw.gamma).reshape(-1),
        "c_gg2": pops[:, :, 0].reshape(-1),
        "c_eg2": pops[:, :, 1].reshape(-1),
        "c_ee2": pops[:, :, 2].reshape(-1),
    }
    out.add(Dataset("sweep", cols), "sweep")
    metrics = {"points": n, "near_ep_points": int(sw.near_ep.sum()),
               "max_sum_rule_error": float(np.max(np.abs(sw.gamma.sum(axis=1) - params.gamma_ee)))}
    return metrics, []


def _time_grid(cfg: RunConfig, ramp: RampProtocol) -> np.ndarray:
    return np.linspace(0.0, ramp.duration, cfg["numerics"]["time_samples"])


def cmd_evolve(cfg: RunConfig, args, out: Writer):
    params = cfg.params
    ramp = cfg.ramp()
    if ramp.duration <= 0:
        raise UsageError("ramp has zero duration")
    nm = cfg["numerics"]
    times = _time_grid(cfg, ramp)
    base = {
        "t_s": times,
        "delta_hz": to_hz(np.array([ramp.delta_at(t) for t in times])),
        "omega_hz": to_hz(np.array([ramp.omega_at(t) for t in times])),
    }
    kw = dict(rtol=nm["rtol"], atol=nm["atol"], method=nm["method"])
    metrics = {"method": args.method, "duration_s": ramp.duration}
    if args.method == "nh":
        res = evolve_nonhermitian(params, ramp, GG_STATE, times, **kw)
        pops = res.populations
        cols = dict(base, p_gg=pops[:, 0], p_eg=pops[:, 1], p_ee=pops[:, 2], norm2=res.norm2)
        metrics["final_norm2"] = float(res.norm2[-1])
    elif args.method == "lindblad":
        res = evolve_lindblad(params, ramp, pure_density(GG_STATE), times, **kw)
        pops = res.populations
        cols = dict(base, p_gg=pops[:, 0], p_eg=pops[:, 1], p_ee=pops[:, 2],
                    vacuum=res.vacuum, norm2=res.pair_trace)
        metrics["final_norm2"] = float(res.pair_trace[-1])
        metrics["max_trace_error"] = float(np.max(np.abs(res.trace - 1.0)))
    else:
        res = evolve_trajectories(params, ramp, GG_STATE, times, nm["n_traj"], nm["seed"], **kw)
        pops = res.populations
        cols = dict(base, p_gg=pops[:, 0], p_eg=pops[:, 1], p_ee=pops[:, 2],
                    norm2=res.survival_fraction, survival_stderr=res.survival_stderr)
        metrics.update(final_norm2=float(res.survival_fraction[-1]), n_traj=res.n_traj,
                       seed=nm["seed"])
    out.add(Dataset(f"evolve_{args.method}", cols), f"evolve_{args.method}")
    return metrics, []


def cmd_transport(cfg: RunConfig, args, out: Writer):
    params = cfg.params
    ramp = cfg.ramp().with_hold(0.0)
    nm = cfg["numerics"]
    rep = transport_integrals(params, ramp, args.alpha, rtol=nm["quad_rtol"], step=nm["fd_step"])
    s = rep.samples
    cols = {
        "leg": (s.leg == "detuning").astype(float),
        "x": s.s,
        "t_s": s.time,
        "delta_hz": to_hz(s.delta),
        "omega_hz": to_hz(s.omega),
        "gamma_hz": to_hz(s.gamma[:, args.alpha]),
        "ReB": s.berry[:, args.alpha].real,
        "ImB": s.berry[:, args.alpha].imag,
        "running_kappa": s.running_kappa[:, args.alpha],
    }
    for b in range(3):
        if b != args.alpha:
            m = rep.margin[:, b]
            cols[f"margin_{b}"] = np.where(np.isfinite(m), m, 0.0)
    out.add(Dataset("transport", cols), "transport")
    metrics = {
        "alpha": args.alpha,
        "phi": rep.phi,
        "kappa": rep.kappa,
        "kappa_dissipative": rep.kappa_dissipative,
        "kappa_geometric": rep.kappa_geometric,
        "survival": rep.survival,
        "max_margin": rep.max_margin,
    }
    checks = []
    if args.compare:
        cmp_ = adiabatic_vs_exact(params, ramp, args.alpha, report=rep)
        metrics.update(p_s_exact=cmp_.p_s_exact, fidelity=cmp_.fidelity,
                       ratio_error=cmp_.ratio_error)
        checks.append(Check("exact_vs_transport", abs(cmp_.ratio_error) <= 0.05,
                            abs(cmp_.ratio_error), 0.05))
    return metrics, checks


def cmd_lifetime(cfg: RunConfig, args, out: Writer):
    params = cfg.params
    ramp = cfg.ramp()
    if ramp.t_hold <= 0:
        raise UsageError("lifetime needs a positive [ramp] t_hold_ms")
    nm = cfg["numerics"]
    fit = prepared_state_lifetime(params, ramp, n_samples=nm["time_samples"], rtol=nm["rtol"],
                                  atol=nm["atol"], method=nm["method"])
    out.add(Dataset("lifetime", {"t_hold_s": fit.hold_times, "norm2": fit.norm2}), "lifetime")
    metrics = {"gamma_per_s": fit.gamma, "gamma_stderr": fit.gamma_stderr,
               "gamma_hz": to_hz(fit.gamma), "log_residual_rms": fit.log_residual_rms,
               "non_exponential": fit.non_exponential}
    return metrics, []


def _read_table(path: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, encoding="utf-8") as fh:
            # genfromtxt would take column names from a leading comment line
            lines = [ln for ln in fh if not ln.lstrip().startswith("#")]
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        data = np.genfromtxt(lines, delimiter=",", names=True)
    except ValueError as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from None
    names = data.dtype.names or ()
    tkey = next((n for n in names if n in ("t", "t_s", "t_hold_s", "time")), None)
    ckey = next((n for n in names if n in ("counts", "n", "n_total_detected", "N_total")), None)
    if tkey is None or ckey is None:
        raise UsageError(f"{path}: need a time column (t, t_s, t_hold_s) and a counts column")
    return np.atleast_1d(data[tkey]), np.atleast_1d(data[ckey])


def cmd_fit(cfg: RunConfig, args, out: Writer):
    t, c = _read_table(args.input)
    try:
        fit = fit_decay(t, c)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out.add(Dataset("fit", {"t_s": t, "counts": c, "model": fit(t)}), "fit")
    err = fit.stderr
    metrics = {"f1": fit.f1, "f2": fit.f2, "gamma": fit.gamma,
               "f1_stderr": _finite_or_none(err[0]), "f2_stderr": _finite_or_none(err[1]),
               "gamma_stderr": _finite_or_none(err[2]),
               "no_decay_resolved": fit.no_decay_resolved, "degenerate": fit.degenerate}
    return metrics, []


def _finite_or_none(v):
    return float(v) if math.isfinite(v) else None


def cmd_figures(cfg: RunConfig, args, out: Writer):
    params = cfg.params
    jobs = args.jobs
    grid = cfg.final_grid()
    d_i = hz(abs(cfg["ramp"]["delta_i_hz"]))
    speed = hz(cfg["ramp"]["delta_dot_hz_per_ms"] * 1e3)
    en = cfg["ensemble"]
    if args.which == "fig1":
        res = figure1_pipeline(params, (args.strong_ratio, args.omega_ratio), cfg.detuning_grid())
    elif args.which == "fig2":
        res = figure2_pipeline(cfg.model, params, delta_i=d_i, speed=speed,
                               delta_f=hz(args.delta_f) if args.delta_f is not None else hz(650.0),
                               noise=en["noise"], seed=cfg["numerics"]["seed"])
    elif args.which == "fig3":
        res = figure3_pipeline(params, grid, speed=speed, delta_start=d_i, jobs=jobs,
                               method=cfg["numerics"]["method"])
    else:
        res = figure4_pipeline(cfg.model, params, grid, delta_i=d_i, speed=speed,
                               noise=en["noise"], seed=cfg["numerics"]["seed"], jobs=jobs,
                               method=cfg["numerics"]["method"])
    for name, ds in res.datasets.items():
        out.add(ds, f"{args.which}_{name}")
    return res.metrics, res.checks


COMMANDS = {
    "spectrum": cmd_spectrum,
    "sweep": cmd_sweep,
    "evolve": cmd_evolve,
    "transport": cmd_transport,
    "lifetime": cmd_lifetime,
    "fit": cmd_fit,
    "figures": cmd_figures,
}


# -- argument parsing -----------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# flag dest -> config (section, key)
FLAG_KEYS = {
    "output_dir": ("output", "directory"),
    "format": ("output", "format"),
    "precision": ("output", "precision"),
    "omega_hz": ("physical", "omega_hz"),
    "gamma_ee_hz": ("physical", "gamma_ee_hz"),
    "pq_convention": ("physical", "pq_convention"),
    "delta_i_hz": ("ramp", "delta_i_hz"),
    "delta_f_hz": ("ramp", "delta_f_hz"),
    "delta_dot": ("ramp", "delta_dot_hz_per_ms"),
    "t_hold_ms": ("ramp", "t_hold_ms"),
    "grid_points": ("numerics", "grid_points"),
    "grid_min_hz": ("numerics", "grid_min_hz"),
    "grid_max_hz": ("numerics", "grid_max_hz"),
    "final_grid_hz": ("numerics", "final_grid_hz"),
    "n_traj": ("numerics", "n_traj"),
    "seed": ("numerics", "seed"),
    "rtol": ("numerics", "rtol"),
    "atol": ("numerics", "atol"),
    "integrator": ("numerics", "method"),
    "time_samples": ("numerics", "time_samples"),
    "n1": ("ensemble", "n1"),
    "n2": ("ensemble", "n2"),
    "eta_rp": ("ensemble", "eta_rp"),
    "noise": ("ensemble", "noise"),
}


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="INI configuration file")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one configuration value (repeatable)")
    g.add_argument("--dump-config", action="store_true",
                   help="print the resolved configuration and exit")
    g.add_argument("-o", "--output-dir")
    g.add_argument("--format", choices=("csv", "json"))
    g.add_argument("--precision", type=int)
    g.add_argument("--jobs", type=int, default=1, help="worker threads for grid pipelines")
    g.add_argument("--omega-hz", type=float)
    g.add_argument("--gamma-ee-hz", type=float)
    g.add_argument("--pq-convention", choices=PQ_CONVENTIONS)
    g.add_argument("--delta-i-hz", type=float)
    g.add_argument("--delta-f-hz", type=float)
    g.add_argument("--delta-dot", type=float, help="sweep speed in Hz/ms")
    g.add_argument("--t-hold-ms", type=float)
    g.add_argument("--grid-points", type=int)
    g.add_argument("--grid-min-hz", type=float)
    g.add_argument("--grid-max-hz", type=float)
    g.add_argument("--final-grid-hz", help="comma-separated final detunings in Hz")
    g.add_argument("--rtol", type=float)
    g.add_argument("--atol", type=float)
    g.add_argument("--integrator", help="scipy solve_ivp method")
    g.add_argument("--time-samples", type=int)
    g.add_argument("--n1", type=float)
    g.add_argument("--n2", type=float)
    g.add_argument("--eta-rp", type=float)
    g.add_argument("--noise", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zenopair", description="Lossy atom-pair dynamics toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("spectrum", help="complex spectra for strong and Zeno drives")
    _common(p)
    p.add_argument("--omega-ratio", type=float, default=0.1, help="Zeno-regime Omega/Gamma_ee")
    p.add_argument("--strong-ratio", type=float, default=1.0, help="strong-drive Omega/Gamma_ee")

    p = sub.add_parser("sweep", help="branch-tracked spectrum at the configured Omega (long format)")
    _common(p)

    p = sub.add_parser("evolve", help="propagate |gg> along the configured ramp")
    _common(p)
    p.add_argument("--method", choices=METHODS, default="nh")
    p.add_argument("--n-traj", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("transport", help="quasi-adiabatic transport integrals")
    _common(p)
    p.add_argument("--alpha", type=int, choices=(0, 1, 2), default=0)
    p.add_argument("--compare", action="store_true", help="also propagate and compare")

    p = sub.add_parser("lifetime", help="decay rate of the prepared state during the hold")
    _common(p)

    p = sub.add_parser("fit", help="fit f1 + f2 exp(-gamma t) to a CSV table")
    _common(p)
    p.add_argument("input", help="CSV with a time column and a counts column")

    p = sub.add_parser("figures", help="figure pipelines")
    _common(p)
    p.add_argument("which", choices=FIGURES)
    p.add_argument("--check", action="store_true", help="exit 3 when a figure check fails")
    p.add_argument("--omega-ratio", type=float, default=0.1)
    p.add_argument("--strong-ratio", type=float, default=1.0)
    p.add_argument("--delta-f", type=float, default=None, help="fig2 final detuning in Hz")
    p.add_argument("--seed", type=int, help="seed for synthetic detection noise")
    return parser


def _overrides(args) -> dict:
    ov = {}
    for dest, key in FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            ov[key] = val
    for item in args.set:
        name, sep, raw = item.partition("=")
        sec, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        ov[(sec, key)] = raw
    return ov


def run(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be at least 1")
        cfg = load_config(args.config, _overrides(args))
        if args.dump_config:
            stdout.write(cfg.to_ini())
            return EXIT_OK
        out = Writer(cfg, args.command if args.command != "figures" else f"figures_{args.which}")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", NearExceptionalPointWarning)
            warnings.simplefilter("always", RuntimeWarning)
            metrics, checks = COMMANDS[args.command](cfg, args, out)
        notes = sorted({str(w.message) for w in caught})
        for note in notes:
            stderr.write(f"warning: {note}\n")
        doc = out.summary(metrics, checks, notes)
        paths = out.flush()
    except (UsageError, ValueError) as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except (NumericalError, IntegrationError, BranchTrackingError, FitError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERICAL
    for p in paths:
        stdout.write(f"{p}\n")
    failed = [c for c in checks if not c.passed]
    if getattr(args, "check", False):
        for c in checks:
            status = "PASS" if c.passed else "FAIL"
            stdout.write(f"{status} {c.name}: value={c.value:.6g} tolerance={c.tolerance:.6g}\n")
        if failed:
            return EXIT_CHECK
    return EXIT_OK


def main() -> None:
    sys.exit(run())
