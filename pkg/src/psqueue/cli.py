"""Command-line front end: ``psqueue run|validate|compare <config.ini>``.

Configuration is a sectioned key=value file ([model], [policy], [numerics],
[run], [sim]); unknown sections or keys are rejected. Every run writes a JSON
report next to its CSV tables, also when the computation fails.

Exit codes: 0 success, 2 invalid configuration, 3 unstable model (rho >= 1)
for a stationary mode, 4 numerical or I/O failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .model import BatchArrivalSpec, ModelValidationError, QueueModel, ServiceSpec, validate_model
from .policies import constant_kernel, policy_from_name
from .simulator import SimConfig, limit_convergence_study, simulate_direct, simulate_grishechkin
from .transform import (KernelContext, invert_to_density, mean_sojourn, pmf_from_transform,
                        record_deviations, sojourn_transform, stationary_transform,
                        stationary_transform_picard, stationary_transform_theorem)

OUT_DIR_ENV = "PSQUEUE_OUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_UNSTABLE, EXIT_NUMERIC = 0, 2, 3, 4
MODES = ("transform", "density", "pmf", "simulate", "compare", "sojourn", "limit-study")
STATIONARY_MODES = ("transform", "density", "pmf", "compare", "sojourn")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration schema

def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.replace(";", ",").split(",") if x.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _opt(kind, default):
    return field(default=default, metadata={"parse": kind})


@dataclass(frozen=True)
class ModelSection:
    arrival_rate: float = _opt(float, 1.0)
    pgf: tuple = _opt(_floats, (0.0, 1.0))
    service_kind: str = _opt(str, "uniform")
    service_params: tuple = _opt(_floats, (0.0, 2.0))
    service_probs: tuple = _opt(_floats, ())


@dataclass(frozen=True)
class PolicySection:
    kind: str = _opt(str, "eps")
    N: int = _opt(int, 1)
    weights: tuple = _opt(_floats, (1.0,))
    probs: tuple = _opt(_floats, (1.0,))
    variant: str = _opt(str, "residual")
    level: float = _opt(float, 0.0)


@dataclass(frozen=True)
class NumericsSection:
    talbot_order_outer: int = _opt(int, 24)
    talbot_order_inner: int = _opt(int, 24)
    quad_tol: float = _opt(float, 1e-10)
    picard_tol: float = _opt(float, 1e-10)
    t_max_time: float = _opt(float, 0.0)
    step_time: float = _opt(float, 0.0)
    pipeline: str = _opt(str, "picard")
    memory_form: str = _opt(str, "reduced")
    richardson: bool = _opt(_bool, True)
    cross_check_closed_forms: bool = _opt(_bool, False)


@dataclass(frozen=True)
class RunSection:
    mode: str = _opt(str, "transform")
    u_points: tuple = _opt(_floats, (0.0, 1.0))
    s_points: tuple = _opt(_floats, (1.0,))
    k_max: int = _opt(int, 20)
    ell_time: float = _opt(float, 1.0)
    family: str = _opt(str, "fb")
    n_list: tuple = _opt(_ints, (1, 4, 16))


@dataclass(frozen=True)
class SimSection:
    horizon_time: float = _opt(float, 1e4)
    warmup_time: float = _opt(float, 100.0)
    replications: int = _opt(int, 8)
    seed: int = _opt(int, 0)
    integrator: str = _opt(str, "time_change")


_SECTIONS = {"model": ModelSection, "policy": PolicySection, "numerics": NumericsSection,
             "run": RunSection, "sim": SimSection}


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    policy: PolicySection = field(default_factory=PolicySection)
    numerics: NumericsSection = field(default_factory=NumericsSection)
    run: RunSection = field(default_factory=RunSection)
    sim: SimSection = field(default_factory=SimSection)
    present: tuple = ()


def parse_config(text: str) -> RunConfig:
    """Parse and type-check a configuration; raises ConfigError naming the field."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable configuration: {exc}") from exc
    parts = {}
    for name in cp.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        cls = _SECTIONS[name]
        known = {f.name: f for f in fields(cls)}
        values = {}
        for key, raw in cp.items(name):
            if key not in known:
                raise ConfigError(f"unknown key {name}.{key}")
            try:
                values[key] = known[key].metadata["parse"](raw)
            except ValueError as exc:
                raise ConfigError(f"{name}.{key}: cannot parse {raw!r} ({exc})") from exc
        parts[name] = cls(**values)
    for required in ("model", "run"):
        if required not in parts:
            raise ConfigError(f"missing section [{required}]")
    mode = parts["run"].mode
    if mode not in MODES:
        raise ConfigError(f"run.mode must be one of {', '.join(MODES)}, got {mode!r}")
    if mode in ("simulate", "compare", "limit-study") and "sim" not in parts:
        raise ConfigError(f"mode {mode} needs a [sim] section")
    return RunConfig(**parts, present=tuple(sorted(parts)))


def emit_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name in cfg.present:
        section = getattr(cfg, name)
        cp[name] = {f.name: _fmt(getattr(section, f.name)) for f in fields(section)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def build_model(cfg: RunConfig) -> QueueModel:
    m = cfg.model
    kind = m.service_kind
    try:
        if kind == "uniform":
            service = ServiceSpec.uniform(*m.service_params)
        elif kind == "deterministic":
            service = ServiceSpec.deterministic(*m.service_params)
        elif kind == "triangular":
            service = ServiceSpec.triangular(*m.service_params)
        elif kind == "discrete":
            service = ServiceSpec.discrete(m.service_params, m.service_probs)
        else:
            raise ConfigError(f"model.service_kind: unknown distribution {kind!r}")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"model.service_params: {exc}") from exc
    arrival = BatchArrivalSpec(m.arrival_rate, m.pgf)
    base = QueueModel(arrival, service)
    p = cfg.policy
    try:
        if p.kind == "constant":
            policy = constant_kernel(p.level)
        else:
            policy = policy_from_name(p.kind, p.N, p.weights, p.probs, base, p.variant)
    except ValueError as exc:
        raise ConfigError(f"policy.kind: {exc}") from exc
    return QueueModel(arrival, service, policy)


def _check_model(model: QueueModel, stationary: bool) -> None:
    try:
        validate_model(model, stationary=stationary)
    except ModelValidationError as exc:
        # name the offending fields in the message
        named = [_name_field(e) for e in exc.errors]
        raise ModelValidationError(named, unstable=exc.unstable) from exc


def _name_field(msg: str) -> str:
    low = msg.lower()
    for key, name in (("pgf", "model.pgf"), ("batch", "model.pgf"), ("rate", "model.arrival_rate"),
                      ("rho", "model"), ("weight", "policy.weights"), ("class prob", "policy.probs"),
                      ("density", "model.service_params"), ("service", "model.service_params"),
                      ("mass", "model.service_params")):
        if key in low:
            return f"{name}: {msg}"
    return msg


# ---------------------------------------------------------------------------
# output

def emit_csv(header: list[str], rows: list, path: Path) -> None:
    """UTF-8 CSV, one record per line, floats with 17 significant digits."""
    def cell(v):
        if isinstance(v, (float, np.floating)):
            return "" if math.isnan(v) else f"{float(v):.17g}"
        return str(v)

    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([cell(v) for v in r])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def emit_json(report: dict, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(report), fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# modes

def _context(cfg: RunConfig, model: QueueModel) -> KernelContext:
    n = cfg.numerics
    return KernelContext(model, pipeline=n.pipeline, step=n.step_time or None, picard_tol=n.picard_tol,
                         t_max=n.t_max_time or None, talbot_order=n.talbot_order_outer,
                         memory_form=n.memory_form, richardson=n.richardson,
                         cross_check_closed_forms=n.cross_check_closed_forms)


def _sim_config(cfg: RunConfig, threads: int) -> SimConfig:
    s = cfg.sim
    return SimConfig(horizon=s.horizon_time, warmup=s.warmup_time, replications=s.replications, seed=s.seed,
                     integrator=s.integrator, u_probe_points=cfg.run.u_points, workers=max(1, threads))


def _transform_rows(ctx: KernelContext, us, pipeline: str):
    us = np.asarray(us, dtype=float)
    rows = []
    pic = thm = None
    if pipeline in ("picard", "both"):
        pic = stationary_transform_picard(ctx, us)
        rows += [(float(u), float(v), "picard") for u, v in zip(us, pic)]
    if pipeline in ("theorem", "both"):
        thm = stationary_transform_theorem(ctx, us)
        rows += [(float(u), float(v), "theorem") for u, v in zip(us, thm)]
    if pic is not None and thm is not None:
        record_deviations(ctx, us, thm, pic)
    return rows


def _sim_pmf_rows(est, k_max: int):
    lo, hi = est.pmf_interval(k_max, bonferroni=False)
    pmf = np.pad(est.pmf, (0, max(0, k_max + 1 - est.pmf.size)))
    return [(k, float(pmf[k]), float(lo[k]), float(hi[k]), "simulation") for k in range(k_max + 1)]


def execute(cfg: RunConfig, out_dir: Path, threads: int = 1) -> dict:
    """Run the configured mode; returns the report (tables are written to out_dir)."""
    mode = cfg.run.mode
    model = build_model(cfg)
    _check_model(model, stationary=mode in STATIONARY_MODES or mode == "simulate")
    outputs = {}
    report = {"outputs": outputs}
    ctx = None
    if mode in STATIONARY_MODES:
        ctx = _context(cfg, model)
        report["_ctx"] = ctx
    pipeline = cfg.numerics.pipeline
    if mode == "transform":
        rows = _transform_rows(ctx, cfg.run.u_points, pipeline)
        emit_csv(["u", "value", "pipeline"], rows, out_dir / "transform.csv")
        outputs["transform.csv"] = rows
    elif mode == "density":
        st = stationary_transform(ctx, "picard" if pipeline == "both" else pipeline)
        rows = [(s, invert_to_density(st, s, cfg.numerics.talbot_order_inner), st.provenance)
                for s in cfg.run.s_points]
        emit_csv(["s", "value", "pipeline"], rows, out_dir / "density.csv")
        outputs["density.csv"] = rows
    elif mode == "pmf":
        if pipeline == "theorem":
            raise ConfigError("numerics.pipeline: pmf extraction needs complex arguments; use picard")
        st = stationary_transform(ctx, "picard")
        p = pmf_from_transform(st, cfg.run.k_max)
        rows = [(k, float(p[k]), math.nan, math.nan, "picard") for k in range(p.size)]
        emit_csv(["k", "p", "ci_lo", "ci_hi", "source"], rows, out_dir / "pmf.csv")
        outputs["pmf.csv"] = rows
    elif mode == "simulate":
        sc = _sim_config(cfg, threads)
        est = simulate_grishechkin(model, sc)
        rows = _sim_pmf_rows(est, cfg.run.k_max)
        emit_csv(["k", "p", "ci_lo", "ci_hi", "source"], rows, out_dir / "pmf.csv")
        outputs["pmf.csv"] = rows
        report["simulation"] = dict(mean_q=est.mean_q, mean_q_ci=est.mean_q_ci, busy_fraction=est.busy_fraction,
                                    busy_ci=est.busy_ci, u=list(cfg.run.u_points),
                                    transform=est.transform_at_probes, transform_ci=est.transform_ci)
    elif mode == "compare":
        us = cfg.run.u_points
        rows = _transform_rows(ctx, us, "both")
        est = simulate_grishechkin(model, _sim_config(cfg, threads))
        rows += [(float(u), float(v), "simulation") for u, v in zip(us, est.transform_at_probes)]
        emit_csv(["u", "value", "pipeline"], rows, out_dir / "transform.csv")
        outputs["transform.csv"] = rows
        p = pmf_from_transform(stationary_transform(ctx, "picard"), cfg.run.k_max)
        prow = [(k, float(p[k]), math.nan, math.nan, "picard") for k in range(p.size)]
        prow += _sim_pmf_rows(est, cfg.run.k_max)
        emit_csv(["k", "p", "ci_lo", "ci_hi", "source"], prow, out_dir / "pmf.csv")
        outputs["pmf.csv"] = prow
        report["simulation"] = dict(transform_ci=est.transform_ci, mean_q=est.mean_q, mean_q_ci=est.mean_q_ci)
    elif mode == "sojourn":
        ell = cfg.run.ell_time
        vals = sojourn_transform(ctx, np.asarray(cfg.run.u_points, dtype=float), ell)
        rows = [(float(u), float(v), "sojourn") for u, v in zip(cfg.run.u_points, np.atleast_1d(vals))]
        emit_csv(["u", "value", "pipeline"], rows, out_dir / "sojourn.csv")
        outputs["sojourn.csv"] = rows
        report["mean_sojourn"] = mean_sojourn(ctx, ell)
    elif mode == "limit-study":
        p = cfg.policy
        table = limit_convergence_study(cfg.run.family, cfg.run.n_list, model, _sim_config(cfg, threads),
                                        p.weights, p.probs, p.variant)
        rows = [(r.N, r.tv, r.tv_ci, r.ks) for r in table]
        emit_csv(["N", "tv", "tv_ci", "ks"], rows, out_dir / "limit_study.csv")
        outputs["limit_study.csv"] = rows
    return report


def run(config_path, out_dir=None, seed: int | None = None, threads: int = 1, mode: str | None = None,
        stream=None) -> int:
    """Execute a configuration file and write its artifacts; returns the exit code."""
    stream = stream or sys.stderr
    t0 = time.perf_counter()
    out_dir = Path(out_dir or os.environ.get(OUT_DIR_ENV, "out"))
    report = {"status": "ok", "outputs": {}, "cross_checks": [], "deviations": []}
    try:
        raw = Path(config_path).read_bytes()
    except OSError as exc:
        print(f"error: cannot read {config_path}: {exc}", file=stream)
        return EXIT_CONFIG
    report["provenance"] = {"config_sha256": hashlib.sha256(raw).hexdigest(), "version": __version__,
                            "config_path": str(config_path)}
    code = EXIT_OK
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory {out_dir}: {exc}", file=stream)
        return EXIT_NUMERIC
    try:
        cfg = parse_config(raw.decode("utf-8"))
        if seed is not None:
            cfg = replace(cfg, sim=replace(cfg.sim, seed=seed))
        if mode is not None:
            if mode in ("simulate", "compare", "limit-study") and "sim" not in cfg.present:
                raise ConfigError(f"mode {mode} needs a [sim] section")
            cfg = replace(cfg, run=replace(cfg.run, mode=mode))
        report["provenance"]["seed"] = cfg.sim.seed
        report["provenance"]["mode"] = cfg.run.mode
        result = execute(cfg, out_dir, threads)
        ctx = result.pop("_ctx", None)
        report.update(result)
        if ctx is not None:
            report["cross_checks"] = ctx.cross_checks.entries
            report["deviations"] = ctx.deviations
    except ConfigError as exc:
        report.update(status="invalid configuration", error=str(exc))
        code = EXIT_CONFIG
    except ModelValidationError as exc:
        report.update(status="unstable" if exc.unstable else "invalid configuration", error=str(exc))
        code = EXIT_UNSTABLE if exc.unstable else EXIT_CONFIG
    except (ArithmeticError, OSError) as exc:
        report.update(status="numerical failure" if isinstance(exc, ArithmeticError) else "I/O failure",
                      error=f"{type(exc).__name__}: {exc}")
        code = EXIT_NUMERIC
    except ValueError as exc:
        report.update(status="invalid configuration", error=str(exc))
        code = EXIT_CONFIG
    report["timing"] = {"seconds": time.perf_counter() - t0}
    report["exit_code"] = code
    if code != EXIT_OK:
        print(f"error: {report['error']}", file=stream)
    try:
        emit_json(report, out_dir / "report.json")
    except OSError as exc:
        print(f"error: cannot write report: {exc}", file=stream)
        return EXIT_NUMERIC
    return code


def validate(config_path, stream=None) -> int:
    """Parse the configuration and check the model without computing anything."""
    stream = stream or sys.stderr
    try:
        cfg = parse_config(Path(config_path).read_text(encoding="utf-8"))
        model = build_model(cfg)
        _check_model(model, stationary=cfg.run.mode in STATIONARY_MODES or cfg.run.mode == "simulate")
    except OSError as exc:
        print(f"error: cannot read {config_path}: {exc}", file=stream)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: {exc}", file=stream)
        return EXIT_CONFIG
    except ModelValidationError as exc:
        print(f"error: {exc}", file=stream)
        return EXIT_UNSTABLE if exc.unstable else EXIT_CONFIG
    print(f"ok: mode {cfg.run.mode}, rho = {model.rho:.6g}", file=stream)
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="psqueue", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "execute the configured mode"),
                           ("validate", "check a configuration file"),
                           ("compare", "both transform routes and the simulator on one instance")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config")
        if name != "validate":
            p.add_argument("--seed", type=int, default=None, help="override sim.seed")
            p.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_DIR_ENV} or ./out)")
            p.add_argument("--threads", type=int, default=1, help="replications run in parallel")
    args = parser.parse_args(argv)
    if args.command == "validate":
        return validate(args.config)
    mode = "compare" if args.command == "compare" else None
    return run(args.config, args.out_dir, args.seed, args.threads, mode)


if __name__ == "__main__":
    sys.exit(main())
