"""Batch front end: config parsing, orchestration, tabular output.

Experiments are described by a small sectioned key-value file (UTF-8, `#`
comments) so that the ~15 knobs of a run live under version control next to
its outputs.  Every diagnostic about a config carries file:line.  Outputs
are written atomically and removed again if a later stage fails, and are
byte-identical for identical (config, seed, build): floats are printed with
17 significant digits, no timestamps are emitted, and worker pools never
change what is computed, only when.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .airy import airy_laplace, j_integral, wronskian_defect
from .analysis import (EnsembleConfig, McSummary, comparison_audit,
                       comparison_envelope, count_outcomes, finalize_counts,
                       iter_ensemble, mc_estimate, threshold_sweep)
from ._grid import TimeGrid
from .model import NormalFormParams, default_potential
from .sde import CoupledSpec, NoiseStream, dump_paths, integrate_coupled

__all__ = ["ConfigError", "main", "parse_config"]

_SUBCOMMANDS = ("simulate", "sweep", "linear-stats", "airy-check",
                "compare", "chain")
_THREADS_ENV = "CHAINLAB_THREADS"
_EOL = "\r\n"


class ConfigError(ValueError):
    """Invalid configuration; the message is anchored to file:line."""


# ---------------------------------------------------------------------------
# config file parsing
# ---------------------------------------------------------------------------

def parse_config(text: str, origin: str = "<config>") -> dict:
    """Parse sectioned key-value text into {section: (lineno, {key: (raw, lineno)})}.

    Grammar per line: blank, comment (# or ;), [section], or key = value.
    Duplicate sections and duplicate keys within a section are rejected;
    schema checks (unknown names, types) happen against the stored line
    numbers so every complaint points at its source.
    """
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"{origin}:{lineno}: malformed section header {line!r}")
            name = line[1:-1].strip()
            if name in sections:
                raise ConfigError(f"{origin}:{lineno}: duplicate section [{name}]")
            sections[name] = (lineno, {})
            current = name
            continue
        if "=" not in line:
            raise ConfigError(
                f"{origin}:{lineno}: expected 'key = value' or '[section]', got {line!r}")
        if current is None:
            raise ConfigError(f"{origin}:{lineno}: key before any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        items = sections[current][1]
        if key in items:
            raise ConfigError(
                f"{origin}:{lineno}: duplicate key {key!r} in [{current}]")
        items[key] = (value, lineno)
    return sections


def _float(raw: str) -> float:
    v = float(raw)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _int(raw: str) -> int:
    return int(raw, 10)


def _seed(raw: str) -> int:
    v = int(raw, 10)
    if not 0 <= v < 2 ** 64:
        raise ValueError("seed must fit in u64")
    return v


def _float_list(raw: str) -> list[float]:
    parts = raw.split()
    if not parts:
        raise ValueError("expected one or more numbers")
    return [_float(p) for p in parts]


def _choice(*options):
    def conv(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return raw
    return conv


def _str(raw: str) -> str:
    return raw


@dataclass(frozen=True)
class _Key:
    conv: object
    required: bool = False
    default: object = None


_MODEL_KEYS = {
    "kind": _Key(_choice("overdamped", "underdamped", "linear", "chain"),
                 default="overdamped"),
    "epsilon": _Key(_float, required=True),
    "sigma": _Key(_float, required=True),
    "alpha": _Key(_float),
    "beta": _Key(_float),
    "T": _Key(_float),
    "t2": _Key(_float),
    "kappa": _Key(_float),
    "gamma": _Key(_float),
    "c1_time": _Key(_float),
    "delta": _Key(_float),
}

_ENSEMBLE_KEYS = {
    "n_paths": _Key(_int, required=True),
    "seed": _Key(_seed, default=0),
    "x0": _Key(_float),
    "v0": _Key(_float, default=0.0),
    "x0_mode": _Key(_choice("fixed", "uniform"), default="fixed"),
    "x0_lo": _Key(_float, default=-1.0),
    "x0_hi": _Key(_float, default=1.0),
    "h_rel": _Key(_float, default=0.02),
    "bias_scale": _Key(_float, default=1.0),
    "t_end": _Key(_float, default=2.0),
}

_SCHEMAS = {
    "simulate": {"model": _MODEL_KEYS, "ensemble": _ENSEMBLE_KEYS},
    "chain": {"model": _MODEL_KEYS, "ensemble": _ENSEMBLE_KEYS,
              "chain": {
                  "a": _Key(_float, default=1.0),
                  "b": _Key(_float, default=2.5),
                  "w0": _Key(_float, default=2.0),
                  "slope": _Key(_float, default=1.0),
                  "curvature": _Key(_float, default=2.0),
              }},
    "sweep": {"sweep": {
        "sigma": _Key(_float, required=True),
        "n_paths": _Key(_int, required=True),
        "seed": _Key(_seed, default=0),
        "axis": _Key(_choice("epsilon"), default="epsilon"),
        "values": _Key(_float_list),
        "model": _Key(_choice("overdamped", "underdamped"),
                      default="overdamped"),
        "T": _Key(_float, default=1.0),
        "h_rel": _Key(_float, default=0.1),
        "c1_time": _Key(_float, default=2.0),
        "gamma": _Key(_float, default=0.3),
        "beta": _Key(_float, default=3.0),
    }},
    "linear-stats": {"linear-stats": {
        "epsilon": _Key(_float_list, required=True),
        "alpha": _Key(_float_list, default=(0.0,)),
        "beta": _Key(_float_list, default=(1.0,)),
    }},
    "airy-check": {},
    "compare": {"model": _MODEL_KEYS, "compare": {
        "x0": _Key(_float, required=True),
        "n_paths": _Key(_int, default=100),
        "seed": _Key(_seed, default=0),
        "dt": _Key(_float, default=2e-4),
        "t_end": _Key(_float, default=0.5),
        "h_rel": _Key(_float, default=0.02),
    }},
}

_OUTPUT_KEYS = {
    "dir": _Key(_str, default="."),
    "name": _Key(_str),
    "format": _Key(_choice("csv", "json"), default="csv"),
}

_REQUIRED_SECTIONS = {
    "simulate": ("model", "ensemble"),
    "chain": ("model", "ensemble"),
    "sweep": ("sweep",),
    "linear-stats": ("linear-stats",),
    "airy-check": (),
    "compare": ("model", "compare"),
}


def _apply_schema(sections: dict, subcommand: str, origin: str) -> dict:
    """Validate names and types; return {section: {key: converted}}."""
    schema = dict(_SCHEMAS[subcommand])
    schema["output"] = _OUTPUT_KEYS
    for name, (lineno, _) in sections.items():
        if name not in schema:
            raise ConfigError(
                f"{origin}:{lineno}: unknown section [{name}] for {subcommand}")
    for name in _REQUIRED_SECTIONS[subcommand]:
        if name not in sections:
            raise ConfigError(f"{origin}: missing required section [{name}]")
    out = {}
    for name, keys in schema.items():
        header_line, items = sections.get(name, (0, {}))
        values = {}
        for key, (raw, lineno) in items.items():
            if key not in keys:
                raise ConfigError(
                    f"{origin}:{lineno}: unknown key {key!r} in [{name}]")
            try:
                values[key] = keys[key].conv(raw)
            except ValueError as exc:
                raise ConfigError(
                    f"{origin}:{lineno}: bad value for {key!r}: {exc}") from None
        for key, spec in keys.items():
            if key in values:
                continue
            if spec.required:
                where = f":{header_line}" if name in sections else ""
                raise ConfigError(
                    f"{origin}{where}: [{name}] is missing required key {key!r}")
            values[key] = spec.default
        out[name] = values
    return out


def _build_params(model_cfg: dict, origin: str, lineno: int) -> NormalFormParams:
    kwargs = {k: v for k, v in model_cfg.items()
              if k != "kind" and v is not None}
    try:
        return NormalFormParams(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{origin}:{lineno}: invalid [model]: {exc}") from None


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

@dataclass
class Table:
    """One tabular artifact; `extra` goes into the JSON form only."""
    name: str
    columns: list
    rows: list
    extra: dict = field(default_factory=dict)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _csv_field(text: str) -> str:
    if any(c in text for c in ',"\r\n'):
        return '"' + text.replace('"', '""') + '"'
    return text


def _render_csv(table: Table) -> str:
    lines = [f"# chainlab {table.name} v1"]
    lines.append(",".join(_csv_field(c) for c in table.columns))
    for row in table.rows:
        lines.append(",".join(_csv_field(_cell(v)) for v in row))
    return _EOL.join(lines) + _EOL


def _render_json(table: Table, provenance: dict) -> str:
    doc = {
        "format": f"chainlab {table.name} v1",
        "columns": table.columns,
        "rows": [dict(zip(table.columns, row)) for row in table.rows],
    }
    doc.update(table.extra)
    doc["provenance"] = provenance
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


class _Artifacts:
    """Atomic writes into one directory, all-or-nothing per invocation."""

    def __init__(self, outdir: str):
        self.outdir = outdir
        self.written: list[str] = []

    def write_bytes(self, filename: str, data: bytes) -> str:
        os.makedirs(self.outdir, exist_ok=True)
        final = os.path.join(self.outdir, filename)
        tmp = os.path.join(self.outdir, f".{filename}.{os.getpid()}.tmp")
        try:
            with open(tmp, "wb") as fh:
                fh.write(data)
            os.replace(tmp, final)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.written.append(final)
        return final

    def write_text(self, filename: str, text: str) -> str:
        return self.write_bytes(filename, text.encode("utf-8"))

    def discard(self) -> None:
        for path in self.written:
            try:
                os.unlink(path)
            except OSError:
                pass
        self.written.clear()


# ---------------------------------------------------------------------------
# subcommand runners: each returns (Table, paths-to-dump or None)
# ---------------------------------------------------------------------------

_SUMMARY_COLUMNS = ["model", "n_paths", "seed", "n_right", "n_left",
                    "n_undecided", "n_truncated", "p_right", "p_left",
                    "ci_right_lo", "ci_right_hi", "ci_left_lo", "ci_left_hi",
                    "flags"]


def _summary_row(model: str, n_paths: int, seed: int, s: McSummary) -> list:
    return [model, n_paths, seed, s.n_right, s.n_left, s.n_undecided,
            s.n_truncated, s.p_right, s.p_left, s.ci_right[0], s.ci_right[1],
            s.ci_left[0], s.ci_left[1], ";".join(s.flags)]


def _pooled_estimate(cfg: EnsembleConfig, threads: int) -> McSummary:
    if cfg.model == "linear" or threads <= 1 or cfg.n_paths < 2 * threads:
        return mc_estimate(cfg)
    bounds = np.linspace(0, cfg.n_paths, threads + 1, dtype=int)
    chunks = [(int(a), int(b)) for a, b in zip(bounds, bounds[1:]) if a < b]
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(
            lambda ab: count_outcomes(iter_ensemble(cfg, ab[0], ab[1])),
            chunks))
    totals = tuple(sum(p[i] for p in parts) for i in range(4))
    return finalize_counts(cfg, totals)


def _ensemble_config(cfg: dict, subcommand: str, seed: int,
                     origin: str, sections: dict) -> EnsembleConfig:
    model_line = sections["model"][0]
    params = _build_params(cfg["model"], origin, model_line)
    kind = cfg["model"]["kind"]
    kind_explicit = "kind" in sections["model"][1]
    if subcommand == "chain":
        if kind_explicit and kind != "chain":
            raise ConfigError(
                f"{origin}:{model_line}: the chain subcommand runs kind = chain")
        kind = "chain"
    elif kind == "chain":
        raise ConfigError(
            f"{origin}:{model_line}: kind = chain belongs to the chain subcommand")
    ens = cfg["ensemble"]
    potential = None
    if subcommand == "chain":
        c = cfg["chain"]
        potential = default_potential(a=c["a"], b=c["b"], w0=c["w0"],
                                      slope=c["slope"], curvature=c["curvature"])
    try:
        return EnsembleConfig(
            model=kind, params=params, n_paths=ens["n_paths"], seed=seed,
            x0=ens["x0"], v0=ens["v0"], x0_mode=ens["x0_mode"],
            x0_lo=ens["x0_lo"], x0_hi=ens["x0_hi"], h_rel=ens["h_rel"],
            bias_scale=ens["bias_scale"], potential=potential,
            chain_t_end=ens["t_end"])
    except ValueError as exc:
        raise ConfigError(
            f"{origin}:{sections['ensemble'][0]}: invalid [ensemble]: {exc}") from None


def _run_simulate(cfg, seed, threads, origin, sections, want_paths):
    config = _ensemble_config(cfg, "simulate", seed, origin, sections)
    summary = _pooled_estimate(config, threads)
    table = Table("simulate", _SUMMARY_COLUMNS,
                  [_summary_row(config.model, config.n_paths, seed, summary)])
    paths = None
    if want_paths:
        if config.model == "linear":
            from .linear import linear_path
            grid = config.resolve_grid()
            paths = [linear_path(config.params, grid, seed, path_index=k)
                     for k in range(config.n_paths)]
        else:
            paths = [p for p, _ in iter_ensemble(config)]
    return table, paths


def _run_chain(cfg, seed, threads, origin, sections, want_paths):
    config = _ensemble_config(cfg, "chain", seed, origin, sections)
    summary = _pooled_estimate(config, threads)
    table = Table("chain", _SUMMARY_COLUMNS,
                  [_summary_row("chain", config.n_paths, seed, summary)])
    paths = [p for p, _ in iter_ensemble(config)] if want_paths else None
    return table, paths


def _run_sweep(cfg, seed, threads, origin, sections, want_paths):
    del origin, sections
    if want_paths:
        raise ConfigError("--dump-paths is not meaningful for sweep")
    s = cfg["sweep"]
    kwargs = dict(sigma=s["sigma"], n_paths=s["n_paths"], seed=seed,
                  eps_grid=s["values"], model=s["model"], T=s["T"],
                  h_rel=s["h_rel"], c1_time=s["c1_time"], gamma=s["gamma"],
                  beta=s["beta"])
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            rows, monotone = threshold_sweep(**kwargs, map_fn=pool.map)
    else:
        rows, monotone = threshold_sweep(**kwargs)
    out = [[r.epsilon, r.summary.p_right, r.summary.ci_right[0],
            r.summary.ci_right[1], r.summary.n_undecided] for r in rows]
    return Table("sweep", ["epsilon", "p_right", "ci_lo", "ci_hi",
                           "n_undecided"], out,
                 extra={"monotone": monotone}), None


def _run_linear_stats(cfg, seed, threads, origin, sections, want_paths):
    del seed, threads, origin, sections
    if want_paths:
        raise ConfigError("--dump-paths is not meaningful for linear-stats")
    from .linear import limit_stats
    ls = cfg["linear-stats"]
    rows = []
    for beta in ls["beta"]:
        for alpha in ls["alpha"]:
            for eps in ls["epsilon"]:
                s = limit_stats(eps, alpha, beta)
                rows.append([eps, alpha, beta, s.m, s.v, s.ratio, s.p_plus])
    return Table("linear-stats",
                 ["epsilon", "alpha", "beta", "m", "v", "ratio", "p_plus"],
                 rows), None


# reference constants for the weighted-Airy-integral limits: the measured
# combinations J(p) sqrt(p) exp(-2 p^3/3) (p large) and J(p) sqrt(p)
# (p small) are both checked against their documented targets
_J_LARGE_TARGET = 1.0 / (4.0 * math.sqrt(math.pi))
_J_SMALL_TARGET = 1.0 / (math.sqrt(math.pi) * 2.0 ** 1.5)


def _run_airy_check(cfg, seed, threads, origin, sections, want_paths):
    del cfg, seed, threads, origin, sections
    if want_paths:
        raise ConfigError("--dump-paths is not meaningful for airy-check")
    xs = np.linspace(-10.0, 10.0, 2001)
    wron = float(np.max(np.abs(wronskian_defect(xs))))
    lap = max(abs(airy_laplace(p) - math.exp(p ** 3 / 3.0))
              / math.exp(p ** 3 / 3.0) for p in (0.5, 1.0, 2.0))
    j_large = j_integral(4.0) * 2.0 * math.exp(-2.0 * 64.0 / 3.0)
    j_small = j_integral(0.01) * math.sqrt(0.01)
    rows = [
        ["wronskian_max_defect", wron, 0.0, wron, 1e-9],
        ["laplace_max_rel_error", lap, 0.0, lap, 1e-6],
        ["j_large_p_constant", j_large, _J_LARGE_TARGET,
         abs(j_large / _J_LARGE_TARGET - 1.0), 0.05],
        ["j_small_p_constant", j_small, _J_SMALL_TARGET,
         abs(j_small / _J_SMALL_TARGET - 1.0), 0.05],
    ]
    for row in rows:
        row.append("pass" if row[3] <= row[4] else "fail")
    return Table("airy-check",
                 ["check", "observed", "expected", "defect", "tolerance",
                  "status"], rows), None


def _audit_pair(params, x0, grid, noise, h_rel, integral, growth):
    # the reference process is unbiased AND starts at 0; the start offset
    # x0 enters the bounds only through the decayed shift x0*growth
    biased, unbiased = integrate_coupled(
        params,
        [CoupledSpec(kind="overdamped", x0=x0, bias_scale=1.0),
         CoupledSpec(kind="overdamped", x0=0.0, bias_scale=0.0)],
        grid, noise, h_rel=h_rel)
    if x0 <= 0.0:
        lower = comparison_audit(unbiased, biased, envelope=x0 * growth)
        upper = comparison_audit(biased, unbiased, envelope=-integral)
    else:
        lower = comparison_audit(unbiased, biased)
        upper = comparison_audit(biased, unbiased,
                                 envelope=-(integral + x0 * growth))
    return lower, upper, biased, unbiased


def _run_compare(cfg, seed, threads, origin, sections, want_paths):
    params = _build_params(cfg["model"], origin, sections["model"][0])
    c = cfg["compare"]
    grid = TimeGrid(-params.T, c["t_end"], c["dt"])
    integral, growth = comparison_envelope(params, grid)
    base = NoiseStream(seed=seed, grid=grid)

    def one(k):
        return _audit_pair(params, c["x0"], grid, base.for_path(k),
                           c["h_rel"], integral, growth)

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(c["n_paths"])))
    else:
        results = [one(k) for k in range(c["n_paths"])]

    rows = []
    paths = [] if want_paths else None
    for label, idx in (("lower", 0), ("upper", 1)):
        worst = max(r[idx].max_violation for r in results)
        violating = sum(r[idx].n_violations > 0 for r in results)
        first = min((r[idx].first_violation_time for r in results
                     if r[idx].first_violation_time is not None),
                    default=None)
        rows.append([label, c["x0"], worst, first, violating, c["n_paths"]])
    if want_paths:
        for lower, upper, biased, unbiased in results:
            paths.extend([biased, unbiased])
    return Table("compare",
                 ["bound", "x0", "max_violation", "first_violation_time",
                  "n_paths_violating", "n_paths"], rows), paths


_RUNNERS = {
    "simulate": _run_simulate,
    "sweep": _run_sweep,
    "linear-stats": _run_linear_stats,
    "airy-check": _run_airy_check,
    "compare": _run_compare,
    "chain": _run_chain,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chainlab",
        description="Monte Carlo experiments on noisy slow passage through "
                    "a pitchfork, plus special-function self checks.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in _SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="experiment description file"
                            + ("" if name == "airy-check" else " (required)"))
        p.add_argument("--seed", type=int, default=None,
                       help="master seed; overrides the config value")
        p.add_argument("--out", default=None,
                       help="output directory; overrides [output] dir")
        p.add_argument("--threads", type=int, default=1,
                       help=f"worker threads (env {_THREADS_ENV} overrides)")
        p.add_argument("--format", choices=("csv", "json"), default=None,
                       help="table format; overrides [output] format")
        p.add_argument("--dump-paths", action="store_true",
                       help="also write simulated trajectories (binary)")
    return parser


def _resolve_threads(flag_value: int) -> int:
    raw = os.environ.get(_THREADS_ENV)
    if raw is not None:
        try:
            value = int(raw, 10)
        except ValueError:
            raise ConfigError(f"{_THREADS_ENV}={raw!r} is not an integer") from None
    else:
        value = flag_value
    if value < 1:
        raise ConfigError(f"thread count must be >= 1, got {value}")
    return value


def _resolve_seed(args, cfg: dict) -> int:
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError(f"--seed must fit in u64, got {args.seed}")
        return args.seed
    for section in ("ensemble", "sweep", "compare"):
        if section in cfg and "seed" in cfg[section]:
            return cfg[section]["seed"]
    return 0


def _run(args) -> int:
    threads = _resolve_threads(args.threads)
    config_bytes = b""
    origin = "<none>"
    sections = {}
    if args.config is not None:
        origin = args.config
        try:
            with open(args.config, "rb") as fh:
                config_bytes = fh.read()
        except OSError as exc:
            raise ConfigError(f"{origin}: cannot read config: {exc}") from None
        sections = parse_config(config_bytes.decode("utf-8"), origin)
    elif args.subcommand != "airy-check":
        raise ConfigError(f"{args.subcommand} requires --config")
    cfg = _apply_schema(sections, args.subcommand, origin)
    seed = _resolve_seed(args, cfg)

    out_cfg = cfg["output"]
    outdir = args.out if args.out is not None else out_cfg["dir"]
    fmt = args.format if args.format is not None else out_cfg["format"]
    name = out_cfg["name"] or args.subcommand.replace("-", "_")

    table, paths = _RUNNERS[args.subcommand](
        cfg, seed, threads, origin, sections, args.dump_paths)

    provenance = {
        "config_sha256": hashlib.sha256(config_bytes).hexdigest(),
        "seed": seed,
        "version": __version__,
    }
    artifacts = _Artifacts(outdir)
    try:
        if fmt == "csv":
            artifacts.write_text(f"{name}.csv", _render_csv(table))
        else:
            artifacts.write_text(f"{name}.json",
                                 _render_json(table, provenance))
        if paths is not None:
            buf = io.BytesIO()
            dump_paths(paths, buf)
            artifacts.write_bytes(f"{name}_paths.clpd", buf.getvalue())
    except BaseException:
        artifacts.discard()
        raise
    for path in artifacts.written:
        print(path)
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"chainlab: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:   # noqa: BLE001 -- honest nonzero exit for module errors
        print(f"chainlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
