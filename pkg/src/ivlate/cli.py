"""Command-line front end.

Subcommands: ``estimate``, ``diagnose``, ``weights``, ``decompose``,
``sweep``, ``simulate``, ``verify``.  Options come from flags or from a
flat ``key = value`` config file (flags win); unknown config keys are
rejected.  Every report embeds the fully resolved configuration, so any
output is reproducible from the report alone.  Exit codes: 0 success,
1 estimation/diagnostic failure, 2 input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .bootstrap import BootstrapConfig, bootstrap_se_vector
from .decomposition import bias_sweep, decompose
from .dgp import draw_sample, fixture_dgps, load_dgp, verify_identities
from .errors import DataError, EstimandError, IVLateError, SchemaError
from .estimators import (
    METHOD_2SLS,
    METHOD_IV,
    METHOD_LATE,
    METHOD_RIV,
    ControlsSpec,
    cell_estimates,
    estimate_beta_2sls_interacted,
    estimate_beta_iv,
    estimate_beta_riv,
    estimate_tau_late,
    reordered_table,
)
from .sample import (
    DEFAULT_MIN_CELL_N,
    Sample,
    TreatmentRule,
    build_cells,
    drop_unidentified,
    load_sample,
    restrict_cells,
    subset_to_cells,
)
from .weights import negative_weight_report, weight_table

ALL_METHODS = (METHOD_IV, METHOD_2SLS, METHOD_RIV, METHOD_LATE)


@dataclass
class RunConfig:
    """Resolved options for one run; embedded verbatim in every report."""

    command: str = ""
    data: str | None = None
    y: str | None = None
    d: str | None = None
    z: str | None = None
    treatment_rule: str = "binary"
    covariates: tuple[str, ...] = ()
    controls: tuple[str, ...] = ()
    iv_controls: str = "saturated"
    delimiter: str = ","
    min_cell_n: int = DEFAULT_MIN_CELL_N
    boot_reps: int = 1000
    seed: int = 0
    format: str = "json"
    methods: tuple[str, ...] = ALL_METHODS
    dgp: str | None = None
    n: int = 10000
    tol: float = 1e-10
    points: int = 25
    out: str | None = None

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("covariates", "controls", "methods"):
            d[key] = list(d[key])
        return d


_LIST_KEYS = {"covariates", "controls", "methods"}
_INT_KEYS = {"min_cell_n", "boot_reps", "seed", "n", "points"}
_FLOAT_KEYS = {"tol"}
_CONFIG_KEYS = {
    f.name for f in dataclasses.fields(RunConfig) if f.name != "command"
}


def _parse_config_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise SchemaError(f"config file not found: {p}")
    values: dict = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"{p}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_KEYS:
            raise SchemaError(f"{p}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def _coerce(key: str, value):
    if not isinstance(value, str):
        return value
    if key in _LIST_KEYS:
        return tuple(v.strip() for v in value.split(",") if v.strip())
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except ValueError:
        raise SchemaError(f"config key {key!r}: cannot parse {value!r}") from None
    return value


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(command=args.command)
    if getattr(args, "config", None):
        for key, value in _parse_config_file(args.config).items():
            setattr(cfg, key, _coerce(key, value))
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, _coerce(key, value))
    if cfg.format not in ("json", "tsv"):
        raise SchemaError(f"format must be 'json' or 'tsv', got {cfg.format!r}")
    unknown = set(cfg.methods) - set(ALL_METHODS)
    if unknown:
        raise SchemaError(f"unknown methods {sorted(unknown)}; choose from {ALL_METHODS}")
    return cfg


# ---------------------------------------------------------------------------
# data pipeline shared by the data-facing commands


def _load(cfg: RunConfig) -> Sample:
    if not cfg.data:
        raise SchemaError("no data file given (use --data or the config file)")
    missing = [role for role in ("y", "d", "z") if not getattr(cfg, role)]
    if missing:
        raise SchemaError(f"column map incomplete: missing {missing}")
    return load_sample(
        cfg.data,
        {"y": cfg.y, "d": cfg.d, "z": cfg.z},
        TreatmentRule.parse(cfg.treatment_rule),
        delimiter=cfg.delimiter,
    )


def _load_cells(cfg: RunConfig, sample: Sample | None = None):
    if sample is None:
        sample = _load(cfg)
    if not cfg.covariates:
        raise SchemaError("this command needs a 'covariates' list to build cells")
    table = build_cells(sample, cfg.covariates)
    table, dropped = restrict_cells(table, cfg.min_cell_n)
    sample = subset_to_cells(sample, table)
    return sample, table, dropped


# ---------------------------------------------------------------------------
# bootstrap statistics: each replicate rebuilds the cells, drops any whose
# instrument arm emptied in the resample (the same exclusion the base
# estimators document for unidentified cells), and re-estimates the
# reordering; a replicate still fails if nothing identifiable remains


def _replicate_cells(s: Sample, names: Sequence[str]):
    table, _ = drop_unidentified(build_cells(s, names), warn=False)
    return table


def _quiet(stat):
    # per-replicate exclusions are routine policy, not news
    def wrapped(s: Sample):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            return stat(s)

    return wrapped


def _stat_riv(names: Sequence[str]):
    @_quiet
    def stat(s: Sample) -> float:
        a = _replicate_cells(s, names).arrays()
        dd = a.mean_d_z1 - a.mean_d_z0
        dy = a.mean_y_z1 - a.mean_y_z0
        wt = a.n * a.var_z
        den = float(wt @ np.abs(dd))
        if not den > 0:
            raise EstimandError("no first-stage variation in replicate")
        return float(wt @ (np.where(dd < 0, -dy, dy))) / den

    return stat


def _stat_late(names: Sequence[str]):
    @_quiet
    def stat(s: Sample) -> float:
        table = _replicate_cells(s, names)
        return estimate_tau_late(table, cell_estimates(table)).estimate

    return stat


def _stat_decompose(names: Sequence[str]):
    """Vector statistic (beta_riv, tau_latt, tau_latu, tau_late) with the
    reordering re-estimated inside each replicate."""

    @_quiet
    def stat(s: Sample) -> np.ndarray:
        rt = reordered_table(_replicate_cells(s, names))
        dec = decompose(rt, cell_estimates(rt))
        a = rt.arrays()
        wt = a.n * a.var_z
        omega = a.mean_d_z1 - a.mean_d_z0
        den = float(wt @ omega)
        if not den > 0:
            raise EstimandError("no first-stage variation in replicate")
        riv = float(wt @ (a.mean_y_z1 - a.mean_y_z0)) / den
        return np.array([riv, dec.tau_latt, dec.tau_latu, dec.tau_late_np])

    return stat


def _bootstrap(sample, stat, cfg: RunConfig, width: int):
    bcfg = BootstrapConfig(replications=cfg.boot_reps, seed=cfg.seed)
    return bootstrap_se_vector(sample, stat, bcfg, width)


# ---------------------------------------------------------------------------
# commands


def cmd_estimate(cfg: RunConfig) -> dict:
    sample = _load(cfg)
    needs_cells = set(cfg.methods) & {METHOD_2SLS, METHOD_RIV, METHOD_LATE}
    saturated_iv = cfg.iv_controls == "saturated" and cfg.covariates
    if (needs_cells or saturated_iv) and cfg.covariates:
        sample, table, dropped = _load_cells(cfg, sample)
        est = cell_estimates(table)
    elif needs_cells:
        raise SchemaError(f"methods {sorted(needs_cells)} need a 'covariates' list")
    else:
        table, est, dropped = None, None, []

    rows = []
    for method in cfg.methods:
        if method == METHOD_IV:
            if cfg.iv_controls == "saturated" and cfg.covariates:
                spec = ControlsSpec(saturated=cfg.covariates, linear=cfg.controls)
            else:
                spec = ControlsSpec(linear=tuple(cfg.covariates) + tuple(cfg.controls))
            rows.append(_result_row(estimate_beta_iv(sample, spec), "robust"))
        elif method == METHOD_2SLS:
            rows.append(
                _result_row(estimate_beta_2sls_interacted(sample, table), "robust")
            )
        elif method == METHOD_RIV:
            r = estimate_beta_riv(sample, table)
            stat = _stat_riv(cfg.covariates)
            boot = _bootstrap(sample, lambda s: [stat(s)], cfg, 1)
            row = _result_row(r, f"bootstrap(B={cfg.boot_reps}, failures={boot.failures})")
            row["se"] = float(boot.se[0])
            # surface the share of observations sitting in flipped cells
            wt = weight_table(table, est)
            row["negative_weight_obs_share"] = wt.negative_obs_share
            rows.append(row)
        elif method == METHOD_LATE:
            r = estimate_tau_late(table, est)
            stat = _stat_late(cfg.covariates)
            boot = _bootstrap(sample, lambda s: [stat(s)], cfg, 1)
            row = _result_row(r, f"bootstrap(B={cfg.boot_reps}, failures={boot.failures})")
            row["se"] = float(boot.se[0])
            rows.append(row)
    return {
        "command": "estimate",
        "config": cfg.as_dict(),
        "dropped_cells": len(dropped),
        "dropped_rows": int(sum(c.n for c in dropped)),
        "results": rows,
    }


def _result_row(r, se_source: str) -> dict:
    return {
        "method": r.method,
        "estimate": r.estimate,
        "se": r.se,
        "se_source": se_source,
        "robust_f": r.robust_f,
        "n": r.n,
        "negative_weight_obs_share": None,
    }


def _weight_rows(wt) -> list[dict]:
    # normalized weights first (printed-table column order), then the raw
    # numerators so the normalization can be audited
    rows = []
    for i, key in enumerate(wt.keys):
        row = {name: int(v) for name, v in zip(wt.covariate_names, key)}
        row.update(
            n=int(wt.n[i]),
            share=float(wt.share[i]),
            var_z=float(wt.var_z[i]),
            omega_hat=float(wt.omega_hat[i]),
            beta_hat=float(wt.beta_hat[i]),
            w_iv=float(wt.w_iv[i]),
            w_2sls=float(wt.w_2sls[i]),
            w_riv=float(wt.w_riv[i]),
            w_late=float(wt.w_late[i]),
            raw_iv=float(wt.raw_iv[i]),
            raw_2sls=float(wt.raw_2sls[i]),
            raw_riv=float(wt.raw_riv[i]),
            raw_late=float(wt.raw_late[i]),
        )
        rows.append(row)
    return rows


def cmd_weights(cfg: RunConfig) -> dict:
    sample, table, dropped = _load_cells(cfg)
    wt = weight_table(table, cell_estimates(table))
    return {
        "command": "weights",
        "config": cfg.as_dict(),
        "rows": _weight_rows(wt),
        "sums": {
            "w_iv": float(wt.w_iv.sum()),
            "w_2sls": float(wt.w_2sls.sum()),
            "w_riv": float(wt.w_riv.sum()),
            "w_late": float(wt.w_late.sum()),
        },
    }


def cmd_diagnose(cfg: RunConfig) -> dict:
    sample, table, dropped = _load_cells(cfg)
    wt = weight_table(table, cell_estimates(table))
    rep = negative_weight_report(wt)
    verdict = (
        "satisfied: every cell's first-stage slope has the same sign"
        if rep.sign_consistent
        else "violated: first-stage slopes change sign across cells"
    )
    return {
        "command": "diagnose",
        "config": cfg.as_dict(),
        "rows": _weight_rows(wt),
        "report": dataclasses.asdict(rep),
        "verdict": verdict,
    }


def cmd_decompose(cfg: RunConfig) -> dict:
    sample, table, dropped = _load_cells(cfg)
    rt = reordered_table(table)
    dec = decompose(rt, cell_estimates(rt))
    out = {
        "command": "decompose",
        "config": cfg.as_dict(),
        "note": "instrument auto-reordered to make every first-stage slope nonnegative",
        "decomposition": {
            "beta_riv": dec.beta_reconstructed,
            "theta": dec.theta,
            "lambda": dec.lam,
            "tau_latt": dec.tau_latt,
            "tau_latu": dec.tau_latu,
            "w_latt": dec.w_latt,
            "w_latu": dec.w_latu,
            "pi1": dec.pi1,
            "pi0": dec.pi0,
            "var_e_z1": dec.var_e_z1,
            "var_e_z0": dec.var_e_z0,
            "tau_late_np": dec.tau_late_np,
            "tau_latt_np": dec.tau_latt_np,
            "tau_latu_np": dec.tau_latu_np,
        },
    }
    if cfg.boot_reps > 0:
        boot = _bootstrap(sample, _stat_decompose(cfg.covariates), cfg, 4)
        out["bootstrap_se"] = {
            "beta_riv": float(boot.se[0]),
            "tau_latt": float(boot.se[1]),
            "tau_latu": float(boot.se[2]),
            "tau_late_np": float(boot.se[3]),
            "replications": boot.replications,
            "failures": boot.failures,
        }
    return out


def cmd_sweep(cfg: RunConfig) -> dict:
    sample, table, dropped = _load_cells(cfg)
    rt = reordered_table(table)
    curve = bias_sweep(rt, cell_estimates(rt), n_points=cfg.points)
    return {
        "command": "sweep",
        "config": cfg.as_dict(),
        "points": [
            {"w": p.w, "theta": p.theta, "lambda": p.lam, "defined": p.defined}
            for p in curve.points
        ],
        "zero_crossings": list(curve.zero_crossings()),
    }


def cmd_simulate(cfg: RunConfig) -> dict:
    if not cfg.dgp:
        raise SchemaError("simulate needs --dgp pointing to a population spec")
    dgp = load_dgp(cfg.dgp)
    sample = draw_sample(dgp, cfg.n, cfg.seed)
    lines = ["y,d,z,cell"]
    cell = sample.covariates["cell"]
    for i in range(sample.n):
        lines.append(
            f"{float(sample.y[i])!r},{int(sample.d[i])},{int(sample.z[i])},{int(cell[i])}"
        )
    return {
        "command": "simulate",
        "config": cfg.as_dict(),
        "csv": "\n".join(lines) + "\n",
    }


def cmd_verify(cfg: RunConfig) -> dict:
    if cfg.dgp:
        specs = [(cfg.dgp, load_dgp(cfg.dgp))]
    else:
        specs = fixture_dgps()
    reports = []
    any_fail = False
    for name, dgp in specs:
        rep = verify_identities(dgp, tol=cfg.tol)
        any_fail = any_fail or not rep.all_pass
        reports.append(
            {
                "dgp": name,
                "monotonicity": rep.monotonicity,
                "checks": [dataclasses.asdict(c) for c in rep.checks],
                "all_pass": rep.all_pass,
            }
        )
    return {
        "command": "verify",
        "config": cfg.as_dict(),
        "reports": reports,
        "all_pass": not any_fail,
    }


# ---------------------------------------------------------------------------
# rendering


def _fmt(x) -> str:
    if isinstance(x, bool) or x is None:
        return str(x)
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def _tsv_table(rows: list[dict]) -> list[str]:
    if not rows:
        return []
    header = list(rows[0].keys())
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(_fmt(row[k]) for k in header))
    return lines


def render(report: dict, fmt: str) -> str:
    """Render a command report as JSON (full precision) or TSV (6
    significant digits); both carry the same numbers.  ``simulate`` is a
    data export and always renders as plain CSV."""
    if report["command"] == "simulate":
        return report["csv"]
    if fmt == "json":
        return json.dumps(report, indent=2)
    cmd = report["command"]
    lines: list[str] = []
    if cmd == "estimate":
        lines += _tsv_table(report["results"])
    elif cmd in ("weights", "diagnose"):
        lines += _tsv_table(report["rows"])
        if cmd == "diagnose":
            for key, value in report["report"].items():
                lines.append(f"# {key}\t{_fmt(value)}")
            lines.append(f"# verdict\t{report['verdict']}")
    elif cmd == "decompose":
        lines.append(f"# {report['note']}")
        for key, value in report["decomposition"].items():
            lines.append(f"{key}\t{_fmt(value)}")
        for key, value in report.get("bootstrap_se", {}).items():
            lines.append(f"se_{key}\t{_fmt(value)}")
    elif cmd == "sweep":
        lines.append("theta\tlambda")
        for p in report["points"]:
            lines.append(f"{_fmt(p['theta'])}\t{_fmt(p['lambda'])}")
    elif cmd == "verify":
        for rep in report["reports"]:
            for c in rep["checks"]:
                gap = "" if c["gap"] is None else f" gap={c['gap']:.3g}"
                lines.append(
                    f"[{c['status'].upper():4s}] {rep['dgp']}: {c['name']}{gap}"
                )
        lines.append(f"all_pass\t{report['all_pass']}")
    return "\n".join(lines) + "\n"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivlate",
        description="weight diagnostics for linear IV over discrete covariate cells",
    )
    parser.add_argument("--version", action="version", version=f"ivlate {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--data", help="CSV data file")
    common.add_argument("--y", help="outcome column")
    common.add_argument("--d", help="treatment column")
    common.add_argument("--z", help="instrument column")
    common.add_argument("--treatment-rule", dest="treatment_rule",
                        help="binarization rule for the treatment, e.g. '>12'")
    common.add_argument("--covariates", help="comma-separated discrete covariates")
    common.add_argument("--controls", help="extra linear control columns")
    common.add_argument("--iv-controls", dest="iv_controls",
                        choices=("saturated", "linear"),
                        help="how covariates enter the plain IV regression")
    common.add_argument("--delimiter", help="CSV delimiter (default ',')")
    common.add_argument("--min-cell-n", dest="min_cell_n", type=int,
                        help=f"drop cells smaller than this (default {DEFAULT_MIN_CELL_N})")
    common.add_argument("--boot-reps", dest="boot_reps", type=int,
                        help="bootstrap replications (default 1000)")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--format", choices=("json", "tsv"), help="output format")
    common.add_argument("--out", help="write the report to this file instead of stdout")

    p = sub.add_parser("estimate", parents=[common],
                       help="point estimates with SEs and robust first-stage F")
    p.add_argument("--methods", help=f"comma list from {', '.join(ALL_METHODS)}")
    sub.add_parser("weights", parents=[common], help="per-cell weight table")
    sub.add_parser("diagnose", parents=[common],
                   help="weight table plus negative-weight report and verdict")
    sub.add_parser("decompose", parents=[common],
                   help="treated/untreated decomposition of the reordered estimate")
    p = sub.add_parser("sweep", parents=[common],
                       help="normalized-gap curve against the implied encouragement share")
    p.add_argument("--points", type=int, help="grid size (default 25)")
    p = sub.add_parser("simulate", parents=[common],
                       help="draw a CSV sample from a population spec")
    p.add_argument("--dgp", help="population spec (JSON)")
    p.add_argument("--n", type=int, help="sample size")
    p = sub.add_parser("verify", parents=[common],
                       help="run the identity suite on population specs")
    p.add_argument("--dgp", help="population spec (JSON); default: bundled fixtures")
    p.add_argument("--tol", type=float, help="identity tolerance (default 1e-10)")
    return parser


_COMMANDS = {
    "estimate": cmd_estimate,
    "weights": cmd_weights,
    "diagnose": cmd_diagnose,
    "decompose": cmd_decompose,
    "sweep": cmd_sweep,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        report = _COMMANDS[args.command](cfg)
        text = render(report, cfg.format)
        if cfg.out:
            Path(cfg.out).write_text(text)
        else:
            sys.stdout.write(text)
        if args.command == "verify" and not report["all_pass"]:
            return 1
        return 0
    except (SchemaError, DataError) as exc:
        print(f"ivlate: input error: {exc}", file=sys.stderr)
        return 2
    except IVLateError as exc:
        print(f"ivlate: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
