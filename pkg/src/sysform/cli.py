"""Batch command-line surface: generate data, run searches, refit templates.

Subcommands::

    sysform generate --config cfg.json [--seed N] [--out DIR]
    sysform search   --config cfg.json [--seed N] [--out DIR] [--verbose]
    sysform refit    --config cfg.json --template "t0 + t1*x" [...]

The JSON config mirrors :class:`RunConfig`; see the README for the schema.
Exit codes: 0 success, 2 config error, 3 data error, 4 fit failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .data import (
    DatasetCollection,
    EmptySystem,
    SchemaError,
    gen_exponential,
    gen_projectile,
    load_csv,
    write_annotations,
    write_csv,
)
from .expr import DomainError, ParseError, compile_expression, parse
from .fit import AllFitsFailed, FitOptions, fit_all
from .gp import CandidateRecord, GpConfig, evolve, sort_key
from .lmetric import MIN_SYSTEMS_FOR_L2, TreeParams, l2_score
from .transform import Template, dimensionalize

__all__ = ["RunConfig", "ConfigError", "cmd_generate", "cmd_search", "cmd_refit", "main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_FIT = 4


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration of one batch run."""

    seed: int
    out_dir: str
    data_path: str | None = None
    generator: dict | None = None
    gp: GpConfig = None
    fit: FitOptions = field(default_factory=FitOptions)
    tree: TreeParams = field(default_factory=TreeParams)
    top_k: int = 20
    split_ratio: float = 0.7
    template: str | None = None
    verbose: bool = False

    def __post_init__(self):
        if (self.data_path is None) == (self.generator is None):
            raise ConfigError("config needs exactly one data source: 'path' or 'generator'")

    def snapshot(self) -> dict:
        d = dataclasses.asdict(self)
        d["gp"] = dataclasses.asdict(self.gp)
        d["fit"] = dataclasses.asdict(self.fit)
        d["tree"] = dataclasses.asdict(self.tree)
        return d


def load_config(path: str, seed_override=None, out_override=None,
                template=None, verbose=False) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    return build_config(raw, seed_override, out_override, template, verbose)


def build_config(raw: dict, seed_override=None, out_override=None,
                 template=None, verbose=False) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    seed = seed_override if seed_override is not None else raw.get("seed")
    if seed is None:
        raise ConfigError("seed is mandatory (config 'seed' or --seed); no wall-clock defaults")
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    out_dir = out_override or raw.get("out", "out")

    data = raw.get("data", {})
    data_path = data.get("path")
    generator = data.get("generator")

    try:
        gp = GpConfig(seed=seed, **raw.get("gp", {}))
        fit = FitOptions(**raw.get("fit", {}))
        l2_cfg = dict(raw.get("l2", {}))
        top_k = l2_cfg.pop("top_k", 20)
        split_ratio = l2_cfg.pop("split_ratio", 0.7)
        tree = TreeParams(**l2_cfg)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad config value: {err}") from err
    if top_k < 1:
        raise ConfigError("l2.top_k must be >= 1")
    if not 0.0 < split_ratio < 1.0:
        raise ConfigError("l2.split_ratio must be in (0, 1)")

    return RunConfig(
        seed=seed, out_dir=out_dir, data_path=data_path, generator=generator,
        gp=gp, fit=fit, tree=tree, top_k=top_k, split_ratio=split_ratio,
        template=template, verbose=verbose,
    )


# ---------------------------------------------------------------------------
# output helpers


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _scatter_svg(xs, ys, xlabel: str, ylabel: str) -> str:
    """Minimal static scatter plot: axis box, ticks, points."""
    w, h, pad = 480, 360, 50
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x0, x1 = x0 - 1.0, x1 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (w - 2 * pad)

    def sy(v):
        return h - pad - (v - y0) / (y1 - y0) * (h - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
        f'<rect x="{pad}" y="{pad}" width="{w - 2 * pad}" height="{h - 2 * pad}" '
        'fill="none" stroke="black"/>',
        f'<text x="{w // 2}" y="{h - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{h // 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {h // 2})">{ylabel}</text>',
    ]
    for lab, vx in ((f"{x0:.4g}", x0), (f"{x1:.4g}", x1)):
        parts.append(f'<text x="{sx(vx):.1f}" y="{h - pad + 16}" text-anchor="middle" '
                     f'font-size="10">{lab}</text>')
    for lab, vy in ((f"{y0:.4g}", y0), (f"{y1:.4g}", y1)):
        parts.append(f'<text x="{pad - 6}" y="{sy(vy):.1f}" text-anchor="end" '
                     f'font-size="10">{lab}</text>')
    for xv, yv in zip(xs, ys):
        parts.append(f'<circle cx="{sx(xv):.2f}" cy="{sy(yv):.2f}" r="3" fill="steelblue"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# data source


def _resolve_data(config: RunConfig) -> DatasetCollection:
    if config.data_path is not None:
        return load_csv(config.data_path)
    return _run_generator(config.generator, config.seed)


def _run_generator(spec: dict, run_seed: int) -> DatasetCollection:
    if not isinstance(spec, dict) or "name" not in spec:
        raise ConfigError("generator spec needs a 'name'")
    params = {k: v for k, v in spec.items() if k != "name"}
    seed = params.pop("seed", run_seed)
    name = spec["name"]
    if name == "exponential":
        allowed = {"n_systems", "alpha_range", "scale_range", "offset_range",
                   "cycles", "noise_sd"}
        bad = set(params) - allowed
        if bad:
            raise ConfigError(f"unknown exponential generator options: {sorted(bad)}")
        if "n_systems" not in params:
            raise ConfigError("exponential generator needs n_systems")
        return gen_exponential(seed=seed, **params)
    if name == "projectile":
        angle = None
        if "launch_angle_deg" in params:
            angle = math.radians(params.pop("launch_angle_deg"))
        if "launch_angle_rad" in params:
            angle = params.pop("launch_angle_rad")
        if angle is None:
            raise ConfigError("projectile generator needs launch_angle_deg or launch_angle_rad")
        if "g_values" in params:
            g_values = params.pop("g_values")
        elif "n_systems" in params and "g_range" in params:
            n = params.pop("n_systems")
            lo, hi = params.pop("g_range")
            g_values = np.random.default_rng(seed).uniform(lo, hi, n).tolist()
        else:
            raise ConfigError("projectile generator needs g_values, or n_systems + g_range")
        allowed = {"n_points", "x_max_fraction", "noise_sd"}
        bad = set(params) - allowed
        if bad:
            raise ConfigError(f"unknown projectile generator options: {sorted(bad)}")
        return gen_projectile(g_values, angle, seed=seed, **params)
    raise ConfigError(f"unknown generator {name!r}")


def _data_digest(collection: DatasetCollection, out_dir: str) -> str:
    path = os.path.join(out_dir, "data.csv")
    write_csv(collection, path)
    if any(ds.annotations for ds in collection):
        write_annotations(collection, os.path.join(out_dir, "annotations.csv"))
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------------
# rescoring and reports


def _l2_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, 2, index)))


def rescore_top(records: list[CandidateRecord], d: int, config: RunConfig):
    """Compute L2 and L for the top-K records by mean L1.

    With a single dataset L equals L1 by definition; with 1 < D < 8 there is
    no meaningful split, so rescoring is skipped with a warning.
    """
    k = min(config.top_k, len(records))
    head, tail = records[:k], records[k:]
    if d == 1:
        head = [dataclasses.replace(r, l2=None, total_l=r.mean_l1) for r in head]
    elif d < MIN_SYSTEMS_FOR_L2:
        print(
            f"warning: only {d} systems (< {MIN_SYSTEMS_FOR_L2}); "
            "L2 skipped, ranking by L1 only",
            file=sys.stderr,
        )
    else:
        head = [
            r.rescored(l2_score(r.fit_result.theta_matrix, config.split_ratio,
                                _l2_rng(config.seed, i), config.tree))
            for i, r in enumerate(head)
        ]
    head.sort(key=sort_key)
    return head, tail


def _leaderboard_csv(head, tail) -> str:
    lines = ["rank,template,T,mean_l1,l2,L"]
    for rank, r in enumerate(head + tail, start=1):
        lines.append(",".join([
            str(rank),
            f'"{r.key}"',
            str(r.template.param_count),
            _fmt(r.mean_l1),
            _fmt(r.l2),
            _fmt(r.total_l),
        ]))
    return "\n".join(lines) + "\n"


def _theta_csv(record: CandidateRecord, collection: DatasetCollection) -> str:
    t = record.template.param_count
    lines = [",".join(["system_id"] + [f"t{i}" for i in range(t)])]
    for ds, row in zip(collection, record.fit_result.theta_matrix):
        lines.append(",".join([ds.system_id] + [_fmt(v) for v in row]))
    return "\n".join(lines) + "\n"


def _curves_csv(record: CandidateRecord, collection: DatasetCollection) -> str:
    f = compile_expression(record.template.expression)
    lines = ["system_id,x,y_data,y_pred"]
    with np.errstate(all="ignore"):
        for ds, row in zip(collection, record.fit_result.theta_matrix):
            pred = np.broadcast_to(np.asarray(f(ds.x, row), dtype=float), ds.x.shape)
            for xv, yv, pv in zip(ds.x, ds.y, pred):
                lines.append(f"{ds.system_id},{_fmt(xv)},{_fmt(yv)},{_fmt(pv)}")
    return "\n".join(lines) + "\n"


def _l2_report_csv(record: CandidateRecord) -> str:
    lines = ["slot,role,contribution"]
    for i, contrib in enumerate(record.l2_report.contributions):
        lines.append(f"t{i},{record.template.slot_roles[i]},{_fmt(contrib)}")
    return "\n".join(lines) + "\n"


def _sha256_file(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(config: RunConfig) -> dict:
    """Write generator output as data.csv + annotations.csv + manifest.json."""
    if config.generator is None:
        raise ConfigError("generate needs a data.generator spec")
    started = _now()
    os.makedirs(config.out_dir, exist_ok=True)
    collection = _run_generator(config.generator, config.seed)
    digest = _data_digest(collection, config.out_dir)
    manifest = {
        "tool_version": __version__,
        "command": "generate",
        "config": config.snapshot(),
        "data_sha256": digest,
        "provenance": collection.manifest,
        "started_at": started,
        "finished_at": _now(),
    }
    _atomic_write(os.path.join(config.out_dir, "manifest.json"),
                  json.dumps(manifest, indent=2) + "\n")
    return manifest


def cmd_search(config: RunConfig, progress_log: list | None = None) -> dict:
    """Full pipeline: evolve candidates, rescore the top-K with L2, report."""
    started = _now()
    collection = _resolve_data(config)
    os.makedirs(config.out_dir, exist_ok=True)
    digest = _data_digest(collection, config.out_dir)

    def progress(gen, best, n_unique):
        if progress_log is not None:
            progress_log.append((gen, best, n_unique))
        if config.verbose:
            print(f"generation {gen:3d}  best_l1 {best:.6e}  evaluated {n_unique}")

    records = evolve(collection, config.gp, fit_options=config.fit, progress=progress)
    head, tail = rescore_top(records, len(collection), config)

    lb_path = os.path.join(config.out_dir, "leaderboard.csv")
    _atomic_write(lb_path, _leaderboard_csv(head, tail))
    for rank, record in enumerate(head, start=1):
        _atomic_write(os.path.join(config.out_dir, f"theta_matrix_{rank}.csv"),
                      _theta_csv(record, collection))
        _atomic_write(os.path.join(config.out_dir, f"curves_{rank}.csv"),
                      _curves_csv(record, collection))
        if record.l2_report is not None:
            _atomic_write(os.path.join(config.out_dir, f"l2_report_{rank}.csv"),
                          _l2_report_csv(record))

    manifest = {
        "tool_version": __version__,
        "command": "search",
        "config": config.snapshot(),
        "data_sha256": digest,
        "provenance": collection.manifest,
        "n_candidates": len(records),
        "leaderboard_sha256": _sha256_file(lb_path),
        "started_at": started,
        "finished_at": _now(),
    }
    _atomic_write(os.path.join(config.out_dir, "manifest.json"),
                  json.dumps(manifest, indent=2) + "\n")
    return manifest


def cmd_refit(config: RunConfig) -> dict:
    """Fit one given template (or auto-dimensionalized raw expression) to the
    data; emit the theta matrix, curves, the L report, and, when intrinsic
    annotations exist, per-slot scatters against each intrinsic."""
    if not config.template:
        raise ConfigError("refit needs --template")
    expr = parse(config.template)
    from .expr import max_param_index

    if max_param_index(expr) >= 0:
        template = Template.from_expression(expr)
    else:
        template = dimensionalize(expr)

    started = _now()
    collection = _resolve_data(config)
    os.makedirs(config.out_dir, exist_ok=True)
    digest = _data_digest(collection, config.out_dir)

    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 3)))
    fit_result = fit_all(template, collection, rng, config.fit)
    record = CandidateRecord(expr, template, fit_result)

    d = len(collection)
    if d == 1:
        record = dataclasses.replace(record, total_l=fit_result.mean_l1)
    elif d < MIN_SYSTEMS_FOR_L2:
        print(f"warning: only {d} systems (< {MIN_SYSTEMS_FOR_L2}); reporting L1 only",
              file=sys.stderr)
    else:
        record = record.rescored(
            l2_score(fit_result.theta_matrix, config.split_ratio,
                     _l2_rng(config.seed, 0), config.tree))

    out = config.out_dir
    _atomic_write(os.path.join(out, "template.txt"), record.key + "\n")
    _atomic_write(os.path.join(out, "roles.json"),
                  json.dumps({str(i): r for i, r in enumerate(template.slot_roles)},
                             indent=2) + "\n")
    _atomic_write(os.path.join(out, "theta_matrix.csv"), _theta_csv(record, collection))
    _atomic_write(os.path.join(out, "curves.csv"), _curves_csv(record, collection))
    report_lines = [
        f"mean_l1,{_fmt(record.mean_l1)}",
        f"l2,{_fmt(record.l2)}",
        f"L,{_fmt(record.total_l)}",
    ]
    _atomic_write(os.path.join(out, "l_report.csv"), "\n".join(report_lines) + "\n")
    if record.l2_report is not None:
        _atomic_write(os.path.join(out, "l2_report.csv"), _l2_report_csv(record))

    intrinsics = sorted({k for ds in collection for k in ds.annotations})
    if intrinsics:
        t = template.param_count
        lines = [",".join(["system_id", "slot", "role", "theta"] + intrinsics)]
        for ds, row in zip(collection, fit_result.theta_matrix):
            for i in range(t):
                cells = [ds.system_id, f"t{i}", template.slot_roles[i], _fmt(row[i])]
                cells += [_fmt(ds.annotations.get(k)) if k in ds.annotations else ""
                          for k in intrinsics]
                lines.append(",".join(cells))
        _atomic_write(os.path.join(out, "theta_vs_intrinsic.csv"), "\n".join(lines) + "\n")
        for key in intrinsics:
            vals = [ds.annotations.get(key) for ds in collection]
            if any(v is None for v in vals):
                continue
            for i in range(t):
                svg = _scatter_svg(vals, fit_result.theta_matrix[:, i], key, f"t{i}")
                _atomic_write(os.path.join(out, f"scatter_t{i}_vs_{key}.svg"), svg)

    manifest = {
        "tool_version": __version__,
        "command": "refit",
        "config": config.snapshot(),
        "template": record.key,
        "data_sha256": digest,
        "provenance": collection.manifest,
        "mean_l1": record.mean_l1,
        "l2": record.l2,
        "L": record.total_l,
        "started_at": started,
        "finished_at": _now(),
    }
    _atomic_write(os.path.join(out, "manifest.json"), json.dumps(manifest, indent=2) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sysform",
        description="Discover the shared structural form of the equation "
                    "governing multiple similar systems.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("generate", "write a synthetic dataset collection"),
        ("search", "run the full structural-form search"),
        ("refit", "fit one template to the data"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--verbose", action="store_true")
        if name == "refit":
            p.add_argument("--template", required=True,
                           help="template text (t<i> slots) or raw expression")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(
            args.config,
            seed_override=args.seed,
            out_override=args.out,
            template=getattr(args, "template", None),
            verbose=args.verbose,
        )
        if args.command == "generate":
            cmd_generate(config)
        elif args.command == "search":
            cmd_search(config)
        else:
            cmd_refit(config)
    except (ConfigError, ParseError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, EmptySystem, DomainError, FileNotFoundError, ValueError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except AllFitsFailed as err:
        print(f"fit failure: {err}", file=sys.stderr)
        return EXIT_FIT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
