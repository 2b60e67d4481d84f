"""Command-line entry point: ``thzrecon <subcommand> ...``.

Every subcommand reads its parameters from an optional JSON config
(``--config``), then ``--set section.key=value`` overrides, then its own
flags. Failures print a JSON object on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .channel import read_cfr
from .geometry import compute_metrics, write_metrics, write_point_cloud
from .padp import read_padp
from .pipeline import (
    PipelineConfig,
    StageError,
    benchmark_search_space,
    load_label_map,
    load_mpcs,
    run_pipeline,
    stage_estimate,
    stage_identify,
    stage_map,
    stage_padp,
    stage_segment,
    stage_simulate,
)
from .plots import emit_plots

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    def __init__(self, message, stage=None, code=EXIT_FAILURE):
        super().__init__(message)
        self.stage = stage
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message, stage="arguments", code=EXIT_USAGE)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items) -> dict:
    """``["sage.max_paths=8", "trx=[0,1]"]`` -> nested dict; values are parsed as JSON when possible."""
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise CliError(f"override {item!r} is not key=value", stage="arguments", code=EXIT_USAGE)
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_value(value)
    return out


def _merge_into(base, extra):
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge_into(base[k], v)
        else:
            base[k] = v
    return base


def load_config(args, flags=None) -> PipelineConfig:
    overrides = _merge_into(parse_overrides(args.set), flags or {})
    try:
        if args.config:
            return PipelineConfig.from_file(args.config, overrides)
        return PipelineConfig(overrides)
    except (ValueError, OSError) as exc:
        raise CliError(str(exc), stage="config", code=EXIT_USAGE) from exc


def _flags(**sections):
    """Drop unset flag values so they do not mask the config file."""
    out = {}
    for section, values in sections.items():
        if isinstance(values, dict):
            kept = {k: v for k, v in values.items() if v is not None}
            if kept:
                out[section] = kept
        elif values is not None:
            out[section] = values
    return out


def _dump(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


# -- subcommands -------------------------------------------------------------


def cmd_simulate(args):
    cfg = load_config(args, _flags(simulation={"seed": args.seed, "noise_power_db": args.noise_power_db},
                                   trx=args.trx))
    d = cfg.data
    out = Path(args.out)
    gt, cfrs = stage_simulate(cfg.scene(), cfg.array_config(), out, d["simulation"]["noise_power_db"],
                              d["simulation"]["seed"], d["trx"])
    _dump({"out_dir": str(out), "trx": sorted(cfrs), "paths": len(gt.paths)})


def cmd_padp(args):
    cfg = load_config(args, _flags(padp={"window": args.window}))
    cfr = read_cfr(args.cfr)
    padp = stage_padp(cfr, args.out, cfg.data["padp"]["window"])
    _dump({"shape": list(padp.shape), "noise_floor_db": padp.noise_floor_db})


def cmd_segment(args):
    cfg = load_config(args, _flags(segmentation={"margin_db": args.margin_db, "n_min": args.n_min}))
    padp, _ = read_padp(args.padp)
    seg = stage_segment(padp, args.out, **cfg.data["segmentation"])
    _dump({"regions": len(seg.regions_), "cells": int((seg.labels_ > 0).sum())})


def cmd_estimate(args):
    cfg = load_config(args, _flags(sage={"max_paths": args.max_paths, "full_grid": True if args.full_grid else None}))
    cfr = read_cfr(args.cfr)
    labels, padp = load_label_map(args.regions, args.padp)
    est = stage_estimate(cfr, labels, padp.noise_floor_db, args.out, cfg.data["sage"])
    _dump({"mpcs": len(est.mpcs_), "cells_visited": est.cells_visited_, "total_cells": est.total_cells_})


def cmd_map(args):
    cfg = load_config(args, _flags(mapper={"window": args.window}))
    mp = cfg.data["mapper"]
    scene = cfg.scene()
    mpcs = load_mpcs(args.mpcs)
    points, structures = stage_map(mpcs, scene.trx_positions, cfg.array_config().radius_m, mp["window"],
                                   tuple(mp["kinds"]), mp["outlier_gate_ns"] * 1e-9, mp["max_rmse_ns"] * 1e-9,
                                   mp["keep_unstructured"])
    write_point_cloud(args.out, points)
    summary = {"points": len(points), "structures": len(structures)}
    if args.structures:
        Path(args.structures).write_text(json.dumps(structures, indent=2, sort_keys=True) + "\n")
    if args.metrics:
        if not points:
            raise CliError("no points to evaluate", stage="map")
        metrics = compute_metrics([(p.x, p.y) for p in points], scene.segments())
        write_metrics(args.metrics, {"proposed": metrics})
        summary.update(mde_m=metrics["mde_m"], rmse_m=metrics["rmse_m"])
    _dump(summary)


def cmd_identify(args):
    cfg = load_config(args)
    m = cfg.data["materials"]
    reports = stage_identify(load_mpcs(args.mpcs), cfg.database(), cfg.array_config().center_frequency_hz,
                             m["margin_db"], m["top_k"])
    Path(args.out).write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    _dump({"regions": len(reports)})


def cmd_pipeline(args):
    cfg = load_config(args, _flags(simulation={"seed": args.seed}, output_dir=args.out))
    result = run_pipeline(cfg, full_grid=True if args.full_grid else None)
    m = result["metrics"]
    _dump({
        "out_dir": result["out_dir"],
        "points": result["n_points"],
        "proposed": {k: m["proposed"][k] for k in ("mde_m", "rmse_m")} if m["proposed"] else None,
        "max_search": {k: m["max_search"][k] for k in ("mde_m", "rmse_m")} if m["max_search"] else None,
        "timings_s": {k: round(v, 3) for k, v in result["timings"].items()},
    })


def cmd_bench(args):
    cfg = load_config(args)
    result = benchmark_search_space(cfg, trx_id=args.trx, repeats=args.repeats)
    report = {k: v for k, v in result.items() if not k.startswith("_")}
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _dump(report)


def cmd_plot(args):
    result = emit_plots(args.run, args.out, trx_id=args.trx)
    for name, reason in result["skipped"].items():
        print(f"skipped {name}: {reason}", file=sys.stderr)
    if not result["written"]:
        raise CliError("no plottable artifacts found", stage="plot")
    _dump(result)


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value (JSON literal); repeatable")

    p = _Parser(prog="thzrecon", description="Indoor geometry and material reconstruction from wideband sweeps.")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP threads")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="ground truth and CFR per TRx")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--noise-power-db", type=float)
    s.add_argument("--trx", type=int, nargs="+")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("padp", parents=[common], help="CFR -> PADP")
    s.add_argument("--cfr", required=True, help="cfr.json from simulate")
    s.add_argument("--out", required=True, help="output stem (writes .csv and .json)")
    s.add_argument("--window", choices=("rect", "hann"))
    s.set_defaults(func=cmd_padp)

    s = sub.add_parser("segment", parents=[common], help="PADP -> labelled regions")
    s.add_argument("--padp", required=True, help="padp.json")
    s.add_argument("--out", required=True, help="regions CSV")
    s.add_argument("--margin-db", type=float)
    s.add_argument("--n-min", type=int)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("estimate", parents=[common], help="region-restricted SAGE -> MPC table")
    s.add_argument("--cfr", required=True)
    s.add_argument("--padp", required=True)
    s.add_argument("--regions", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-paths", type=int)
    s.add_argument("--full-grid", action="store_true", help="search every delay bin (baseline)")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("map", parents=[common], help="MPC tables -> refined point cloud")
    s.add_argument("--mpcs", required=True, nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--window", type=int)
    s.add_argument("--metrics", help="also write error metrics against the config scene")
    s.add_argument("--structures", help="also write fitted structure records")
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("identify", parents=[common], help="MPC tables -> material report")
    s.add_argument("--mpcs", required=True, nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_identify)

    s = sub.add_parser("pipeline", parents=[common], help="run every stage")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--full-grid", action="store_true")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("bench", parents=[common], help="region-restricted vs full-grid estimation")
    s.add_argument("--trx", type=int, default=0)
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("plot", help="render figures from a run directory")
    s.add_argument("--run", required=True)
    s.add_argument("--out")
    s.add_argument("--trx", type=int, default=0)
    s.set_defaults(func=cmd_plot)
    return p


def _fail(exc, stage, code):
    payload = {"error": type(exc).__name__, "stage": stage, "message": str(exc)}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads is not None and args.threads < 1:
            raise CliError("--threads must be at least 1", stage="arguments", code=EXIT_USAGE)
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except CliError as exc:
        return _fail(exc, exc.stage, exc.code)
    except StageError as exc:
        return _fail(exc, exc.stage, EXIT_FAILURE)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(exc, getattr(args, "command", None) if "args" in locals() else None, EXIT_FAILURE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
