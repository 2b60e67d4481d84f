"""End-to-end orchestration: simulate, PADP, segment, estimate, map, identify.

Every stage reads and writes documented files, so the CLI can rerun any of
them on its own. ``run_pipeline`` chains them and writes a manifest whose
content depends only on the configuration and seed; wall-clock timings go
to a separate ``timings.json``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .channel import ArrayConfig, read_cfr, synthesize_cfr, write_cfr
from .geometry import (
    KINDS,
    cloud_agreement,
    compute_metrics,
    max_search_points,
    refine_region,
    write_metrics,
    write_point_cloud,
)
from .materials import MaterialDatabase, classify_region, mpc_reflection_loss, region_report
from .padp import padp_from_cfr, read_padp, write_padp
from .sage import CcaSageEstimator, read_mpc_table, write_mpc_table
from .scene import Scene, generate_ground_truth, load_scene, reference_scene
from .segmentation import RegionSegmenter, read_regions_csv, region_label_map, write_regions_csv

BUILTIN_SCENE = "builtin:reference"

DEFAULTS = {
    "scene": BUILTIN_SCENE,
    "array": {},
    "simulation": {"noise_power_db": -70.0, "seed": 0},
    "padp": {"window": "rect"},
    "segmentation": {"margin_db": 10.0, "n_min": 20, "structure_size": 3, "wrap": True},
    "sage": {
        "max_paths": 16,
        "iterations": 1,
        "delay_step_ns": 0.01,
        "max_delay_ns": 60.0,
        "stop_margin_db": 6.0,
        "gate_bins": 2.0,
        "min_track_length": 3,
        "min_peak_drop_db": 1.0,
        "max_rel_power_db": 15.0,
        "dominance_span_deg": 4.0,
        "duplicate_delay_bins": 2.0,
        "duplicate_span_deg": 4.0,
        "full_grid": False,
    },
    "mapper": {"window": 11, "kinds": list(KINDS), "outlier_gate_ns": 0.15, "max_rmse_ns": 0.2,
               "keep_unstructured": False},
    "materials": {"database": "builtin", "margin_db": 3.0, "top_k": 3},
    "trx": None,
    "output_dir": "run",
}


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.message = message


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class PipelineConfig:
    """Validated run configuration; one JSON document with a section per module."""

    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        self.data = _merge(DEFAULTS, self.data)
        self.validate()

    @classmethod
    def from_file(cls, path, overrides=None) -> "PipelineConfig":
        path = Path(path)
        data = json.loads(path.read_text())
        return cls(_merge(data, overrides or {}), base_dir=path.parent)

    def __getitem__(self, key):
        return self.data[key]

    def validate(self):
        d = self.data
        unknown = set(d) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        for section, defaults in DEFAULTS.items():
            if isinstance(defaults, dict) and defaults and isinstance(d[section], dict):
                extra = set(d[section]) - set(defaults)
                if extra:
                    raise ValueError(f"unknown keys in {section}: {sorted(extra)}")
        scene = d["scene"]
        if scene != BUILTIN_SCENE and not self.resolve(scene).exists():
            raise ValueError(f"scene file {scene} does not exist")
        db = d["materials"]["database"]
        if db != "builtin" and not self.resolve(db).exists():
            raise ValueError(f"material database {db} does not exist")
        seg = d["segmentation"]
        if seg["n_min"] < 1:
            raise ValueError("segmentation.n_min must be at least 1")
        if seg["structure_size"] < 1 or seg["structure_size"] % 2 == 0:
            raise ValueError("segmentation.structure_size must be a positive odd integer")
        sage = d["sage"]
        if sage["max_paths"] < 1 or sage["iterations"] < 0:
            raise ValueError("sage.max_paths must be >= 1 and sage.iterations >= 0")
        if sage["delay_step_ns"] < 0.01 - 1e-12:
            raise ValueError("sage.delay_step_ns must be at least 0.01")
        mapper = d["mapper"]
        if mapper["window"] < 1 or mapper["window"] % 2 == 0:
            raise ValueError("mapper.window must be a positive odd integer")
        if not set(mapper["kinds"]) <= set(KINDS) or not mapper["kinds"]:
            raise ValueError(f"mapper.kinds must be a non-empty subset of {list(KINDS)}")
        if d["padp"]["window"] not in ("rect", "hann"):
            raise ValueError("padp.window must be 'rect' or 'hann'")
        self.array_config()
        return self

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def array_config(self) -> ArrayConfig:
        return ArrayConfig.from_dict(self.data["array"]) if self.data["array"] else ArrayConfig()

    def scene(self) -> Scene:
        if self.data["scene"] == BUILTIN_SCENE:
            return reference_scene()
        return load_scene(self.resolve(self.data["scene"]))

    def database(self) -> MaterialDatabase:
        db = self.data["materials"]["database"]
        return MaterialDatabase.load(db if db == "builtin" else self.resolve(db))

    def output_dir(self) -> Path:
        return self.resolve(self.data["output_dir"])

    def inputs(self) -> dict:
        """Config without the output location, which does not affect results."""
        return {k: v for k, v in self.data.items() if k != "output_dir"}

    def canonical_json(self) -> str:
        return json.dumps(self.inputs(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


# -- stages -----------------------------------------------------------------


def stage_simulate(scene: Scene, config: ArrayConfig, out_dir, noise_power_db=None, seed=0, trx_ids=None):
    """Ground truth CSV plus one CFR per TRx (``trx<k>/cfr.{json,bin}``)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gt = generate_ground_truth(scene, config)
    gt.write_csv(out_dir / "ground_truth.csv")
    ids = range(len(scene.trx_positions)) if trx_ids is None else trx_ids
    cfrs = {}
    for k in ids:
        rng_seed = np.random.SeedSequence([int(seed), int(k)]).generate_state(1)[0]
        cfr = synthesize_cfr(gt.mpcs(k), config, noise_power_db, seed=int(rng_seed), trx_id=k,
                             trx_position=scene.trx_positions[k])
        tdir = out_dir / f"trx{k}"
        tdir.mkdir(exist_ok=True)
        write_cfr(tdir / "cfr", cfr)
        cfrs[k] = cfr
    return gt, cfrs


def stage_padp(cfr, out_stem, window="rect"):
    padp = padp_from_cfr(cfr, window)
    write_padp(out_stem, padp, extra={"trx_id": int(cfr.trx_id), "window": window})
    return padp


def stage_segment(padp, out_path, margin_db=10.0, n_min=20, structure_size=3, wrap=True):
    seg = RegionSegmenter(margin_db, n_min, structure_size, wrap).fit(padp)
    write_regions_csv(out_path, seg.regions_)
    return seg


def stage_estimate(cfr, label_map, noise_floor_db, out_path, sage_params):
    params = dict(sage_params)
    est = CcaSageEstimator(**params).fit(cfr, label_map=label_map, noise_floor_db=noise_floor_db)
    write_mpc_table(out_path, est.mpcs_)
    return est


def stage_map(mpcs, trx_positions, radius_m, window=11, kinds=KINDS, outlier_gate_s=0.15e-9, max_rmse_s=0.2e-9,
              keep_unstructured=False):
    """Refine every (TRx, region) group; returns (points, structure records)."""
    groups = {}
    for m in mpcs:
        groups.setdefault((m.trx_id, m.label), []).append(m)
    points, structures = [], []
    for (trx_id, label), group in sorted(groups.items()):
        geo = refine_region(group, trx_positions[trx_id], radius_m, kinds, window, outlier_gate_s, max_rmse_s,
                            keep_unstructured)
        points.extend(geo.points)
        rec = {"trx_id": int(trx_id), "region_label": int(label), "n_mpcs": len(group),
               "n_inliers": int(geo.inliers.size)}
        if geo.fit is not None:
            t = geo.fit.template
            rec.update({
                "kind": t.kind,
                "distances_m": [round(float(d), 6) for d in t.distances_m],
                "theta0_deg": round(float(t.theta0_deg), 4),
                "rmse_ns": round(geo.fit.rmse_s * 1e9, 6),
            })
        else:
            rec["kind"] = None
        structures.append(rec)
    return points, structures


def stage_identify(mpcs, db: MaterialDatabase, f_hz, margin_db=3.0, top_k=3):
    """Per-region reflection-loss report, ranked against the database."""
    groups = {}
    for m in mpcs:
        if m.tau_s > 0 and np.isfinite(m.power_db):
            groups.setdefault((m.trx_id, m.label), []).append(m)
    reports = []
    for (trx_id, label), group in sorted(groups.items()):
        loss = -np.array([m.power_db for m in group])
        rl = mpc_reflection_loss(loss, np.array([m.tau_s for m in group]), f_hz)
        profile = classify_region(rl, margin_db, label)
        rep = region_report(profile, db, top_k)
        reports.append({"trx_id": int(trx_id), **rep, "rl_db": [round(float(x), 4) for x in rl]})
    return reports


# -- orchestration ----------------------------------------------------------


class _Timer:
    def __init__(self):
        self.times = {}

    @contextmanager
    def stage(self, name):
        start = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        finally:
            self.times[name] = self.times.get(name, 0.0) + time.perf_counter() - start


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_pipeline(config: PipelineConfig, out_dir=None, full_grid=None) -> dict:
    """Run every stage and write the artifact bundle; returns a summary dict."""
    out = Path(out_dir) if out_dir is not None else config.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    timer = _Timer()
    d = config.data
    sage_params = dict(d["sage"])
    if full_grid is not None:
        sage_params["full_grid"] = bool(full_grid)

    with timer.stage("config"):
        array = config.array_config()
        scene = config.scene()
        db = config.database()
    trx_ids = list(range(len(scene.trx_positions))) if d["trx"] is None else [int(k) for k in d["trx"]]

    with timer.stage("simulate"):
        gt, cfrs = stage_simulate(scene, array, out, d["simulation"]["noise_power_db"],
                                  d["simulation"]["seed"], trx_ids)

    all_mpcs, baseline_points = [], []
    counters = {"cells_visited": 0, "total_cells": 0, "region_cells": 0, "padp_cells": 0}
    for k in trx_ids:
        tdir = out / f"trx{k}"
        cfr = cfrs[k]
        with timer.stage("padp"):
            padp = stage_padp(cfr, tdir / "padp", d["padp"]["window"])
        with timer.stage("segment"):
            seg = stage_segment(padp, tdir / "regions.csv", **d["segmentation"])
        with timer.stage("estimate"):
            est = stage_estimate(cfr, seg.labels_, padp.noise_floor_db, tdir / "mpcs.csv", sage_params)
        with timer.stage("baseline"):
            baseline_points.extend(max_search_points(padp, scene.trx_positions[k], array.radius_m,
                                                     d["segmentation"]["margin_db"], k))
        all_mpcs.extend(est.mpcs_)
        counters["cells_visited"] += est.cells_visited_
        counters["total_cells"] += est.total_cells_
        counters["region_cells"] += int((seg.labels_ > 0).sum())
        counters["padp_cells"] += int(seg.labels_.size)

    write_mpc_table(out / "mpcs.csv", all_mpcs)
    # downstream stages see the table as written, so staged CLI reruns reproduce them exactly
    all_mpcs = read_mpc_table(out / "mpcs.csv")

    with timer.stage("map"):
        mp = d["mapper"]
        points, structures = stage_map(all_mpcs, scene.trx_positions, array.radius_m, mp["window"], mp["kinds"],
                                       mp["outlier_gate_ns"] * 1e-9, mp["max_rmse_ns"] * 1e-9,
                                       mp["keep_unstructured"])
        write_point_cloud(out / "points.csv", points)
        write_point_cloud(out / "points_maxsearch.csv", baseline_points)
        _write_json(out / "structures.json", structures)
        segs = scene.segments()
        metrics = {
            "proposed": compute_metrics([(p.x, p.y) for p in points], segs) if points else None,
            "max_search": compute_metrics([(p.x, p.y) for p in baseline_points], segs) if baseline_points else None,
            "search_space": {
                **counters,
                "visited_fraction": counters["cells_visited"] / max(counters["total_cells"], 1),
                "region_fraction": counters["region_cells"] / max(counters["padp_cells"], 1),
            },
        }
        write_metrics(out / "metrics.json", metrics)

    with timer.stage("identify"):
        reports = stage_identify(all_mpcs, db, array.center_frequency_hz, d["materials"]["margin_db"],
                                 d["materials"]["top_k"])
        _write_json(out / "materials.json", reports)

    artifacts = sorted(
        p for p in out.rglob("*")
        if p.is_file() and p.name not in ("manifest.json", "timings.json") and p.suffix in (".csv", ".json", ".bin")
    )
    manifest = {
        "package": "thzrecon",
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "config": config.inputs(),
        "config_sha256": config.digest(),
        "full_grid": bool(sage_params["full_grid"]),
        "stages": ["simulate", "padp", "segment", "estimate", "map", "identify"],
        "artifacts": {str(p.relative_to(out)): _sha256(p) for p in artifacts},
    }
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "timings.json", {"seconds": {k: round(v, 4) for k, v in timer.times.items()}})
    return {"out_dir": str(out), "metrics": metrics, "timings": timer.times, "structures": structures,
            "materials": reports, "n_points": len(points)}


def benchmark_search_space(config: PipelineConfig, trx_id=0, repeats=1) -> dict:
    """Region-restricted versus full-grid estimation on one TRx.

    Both runs use the same per-column code; only the candidate set differs.
    Reports visited cells, their ratio, the best-of-``repeats`` wall time and
    how well the two refined point clouds agree (one delay bin, one
    rotation step).
    """
    d = config.data
    array = config.array_config()
    scene = config.scene()
    gt = generate_ground_truth(scene, array)
    seed = np.random.SeedSequence([int(d["simulation"]["seed"]), int(trx_id)]).generate_state(1)[0]
    cfr = synthesize_cfr(gt.mpcs(trx_id), array, d["simulation"]["noise_power_db"], seed=int(seed),
                         trx_id=trx_id, trx_position=scene.trx_positions[trx_id])
    padp = padp_from_cfr(cfr, d["padp"]["window"])
    seg = RegionSegmenter(**d["segmentation"]).fit(padp)
    result = benchmark_estimation(cfr, seg.labels_, padp.noise_floor_db, d["sage"], repeats)
    m = d["mapper"]
    clouds = {}
    for mode, est in result["_estimators"].items():
        mpcs = est.mpcs_ if est is not None else []
        clouds[mode], _ = stage_map(mpcs, scene.trx_positions, array.radius_m, m["window"], tuple(m["kinds"]),
                                    m["outlier_gate_ns"] * 1e-9, m["max_rmse_ns"] * 1e-9, m["keep_unstructured"])
    step = float(np.median(np.diff(np.sort(np.unique(np.mod(array.rotation_angles_deg, 360.0)))))) \
        if array.n_angles > 1 else 1.0
    a, b = cloud_agreement(clouds["region"], clouds["full_grid"], array.delay_step_s, step)
    result.update({"region_points": len(clouds["region"]), "full_grid_points": len(clouds["full_grid"]),
                   "region_matched": a, "full_grid_matched": b})
    result["_clouds"] = clouds
    return result


def benchmark_estimation(cfr, label_map, noise_floor_db, sage_params, repeats=1) -> dict:
    params = {k: v for k, v in sage_params.items() if k != "full_grid"}
    result = {}
    estimators = {}
    for mode, full in (("region", False), ("full_grid", True)):
        best = np.inf
        for _ in range(max(1, repeats)):
            start = time.perf_counter()
            if full or np.any(label_map):
                est = CcaSageEstimator(**params, full_grid=full).fit(
                    cfr, label_map=label_map, noise_floor_db=noise_floor_db)
            else:
                est = None
            best = min(best, time.perf_counter() - start)
        estimators[mode] = est
        result[f"{mode}_seconds"] = best
    region, full = estimators["region"], estimators["full_grid"]
    region_cells = region.cells_visited_ if region is not None else 0
    result.update({
        "region_cells": int(region_cells),
        "total_cells": int(full.cells_visited_),
        "ratio": region_cells / full.cells_visited_ if full.cells_visited_ else 0.0,
        "speedup": result["full_grid_seconds"] / result["region_seconds"] if region is not None else float("inf"),
    })
    result["_estimators"] = estimators
    return result


# -- file-driven stage helpers used by the CLI -------------------------------


def load_label_map(regions_csv, padp_path):
    padp, _ = read_padp(padp_path)
    regions = read_regions_csv(regions_csv)
    return region_label_map(regions, padp.shape), padp


def load_mpcs(paths):
    out = []
    for p in paths:
        out.extend(read_mpc_table(p))
    return out


__all__ = [
    "PipelineConfig",
    "StageError",
    "run_pipeline",
    "benchmark_search_space",
    "benchmark_estimation",
    "stage_simulate",
    "stage_padp",
    "stage_segment",
    "stage_estimate",
    "stage_map",
    "stage_identify",
    "load_label_map",
    "load_mpcs",
    "read_cfr",
]
