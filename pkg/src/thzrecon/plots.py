"""Figures for a pipeline run, rendered off-screen with matplotlib.

Each plotting function takes already-loaded data and an output path; the
``emit_plots`` driver finds the artifacts of a run directory and renders
whatever it can, reporting what it skipped.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import read_point_cloud  # noqa: E402
from .padp import read_padp  # noqa: E402
from .scene import load_scene, reference_scene  # noqa: E402
from .segmentation import read_regions_csv, region_label_map  # noqa: E402

PLOT_NAMES = ("padp_heatmap", "label_map", "reconstruction", "error_cdf", "rl_histogram")


class MissingArtifactError(FileNotFoundError):
    """A plot's input file is absent; ``artifact`` names it."""

    def __init__(self, plot, artifact):
        super().__init__(f"{plot}: missing artifact {artifact}")
        self.plot = plot
        self.artifact = str(artifact)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_padp(padp, path, dynamic_range_db=60.0):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    top = float(np.max(padp.power_db))
    delays_ns = padp.delay_grid_s * 1e9
    im = ax.pcolormesh(padp.angle_grid_deg, delays_ns, padp.power_db, shading="nearest",
                       vmin=top - dynamic_range_db, vmax=top, cmap="viridis")
    ax.set_xlabel("rotation angle (deg)")
    ax.set_ylabel("delay (ns)")
    ax.set_ylim(0, min(delays_ns[-1], 60.0))
    fig.colorbar(im, ax=ax, label="power (dB)")
    return _save(fig, path)


def plot_label_map(labels, padp, path):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    labels = np.asarray(labels)
    n = int(labels.max()) if labels.size else 0
    shown = np.ma.masked_equal(labels, 0)
    cmap = plt.get_cmap("tab20", max(n, 1))
    ax.pcolormesh(padp.angle_grid_deg, padp.delay_grid_s * 1e9, shown, shading="nearest", cmap=cmap,
                  vmin=0.5, vmax=max(n, 1) + 0.5)
    ax.set_xlabel("rotation angle (deg)")
    ax.set_ylabel("delay (ns)")
    ax.set_ylim(0, min(padp.delay_grid_s[-1] * 1e9, 60.0))
    ax.set_title(f"{n} regions")
    return _save(fig, path)


def plot_reconstruction(points, scene, path, baseline=None):
    """Scatter of mapped points over the ground-truth walls and TRx positions."""
    fig, ax = plt.subplots(figsize=(7, 5))
    for seg in scene.segments():
        ax.plot(seg[:, 0], seg[:, 1], color="0.2", lw=2)
    if baseline is not None and len(baseline):
        ax.scatter(baseline["x_m"], baseline["y_m"], s=3, color="tab:orange", alpha=0.4, label="max search")
    if len(points):
        ax.scatter(points["x_m"], points["y_m"], s=4, color="tab:blue", label="reconstructed")
    trx = np.asarray(scene.trx_positions, dtype=float).reshape(-1, 2)
    ax.scatter(trx[:, 0], trx[:, 1], marker="^", color="tab:red", label="TRx")
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def plot_error_cdf(metrics, path):
    """Step CDF drawn from the metrics file; returns the plotted x values in metres."""
    cdf = metrics["cdf"]
    x = np.asarray(cdf["error_m"], dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.step(x * 100.0, cdf["probability"], where="post")
    ax.set_xlabel("distance error (cm)")
    ax.set_ylabel("CDF")
    ax.set_title(f"MDE {metrics['mde_m'] * 100:.2f} cm, RMSE {metrics['rmse_m'] * 100:.2f} cm")
    ax.grid(True, alpha=0.3)
    _save(fig, path)
    return x


def plot_rl_histogram(reports, path, max_regions=8):
    """Reflection-loss histograms of the regions with the most paths."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ranked = sorted(reports, key=lambda r: (-len(r.get("rl_db", [])), r["trx_id"], r["region_label"]))
    for rep in ranked[:max_regions]:
        values = rep.get("rl_db", [])
        if values:
            ax.hist(values, bins=30, histtype="step",
                    label=f"TRx {rep['trx_id']} / region {rep['region_label']}")
    ax.set_xlabel("reflection loss (dB)")
    ax.set_ylabel("paths")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=7)
    return _save(fig, path)


def _scene_from_manifest(run_dir):
    manifest = Path(run_dir) / "manifest.json"
    if manifest.is_file():
        scene = json.loads(manifest.read_text()).get("config", {}).get("scene")
        if isinstance(scene, str) and not scene.startswith("builtin:") and Path(scene).is_file():
            return load_scene(scene)
    return reference_scene()


def emit_plots(run_dir, out_dir=None, trx_id=0, scene=None) -> dict:
    """Render every plot whose inputs exist in ``run_dir``.

    Returns ``{"written": {name: path}, "skipped": {name: reason}}``.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "plots"
    written, skipped = {}, {}

    def need(name, path):
        if not Path(path).is_file():
            raise MissingArtifactError(name, path)
        return Path(path)

    def attempt(name, fn):
        try:
            written[name] = str(fn())
        except MissingArtifactError as exc:
            skipped[name] = str(exc)

    trx_dir = run_dir / f"trx{trx_id}"
    padp_path = trx_dir / "padp.json"

    def heatmap():
        padp, _ = read_padp(need("padp_heatmap", padp_path))
        return plot_padp(padp, out_dir / "padp_heatmap.png")

    def labels():
        padp, _ = read_padp(need("label_map", padp_path))
        regions = read_regions_csv(need("label_map", trx_dir / "regions.csv"))
        return plot_label_map(region_label_map(regions, padp.power_db.shape), padp, out_dir / "label_map.png")

    def scatter():
        pts = read_point_cloud(need("reconstruction", run_dir / "points.csv"))
        base_path = run_dir / "points_maxsearch.csv"
        base = read_point_cloud(base_path) if base_path.is_file() else None
        sc = scene if scene is not None else _scene_from_manifest(run_dir)
        return plot_reconstruction(pts, sc, out_dir / "reconstruction.png", base)

    def cdf():
        metrics = json.loads(need("error_cdf", run_dir / "metrics.json").read_text())
        metrics = metrics.get("proposed", metrics)
        plot_error_cdf(metrics, out_dir / "error_cdf.png")
        return out_dir / "error_cdf.png"

    def hist():
        reports = json.loads(need("rl_histogram", run_dir / "materials.json").read_text())
        return plot_rl_histogram(reports, out_dir / "rl_histogram.png")

    for name, fn in zip(PLOT_NAMES, (heatmap, labels, scatter, cdf, hist)):
        attempt(name, fn)
    return {"written": written, "skipped": skipped}


__all__ = [
    "PLOT_NAMES",
    "MissingArtifactError",
    "emit_plots",
    "plot_error_cdf",
    "plot_label_map",
    "plot_padp",
    "plot_reconstruction",
    "plot_rl_histogram",
]
