"""2-D wall scenes and single-bounce backscatter ground truth."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .channel import SPEED_OF_LIGHT, ArrayConfig, Mpc, antenna_gain, tone_correlate, tone_sum, wrap_deg
from .materials import MaterialDatabase, free_space_path_loss_db


@dataclass(frozen=True)
class Wall:
    id: str
    start: tuple[float, float]
    end: tuple[float, float]
    material: str
    backscatter_extra_db: float = 0.0

    def __post_init__(self):
        if np.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1]) <= 0:
            raise ValueError(f"wall {self.id!r} has zero length")


@dataclass
class Scene:
    walls: list[Wall]
    trx_positions: list[tuple[float, float]]
    materials: MaterialDatabase = field(default_factory=MaterialDatabase.builtin)
    database_ref: str = "builtin"

    def __post_init__(self):
        ids = [w.id for w in self.walls]
        if len(set(ids)) != len(ids):
            raise ValueError("wall ids must be unique")
        for k, p in enumerate(self.trx_positions):
            for w in self.walls:
                if point_segment_distance(p, w.start, w.end) < 1e-9:
                    raise ValueError(f"TRx {k} at {p} lies on wall {w.id!r}")

    def segments(self) -> np.ndarray:
        """Wall endpoints as an array of shape (n_walls, 2, 2)."""
        return np.array([[w.start, w.end] for w in self.walls], dtype=float)

    def to_dict(self) -> dict:
        return {
            "walls": [
                {
                    "id": w.id,
                    "start": list(w.start),
                    "end": list(w.end),
                    "material": w.material,
                    "backscatter_extra_db": w.backscatter_extra_db,
                }
                for w in self.walls
            ],
            "trx_positions": [list(p) for p in self.trx_positions],
            "material_database": self.database_ref,
        }

    @classmethod
    def from_dict(cls, data: dict, base_dir=None) -> "Scene":
        db_ref = data.get("material_database", "builtin")
        db_path = db_ref
        if db_ref != "builtin" and base_dir is not None and not Path(db_ref).is_absolute():
            db_path = str(Path(base_dir) / db_ref)
        walls = [
            Wall(
                id=str(w["id"]),
                start=tuple(float(v) for v in w["start"]),
                end=tuple(float(v) for v in w["end"]),
                material=w["material"],
                backscatter_extra_db=float(w.get("backscatter_extra_db", 0.0)),
            )
            for w in data["walls"]
        ]
        trx = [tuple(float(v) for v in p) for p in data["trx_positions"]]
        return cls(walls, trx, MaterialDatabase.load(db_path), database_ref=db_ref)


def load_scene(path) -> Scene:
    path = Path(path)
    return Scene.from_dict(json.loads(path.read_text()), base_dir=path.parent)


def reference_scene() -> Scene:
    """Inner corner plus a long wall, ten TRx 0.5 m apart and 1.23 m from the wall."""
    text = resources.files("thzrecon").joinpath("data/reference_scene.json").read_text()
    return Scene.from_dict(json.loads(text))


def point_segment_distance(p, a, b) -> float:
    p, a, b = (np.asarray(v, dtype=float) for v in (p, a, b))
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return float(np.hypot(*(p - (a + t * ab))))


@dataclass(frozen=True)
class BoresightHit:
    wall_id: str
    point: tuple[float, float]
    distance_m: float


def trace_boresight(scene: Scene, trx, phi_deg, config: ArrayConfig) -> BoresightHit | None:
    """Nearest wall hit of the boresight ray leaving the antenna at angle ``phi``.

    The ray starts at the antenna (``trx + r * u(phi)``); ``distance_m`` is
    measured from there.
    """
    u = np.array([np.cos(np.deg2rad(phi_deg)), np.sin(np.deg2rad(phi_deg))])
    origin = np.asarray(trx, dtype=float) + config.radius_m * u
    best = None
    for wall in scene.walls:
        a = np.asarray(wall.start, dtype=float)
        d = np.asarray(wall.end, dtype=float) - a
        denom = u[0] * (-d[1]) - u[1] * (-d[0])
        if abs(denom) < 1e-15:
            continue
        rhs = a - origin
        t = (rhs[0] * (-d[1]) - rhs[1] * (-d[0])) / denom
        s = (u[0] * rhs[1] - u[1] * rhs[0]) / denom
        if t <= 0 or s < 0 or s > 1:
            continue
        if best is None or t < best[0]:
            best = (t, wall.id)
    if best is None:
        return None
    t, wall_id = best
    hit = origin + t * u
    return BoresightHit(wall_id, (float(hit[0]), float(hit[1])), float(t))


@dataclass(frozen=True)
class GroundTruthPath:
    trx_id: int
    phi_deg: float
    tau_s: float
    theta_deg: float
    power_db: float
    wall_id: str
    hit: tuple[float, float]

    def center_delay_s(self, radius_m) -> float:
        return self.tau_s + 2.0 * radius_m / SPEED_OF_LIGHT


@dataclass
class GroundTruth:
    """Backscatter paths per TRx; ``tau_s`` is measured from the antenna aperture."""

    paths: list[GroundTruthPath]
    config: ArrayConfig

    def for_trx(self, trx_id) -> list[GroundTruthPath]:
        return [p for p in self.paths if p.trx_id == trx_id]

    def mpcs(self, trx_id) -> list[Mpc]:
        """Signal-model paths (centre-referenced delays) for one TRx."""
        return [
            Mpc(10.0 ** (p.power_db / 20.0), p.center_delay_s(self.config.radius_m), p.theta_deg % 360.0)
            for p in self.for_trx(trx_id)
        ]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["trx", "phi", "tau_ns", "theta_deg", "power_db", "wall_id", "hit_x", "hit_y"])
            for p in self.paths:
                writer.writerow([
                    p.trx_id, f"{p.phi_deg:.6g}", f"{p.tau_s * 1e9:.9f}", f"{p.theta_deg:.6g}",
                    f"{p.power_db:.6f}", p.wall_id, f"{p.hit[0]:.9f}", f"{p.hit[1]:.9f}",
                ])


def _coherent_gain_db(taus, amps, thetas, ref, config: ArrayConfig, span_hpbw=3.0) -> float:
    """Largest matched-filter gain of a wall's patch set over a single patch.

    Columns within ``span_hpbw`` beamwidths of the reference patch are
    synthesized from every patch of the wall and correlated on a fine delay
    grid around their own patch delay; the gain is taken relative to that
    patch alone at boresight.
    """
    peak_gain = antenna_gain(0.0, config.antenna_peak_gain_dbi, config.hpbw_deg, config.sidelobe_level_db)
    centre = taus + 2.0 * config.radius_m / SPEED_OF_LIGHT
    near = np.flatnonzero(np.abs(wrap_deg(thetas - thetas[ref])) <= span_hpbw * config.hpbw_deg)
    best = 0.0
    for j in near:
        offset = thetas - thetas[j]
        gain = antenna_gain(offset, config.antenna_peak_gain_dbi, config.hpbw_deg, config.sidelobe_level_db)
        eff = centre - 2.0 * config.radius_m * np.cos(np.deg2rad(offset)) / SPEED_OF_LIGHT
        h = tone_sum(amps * np.sqrt(gain), eff, config.freq_start_hz, config.freq_step_hz, config.n_freq_points)
        grid = taus[j] + np.linspace(-1.0, 1.0, 81) * config.delay_step_s
        peak = np.max(np.abs(tone_correlate(h, grid, config.freq_start_hz, config.freq_step_hz)))
        best = max(best, peak / (amps[j] * np.sqrt(peak_gain)))
    return float(20.0 * np.log10(best))


def generate_ground_truth(scene: Scene, config: ArrayConfig, specular_normalization=True) -> GroundTruth:
    """One backscatter path per boresight wall hit, per TRx and rotation angle.

    Path power is ``-FSPL(tau) - RL(material) - backscatter_extra_db`` at the
    band centre; antenna gain is left to the channel synthesis.

    Each hit stands for a wall patch one rotation step wide, and near the
    wall normal several patches fall inside the beam and add up in the same
    delay bin. With ``specular_normalization`` every patch of a wall (per
    TRx) is scaled down by that coherent gain, measured at the wall's
    closest hit, so the synthesized return there equals the image-source
    power. Off-normal patches then come out weaker by the same amount.
    """
    walls = {w.id: w for w in scene.walls}
    losses = {}
    for w in scene.walls:
        losses[w.id] = scene.materials.get(w.material).nominal_rl_db + w.backscatter_extra_db
    fc = config.center_frequency_hz
    paths = []
    for k, trx in enumerate(scene.trx_positions):
        hits = []
        for phi in config.rotation_angles_deg:
            hit = trace_boresight(scene, trx, phi, config)
            if hit is not None:
                hits.append((float(phi), hit))
        power = {}
        by_wall = {}
        for phi, hit in hits:
            tau = 2.0 * hit.distance_m / SPEED_OF_LIGHT
            power[phi] = -float(free_space_path_loss_db(tau, fc)) - losses[hit.wall_id]
            by_wall.setdefault(hit.wall_id, []).append((phi, tau))
        correction = {}
        for wall_id, items in by_wall.items():
            if not specular_normalization:
                correction[wall_id] = 0.0
                continue
            thetas = np.array([i[0] for i in items])
            taus = np.array([i[1] for i in items])
            amps = np.array([10.0 ** (power[i[0]] / 20.0) for i in items])
            correction[wall_id] = _coherent_gain_db(taus, amps, thetas, int(np.argmin(taus)), config)
        for phi, hit in hits:
            tau = 2.0 * hit.distance_m / SPEED_OF_LIGHT
            paths.append(GroundTruthPath(k, phi, tau, phi, power[phi] - correction[hit.wall_id],
                                         walls[hit.wall_id].id, hit.point))
    return GroundTruth(paths, config)
