"""Delay-domain transform and power-angle-delay profile."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel import ChannelFrequencyResponse

# Cells more than this far above the lower-half median are treated as signal
# when averaging the noise floor.
NOISE_GATE_DB = 15.0


@dataclass(eq=False)
class Padp:
    power_db: np.ndarray
    delay_grid_s: np.ndarray
    angle_grid_deg: np.ndarray
    noise_floor_db: float

    def __post_init__(self):
        self.power_db = np.asarray(self.power_db, dtype=float)
        if self.power_db.shape != (self.delay_grid_s.size, self.angle_grid_deg.size):
            raise ValueError("PADP matrix does not match its grids")

    @property
    def delay_step_s(self) -> float:
        return float(self.delay_grid_s[1] - self.delay_grid_s[0])

    @property
    def shape(self):
        return self.power_db.shape


def cfr_to_cir(cfr, window="rect") -> np.ndarray:
    """Per-column inverse DFT with ``1/N`` scaling.

    A flat unit spectrum maps to a unit impulse at delay bin 0. ``window``
    is ``"rect"`` (no taper) or ``"hann"``.
    """
    values = cfr.values if isinstance(cfr, ChannelFrequencyResponse) else np.asarray(cfr, dtype=complex)
    if window == "hann":
        taper = np.hanning(values.shape[0] + 2)[1:-1]
        values = values * (taper / taper.mean())[:, None]
    elif window not in ("rect", None):
        raise ValueError(f"unknown window {window!r}")
    return np.fft.ifft(values, axis=0)


def estimate_noise_floor(power_db) -> float:
    """Robust noise level of a dB map.

    Starts from the median of the lowest half of the cells, then averages
    (in linear power) every cell less than ``NOISE_GATE_DB`` above it. For
    a constant map this returns the constant; for pure complex Gaussian noise
    it returns the mean noise power.
    """
    p = np.asarray(power_db, dtype=float).ravel()
    if p.size == 0:
        raise ValueError("cannot estimate the noise floor of an empty map")
    finite = p[np.isfinite(p)]
    if finite.size == 0:
        return -np.inf
    ordered = np.sort(finite)
    lower = ordered[: max(1, ordered.size // 2)]
    anchor = float(np.median(lower))
    kept = finite[finite <= anchor + NOISE_GATE_DB]
    # scale before exponentiating to avoid underflow of very low floors
    return float(anchor + 10.0 * np.log10(np.mean(10.0 ** ((kept - anchor) / 10.0))))


def compute_padp(cir, delay_grid_s, angle_grid_deg) -> Padp:
    with np.errstate(divide="ignore"):
        power = 20.0 * np.log10(np.abs(cir))
    return Padp(power, np.asarray(delay_grid_s, float), np.asarray(angle_grid_deg, float),
                estimate_noise_floor(power))


def padp_from_cfr(cfr: ChannelFrequencyResponse, window="rect") -> Padp:
    return compute_padp(cfr_to_cir(cfr, window), cfr.config.delay_grid_s, cfr.config.rotation_angles_deg)


def write_padp(stem, padp: Padp, extra=None):
    """CSV matrix (delay rows x angle columns, dB) plus a JSON grid header."""
    stem = Path(stem)
    csv_path = stem.with_suffix(".csv")
    header = {
        "format": "thzrecon-padp/1",
        "data_file": csv_path.name,
        "rows": "delay",
        "columns": "rotation angle",
        "units": {"power": "dB", "delay": "ns", "angle": "deg"},
        "delay_start_ns": float(padp.delay_grid_s[0] * 1e9),
        "delay_step_ns": float(padp.delay_step_s * 1e9),
        "n_delay": int(padp.delay_grid_s.size),
        "angle_grid_deg": [float(a) for a in padp.angle_grid_deg],
        "noise_floor_db": round(float(padp.noise_floor_db), 6),
    }
    if extra:
        header.update(extra)
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    np.savetxt(csv_path, padp.power_db, fmt="%.4f", delimiter=",")
    return csv_path


def read_padp(path) -> tuple[Padp, dict]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    if header.get("format") != "thzrecon-padp/1":
        raise ValueError(f"{path} is not a PADP header")
    power = np.loadtxt(path.parent / header["data_file"], delimiter=",", ndmin=2)
    delays = (header["delay_start_ns"] + header["delay_step_ns"] * np.arange(header["n_delay"])) * 1e-9
    padp = Padp(power, delays, np.asarray(header["angle_grid_deg"], float), float(header["noise_floor_db"]))
    return padp, header
