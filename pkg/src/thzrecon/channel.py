"""Monostatic rotating-antenna signal model.

A transceiver with co-located horn antennas rotates on a circle of radius
``r`` around a fixed centre. At rotation angle ``phi`` and frequency ``f``
the channel is

    H(f, phi) = sum_l alpha_l * a_l(f, phi) * exp(-j 2 pi f tau_l)

with the array response ``a_l = exp(j 4 pi f r cos(theta_l - phi) / c) *
sqrt(G(theta_l - phi))``. Path delays ``tau_l`` are referenced to the
rotation centre; the array phase term removes the ``2 r cos / c`` that the
antenna offset saves on the round trip.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

__all__ = [
    "SPEED_OF_LIGHT",
    "ArrayConfig",
    "Mpc",
    "ChannelFrequencyResponse",
    "antenna_gain",
    "array_response",
    "synthesize_cfr",
    "tone_sum",
    "tone_correlate",
    "write_cfr",
    "read_cfr",
]


def _default_angles():
    return np.arange(360, dtype=float)


@dataclass(frozen=True, eq=False)
class ArrayConfig:
    """Sounder geometry and sweep grids.

    The frequency grid is half-open: ``n_freq_points`` bins of width
    ``bandwidth / n_freq_points`` starting at ``freq_start_hz``. With this
    convention the inverse DFT lands on delays ``k / bandwidth`` exactly.
    """

    radius_m: float = 0.23
    rotation_angles_deg: np.ndarray = field(default_factory=_default_angles)
    freq_start_hz: float = 290e9
    freq_stop_hz: float = 310e9
    n_freq_points: int = 2001
    antenna_peak_gain_dbi: float = 26.0
    hpbw_deg: float = 8.0
    sidelobe_level_db: float = -30.0
    trx_height_m: float = 2.0

    def __post_init__(self):
        angles = np.asarray(self.rotation_angles_deg, dtype=float).ravel()
        object.__setattr__(self, "rotation_angles_deg", angles)
        if not self.radius_m >= 0:
            raise ValueError(f"radius_m must be non-negative, got {self.radius_m}")
        if self.n_freq_points < 2:
            raise ValueError("n_freq_points must be at least 2")
        if not self.freq_stop_hz > self.freq_start_hz:
            raise ValueError("freq_stop_hz must exceed freq_start_hz")
        if angles.size == 0:
            raise ValueError("rotation grid is empty")
        if np.any(np.diff(angles) <= 0):
            raise ValueError("rotation grid must be strictly increasing")
        if angles[0] < 0 or angles[-1] >= 360:
            raise ValueError("rotation angles must lie in [0, 360)")
        if self.hpbw_deg <= 0:
            raise ValueError("hpbw_deg must be positive")

    @property
    def bandwidth_hz(self) -> float:
        return self.freq_stop_hz - self.freq_start_hz

    @property
    def freq_step_hz(self) -> float:
        return self.bandwidth_hz / self.n_freq_points

    @property
    def frequencies_hz(self) -> np.ndarray:
        return self.freq_start_hz + self.freq_step_hz * np.arange(self.n_freq_points)

    @property
    def center_frequency_hz(self) -> float:
        return 0.5 * (self.freq_start_hz + self.freq_stop_hz)

    @property
    def delay_step_s(self) -> float:
        """Delay bin width of the inverse DFT, ``1 / bandwidth``."""
        return 1.0 / self.bandwidth_hz

    @property
    def delay_grid_s(self) -> np.ndarray:
        return np.arange(self.n_freq_points) * self.delay_step_s

    @property
    def max_delay_s(self) -> float:
        """Largest synthesizable delay, ``(n_freq - 1) / bandwidth``."""
        return (self.n_freq_points - 1) / self.bandwidth_hz

    @property
    def range_resolution_m(self) -> float:
        """One-way distance spanned by one delay bin, ``c / (2 B)``."""
        return SPEED_OF_LIGHT * self.delay_step_s / 2.0

    @property
    def n_angles(self) -> int:
        return self.rotation_angles_deg.size

    def with_updates(self, **kwargs) -> "ArrayConfig":
        params = self.to_dict()
        params.update(kwargs)
        return ArrayConfig(**params)

    def to_dict(self) -> dict:
        return {
            "radius_m": float(self.radius_m),
            "rotation_angles_deg": [float(a) for a in self.rotation_angles_deg],
            "freq_start_hz": float(self.freq_start_hz),
            "freq_stop_hz": float(self.freq_stop_hz),
            "n_freq_points": int(self.n_freq_points),
            "antenna_peak_gain_dbi": float(self.antenna_peak_gain_dbi),
            "hpbw_deg": float(self.hpbw_deg),
            "sidelobe_level_db": float(self.sidelobe_level_db),
            "trx_height_m": float(self.trx_height_m),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArrayConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if "rotation_step_deg" in data and "rotation_angles_deg" not in data:
            known["rotation_angles_deg"] = np.arange(0.0, 360.0, float(data["rotation_step_deg"]))
        return cls(**known)


@dataclass(frozen=True)
class Mpc:
    """One propagation path: complex amplitude, centre-referenced delay, azimuth."""

    amplitude: complex
    delay_s: float
    angle_deg: float

    def __post_init__(self):
        if self.delay_s < 0:
            raise ValueError(f"delay must be non-negative, got {self.delay_s}")
        if not 0.0 <= self.angle_deg < 360.0:
            raise ValueError(f"angle must lie in [0, 360), got {self.angle_deg}")


@dataclass(eq=False)
class ChannelFrequencyResponse:
    values: np.ndarray
    config: ArrayConfig
    trx_id: int = 0
    trx_position: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        expected = (self.config.n_freq_points, self.config.n_angles)
        if self.values.shape != expected:
            raise ValueError(f"CFR shape {self.values.shape} does not match grids {expected}")


def wrap_deg(angle):
    """Wrap angles to [-180, 180)."""
    return (np.asarray(angle, dtype=float) + 180.0) % 360.0 - 180.0


def antenna_gain(offset_deg, peak_gain_dbi=26.0, hpbw_deg=8.0, sidelobe_level_db=-30.0):
    """Combined Tx+Rx power gain (linear) at a pointing offset.

    Each horn follows a parabolic-in-dB main lobe, ``-12 (offset / hpbw)^2``
    dB, so it is 3 dB down at half the beamwidth, floored at
    ``sidelobe_level_db`` below peak. Both antennas point the same way, so the
    monostatic weight is the square of the single-antenna gain.
    """
    offset = wrap_deg(offset_deg)
    rolloff = np.maximum(-12.0 * (offset / hpbw_deg) ** 2, sidelobe_level_db)
    return 10.0 ** (2.0 * (peak_gain_dbi + rolloff) / 10.0)


def _gain_for(config: ArrayConfig, offset_deg):
    return antenna_gain(
        offset_deg, config.antenna_peak_gain_dbi, config.hpbw_deg, config.sidelobe_level_db
    )


def array_response(mpc: Mpc, f, phi_deg, config: ArrayConfig):
    """Field-domain response of the rotating TRx to ``mpc`` at ``(f, phi)``."""
    offset = np.deg2rad(mpc.angle_deg - np.asarray(phi_deg, dtype=float))
    phase = np.exp(1j * 4.0 * np.pi * np.asarray(f, dtype=float) * config.radius_m * np.cos(offset) / SPEED_OF_LIGHT)
    return phase * np.sqrt(_gain_for(config, mpc.angle_deg - np.asarray(phi_deg, dtype=float)))


_BLOCK = 64


def _phase(x):
    """``exp(j 2 pi x)`` with ``x`` reduced mod 1 first, which keeps large phases accurate."""
    return np.exp(2j * np.pi * np.mod(x, 1.0))


def tone_sum(coef, delays_s, f0_hz, df_hz, n):
    """``out[k] = sum_l coef[l] * exp(-j 2 pi (f0 + k df) delays[l])`` for ``k < n``.

    The index is split as ``k = 64 a + b`` so the bulk of the work is one
    small matrix product instead of ``n * len(delays)`` exponentials.
    """
    coef = np.asarray(coef, dtype=complex)
    delays = np.asarray(delays_s, dtype=float)
    na = -(-n // _BLOCK)
    x = -df_hz * delays
    inner = _phase(np.multiply.outer(np.arange(_BLOCK), x))
    outer = _phase(np.multiply.outer(np.arange(na) * _BLOCK, x)) * (coef * _phase(-f0_hz * delays))
    return (outer @ inner.T).ravel()[:n]


def tone_correlate(h, delays_s, f0_hz, df_hz):
    """Matched filter ``(1/n) sum_k h[k] exp(+j 2 pi (f0 + k df) tau)`` for each delay."""
    h = np.asarray(h, dtype=complex)
    delays = np.asarray(delays_s, dtype=float)
    n = h.size
    na = -(-n // _BLOCK)
    grid = np.zeros(na * _BLOCK, dtype=complex)
    grid[:n] = h
    x = df_hz * delays
    partial = grid.reshape(na, _BLOCK) @ _phase(np.multiply.outer(np.arange(_BLOCK), x))
    outer = _phase(np.multiply.outer(np.arange(na) * _BLOCK, x))
    return _phase(f0_hz * delays) * np.einsum("am,am->m", outer, partial) / n


def synthesize_cfr(mpcs, config: ArrayConfig, noise_power_db=None, seed=None, *, trx_id=0,
                   trx_position=(0.0, 0.0)) -> ChannelFrequencyResponse:
    """Evaluate the signal model on the config's (frequency x angle) grid.

    Parameters
    ----------
    mpcs : sequence of Mpc
    noise_power_db : float or None
        Power of the circularly-symmetric complex Gaussian noise added to
        each (f, phi) cell, in dB relative to unit transmit power. ``None``
        gives a noiseless response.
    seed : int or None
        Seed for the noise generator.
    """
    mpcs = list(mpcs)
    freqs = config.frequencies_hz
    phis = config.rotation_angles_deg
    values = np.zeros((config.n_freq_points, phis.size), dtype=complex)

    if mpcs:
        amp = np.array([m.amplitude for m in mpcs], dtype=complex)
        tau = np.array([m.delay_s for m in mpcs], dtype=float)
        theta = np.array([m.angle_deg for m in mpcs], dtype=float)
        if np.any(tau > config.max_delay_s):
            raise ValueError(
                f"path delay {tau.max():.4e} s exceeds the alias-free range {config.max_delay_s:.4e} s"
            )
        offset = theta[None, :] - phis[:, None]
        eff_delay = tau[None, :] - 2.0 * config.radius_m * np.cos(np.deg2rad(offset)) / SPEED_OF_LIGHT
        weights = amp[None, :] * np.sqrt(_gain_for(config, offset))
        for j in range(phis.size):
            values[:, j] = tone_sum(weights[j], eff_delay[j], config.freq_start_hz, config.freq_step_hz,
                                    config.n_freq_points)

    if noise_power_db is not None:
        rng = np.random.default_rng(seed)
        sigma = np.sqrt(10.0 ** (noise_power_db / 10.0) / 2.0)
        values = values + sigma * (rng.standard_normal(values.shape) + 1j * rng.standard_normal(values.shape))

    return ChannelFrequencyResponse(values, config, trx_id=trx_id, trx_position=tuple(trx_position))


def write_cfr(stem, cfr: ChannelFrequencyResponse) -> tuple[Path, Path]:
    """Write ``<stem>.json`` (header) and ``<stem>.bin`` (float64 LE, re/im interleaved)."""
    stem = Path(stem)
    header_path = stem.with_suffix(".json")
    data_path = stem.with_suffix(".bin")
    header = {
        "format": "thzrecon-cfr/1",
        "data_file": data_path.name,
        "dtype": "<f8",
        "layout": "row-major (frequency, angle), real/imag interleaved",
        "shape": [int(cfr.values.shape[0]), int(cfr.values.shape[1])],
        "units": {"frequency": "Hz", "angle": "deg", "radius": "m", "values": "linear field"},
        "frequency_grid": "f_k = freq_start_hz + k * (freq_stop_hz - freq_start_hz) / n_freq_points",
        "trx_id": int(cfr.trx_id),
        "trx_position_m": [float(v) for v in cfr.trx_position],
        "array": cfr.config.to_dict(),
    }
    header_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    interleaved = np.empty(cfr.values.shape + (2,), dtype="<f8")
    interleaved[..., 0] = cfr.values.real
    interleaved[..., 1] = cfr.values.imag
    data_path.write_bytes(interleaved.tobytes(order="C"))
    return header_path, data_path


def read_cfr(path) -> ChannelFrequencyResponse:
    path = Path(path)
    header_path = path.with_suffix(".json")
    header = json.loads(header_path.read_text())
    if header.get("format") != "thzrecon-cfr/1":
        raise ValueError(f"{header_path} is not a CFR header")
    shape = tuple(header["shape"])
    raw = np.frombuffer((header_path.parent / header["data_file"]).read_bytes(), dtype="<f8")
    raw = raw.reshape(shape + (2,))
    config = ArrayConfig.from_dict(header["array"])
    return ChannelFrequencyResponse(
        raw[..., 0] + 1j * raw[..., 1],
        config,
        trx_id=header.get("trx_id", 0),
        trx_position=tuple(header.get("trx_position_m", (0.0, 0.0))),
    )
