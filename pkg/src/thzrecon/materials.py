"""Reflection-loss material identification at 300 GHz.

Database entries hold normal-incidence reflection loss. Spectroscopy samples
are measured at a 10 degree incidence, so their loss is first mapped back to
normal incidence through the Fresnel equations (lossless dielectric assumed).
Channel-derived losses come from de-embedded path power minus free-space
path loss, and the region minimum is matched against the database.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import optimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

CATEGORIES = ("biological", "metal", "building", "functional")

_ETA2_MAX = 1e8


@dataclass(frozen=True)
class MaterialEntry:
    name: str
    category: str
    rl_min_db: float
    rl_max_db: float
    sample_count: int = 0

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r} for {self.name!r}")
        if not 0.0 <= self.rl_min_db <= self.rl_max_db:
            raise ValueError(f"{self.name}: need 0 <= rl_min_db <= rl_max_db")

    @property
    def nominal_rl_db(self) -> float:
        return 0.5 * (self.rl_min_db + self.rl_max_db)

    def distance_db(self, rl_db: float) -> float:
        if rl_db < self.rl_min_db:
            return self.rl_min_db - rl_db
        if rl_db > self.rl_max_db:
            return rl_db - self.rl_max_db
        return 0.0


class MaterialDatabase:
    """Named reflection-loss entries, loaded from a CSV file."""

    fieldnames = ("name", "category", "rl_min_db", "rl_max_db", "sample_count")

    def __init__(self, entries):
        self.entries = list(entries)
        names = [e.name.lower() for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate material names in database")
        self._by_name = {e.name.lower(): e for e in self.entries}

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, name):
        return name.lower() in self._by_name

    def get(self, name: str) -> MaterialEntry:
        try:
            return self._by_name[name.lower()]
        except KeyError:
            raise KeyError(f"material {name!r} not in database") from None

    @classmethod
    def from_csv(cls, path) -> "MaterialDatabase":
        with open(path, newline="") as fh:
            return cls._parse(csv.DictReader(fh))

    @classmethod
    def builtin(cls) -> "MaterialDatabase":
        text = resources.files("thzrecon").joinpath("data/materials.csv").read_text()
        return cls._parse(csv.DictReader(text.splitlines()))

    @classmethod
    def load(cls, path=None) -> "MaterialDatabase":
        if path is None or str(path) == "builtin":
            return cls.builtin()
        return cls.from_csv(path)

    @classmethod
    def _parse(cls, reader):
        missing = set(cls.fieldnames) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"material database is missing columns: {sorted(missing)}")
        entries = [
            MaterialEntry(
                name=row["name"].strip(),
                category=row["category"].strip(),
                rl_min_db=float(row["rl_min_db"]),
                rl_max_db=float(row["rl_max_db"]),
                sample_count=int(row["sample_count"] or 0),
            )
            for row in reader
        ]
        return cls(entries)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.fieldnames)
            for e in self.entries:
                writer.writerow([e.name, e.category, f"{e.rl_min_db:.2f}", f"{e.rl_max_db:.2f}", e.sample_count])


def fresnel_reflection(eta1, eta2, gamma1_deg):
    """Fresnel amplitude reflection coefficient (perpendicular polarization).

    Uses principal square roots throughout, so complex permittivities and
    total internal reflection need no special casing.
    """
    eta1 = np.asarray(eta1, dtype=complex)
    eta2 = np.asarray(eta2, dtype=complex)
    if np.any(eta2 == 0):
        raise ValueError("eta2 must be non-zero")
    gamma1 = np.deg2rad(np.asarray(gamma1_deg, dtype=float))
    cos1 = np.cos(gamma1)
    cos2 = np.sqrt(1.0 - (eta1 / eta2) * np.sin(gamma1) ** 2)
    a = np.sqrt(eta1) * cos1
    b = np.sqrt(eta2) * cos2
    out = (a - b) / (a + b)
    return out[()] if out.ndim == 0 else out


def reflection_loss_db(reflection) -> float:
    """Power reflection loss ``-20 log10 |R|``; ``inf`` for ``R = 0``."""
    mag = abs(complex(reflection))
    if mag > 1.0 + 1e-12:
        raise ValueError(f"|R| = {mag} exceeds 1 (nonphysical)")
    if mag == 0.0:
        return math.inf
    return max(0.0, -20.0 * math.log10(min(mag, 1.0)))


def _rl_lossless(eta2, gamma1_deg, eta1=1.0):
    return reflection_loss_db(fresnel_reflection(eta1, eta2, gamma1_deg))


def permittivity_from_loss(rl_db, gamma1_deg, eta1=1.0) -> float:
    """Real permittivity whose Fresnel loss at ``gamma1_deg`` equals ``rl_db``.

    Bisection over ``log10(eta2)`` on ``(eta1, 1e8]``, where the loss is
    strictly decreasing.
    """
    if rl_db < 0:
        raise ValueError("reflection loss must be non-negative")
    floor = _rl_lossless(_ETA2_MAX, gamma1_deg, eta1)
    if rl_db < floor:
        raise ValueError(
            f"RL {rl_db:.6f} dB is below the {floor:.6f} dB reachable at {gamma1_deg} deg incidence"
        )
    lo = math.log10(eta1) + 1e-12
    hi = math.log10(_ETA2_MAX)

    def residual(x):
        return _rl_lossless(10.0 ** x, gamma1_deg, eta1) - rl_db

    return 10.0 ** optimize.bisect(residual, lo, hi, xtol=1e-14, maxiter=400)


def calibrate_to_normal(rl_db, gamma1_deg, eta1=1.0) -> float:
    """Map a reflection loss measured at ``gamma1_deg`` to normal incidence."""
    if rl_db < 0:
        raise ValueError("reflection loss must be non-negative")
    if gamma1_deg == 0 or rl_db == 0:
        return float(rl_db)
    eta2 = permittivity_from_loss(rl_db, gamma1_deg, eta1)
    return _rl_lossless(eta2, 0.0, eta1)


def free_space_path_loss_db(tau_s, f_hz):
    return 20.0 * np.log10(4.0 * np.pi * f_hz * np.asarray(tau_s, dtype=float))


def mpc_reflection_loss(power_loss_db, tau_s, f_hz):
    """Reflection loss of a path: de-embedded path loss minus FSPL at its delay."""
    tau = np.asarray(tau_s, dtype=float)
    if np.any(tau <= 0):
        raise ValueError("delay must be positive to evaluate free-space path loss")
    out = np.asarray(power_loss_db, dtype=float) - free_space_path_loss_db(tau, f_hz)
    return out[()] if out.ndim == 0 else out


@dataclass
class RegionReflectionProfile:
    label: int
    rl_db: np.ndarray
    min_rl_db: float
    specular: np.ndarray
    diffuse: np.ndarray

    @property
    def specular_count(self) -> int:
        return int(self.specular.size)

    @property
    def diffuse_count(self) -> int:
        return int(self.diffuse.size)


def classify_region(rl_db, margin_db=3.0, label=0) -> RegionReflectionProfile:
    """Split a region's per-path losses into specular and diffuse members.

    Members within ``margin_db`` of the region minimum are specular.
    ``specular`` and ``diffuse`` hold member indices.
    """
    rl = np.asarray(rl_db, dtype=float).ravel()
    if rl.size == 0:
        raise ValueError("region has no reflection-loss values")
    min_rl = float(rl.min())
    is_spec = rl <= min_rl + margin_db
    return RegionReflectionProfile(
        label=int(label),
        rl_db=rl,
        min_rl_db=min_rl,
        specular=np.flatnonzero(is_spec),
        diffuse=np.flatnonzero(~is_spec),
    )


@dataclass(frozen=True)
class MaterialMatch:
    name: str
    distance_db: float
    category: str


def identify_material(min_rl_db, db: MaterialDatabase) -> list[MaterialMatch]:
    """Rank database entries by distance from ``min_rl_db`` to their loss interval."""
    if len(db) == 0:
        raise ValueError("material database is empty")
    matches = [MaterialMatch(e.name, e.distance_db(float(min_rl_db)), e.category) for e in db]
    return sorted(matches, key=lambda m: (m.distance_db, m.name))


def region_report(profile: RegionReflectionProfile, db: MaterialDatabase, top_k=3) -> dict:
    ranked = identify_material(profile.min_rl_db, db)
    return {
        "region_label": profile.label,
        "min_rl_db": round(profile.min_rl_db, 4),
        "specular_count": profile.specular_count,
        "diffuse_count": profile.diffuse_count,
        "top_matches": [{"name": m.name, "distance_db": round(m.distance_db, 4)} for m in ranked[:top_k]],
    }


class MaterialIdentifier(BaseEstimator):
    """Nearest-entry classifier over a reflection-loss database.

    ``fit`` loads the database; ``predict`` maps minimum reflection losses
    (dB) to material names.
    """

    def __init__(self, database="builtin"):
        self.database = database

    def fit(self, X=None, y=None):
        db = self.database
        self.database_ = db if isinstance(db, MaterialDatabase) else MaterialDatabase.load(db)
        if len(self.database_) == 0:
            raise ValueError("material database is empty")
        self.classes_ = np.array(sorted(e.name for e in self.database_))
        return self

    def rank(self, rl_db):
        check_is_fitted(self, "database_")
        return identify_material(rl_db, self.database_)

    def predict(self, X):
        check_is_fitted(self, "database_")
        values = np.asarray(X, dtype=float).ravel()
        return np.array([identify_material(v, self.database_)[0].name for v in values])
