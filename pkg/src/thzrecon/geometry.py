"""Structure templates, template fitting, point mapping and refinement.

A region's de-embedded paths trace a delay-versus-angle curve whose shape
depends on the reflecting structure. Three structures are modelled, each
with an orientation ``theta0`` (bearing of the first wall's normal):

* ``flat_wall``: ``tau = (2/c)(d / cos(rho) - r)``
* ``inner_corner``: two walls, normals at ``theta0`` (distance ``d2``) and
  ``theta0 + 90`` (distance ``d1``); the nearer branch is seen
* ``outer_corner``: the same branches, but the farther one is seen

where ``rho`` is the rotation angle relative to ``theta0``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .channel import SPEED_OF_LIGHT

KINDS = ("flat_wall", "inner_corner", "outer_corner")

# angular support of each kind, as an open interval of the relative angle
_SUPPORT = {
    "flat_wall": (-90.0, 90.0),
    "inner_corner": (-90.0, 180.0),
    "outer_corner": (0.0, 90.0),
}
# points closer than this to a support edge make a candidate infeasible
_EDGE_DEG = 1.0
CORNER_ADVANTAGE = 0.9
# a corner branch explaining fewer points than this is treated as a fitted outlier
MIN_BRANCH_POINTS = 3


def relative_angle(theta_deg, theta0_deg):
    """Angle from ``theta0`` mapped to [-90, 270)."""
    return np.mod(np.asarray(theta_deg, dtype=float) - theta0_deg + 90.0, 360.0) - 90.0


@dataclass(frozen=True)
class StructureTemplate:
    kind: str
    distances_m: tuple
    theta0_deg: float
    radius_m: float = 0.23

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown structure kind {self.kind!r}")
        need = 1 if self.kind == "flat_wall" else 2
        if len(self.distances_m) != need:
            raise ValueError(f"{self.kind} takes {need} distance(s)")
        if any(d <= 0 for d in self.distances_m):
            raise ValueError("template distances must be positive")

    @property
    def support_deg(self) -> tuple[float, float]:
        lo, hi = _SUPPORT[self.kind]
        return self.theta0_deg + lo, self.theta0_deg + hi

    def crossover_deg(self) -> float | None:
        """Absolute angle where the two corner branches meet."""
        if self.kind == "flat_wall":
            return None
        d1, d2 = self.distances_m
        return float(np.mod(self.theta0_deg + np.degrees(np.arctan2(d1, d2)), 360.0))

    def branch(self, theta_deg) -> np.ndarray:
        """0 for the wall whose normal is ``theta0`` ("bottom"), 1 for the other ("left")."""
        rho = self._checked(theta_deg)
        if self.kind == "flat_wall":
            return np.zeros(rho.shape, dtype=int)
        d1, d2 = self.distances_m
        bottom, left = _branch_ranges(rho, d1, d2)
        pick_left = left < bottom if self.kind == "inner_corner" else left > bottom
        return pick_left.astype(int)

    def range_m(self, theta_deg) -> np.ndarray:
        """Distance from the rotation centre to the wall along ``theta``."""
        rho = self._checked(theta_deg)
        if self.kind == "flat_wall":
            return self.distances_m[0] / np.cos(np.deg2rad(rho))
        d1, d2 = self.distances_m
        bottom, left = _branch_ranges(rho, d1, d2)
        if self.kind == "inner_corner":
            return np.minimum(bottom, left)
        return np.maximum(bottom, left)

    def _checked(self, theta_deg):
        rho = relative_angle(theta_deg, self.theta0_deg)
        lo, hi = _SUPPORT[self.kind]
        if np.any((rho <= lo) | (rho >= hi)):
            raise ValueError(f"angle outside the {self.kind} support {self.support_deg}")
        return rho


def _branch_ranges(rho_deg, d1, d2):
    """Ranges to the bottom (normal at rho = 0) and left (rho = 90) wall lines; inf when not hit."""
    rad = np.deg2rad(rho_deg)
    c, s = np.cos(rad), np.sin(rad)
    with np.errstate(divide="ignore"):
        bottom = np.where(c > 1e-12, d2 / np.where(c > 1e-12, c, 1.0), np.inf)
        left = np.where(s > 1e-12, d1 / np.where(s > 1e-12, s, 1.0), np.inf)
    return bottom, left


def template_delay(template: StructureTemplate, theta_deg):
    """Round-trip delay ``(2/c)(range - r)`` seen from the antenna."""
    tau = 2.0 * (template.range_m(theta_deg) - template.radius_m) / SPEED_OF_LIGHT
    return tau[()] if np.ndim(tau) == 0 else tau


@dataclass
class FitResult:
    template: StructureTemplate
    rmse_s: float
    residuals_s: np.ndarray
    grid_rmse_s: float
    kind_rmse_s: dict = field(default_factory=dict)
    n_evaluated: int = 0


def _rmse(template, theta, tau):
    res = tau - template_delay(template, theta)
    return float(np.sqrt(np.mean(res ** 2))), res


def _branch_ok(template, theta):
    """Each corner branch must be empty or hold at least ``MIN_BRANCH_POINTS`` points."""
    if template.kind == "flat_wall":
        return True
    n_left = int(np.sum(template.branch(theta)))
    n_bottom = theta.size - n_left
    return all(n == 0 or n >= MIN_BRANCH_POINTS for n in (n_left, n_bottom))


def _objective(template, theta, tau):
    """RMSE, or inf when the template is outside its support or a branch is too thin."""
    try:
        rmse, _ = _rmse(template, theta, tau)
        if not _branch_ok(template, theta):
            return np.inf
    except ValueError:
        return np.inf
    return rmse


def _feasible(kind, rho):
    lo, hi = _SUPPORT[kind]
    return bool(np.all((rho > lo + _EDGE_DEG) & (rho < hi - _EDGE_DEG)))


def _ls_scale(ranges, s):
    """``d`` minimising ``sum (ranges - d * s)^2``."""
    den = np.dot(s, s)
    return float(np.dot(ranges, s) / den) if den > 0 else np.nan


def _snap(values, step):
    return np.maximum(step, np.round(np.asarray(values, dtype=float) / step) * step)


def _flat_candidates(rho, ranges, tau, radius_m, step):
    inv = 1.0 / np.cos(np.deg2rad(rho))
    d = _ls_scale(ranges, inv)
    if not d > 0:
        return []
    d = float(_snap(d, step))
    res = tau - 2.0 * (d * inv - radius_m) / SPEED_OF_LIGHT
    return [(float(np.sqrt(np.mean(res ** 2))), (d,))]


def _corner_candidates(kind, rho, ranges, tau, radius_m, step):
    """Every split of the angle-sorted points into two branches, solved and scored at once."""
    order = np.argsort(rho, kind="stable")
    rad = np.deg2rad(rho[order])
    r = ranges[order]
    n = rho.size
    c, s = np.cos(rad), np.sin(rad)
    inv_c = np.where(c > 1e-12, 1.0 / np.where(c > 1e-12, c, 1.0), np.nan)
    inv_s = np.where(s > 1e-12, 1.0 / np.where(s > 1e-12, s, 1.0), np.nan)
    # inner corner: bottom wall (cos) at small rho; outer corner: left face (sin) at small rho
    head_inv, tail_inv = (inv_c, inv_s) if kind == "inner_corner" else (inv_s, inv_c)
    zero = np.zeros(1)
    head_num = np.concatenate([zero, np.cumsum(np.nan_to_num(r * head_inv))])
    head_den = np.concatenate([zero, np.cumsum(np.nan_to_num(head_inv ** 2))])
    head_bad = np.concatenate([zero, np.cumsum(np.isnan(head_inv))])
    tail_num = np.concatenate([np.cumsum(np.nan_to_num(r * tail_inv)[::-1])[::-1], zero])
    tail_den = np.concatenate([np.cumsum(np.nan_to_num(tail_inv ** 2)[::-1])[::-1], zero])
    tail_bad = np.concatenate([np.cumsum(np.isnan(tail_inv)[::-1])[::-1], zero])

    splits = np.arange(n + 1)
    sizes_ok = ((splits == 0) | (splits >= MIN_BRANCH_POINTS)) & \
               ((splits == n) | (n - splits >= MIN_BRANCH_POINTS))
    valid = (head_bad == 0) & (tail_bad == 0) & sizes_ok
    splits = splits[valid]
    if splits.size == 0:
        return []
    with np.errstate(divide="ignore", invalid="ignore"):
        d_head = np.where(splits > 0, head_num[splits] / head_den[splits], np.nan)
        d_tail = np.where(splits < n, tail_num[splits] / tail_den[splits], np.nan)
    if kind == "inner_corner":
        d2, d1 = d_head, d_tail
    else:
        d1, d2 = d_head, d_tail
    # a branch without points only needs to stay out of the way
    for i in range(splits.size):
        if np.isnan(d1[i]) and np.isfinite(d2[i]):
            d1[i] = _unseen_distance(kind, rad, d2[i], branch="left")
        elif np.isnan(d2[i]) and np.isfinite(d1[i]):
            d2[i] = _unseen_distance(kind, rad, d1[i], branch="bottom")
    good = np.isfinite(d1) & np.isfinite(d2) & (d1 > 0) & (d2 > 0)
    if not good.any():
        return []
    d1, d2 = _snap(d1[good], step), _snap(d2[good], step)
    rad_all = np.deg2rad(rho)
    cc, ss = np.cos(rad_all), np.sin(rad_all)
    with np.errstate(divide="ignore"):
        bottom = np.where(cc > 1e-12, d2[:, None] / np.where(cc > 1e-12, cc, 1.0), np.inf)
        left = np.where(ss > 1e-12, d1[:, None] / np.where(ss > 1e-12, ss, 1.0), np.inf)
    if kind == "inner_corner":
        pick_left = left < bottom
    else:
        pick_left = left > bottom
    rng = np.where(pick_left, left, bottom)
    n_left = pick_left.sum(axis=1)
    support = ((n_left == 0) | (n_left >= MIN_BRANCH_POINTS)) & \
              ((n_left == n) | (n - n_left >= MIN_BRANCH_POINTS)) & np.all(np.isfinite(rng), axis=1)
    res = tau[None, :] - 2.0 * (rng - radius_m) / SPEED_OF_LIGHT
    with np.errstate(invalid="ignore"):
        rmse = np.sqrt(np.mean(res ** 2, axis=1))
    return [(float(e), (float(a), float(b))) for e, a, b, ok in zip(rmse, d1, d2, support) if ok]


def _unseen_distance(kind, rad, d_seen, branch):
    """Distance for an empty branch that keeps it from winning at every observed angle."""
    if branch == "left":
        ratio = np.tan(rad[-1]) if kind == "inner_corner" else np.tan(rad[0])
    else:
        ratio = 1.0 / np.tan(rad[0]) if kind == "inner_corner" else 1.0 / np.tan(rad[-1])
    ratio = abs(ratio) if np.isfinite(ratio) else 1.0
    return d_seen * max(ratio, 1e-3) * (1.05 if kind == "inner_corner" else 0.95)


def _fit_kind(kind, theta, tau, radius_m, orientation_step_deg, distance_step_m, n_starts=3):
    ranges = SPEED_OF_LIGHT * tau / 2.0 + radius_m
    evaluated = 0
    candidates = []
    for theta0 in np.arange(0.0, 360.0, orientation_step_deg):
        rho = relative_angle(theta, theta0)
        if not _feasible(kind, rho):
            continue
        if kind == "flat_wall":
            found = _flat_candidates(rho, ranges, tau, radius_m, distance_step_m)
        else:
            found = _corner_candidates(kind, rho, ranges, tau, radius_m, distance_step_m)
        evaluated += len(found)
        candidates.extend((rmse, params, float(theta0)) for rmse, params in found)
    if not candidates:
        return None, np.inf, evaluated
    candidates.sort(key=lambda c: (c[0], c[2], c[1]))
    grid_best = candidates[0][0]

    best_rmse, best = np.inf, None
    for rmse, params, theta0 in candidates[:n_starts]:
        tmpl = StructureTemplate(kind, params, theta0, radius_m)
        r, t = _descend(tmpl, _objective(tmpl, theta, tau), theta, tau, distance_step_m, orientation_step_deg)
        if r < best_rmse:
            best_rmse, best = r, t
    if best is None or not np.isfinite(best_rmse):
        return None, np.inf, evaluated
    return best, grid_best, evaluated


def _descend(tmpl, rmse, theta, tau, step_d, step_a, min_d=1e-4, min_a=0.01):
    """Pattern search with step halving; only strict improvements are accepted."""
    d = list(tmpl.distances_m)
    a = tmpl.theta0_deg
    while step_d >= min_d or step_a >= min_a:
        improved = False
        moves = [(i, s * step_d) for i in range(len(d)) for s in (1, -1)] + [(-1, s * step_a) for s in (1, -1)]
        for idx, delta in moves:
            nd, na = list(d), a
            if idx < 0:
                na = a + delta
            else:
                nd[idx] = d[idx] + delta
                if nd[idx] <= 0:
                    continue
            r = _objective(StructureTemplate(tmpl.kind, tuple(nd), na, tmpl.radius_m), theta, tau)
            if r < rmse:
                d, a, rmse, improved = nd, na, r, True
        if not improved:
            step_d /= 2.0
            step_a /= 2.0
    final = StructureTemplate(tmpl.kind, tuple(d), float(np.mod(a, 360.0)), tmpl.radius_m)
    return rmse, final


def fit_structure(theta_deg, tau_s, kinds=KINDS, radius_m=0.23, orientation_step_deg=1.0,
                  distance_step_m=0.01) -> FitResult:
    """Least-squares fit of structure templates to a region's (angle, delay) pairs.

    Each kind is searched over a 1 degree orientation grid with the distances
    solved in closed form and snapped to the 1 cm grid, then refined by
    pattern search down to 0.1 mm / 0.01 degree. A corner is preferred over
    a flat wall only when its RMSE is below ``CORNER_ADVANTAGE`` times the
    flat-wall RMSE.
    """
    theta = np.asarray(theta_deg, dtype=float).ravel()
    tau = np.asarray(tau_s, dtype=float).ravel()
    if theta.size != tau.size:
        raise ValueError("theta and tau must have the same length")
    if theta.size < 5:
        raise ValueError("need at least 5 paths to fit a structure")
    if np.ptp(np.mod(theta, 360.0)) < 1e-9:
        raise ValueError("insufficient angular extent")
    kinds = tuple(kinds)
    unknown = set(kinds) - set(KINDS)
    if unknown or not kinds:
        raise ValueError(f"unknown structure kinds {sorted(unknown)}")

    fits = {}
    total = 0
    for kind in kinds:
        tmpl, grid_rmse, n = _fit_kind(kind, theta, tau, radius_m, orientation_step_deg, distance_step_m)
        total += n
        if tmpl is not None:
            rmse, res = _rmse(tmpl, theta, tau)
            fits[kind] = (rmse, tmpl, res, grid_rmse)
    if not fits:
        raise ValueError("no structure template covers the region's angular span")

    chosen = min(fits, key=lambda k: fits[k][0])
    if "flat_wall" in fits and chosen != "flat_wall":
        if not fits[chosen][0] < CORNER_ADVANTAGE * fits["flat_wall"][0]:
            chosen = "flat_wall"
    rmse, tmpl, res, grid_rmse = fits[chosen]
    return FitResult(tmpl, rmse, res, grid_rmse, {k: v[0] for k, v in fits.items()}, total)


class StructureFitter(BaseEstimator):
    """Estimator wrapper around ``fit_structure``.

    ``fit(X)`` takes an (n, 2) array of (theta_deg, tau_s); ``predict``
    returns template delays at the given angles.
    """

    def __init__(self, kinds=KINDS, radius_m=0.23, orientation_step_deg=1.0, distance_step_m=0.01):
        self.kinds = kinds
        self.radius_m = radius_m
        self.orientation_step_deg = orientation_step_deg
        self.distance_step_m = distance_step_m

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValueError("X must have shape (n, 2): theta_deg, tau_s")
        self.result_ = fit_structure(X[:, 0], X[:, 1], self.kinds, self.radius_m,
                                     self.orientation_step_deg, self.distance_step_m)
        self.template_ = self.result_.template
        self.rmse_s_ = self.result_.rmse_s
        return self

    def predict(self, theta_deg):
        check_is_fitted(self, "template_")
        return template_delay(self.template_, theta_deg)


@dataclass(frozen=True)
class MapPoint:
    x: float
    y: float
    trx_id: int
    label: int
    phi_deg: float
    tau_s: float
    filtered: bool = False


def map_to_cartesian(tau_s, theta_deg, trx=(0.0, 0.0), radius_m=0.23):
    """Reflection point ``trx + (r + c tau / 2) (cos theta, sin theta)``."""
    tau = np.asarray(tau_s, dtype=float)
    if np.any(tau < 0):
        raise ValueError("delay must be non-negative")
    rng = radius_m + SPEED_OF_LIGHT * tau / 2.0
    th = np.deg2rad(np.asarray(theta_deg, dtype=float))
    return trx[0] + rng * np.cos(th), trx[1] + rng * np.sin(th)


def cartesian_to_polar(x, y, trx=(0.0, 0.0), radius_m=0.23):
    """Inverse of ``map_to_cartesian``: (tau_s, theta_deg in [0, 360))."""
    dx, dy = np.asarray(x, float) - trx[0], np.asarray(y, float) - trx[1]
    rng = np.hypot(dx, dy)
    return 2.0 * (rng - radius_m) / SPEED_OF_LIGHT, np.mod(np.degrees(np.arctan2(dy, dx)), 360.0)


def map_point(mpc, trx=(0.0, 0.0), radius_m=0.23, filtered=False) -> MapPoint:
    x, y = map_to_cartesian(mpc.tau_s, mpc.phi_deg, trx, radius_m)
    return MapPoint(float(x), float(y), int(mpc.trx_id), int(mpc.label), float(mpc.phi_deg),
                    float(mpc.tau_s), filtered)


def sliding_window_filter(xy, window=11) -> np.ndarray:
    """Centred moving average of an ordered (n, 2) point list.

    Near the ends the window shrinks symmetrically, so point ``i`` averages
    ``2 * min(h, i, n - 1 - i) + 1`` points with ``h = window // 2``.
    """
    xy = np.asarray(xy, dtype=float)
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    n = xy.shape[0]
    if n == 0:
        return xy.copy()
    # direct window means; prefix-sum differences lose precision far from the origin
    out = np.empty_like(xy)
    for i in range(n):
        half = min(window // 2, i, n - 1 - i)
        out[i] = xy[i - half: i + half + 1].mean(axis=0)
    return out


class SlidingWindowSmoother(TransformerMixin, BaseEstimator):
    """Transformer form of ``sliding_window_filter``."""

    def __init__(self, window=11):
        self.window = window

    def fit(self, X, y=None):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd integer")
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return sliding_window_filter(X, self.window)


@dataclass
class RegionGeometry:
    label: int
    fit: FitResult | None
    inliers: np.ndarray
    points: list[MapPoint]


def refine_region(mpcs, trx, radius_m=0.23, kinds=KINDS, window=11, outlier_gate_s=0.15e-9,
                  max_rmse_s=0.2e-9, keep_unstructured=False, max_trim_rounds=8):
    """Fit, reject outliers, map and smooth one region's de-embedded paths.

    Outliers are trimmed in rounds: paths missing the template by more than
    both ``outlier_gate_s`` and half the worst miss are dropped and the
    template is refitted, until every kept path is within the gate. The
    kept points are smoothed along the template (per branch for corners)
    in order of relative angle. Regions that cannot be fitted, or whose
    best fit is worse than ``max_rmse_s``, are unstructured: their points are
    mapped without smoothing when ``keep_unstructured`` is set and dropped
    otherwise.
    """
    mpcs = list(mpcs)
    label = mpcs[0].label if mpcs else 0
    theta = np.array([m.phi_deg for m in mpcs])
    tau = np.array([m.tau_s for m in mpcs])
    def unstructured(fit=None):
        if keep_unstructured:
            return RegionGeometry(label, fit, np.arange(len(mpcs)),
                                  [map_point(m, trx, radius_m, False) for m in mpcs])
        return RegionGeometry(label, fit, np.zeros(0, dtype=int), [])

    try:
        fit = fit_structure(theta, tau, kinds, radius_m)
    except ValueError:
        return unstructured()

    keep = np.ones(theta.size, dtype=bool)
    resid = fit.residuals_s
    for _ in range(max_trim_rounds):
        worst = float(np.max(np.abs(resid[keep])))
        if worst <= outlier_gate_s:
            break
        trial = keep & (np.abs(resid) <= max(outlier_gate_s, 0.5 * worst))
        if trial.sum() < 5:
            break
        try:
            fit = fit_structure(theta[trial], tau[trial], kinds, radius_m)
        except ValueError:
            break
        keep = trial
        resid = tau - _safe_delay(fit.template, theta)
    keep = np.abs(resid) <= outlier_gate_s
    inliers = np.flatnonzero(keep)
    if fit.rmse_s > max_rmse_s or inliers.size < 5:
        return unstructured(fit)

    tmpl = fit.template
    rho = relative_angle(theta[inliers], tmpl.theta0_deg)
    branch = _safe_branch(tmpl, theta[inliers])
    points: list[MapPoint | None] = [None] * inliers.size
    for b in np.unique(branch):
        sel = np.flatnonzero(branch == b)
        sel = sel[np.argsort(rho[sel], kind="stable")]
        raw = np.array([map_to_cartesian(mpcs[inliers[k]].tau_s, mpcs[inliers[k]].phi_deg, trx, radius_m)
                        for k in sel], dtype=float).reshape(-1, 2)
        smooth = sliding_window_filter(raw, window)
        for k, (x, y) in zip(sel, smooth):
            m = mpcs[inliers[k]]
            points[k] = MapPoint(float(x), float(y), int(m.trx_id), int(m.label), float(m.phi_deg),
                                 float(m.tau_s), True)
    return RegionGeometry(label, fit, inliers, points)


def _safe_delay(tmpl, theta):
    out = np.full(theta.shape, np.inf)
    for i, t in enumerate(theta):
        try:
            out[i] = template_delay(tmpl, t)
        except ValueError:
            pass
    return out


def _safe_branch(tmpl, theta):
    out = np.zeros(theta.shape, dtype=int)
    for i, t in enumerate(theta):
        try:
            out[i] = int(tmpl.branch(t))
        except ValueError:
            pass
    return out


def segment_distances(points_xy, segments) -> np.ndarray:
    """Distance of each point to the nearest of ``segments`` (shape (m, 2, 2))."""
    p = np.asarray(points_xy, dtype=float).reshape(-1, 2)
    seg = np.asarray(segments, dtype=float).reshape(-1, 2, 2)
    a = seg[:, 0][None]
    ab = (seg[:, 1] - seg[:, 0])[None]
    ap = p[:, None] - a
    t = np.clip(np.sum(ap * ab, axis=2) / np.sum(ab * ab, axis=2), 0.0, 1.0)
    d = np.linalg.norm(ap - t[..., None] * ab, axis=2)
    return d.min(axis=1)


QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99)


def compute_metrics(points_xy, segments, quantiles=QUANTILES) -> dict:
    """MDE, RMSE and the empirical error distribution (metres)."""
    p = np.asarray(points_xy, dtype=float).reshape(-1, 2)
    if p.shape[0] == 0:
        raise ValueError("no points to evaluate")
    if np.asarray(segments).size == 0:
        raise ValueError("no ground-truth walls")
    err = np.sort(segment_distances(p, segments))
    return {
        "n_points": int(err.size),
        "mde_m": float(err.mean()),
        "rmse_m": float(np.sqrt(np.mean(err ** 2))),
        "quantiles": {f"{q:g}": float(np.quantile(err, q)) for q in quantiles},
        "cdf": {
            "error_m": [float(e) for e in err],
            "probability": [float(k / err.size) for k in range(1, err.size + 1)],
        },
    }


def max_search_points(padp, trx=(0.0, 0.0), radius_m=0.23, margin_db=10.0, trx_id=0) -> list[MapPoint]:
    """Baseline: strongest PADP cell of each column above the threshold, mapped directly."""
    points = []
    thr = padp.noise_floor_db + margin_db
    for j, phi in enumerate(padp.angle_grid_deg):
        col = padp.power_db[:, j]
        i = int(np.argmax(col))
        if not col[i] > thr:
            continue
        tau = float(padp.delay_grid_s[i])
        x, y = map_to_cartesian(tau, phi, trx, radius_m)
        points.append(MapPoint(float(x), float(y), trx_id, 0, float(phi), tau, False))
    return points


def cloud_agreement(points_a, points_b, delay_tol_s, angle_tol_deg=1.0) -> tuple[float, float]:
    """Fraction of each cloud with a counterpart in the other, per TRx.

    Two points correspond when they share a TRx, their rotation angles are
    within ``angle_tol_deg`` and their delays within ``delay_tol_s``.
    Returns (fraction of ``points_a`` matched, fraction of ``points_b`` matched).
    """
    def matched(src, dst):
        if not src:
            return 1.0
        table = {}
        for p in dst:
            table.setdefault(p.trx_id, []).append((p.phi_deg, p.tau_s))
        table = {k: np.array(v) for k, v in table.items()}
        hits = 0
        for p in src:
            other = table.get(p.trx_id)
            if other is None:
                continue
            dphi = np.abs(np.mod(other[:, 0] - p.phi_deg + 180.0, 360.0) - 180.0)
            close = (dphi <= angle_tol_deg + 1e-9) & (np.abs(other[:, 1] - p.tau_s) <= delay_tol_s * (1 + 1e-9))
            hits += bool(close.any())
        return hits / len(src)

    return matched(list(points_a), list(points_b)), matched(list(points_b), list(points_a))


def write_point_cloud(path, points):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x_m", "y_m", "trx_id", "region_label", "filtered"])
        for p in points:
            writer.writerow([f"{p.x:.6f}", f"{p.y:.6f}", p.trx_id, p.label, int(p.filtered)])


def read_point_cloud(path) -> np.ndarray:
    data = np.genfromtxt(path, delimiter=",", names=True, ndmin=1)
    return data


def write_metrics(path, metrics):
    with open(path, "w") as fh:
        json.dump(_rounded(metrics), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _rounded(obj, digits=9):
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: _rounded(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v, digits) for v in obj]
    return obj
