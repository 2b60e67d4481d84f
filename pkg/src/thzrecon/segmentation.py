"""Connected-component segmentation of a power-angle-delay profile.

Threshold above the noise floor, close small gaps, label 8-connected
components (the angle axis is circular), and keep components of at least
``n_min`` cells. The kept cells form the search space for path estimation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .padp import Padp


def square_element(size=3) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError("structuring element size must be a positive odd integer")
    return np.ones((size, size), dtype=bool)


def _check_element(se):
    se = np.asarray(se, dtype=bool)
    if se.ndim != 2 or se.shape[0] % 2 == 0 or se.shape[1] % 2 == 0:
        raise ValueError("structuring element must be 2-D with odd, origin-centred extents")
    if not se.any():
        raise ValueError("structuring element is empty")
    return se


def threshold_mask(padp: Padp, margin_db=10.0) -> np.ndarray:
    """Cells strictly above ``noise_floor + margin_db``."""
    if not np.isfinite(padp.noise_floor_db):
        return np.isfinite(padp.power_db) & (padp.power_db > -np.inf)
    return padp.power_db > padp.noise_floor_db + margin_db


def _shifted(mask, di, dj, wrap):
    """``out[i, j] = mask[i - di, j - dj]``; rows zero-filled, columns wrapped or zero-filled."""
    n_rows, n_cols = mask.shape
    out = np.zeros_like(mask)
    if abs(di) >= n_rows:
        return out
    src = np.roll(mask, dj, axis=1) if wrap else mask
    if not wrap and dj != 0:
        tmp = np.zeros_like(mask)
        if abs(dj) < n_cols:
            if dj > 0:
                tmp[:, dj:] = mask[:, :-dj]
            else:
                tmp[:, :dj] = mask[:, -dj:]
        src = tmp
    if di > 0:
        out[di:] = src[:-di]
    elif di < 0:
        out[:di] = src[-di:]
    else:
        out[:] = src
    return out


def _offsets(se):
    ci, cj = se.shape[0] // 2, se.shape[1] // 2
    return [(i - ci, j - cj) for i, j in zip(*np.nonzero(se))]


def dilate(mask, se, wrap=True):
    out = np.zeros_like(mask, dtype=bool)
    for di, dj in _offsets(se):
        out |= _shifted(mask, di, dj, wrap)
    return out


def erode(mask, se, wrap=True):
    out = np.ones_like(mask, dtype=bool)
    for di, dj in _offsets(se):
        out &= _shifted(mask, -di, -dj, wrap)
    return out


def morphological_close(mask, structuring_element=None, wrap=True) -> np.ndarray:
    """Dilation then erosion with the same element.

    Runs on a canvas padded by the element radius so cells near the delay
    edges are not eroded away; the result always contains ``mask``.
    """
    se = _check_element(square_element(3) if structuring_element is None else structuring_element)
    mask = np.asarray(mask, dtype=bool)
    pi, pj = se.shape[0] // 2, 0 if wrap else se.shape[1] // 2
    canvas = np.pad(mask, ((pi, pi), (pj, pj)))
    closed = erode(dilate(canvas, se, wrap), se, wrap)
    return closed[pi: pi + mask.shape[0], pj: pj + mask.shape[1]]


def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        parent[x], x = root, parent[x]
    return root


def label_components(mask, wrap=True) -> tuple[np.ndarray, int]:
    """8-connected labeling with union-find.

    Labels run 1..K in raster (row-major) order of each component's first
    cell; background is 0. With ``wrap`` the first and last columns are
    neighbours.
    """
    mask = np.asarray(mask, dtype=bool)
    n_rows, n_cols = mask.shape
    labels = np.zeros(mask.shape, dtype=np.int32)
    rows, cols = np.nonzero(mask)
    n = rows.size
    if n == 0:
        return labels, 0
    index = np.full(mask.shape, -1, dtype=np.int64)
    index[rows, cols] = np.arange(n)

    pairs = []
    for di, dj in ((0, 1), (1, -1), (1, 0), (1, 1)):
        r2 = rows + di
        c2 = cols + dj
        ok = r2 < n_rows
        if wrap:
            if n_cols < 2 and dj != 0:
                continue
            c2 = c2 % n_cols
        else:
            ok &= (c2 >= 0) & (c2 < n_cols)
        src = np.flatnonzero(ok)
        dst = index[r2[ok], c2[ok]]
        hit = dst >= 0
        if hit.any():
            pairs.append(np.stack([src[hit], dst[hit]], axis=1))

    parent = list(range(n))
    if pairs:
        for a, b in np.concatenate(pairs).tolist():
            ra, rb = _find(parent, a), _find(parent, b)
            if ra != rb:
                if ra < rb:
                    parent[rb] = ra
                else:
                    parent[ra] = rb

    roots = np.fromiter((_find(parent, x) for x in range(n)), dtype=np.int64, count=n)
    # cells come out of np.nonzero in raster order, so first-touch order is
    # the order in which roots first appear
    _, first = np.unique(roots, return_index=True)
    order = np.argsort(first)
    uniq_roots = roots[first]
    remap_lookup = dict(zip(uniq_roots[order].tolist(), range(1, order.size + 1)))
    remap = np.fromiter((remap_lookup[r] for r in roots.tolist()), dtype=np.int32, count=n)
    labels[rows, cols] = remap
    return labels, int(order.size)


@dataclass(eq=False)
class Region:
    """One kept component: its cells and their physical coordinates."""

    label: int
    rows: np.ndarray
    cols: np.ndarray
    tau_s: np.ndarray
    theta_deg: np.ndarray
    power_db: np.ndarray

    @property
    def cell_count(self) -> int:
        return int(self.rows.size)

    @property
    def peak_power_db(self) -> float:
        return float(np.max(self.power_db))

    @property
    def bounding_box(self) -> tuple[int, int, int, int]:
        """(first row, last row, first column, last column); columns may wrap."""
        return int(self.rows.min()), int(self.rows.max()), int(self.cols.min()), int(self.cols.max())

    def column_rows(self, col) -> np.ndarray:
        return self.rows[self.cols == col]


def extract_regions(labels, padp: Padp, n_min=20) -> list[Region]:
    """Components with at least ``n_min`` cells, relabelled densely in label order."""
    labels = np.asarray(labels)
    regions = []
    flat = labels.ravel()
    if flat.max(initial=0) == 0:
        return regions
    counts = np.bincount(flat)
    kept = [lab for lab in range(1, counts.size) if counts[lab] >= n_min]
    if not kept:
        return regions
    order = np.argsort(flat, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)])
    n_cols = labels.shape[1]
    for new_label, lab in enumerate(kept, start=1):
        idx = order[starts[lab]: starts[lab + 1]]
        rows, cols = np.divmod(idx, n_cols)
        regions.append(
            Region(
                label=new_label,
                rows=rows,
                cols=cols,
                tau_s=padp.delay_grid_s[rows],
                theta_deg=padp.angle_grid_deg[cols],
                power_db=padp.power_db[rows, cols],
            )
        )
    return regions


def region_label_map(regions, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=np.int32)
    for reg in regions:
        out[reg.rows, reg.cols] = reg.label
    return out


def snap_to_grid(values, grid) -> np.ndarray:
    """Nearest-index lookup of physical values on an ascending grid."""
    grid = np.asarray(grid, dtype=float)
    values = np.asarray(values, dtype=float)
    pos = np.clip(np.searchsorted(grid, values), 1, grid.size - 1)
    left = grid[pos - 1]
    right = grid[pos]
    return np.where(np.abs(values - left) <= np.abs(right - values), pos - 1, pos)


def write_regions_csv(path, regions):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "i", "j", "tau_ns", "theta_deg", "power_db"])
        for reg in regions:
            for i, j, tau, theta, p in zip(reg.rows, reg.cols, reg.tau_s, reg.theta_deg, reg.power_db):
                writer.writerow([reg.label, int(i), int(j), f"{tau * 1e9:.4f}", f"{theta:.4f}", f"{p:.4f}"])


def read_regions_csv(path) -> list[Region]:
    data = np.genfromtxt(path, delimiter=",", names=True, ndmin=1)
    regions = []
    if data.size == 0:
        return regions
    labels = data["label"].astype(int)
    for lab in np.unique(labels):
        sel = labels == lab
        regions.append(
            Region(
                label=int(lab),
                rows=data["i"][sel].astype(int),
                cols=data["j"][sel].astype(int),
                tau_s=data["tau_ns"][sel] * 1e-9,
                theta_deg=data["theta_deg"][sel],
                power_db=data["power_db"][sel],
            )
        )
    return regions


class RegionSegmenter(TransformerMixin, BaseEstimator):
    """Threshold, close, label and size-filter a PADP.

    Parameters
    ----------
    margin_db : float
        Threshold above the PADP noise floor.
    n_min : int
        Smallest component kept, in cells.
    structure_size : int
        Side of the square structuring element used for closing.
    wrap : bool
        Treat the angle axis as circular.
    """

    def __init__(self, margin_db=10.0, n_min=20, structure_size=3, wrap=True):
        self.margin_db = margin_db
        self.n_min = n_min
        self.structure_size = structure_size
        self.wrap = wrap

    def fit(self, X: Padp, y=None):
        if not isinstance(X, Padp):
            raise TypeError("RegionSegmenter expects a Padp")
        if self.n_min < 1:
            raise ValueError("n_min must be at least 1")
        self.mask_ = threshold_mask(X, self.margin_db)
        self.closed_mask_ = morphological_close(self.mask_, square_element(self.structure_size), self.wrap)
        raw_labels, self.n_components_ = label_components(self.closed_mask_, self.wrap)
        self.regions_ = extract_regions(raw_labels, X, self.n_min)
        self.labels_ = region_label_map(self.regions_, X.shape)
        self.search_fraction_ = float((self.labels_ > 0).mean())
        return self

    def transform(self, X: Padp):
        check_is_fitted(self, "labels_")
        if X.shape != self.labels_.shape:
            raise ValueError("PADP shape differs from the fitted one")
        return self.labels_
