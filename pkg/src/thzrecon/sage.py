"""Region-restricted element-wise SAGE, trajectory tracking and de-embedding.

Each rotation angle is processed on its own: paths are extracted one at a
time by maximising the matched-filter correlation over a set of candidate
delays, subtracting them, then re-estimating each path against the residual
of the others. Candidate delays come from the segmented regions, so columns
and delays outside every region are never visited.

Correlations are updated in the candidate domain: subtracting a path of
amplitude ``beta`` at ``tau_p`` changes the correlation at ``tau`` by
``beta * K(tau - tau_p)`` where ``K`` is the frequency-averaged kernel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .channel import ChannelFrequencyResponse, antenna_gain, tone_correlate, wrap_deg


@dataclass(frozen=True)
class PathEstimate:
    beta: complex
    tau_s: float
    label: int = 0


@dataclass
class ColumnEstimate:
    phi_deg: float
    col: int
    paths: list[PathEstimate] = field(default_factory=list)
    n_candidates: int = 0
    residual_energy: list[float] | None = None


@dataclass
class Trajectory:
    label: int
    phi_deg: list[float] = field(default_factory=list)
    cols: list[int] = field(default_factory=list)
    beta: list[complex] = field(default_factory=list)
    tau_s: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.cols)

    def append(self, phi, col, path: PathEstimate):
        self.phi_deg.append(float(phi))
        self.cols.append(int(col))
        self.beta.append(complex(path.beta))
        self.tau_s.append(float(path.tau_s))


@dataclass(frozen=True)
class DeembeddedMpc:
    alpha: complex
    tau_s: float
    phi_deg: float
    label: int
    power_db: float
    trx_id: int = 0


def _is_uniform(freqs):
    if freqs.size < 3:
        return True
    steps = np.diff(freqs)
    return bool(np.allclose(steps, steps[0], rtol=1e-9, atol=0.0))


def delay_kernel(delta_s, freqs_hz):
    """``K(d) = mean_f exp(j 2 pi f d)``; equals 1 at ``d = 0``."""
    freqs = np.asarray(freqs_hz, dtype=float)
    delta = np.asarray(delta_s, dtype=float)
    n = freqs.size
    if not _is_uniform(freqs):
        return np.exp(2j * np.pi * np.multiply.outer(delta, freqs)).mean(axis=-1)
    df = freqs[1] - freqs[0] if n > 1 else 0.0
    x = df * delta
    # geometric series sum_k exp(j 2 pi k x), with x reduced mod 1 for accuracy
    xr = x - np.round(x)
    num = np.exp(2j * np.pi * ((n * xr) % 1.0)) - 1.0
    den = np.exp(2j * np.pi * xr) - 1.0
    small = np.abs(den) < 1e-12
    geo = np.where(small, n, num / np.where(small, 1.0, den))
    out = np.exp(2j * np.pi * ((freqs[0] * delta) % 1.0)) * geo / n
    return out[()] if out.ndim == 0 else out


def steering_correlation(h, freqs_hz, candidates_s):
    """Matched-filter output ``mean_f h(f) exp(+j 2 pi f tau)`` per candidate."""
    freqs = np.asarray(freqs_hz, dtype=float)
    cands = np.asarray(candidates_s, dtype=float)
    if cands.size == 0:
        return np.zeros(0, dtype=complex)
    if _is_uniform(freqs) and freqs.size > 1:
        return tone_correlate(h, cands, freqs[0], freqs[1] - freqs[0])
    phase = np.exp(2j * np.pi * np.multiply.outer(freqs, cands))
    return (np.asarray(h, dtype=complex) @ phase) / freqs.size


class GridKernel:
    """``delay_kernel`` tabulated on integer offsets of a uniform delay grid.

    ``GridKernel(step, max_index, freqs)(idx, i)`` returns
    ``K((idx - idx[i]) * step)`` by table lookup.
    """

    def __init__(self, step_s, max_index, freqs_hz):
        self.offset = int(max_index)
        self.table = delay_kernel(np.arange(-self.offset, self.offset + 1) * step_s, freqs_hz)

    def __call__(self, idx, i):
        return self.table[idx - idx[i] + self.offset]


def _stop_level(noise_floor_db, margin_db):
    if noise_floor_db is None or not np.isfinite(noise_floor_db):
        return 0.0
    return 10.0 ** ((noise_floor_db + margin_db) / 20.0)


def sage_column(cfr_column, freqs_hz, delay_candidates_s, max_paths=16, iterations=1,
                noise_floor_db=None, stop_margin_db=6.0, candidate_labels=None,
                initial_correlation=None, track_residual=False, phi_deg=0.0, col=0,
                kernel=None) -> ColumnEstimate:
    """Estimate path amplitudes and delays for one rotation angle.

    Parameters
    ----------
    cfr_column : complex array (n_freq,)
    delay_candidates_s : array
        Delays the search may visit.
    noise_floor_db : float or None
        Extraction stops once the residual correlation peak falls below
        ``noise_floor_db + stop_margin_db`` (20 log10 scale).
    candidate_labels : int array or None
        Region label of each candidate; copied onto the extracted paths.
    initial_correlation : complex array or None
        Precomputed ``steering_correlation`` of ``cfr_column``.
    track_residual : bool
        Record the explicit residual energy after every extraction or update.
    kernel : callable or None
        ``kernel(i)`` returns the kernel between every candidate and
        candidate ``i``; defaults to the closed form of ``delay_kernel``.
    """
    h = np.asarray(cfr_column, dtype=complex)
    if not np.all(np.isfinite(h)):
        raise ValueError("CFR column contains non-finite values")
    freqs = np.asarray(freqs_hz, dtype=float)
    cands = np.asarray(delay_candidates_s, dtype=float).ravel()
    labels = np.zeros(cands.size, dtype=int) if candidate_labels is None else np.asarray(candidate_labels)
    est = ColumnEstimate(float(phi_deg), int(col), [], int(cands.size), [] if track_residual else None)
    if cands.size == 0 or max_paths <= 0:
        return est

    corr = steering_correlation(h, freqs, cands) if initial_correlation is None else np.array(initial_correlation)
    stop = _stop_level(noise_floor_db, stop_margin_db)
    residual = h.copy() if track_residual else None
    if kernel is None:
        def kernel(i):
            return delay_kernel(cands - cands[i], freqs)

    def record():
        if residual is not None:
            est.residual_energy.append(float(np.vdot(residual, residual).real))

    def take(i, beta):
        nonlocal corr
        corr = corr - beta * kernel(i)
        if residual is not None:
            residual[:] -= beta * np.exp(-2j * np.pi * freqs * cands[i])

    def give_back(i, beta):
        nonlocal corr
        corr = corr + beta * kernel(i)
        if residual is not None:
            residual[:] += beta * np.exp(-2j * np.pi * freqs * cands[i])

    record()
    picked: list[list] = []
    for _ in range(max_paths):
        mag = np.abs(corr)
        i = int(np.argmax(mag))
        if mag[i] <= stop or mag[i] == 0.0:
            break
        beta = corr[i]
        take(i, beta)
        picked.append([i, beta])
        record()

    for _ in range(iterations):
        for entry in picked:
            give_back(*entry)
            i = int(np.argmax(np.abs(corr)))
            beta = corr[i]
            take(i, beta)
            entry[0], entry[1] = i, beta
            record()

    picked.sort(key=lambda e: -abs(e[1]))
    est.paths = [PathEstimate(complex(b), float(cands[i]), int(labels[i])) for i, b in picked]
    return est


@dataclass
class SageSettings:
    max_paths: int = 16
    iterations: int = 1
    delay_step_s: float = 0.01e-9
    max_delay_s: float = 60e-9
    stop_margin_db: float = 6.0
    gate_bins: float = 2.0
    min_track_length: int = 3

    def validate(self):
        if self.max_paths < 1:
            raise ValueError("max_paths must be at least 1")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.delay_step_s < 0.01e-9 - 1e-18:
            raise ValueError("delay_step_s must be at least 0.01 ns")
        if self.max_delay_s <= 0:
            raise ValueError("max_delay_s must be positive")
        return self


@dataclass
class EstimationResult:
    columns: list[ColumnEstimate]
    cells_visited: int
    total_cells: int
    candidates_evaluated: int


def _subdivision(bin_s, step_s):
    sub = bin_s / step_s
    n = int(round(sub))
    if n < 1 or abs(sub - n) > 1e-6 * max(1.0, sub):
        raise ValueError(f"delay step {step_s} s must divide the delay bin {bin_s} s")
    return n


def _fine_offsets(sub):
    lo = -(sub // 2)
    return np.arange(lo, lo + sub)


def estimate_all(cfr: ChannelFrequencyResponse, label_map, noise_floor_db, settings: SageSettings | None = None,
                 full_grid=False) -> EstimationResult:
    """Run ``sage_column`` over every column that intersects a region.

    ``label_map`` is the (delay bin x angle) region label matrix. Candidate
    delays for a column are the fine-grid points whose nearest bin belongs
    to a region in that column. With ``full_grid`` every column and every
    bin up to ``max_delay_s`` is searched instead.
    """
    settings = (settings or SageSettings()).validate()
    config = cfr.config
    freqs = config.frequencies_hz
    bin_s = config.delay_step_s
    sub = _subdivision(bin_s, settings.delay_step_s)
    offsets = _fine_offsets(sub)
    label_map = np.asarray(label_map)
    n_bins = min(label_map.shape[0], int(np.floor(settings.max_delay_s / bin_s + 1e-9)) + 1)

    table = GridKernel(settings.delay_step_s, n_bins * sub + sub, freqs)
    columns = []
    visited = 0
    evaluated = 0
    for j, phi in enumerate(config.rotation_angles_deg):
        col_labels = label_map[:n_bins, j]
        rows = np.arange(n_bins) if full_grid else np.flatnonzero(col_labels)
        if rows.size == 0:
            continue
        fine = (rows[:, None] * sub + offsets[None, :]).ravel()
        cand_labels = np.repeat(col_labels[rows], sub)
        keep = fine >= 0
        fine, cand_labels = fine[keep], cand_labels[keep]
        cands = fine * settings.delay_step_s
        visited += rows.size
        evaluated += cands.size
        columns.append(
            sage_column(
                cfr.values[:, j], freqs, cands,
                max_paths=settings.max_paths,
                iterations=settings.iterations,
                noise_floor_db=noise_floor_db,
                stop_margin_db=settings.stop_margin_db,
                candidate_labels=cand_labels,
                phi_deg=phi,
                col=j,
                kernel=lambda i, fine=fine: table(fine, i),
            )
        )
    return EstimationResult(columns, visited, n_bins * config.n_angles, evaluated)


def _start_column(cols, n_angles, max_gap):
    """Column index to start a circular sweep, or None when no gap breaks the circle."""
    c = np.unique(cols)
    if c.size == 0:
        return 0, False
    gaps = np.diff(np.concatenate([c, [c[0] + n_angles]]))
    k = int(np.argmax(gaps))
    if gaps[k] > max_gap + 1:
        return int(c[(k + 1) % c.size]), False
    return 0, True


def track_trajectories(columns, gate_s, n_angles=360, max_gap=1, min_length=3) -> list[Trajectory]:
    """Link per-angle paths into trajectories across neighbouring angles.

    A path continues a trajectory of the same region label whose last sample
    is at most ``max_gap + 1`` columns back and whose delay is within
    ``gate_s``; closest delays are matched first. Trajectories shorter than
    ``min_length`` samples are dropped.
    """
    by_col = {c.col: c for c in columns if c.paths}
    if not by_col:
        return []
    start, seam = _start_column(list(by_col), n_angles, max_gap)
    order = sorted(by_col, key=lambda c: (c - start) % n_angles)

    finished: list[Trajectory] = []
    active: list[Trajectory] = []
    for col in order:
        est = by_col[col]
        pos = (col - start) % n_angles
        still = []
        for t in active:
            if pos - (t.cols[-1] - start) % n_angles > max_gap + 1:
                finished.append(t)
            else:
                still.append(t)
        active = still

        pairs = []
        for ti, t in enumerate(active):
            for pi, p in enumerate(est.paths):
                if p.label != t.label:
                    continue
                d = abs(p.tau_s - t.tau_s[-1])
                if d <= gate_s:
                    pairs.append((d, ti, pi))
        pairs.sort()
        used_t, used_p = set(), set()
        for d, ti, pi in pairs:
            if ti in used_t or pi in used_p:
                continue
            used_t.add(ti)
            used_p.add(pi)
            active[ti].append(est.phi_deg, col, est.paths[pi])
        for pi, p in enumerate(est.paths):
            if pi not in used_p:
                t = Trajectory(p.label)
                t.append(est.phi_deg, col, p)
                active.append(t)
    finished.extend(active)

    if seam:
        finished = _merge_seam(finished, gate_s, n_angles, max_gap)
    return [t for t in finished if len(t) >= min_length]


def _merge_seam(trajs, gate_s, n_angles, max_gap):
    tails = [t for t in trajs if t.cols[-1] >= n_angles - 1 - max_gap]
    heads = [t for t in trajs if t.cols[0] <= max_gap]
    pairs = []
    for a in tails:
        for b in heads:
            if a is b or a.label != b.label:
                continue
            step = (b.cols[0] - a.cols[-1]) % n_angles
            d = abs(b.tau_s[0] - a.tau_s[-1])
            if 1 <= step <= max_gap + 1 and d <= gate_s:
                pairs.append((d, id(a), id(b), a, b))
    pairs.sort(key=lambda x: x[0])
    absorbed = set()
    used_tail = set()
    for _, ia, ib, a, b in pairs:
        if ia in used_tail or ib in absorbed or ia in absorbed:
            continue
        used_tail.add(ia)
        absorbed.add(ib)
        a.phi_deg += b.phi_deg
        a.cols += b.cols
        a.beta += b.beta
        a.tau_s += b.tau_s
    return [t for t in trajs if id(t) not in absorbed]


def peak_drop_db(trajectory: Trajectory) -> float:
    """How far both trajectory ends sit below its strongest sample (dB); 0 if the peak is an end."""
    mags = np.abs(np.asarray(trajectory.beta))
    peak = mags.max()
    ends = max(mags[0], mags[-1])
    if peak == 0:
        return 0.0
    if ends == 0:
        return float("inf")
    return float(20.0 * np.log10(peak / ends))


def pattern_filter(trajectories, min_drop_db=1.0):
    """Keep trajectories that rise and fall across the beam by at least ``min_drop_db``.

    A path seen through the main lobe peaks at boresight and weakens on
    both sides; a track whose strongest sample is at one end is usually a
    structure edge or sidelobe leakage rather than a real reflection point.
    """
    if min_drop_db is None:
        return list(trajectories)
    return [t for t in trajectories if peak_drop_db(t) >= min_drop_db]


def deembed(trajectories, peak_gain_linear=1.0, trx_id=0) -> list[DeembeddedMpc]:
    """Keep each trajectory's strongest sample and remove the antenna peak gain.

    Equal-power ties go to the lowest rotation angle. ``peak_gain_linear`` is
    the combined Tx+Rx power gain at boresight.
    """
    out = []
    scale = 1.0 / np.sqrt(peak_gain_linear)
    for t in trajectories:
        if len(t) == 0:
            continue
        mags = np.abs(np.asarray(t.beta))
        best = mags.max()
        ties = np.flatnonzero(mags == best)
        k = min(ties, key=lambda i: t.phi_deg[i])
        alpha = t.beta[k] * scale
        with np.errstate(divide="ignore"):
            power = float(20.0 * np.log10(abs(alpha)))
        out.append(DeembeddedMpc(alpha, t.tau_s[k], t.phi_deg[k], t.label, power, trx_id))
    out.sort(key=lambda m: (m.label, m.phi_deg, m.tau_s))
    return out


def dominance_filter(mpcs, max_rel_db=15.0, span_deg=4.0):
    """Drop paths far weaker than the strongest path of the same region nearby.

    A path is compared with every path sharing its label whose angle lies
    within ``span_deg``; it survives if it is within ``max_rel_db`` of the
    strongest. Weak extra paths next to a dominant one are mostly leakage of
    its delay sidelobes or edge diffraction.
    """
    if max_rel_db is None:
        return list(mpcs)
    kept = []
    for m in mpcs:
        ref = max(
            o.power_db for o in mpcs
            if o.label == m.label and abs(wrap_deg(o.phi_deg - m.phi_deg)) <= span_deg + 1e-9
        )
        if m.power_db >= ref - max_rel_db:
            kept.append(m)
    return kept


def suppress_duplicates(mpcs, span_deg=4.0, delay_tol_s=0.1e-9):
    """Greedy non-maximum suppression of unresolvable path pairs.

    Two paths of one region closer than ``span_deg`` in angle and
    ``delay_tol_s`` in delay cannot be told apart by the beam or the delay
    grid; such pairs come from one track broken into pieces, so only the
    stronger is kept.
    """
    if delay_tol_s is None:
        return list(mpcs)
    order = sorted(range(len(mpcs)), key=lambda i: (-mpcs[i].power_db, mpcs[i].label, mpcs[i].phi_deg, mpcs[i].tau_s))
    kept = []
    for i in order:
        m = mpcs[i]
        clash = any(
            o.label == m.label
            and abs(wrap_deg(o.phi_deg - m.phi_deg)) <= span_deg + 1e-9
            and abs(o.tau_s - m.tau_s) <= delay_tol_s * (1 + 1e-9)
            for o in (mpcs[j] for j in kept)
        )
        if not clash:
            kept.append(i)
    return [mpcs[i] for i in sorted(kept)]


def write_mpc_table(path, mpcs):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trx_id", "region_label", "alpha_db", "tau_ns", "theta_deg"])
        for m in mpcs:
            writer.writerow([m.trx_id, m.label, f"{m.power_db:.6f}", f"{m.tau_s * 1e9:.6f}", f"{m.phi_deg:.6g}"])


def read_mpc_table(path) -> list[DeembeddedMpc]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            power = float(row["alpha_db"])
            out.append(
                DeembeddedMpc(
                    alpha=complex(10.0 ** (power / 20.0)),
                    tau_s=float(row["tau_ns"]) * 1e-9,
                    phi_deg=float(row["theta_deg"]),
                    label=int(row["region_label"]),
                    power_db=power,
                    trx_id=int(row["trx_id"]),
                )
            )
    return out


class CcaSageEstimator(BaseEstimator):
    """Element-wise SAGE over segmented regions, followed by tracking and de-embedding.

    ``fit(cfr, label_map=..., noise_floor_db=...)`` fills ``columns_``,
    ``trajectories_`` and ``mpcs_``. Trajectories failing ``pattern_filter``
    (``min_peak_drop_db=None`` disables it) are not de-embedded, and
    de-embedded paths are passed through ``dominance_filter`` and
    ``suppress_duplicates``.
    ``full_grid=True`` ignores the label map
    for the search (labels still tag the paths), which is the exhaustive
    baseline.
    """

    def __init__(self, max_paths=16, iterations=1, delay_step_ns=0.01, max_delay_ns=60.0,
                 stop_margin_db=6.0, gate_bins=2.0, min_track_length=3, min_peak_drop_db=1.0,
                 max_rel_power_db=15.0, dominance_span_deg=4.0, duplicate_delay_bins=2.0, duplicate_span_deg=4.0,
                 full_grid=False):
        self.max_paths = max_paths
        self.iterations = iterations
        self.delay_step_ns = delay_step_ns
        self.max_delay_ns = max_delay_ns
        self.stop_margin_db = stop_margin_db
        self.gate_bins = gate_bins
        self.min_track_length = min_track_length
        self.min_peak_drop_db = min_peak_drop_db
        self.max_rel_power_db = max_rel_power_db
        self.dominance_span_deg = dominance_span_deg
        self.duplicate_delay_bins = duplicate_delay_bins
        self.duplicate_span_deg = duplicate_span_deg
        self.full_grid = full_grid

    def settings(self) -> SageSettings:
        return SageSettings(
            max_paths=self.max_paths,
            iterations=self.iterations,
            delay_step_s=self.delay_step_ns * 1e-9,
            max_delay_s=self.max_delay_ns * 1e-9,
            stop_margin_db=self.stop_margin_db,
            gate_bins=self.gate_bins,
            min_track_length=self.min_track_length,
        )

    def fit(self, X: ChannelFrequencyResponse, y=None, *, label_map, noise_floor_db):
        config = X.config
        result = estimate_all(X, label_map, noise_floor_db, self.settings(), full_grid=self.full_grid)
        self.columns_ = result.columns
        self.cells_visited_ = result.cells_visited
        self.total_cells_ = result.total_cells
        self.candidates_evaluated_ = result.candidates_evaluated
        gate = self.gate_bins * config.delay_step_s
        self.trajectories_ = track_trajectories(
            self.columns_, gate, n_angles=config.n_angles, min_length=self.min_track_length
        )
        peak = antenna_gain(0.0, config.antenna_peak_gain_dbi, config.hpbw_deg, config.sidelobe_level_db)
        kept = pattern_filter(self.trajectories_, self.min_peak_drop_db)
        mpcs = deembed(kept, float(peak), trx_id=X.trx_id)
        mpcs = dominance_filter(mpcs, self.max_rel_power_db, self.dominance_span_deg)
        tol = None if self.duplicate_delay_bins is None else self.duplicate_delay_bins * config.delay_step_s
        self.mpcs_ = suppress_duplicates(mpcs, self.duplicate_span_deg, tol)
        return self

    def predict(self, X=None):
        check_is_fitted(self, "mpcs_")
        return self.mpcs_
