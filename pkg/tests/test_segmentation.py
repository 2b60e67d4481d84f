import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import flood_fill_labels, same_partition, scipy_close
from thzrecon.channel import ArrayConfig, synthesize_cfr
from thzrecon.padp import Padp, padp_from_cfr
from thzrecon.scene import generate_ground_truth, reference_scene
from thzrecon.segmentation import (
    RegionSegmenter,
    extract_regions,
    label_components,
    morphological_close,
    read_regions_csv,
    square_element,
    threshold_mask,
    write_regions_csv,
)

masks = arrays(bool, st.tuples(st.integers(1, 24), st.integers(1, 24)))


def flat_padp(power):
    power = np.asarray(power, dtype=float)
    return Padp(power, np.arange(power.shape[0]) * 5e-11, np.arange(power.shape[1], dtype=float), -90.0)


# -- threshold -----------------------------------------------------------------


def test_all_noise_gives_empty_mask():
    assert not threshold_mask(flat_padp(np.full((8, 8), -90.0))).any()


def test_single_bright_cell():
    p = np.full((8, 8), -90.0)
    p[3, 4] = -70.0
    m = threshold_mask(flat_padp(p))
    assert m.sum() == 1 and m[3, 4]


@given(arrays(float, (12, 9), elements=st.floats(-120, 0)))
def test_threshold_is_elementwise(power):
    padp = flat_padp(power)
    expected = np.array([[v > -80.0 for v in row] for row in power.tolist()])
    assert np.array_equal(threshold_mask(padp, 10.0), expected)


# -- closing -------------------------------------------------------------------


def test_closing_fills_hole():
    m = np.zeros((9, 9), dtype=bool)
    m[2:7, 2:7] = True
    m[4, 4] = False
    assert morphological_close(m, square_element(3))[4, 4]


def test_closing_of_empty_is_empty():
    assert not morphological_close(np.zeros((6, 6), dtype=bool)).any()


@given(masks, st.booleans())
def test_closing_matches_scipy_composition(mask, wrap):
    assert np.array_equal(morphological_close(mask, square_element(3), wrap),
                          scipy_close(mask, square_element(3), wrap))


@given(masks, st.sampled_from([1, 3, 5]), st.booleans())
def test_closing_is_extensive(mask, size, wrap):
    closed = morphological_close(mask, square_element(size), wrap)
    assert not np.any(mask & ~closed)


def test_closing_wraps_angle_axis():
    m = np.zeros((5, 10), dtype=bool)
    m[2, 0] = m[2, 8] = True
    assert morphological_close(m, wrap=True)[2, 9]
    assert not morphological_close(m, wrap=False)[2, 9]


def test_bad_structuring_element():
    with pytest.raises(ValueError):
        morphological_close(np.zeros((3, 3)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        square_element(4)


# -- labeling ------------------------------------------------------------------


def test_diagonal_touch_is_one_component():
    m = np.zeros((4, 4), dtype=bool)
    m[1, 1] = m[2, 2] = True
    assert label_components(m)[1] == 1


def test_separated_blobs_are_two_components():
    m = np.zeros((7, 7), dtype=bool)
    m[:3, :3] = True
    m[4:, 4:] = True
    assert label_components(m, wrap=False)[1] == 2


def test_wrap_joins_first_and_last_columns():
    m = np.zeros((3, 6), dtype=bool)
    m[1, 0] = m[1, 5] = True
    assert label_components(m, wrap=True)[1] == 1
    assert label_components(m, wrap=False)[1] == 2


def test_labels_in_raster_order():
    m = np.zeros((6, 6), dtype=bool)
    m[4, 0] = True
    m[0, 5] = True
    m[2, 2] = True
    labels, n = label_components(m, wrap=False)
    assert n == 3
    assert labels[0, 5] == 1 and labels[2, 2] == 2 and labels[4, 0] == 3


@pytest.mark.parametrize("seed", range(100))
def test_labeling_matches_flood_fill(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((32, 32)) < rng.uniform(0.1, 0.9)
    for wrap in (True, False):
        got, n = label_components(mask, wrap)
        ref, n_ref = flood_fill_labels(mask, wrap)
        assert n == n_ref
        assert same_partition(got, ref)


@given(masks)
def test_labeling_transpose_invariant_without_wrap(mask):
    a, na = label_components(mask, wrap=False)
    b, nb = label_components(mask.T, wrap=False)
    assert na == nb
    assert same_partition(a.T, b)


@given(masks)
def test_labels_are_dense(mask):
    labels, n = label_components(mask)
    assert set(np.unique(labels[mask]).tolist()) == set(range(1, n + 1))


# -- regions -------------------------------------------------------------------


def test_small_blob_dropped():
    m = np.zeros((10, 10), dtype=int)
    m[0, :5] = 1
    assert extract_regions(m, flat_padp(np.zeros((10, 10))), n_min=20) == []


def test_large_blob_kept():
    m = np.zeros((20, 20), dtype=int)
    m[2:12, 5:15] = 1
    regions = extract_regions(m, flat_padp(np.zeros((20, 20))), n_min=20)
    assert len(regions) == 1 and regions[0].cell_count == 100


def test_regions_csv_round_trip(tmp_path):
    p = np.full((30, 40), -90.0)
    p[5:10, 3:9] = -40.0
    p[20:25, 30:38] = -50.0
    seg = RegionSegmenter(n_min=10).fit(flat_padp(p))
    write_regions_csv(tmp_path / "r.csv", seg.regions_)
    back = read_regions_csv(tmp_path / "r.csv")
    assert [r.cell_count for r in back] == [r.cell_count for r in seg.regions_]
    for a, b in zip(back, seg.regions_):
        assert np.array_equal(a.rows, b.rows) and np.array_equal(a.cols, b.cols)


def test_segmenter_estimator_api():
    seg = RegionSegmenter(margin_db=6.0, n_min=5)
    assert seg.get_params()["margin_db"] == 6.0
    p = np.full((30, 40), -90.0)
    p[5:10, 3:9] = -40.0
    labels = seg.fit_transform(flat_padp(p))
    assert labels.shape == (30, 40) and labels.max() == 1


def test_reference_scene_regions_match_ground_truth_footprint():
    # every ground-truth path's delay bin at its own angle falls inside a region,
    # and the search space stays small
    scene = reference_scene()
    cfg = ArrayConfig()
    gt = generate_ground_truth(scene, cfg)
    cfr = synthesize_cfr(gt.mpcs(0), cfg, noise_power_db=-70.0, seed=0)
    padp = padp_from_cfr(cfr)
    seg = RegionSegmenter().fit(padp)
    assert seg.search_fraction_ < 0.15
    strong = [p for p in gt.for_trx(0) if p.power_db + 52.0 > padp.noise_floor_db + 20.0]
    assert strong
    inside = [seg.labels_[int(round(p.tau_s / cfg.delay_step_s)), int(p.phi_deg)] > 0 for p in strong]
    assert np.mean(inside) > 0.95
