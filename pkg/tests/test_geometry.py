import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import nearest_wall_distances
from thzrecon.channel import SPEED_OF_LIGHT
from thzrecon.geometry import (
    KINDS,
    SlidingWindowSmoother,
    StructureFitter,
    StructureTemplate,
    cartesian_to_polar,
    cloud_agreement,
    compute_metrics,
    fit_structure,
    map_point,
    map_to_cartesian,
    read_point_cloud,
    refine_region,
    sliding_window_filter,
    template_delay,
    write_point_cloud,
)
from thzrecon.sage import DeembeddedMpc

R = 0.23
CORNER = StructureTemplate("inner_corner", (1.60, 1.23), 0.0, R)


# -- templates -----------------------------------------------------------------


def test_inner_corner_left_branch_at_90():
    assert template_delay(CORNER, 89.999999) * 1e9 == pytest.approx(2 / SPEED_OF_LIGHT * (1.60 - R) * 1e9, abs=1e-6)
    assert template_delay(CORNER, 89.999999) * 1e9 == pytest.approx(9.14, abs=0.005)


def test_inner_corner_bottom_branch_at_0():
    assert template_delay(CORNER, 0.0) * 1e9 == pytest.approx(6.67, abs=0.005)


def test_branches_meet_at_crossover():
    theta = CORNER.crossover_deg()
    assert theta == pytest.approx(np.degrees(np.arctan2(1.60, 1.23)))
    t = np.deg2rad(theta)
    assert 1.60 / np.sin(t) == pytest.approx(1.23 / np.cos(t), rel=1e-12)
    assert CORNER.branch(theta - 0.01) == 0 and CORNER.branch(theta + 0.01) == 1


def test_outer_corner_takes_the_far_branch():
    outer = StructureTemplate("outer_corner", (1.60, 1.23), 0.0, R)
    theta = np.array([20.0, 70.0])
    assert np.all(outer.range_m(theta) > CORNER.range_m(theta))


@given(st.floats(-89, 89), st.floats(0.3, 5.0), st.floats(0, 360))
def test_flat_wall_template_closed_form(rho, d, theta0):
    tmpl = StructureTemplate("flat_wall", (d,), theta0, R)
    expected = 2 / SPEED_OF_LIGHT * (d / np.cos(np.deg2rad(rho)) - R)
    assert template_delay(tmpl, theta0 + rho) == pytest.approx(expected, rel=1e-9)


def test_template_rejects_angles_outside_support():
    with pytest.raises(ValueError):
        template_delay(StructureTemplate("flat_wall", (1.0,), 0.0), 120.0)
    with pytest.raises(ValueError):
        StructureTemplate("dome", (1.0,), 0.0)
    with pytest.raises(ValueError):
        StructureTemplate("inner_corner", (1.0,), 0.0)


# -- fitting -------------------------------------------------------------------


def test_noiseless_corner_recovered():
    theta = np.arange(5.0, 86.0)
    fit = fit_structure(theta, template_delay(CORNER, theta), radius_m=R)
    assert fit.template.kind == "inner_corner"
    d1, d2 = fit.template.distances_m
    assert abs(d1 - 1.60) <= 1e-3 and abs(d2 - 1.23) <= 1e-3
    assert fit.rmse_s < 0.01e-9


def test_noiseless_flat_wall_selects_flat_wall():
    tmpl = StructureTemplate("flat_wall", (1.23,), 30.0, R)
    theta = np.arange(5.0, 56.0)
    fit = fit_structure(theta, template_delay(tmpl, theta), radius_m=R)
    assert fit.template.kind == "flat_wall"
    assert fit.template.distances_m[0] == pytest.approx(1.23, abs=1e-3)
    assert fit.template.theta0_deg == pytest.approx(30.0, abs=0.05)


@pytest.mark.parametrize("seed", range(3))
def test_fit_beats_every_grid_candidate(seed):
    rng = np.random.default_rng(seed)
    theta = np.arange(10.0, 80.0, 2.0)
    tau = template_delay(CORNER, theta) + rng.normal(0, 0.05e-9, theta.size)
    fit = fit_structure(theta, tau, radius_m=R)
    assert fit.rmse_s <= fit.grid_rmse_s + 1e-18
    for kind, rmse in fit.kind_rmse_s.items():
        assert fit.rmse_s <= rmse or kind != fit.template.kind


def test_fit_input_validation():
    with pytest.raises(ValueError):
        fit_structure([1, 2, 3], [1e-9, 1e-9, 1e-9])
    with pytest.raises(ValueError):
        fit_structure(np.full(6, 10.0), np.full(6, 7e-9))
    with pytest.raises(ValueError):
        fit_structure(np.arange(6.0), np.full(6, 7e-9), kinds=("cylinder",))


def test_structure_fitter_estimator():
    theta = np.arange(5.0, 86.0)
    X = np.column_stack([theta, template_delay(CORNER, theta)])
    fitter = StructureFitter(kinds=KINDS).fit(X)
    np.testing.assert_allclose(fitter.predict(theta), X[:, 1], atol=0.01e-9)
    assert fitter.get_params()["radius_m"] == 0.23


# -- mapping -------------------------------------------------------------------


def test_zero_delay_maps_to_antenna_circle():
    assert map_to_cartesian(0.0, 0.0, (0.0, 0.0), R) == pytest.approx((0.23, 0.0))


def test_one_metre_at_90_degrees():
    x, y = map_to_cartesian(2 * 1.0 / SPEED_OF_LIGHT, 90.0, (0.0, 0.0), R)
    assert x == pytest.approx(0.0, abs=1e-12) and y == pytest.approx(1.23)


@given(st.floats(1e-12, 60e-9), st.floats(0, 359.999), st.floats(-5, 5), st.floats(-5, 5))
def test_mapping_inverse(tau, theta, tx, ty):
    x, y = map_to_cartesian(tau, theta, (tx, ty), R)
    tau2, theta2 = cartesian_to_polar(x, y, (tx, ty), R)
    assert tau2 == pytest.approx(tau, rel=1e-6, abs=1e-18)
    assert abs(((theta2 - theta + 180) % 360) - 180) < 1e-6


def test_mapped_wall_points_lie_on_wall():
    tmpl = StructureTemplate("flat_wall", (1.23,), 0.0, R)
    step = 0.05e-9
    theta = np.arange(-40.0, 41.0)
    tau = np.round(template_delay(tmpl, theta) / step) * step
    x, _ = map_to_cartesian(tau, theta, (0.0, 0.0), R)
    # a delay bin is c * step / 2 of range; projected onto the wall normal it is no larger
    assert np.max(np.abs(x - 1.23)) <= SPEED_OF_LIGHT * step / 2


def test_map_point_carries_metadata():
    m = DeembeddedMpc(1.0, 2e-9, 45.0, 3, 0.0, trx_id=2)
    p = map_point(m, (1.0, 1.0), R)
    assert (p.trx_id, p.label, p.phi_deg) == (2, 3, 45.0)


# -- smoothing -----------------------------------------------------------------


@given(arrays(float, st.tuples(st.integers(0, 30), st.just(2)), elements=st.floats(-10, 10)))
def test_window_one_is_identity(xy):
    np.testing.assert_array_equal(sliding_window_filter(xy, 1), xy)


@given(st.integers(1, 40), st.sampled_from([1, 3, 5, 11, 21]), st.floats(-3, 3), st.floats(-3, 3),
       st.floats(0.001, 0.1), st.floats(0, 2 * np.pi))
def test_collinear_equally_spaced_points_unchanged(n, w, x0, y0, step, ang):
    k = np.arange(n)[:, None]
    xy = np.array([x0, y0]) + k * step * np.array([np.cos(ang), np.sin(ang)])
    np.testing.assert_allclose(sliding_window_filter(xy, w), xy, atol=1e-12)


@given(arrays(float, st.tuples(st.integers(12, 40), st.just(2)), elements=st.floats(-10, 10)))
def test_interior_points_are_window_means(xy):
    out = sliding_window_filter(xy, 11)
    for i in range(5, xy.shape[0] - 5):
        np.testing.assert_allclose(out[i], xy[i - 5: i + 6].mean(axis=0), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_smoothing_halves_line_noise(seed):
    rng = np.random.default_rng(seed)
    s = np.arange(60) * 0.02
    normal = np.array([0.6, 0.8])
    along = np.array([0.8, -0.6])
    clean = np.array([1.0, 2.0]) + s[:, None] * along
    noisy = clean + rng.normal(0, 0.005, (s.size, 2))

    def line_rmse(pts):
        return np.sqrt(np.mean(((pts - np.array([1.0, 2.0])) @ normal) ** 2))

    assert line_rmse(sliding_window_filter(noisy, 11)) * 2 <= line_rmse(noisy)


def test_smoother_transformer():
    xy = np.random.default_rng(0).standard_normal((20, 2))
    np.testing.assert_array_equal(SlidingWindowSmoother(5).fit_transform(xy), sliding_window_filter(xy, 5))
    with pytest.raises(ValueError):
        SlidingWindowSmoother(4).fit(xy)


# -- refinement ----------------------------------------------------------------


def test_refine_region_rejects_outlier():
    theta = np.arange(5.0, 86.0)
    tau = template_delay(CORNER, theta)
    tau[40] += 1e-9
    mpcs = [DeembeddedMpc(1.0, t, p, 1, 0.0) for p, t in zip(theta, tau)]
    geo = refine_region(mpcs, (0.0, 0.0), R)
    assert 40 not in geo.inliers and geo.inliers.size == theta.size - 1
    assert geo.fit.template.kind == "inner_corner"
    segs = np.array([[[1.23, -1.0], [1.23, 1.60]], [[-1.0, 1.60], [1.23, 1.60]]])
    assert max(nearest_wall_distances([(p.x, p.y) for p in geo.points], segs)) < 1e-3


def test_refine_region_unstructured():
    mpcs = [DeembeddedMpc(1.0, 5e-9, 10.0, 1, 0.0)] * 3
    assert refine_region(mpcs, (0.0, 0.0), R).points == []
    assert len(refine_region(mpcs, (0.0, 0.0), R, keep_unstructured=True).points) == 3


# -- metrics -------------------------------------------------------------------

SEGS = np.array([[[0.0, 0.0], [2.0, 0.0]], [[2.0, 0.0], [2.0, 3.0]]])


def test_points_on_walls_have_zero_error():
    m = compute_metrics([(0.5, 0.0), (2.0, 1.0), (2.0, 0.0)], SEGS)
    assert m["mde_m"] == 0.0 and m["rmse_m"] == 0.0


def test_single_point_one_cm_off():
    m = compute_metrics([(1.0, 0.01)], SEGS)
    assert m["mde_m"] == pytest.approx(0.01) and m["rmse_m"] == pytest.approx(0.01)


@given(arrays(float, st.tuples(st.integers(1, 30), st.just(2)), elements=st.floats(-3, 5)))
def test_metrics_match_brute_force(points):
    m = compute_metrics(points, SEGS)
    d = np.array(nearest_wall_distances(points.tolist(), SEGS.tolist()))
    assert m["mde_m"] == pytest.approx(d.mean(), abs=1e-12)
    assert m["rmse_m"] == pytest.approx(np.sqrt(np.mean(d ** 2)), abs=1e-12)
    np.testing.assert_allclose(m["cdf"]["error_m"], np.sort(d), atol=1e-12)
    assert m["cdf"]["probability"][-1] == 1.0


def test_metrics_need_points():
    with pytest.raises(ValueError):
        compute_metrics([], SEGS)


# -- clouds --------------------------------------------------------------------


def test_cloud_agreement():
    a = [map_point(DeembeddedMpc(1.0, t * 1e-9, p, 1, 0.0), (0, 0)) for p, t in ((10, 5.0), (11, 5.1), (50, 9.0))]
    b = [map_point(DeembeddedMpc(1.0, t * 1e-9, p, 1, 0.0), (0, 0)) for p, t in ((10, 5.02), (12, 5.1))]
    fa, fb = cloud_agreement(a, b, 0.05e-9, 1.0)
    assert fa == pytest.approx(2 / 3) and fb == 1.0
    assert cloud_agreement([], [], 0.05e-9) == (1.0, 1.0)


def test_point_cloud_csv(tmp_path):
    pts = [map_point(DeembeddedMpc(1.0, 5e-9, 10.0, 1, 0.0, 2), (0, 0), filtered=True)]
    write_point_cloud(tmp_path / "p.csv", pts)
    back = read_point_cloud(tmp_path / "p.csv")
    assert back["x_m"][0] == pytest.approx(pts[0].x, abs=1e-6)
    assert int(back["trx_id"][0]) == 2 and int(back["filtered"][0]) == 1
