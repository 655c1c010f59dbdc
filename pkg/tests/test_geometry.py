"""Measurement geometry: region selection, scatter, oriented box, volume."""

import math
import random

import numpy as np
import pytest

from usar import (
    KidneyMeasurement,
    Mask,
    box_from_corners,
    centroid,
    ellipsoid_volume,
    extract_dimensions,
    largest_component,
    measure_mask,
    oriented_bounding_box,
    principal_orientation,
    scatter,
    select_region,
)
from usar.errors import BadBox, EmptyRegion, NonPositiveDimension
from usar.geometry import MeasurementSource, Scatter2

import oracles


def as_set(points):
    return {(int(x), int(y)) for x, y in points}


# ---------------------------------------------------------------- regions

def test_select_region_empty_raises(make_mask):
    with pytest.raises(EmptyRegion):
        select_region(make_mask(np.zeros((4, 4))), "cortex")


def test_select_region_full_grid(make_mask):
    pts = select_region(make_mask(np.ones((2, 2))), "cortex")
    assert pts.tolist() == [[0, 0], [1, 0], [0, 1], [1, 1]]


def test_select_region_union_counts(make_mask):
    grid = np.zeros((3, 4), dtype=np.uint8)
    grid[0, 0] = grid[0, 1] = grid[1, 2] = 1
    grid[2, 0] = grid[2, 3] = 2
    mask = make_mask(grid)
    assert len(select_region(mask, "union")) == 5
    assert len(select_region(mask, "cortex")) == 3
    assert len(select_region(mask, "central_complex")) == 2


def test_select_region_row_major_order(make_mask):
    grid = np.zeros((3, 3), dtype=np.uint8)
    grid[2, 0] = grid[0, 2] = grid[1, 1] = 1
    pts = select_region(make_mask(grid), "union")
    assert pts.tolist() == [[2, 0], [1, 1], [0, 2]]


def test_largest_component_identity():
    blob = [(x, 0) for x in range(10)]
    kept = largest_component(np.array(blob))
    assert as_set(kept) == set(blob)


def test_largest_component_picks_bigger_blob():
    big = [(x, 0) for x in range(10)]
    small = [(x, 5) for x in range(3)]
    kept = largest_component(np.array(big + small))
    assert as_set(kept) == set(big)


def test_largest_component_tie_breaks_on_topleft():
    # Two 5-pixel blobs; the one whose (min_y, min_x) sorts first wins.
    first = [(7, 2), (8, 2), (9, 2), (7, 3), (8, 3)]
    second = [(0, 6), (1, 6), (2, 6), (0, 7), (1, 7)]
    kept = largest_component(np.array(second + first))
    assert as_set(kept) == set(first)


def test_largest_component_matches_flood_fill():
    rng = np.random.default_rng(11)
    for _ in range(200):
        grid = rng.random((24, 24)) < 0.35
        if not grid.any():
            continue
        ys, xs = np.nonzero(grid)
        pts = np.column_stack((xs, ys))
        expected = oracles.largest_component_bruteforce(pts)
        assert as_set(largest_component(pts)) == expected


# ------------------------------------------------------- centroid, scatter

def test_centroid_examples():
    assert centroid(np.array([[3, 7]])) == (3.0, 7.0)
    assert centroid(np.array([[0, 0], [1, 0], [0, 1], [1, 1]])) == (0.5, 0.5)
    cx, cy = centroid(np.array([[0, 0], [1, 0], [0, 1]]))
    assert cx == pytest.approx(1 / 3, abs=1e-15)
    assert cy == pytest.approx(1 / 3, abs=1e-15)


def test_scatter_single_point_is_zero():
    s = scatter(np.array([[5, 9]]))
    assert (s.sxx, s.syy, s.sxy) == (0.0, 0.0, 0.0)


def test_scatter_horizontal_triple():
    s = scatter(np.array([[0, 0], [1, 0], [2, 0]]))
    assert s.sxx == 2.0
    assert s.syy == 0.0
    assert s.sxy == 0.0


def test_scatter_symmetric_cross_has_zero_cross_term():
    pts = np.array([[0, 0], [1, 0], [-1, 0], [0, 1], [0, -1]])
    assert scatter(pts).sxy == 0.0


def test_scatter_cauchy_schwarz_on_random_sets():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        pts = rng.integers(-50, 50, size=(n, 2))
        s = scatter(pts)
        assert s.sxy ** 2 <= s.sxx * s.syy * (1 + 1e-12) + 1e-9


def test_scatter_matches_direct_sums():
    rng = np.random.default_rng(17)
    for _ in range(50):
        pts = rng.integers(0, 30, size=(int(rng.integers(1, 25)), 2))
        s = scatter(pts)
        mx = pts[:, 0].mean()
        my = pts[:, 1].mean()
        assert s.sxx == pytest.approx(((pts[:, 0] - mx) ** 2).sum(), rel=1e-12, abs=1e-9)
        assert s.syy == pytest.approx(((pts[:, 1] - my) ** 2).sum(), rel=1e-12, abs=1e-9)
        assert s.sxy == pytest.approx(((pts[:, 0] - mx) * (pts[:, 1] - my)).sum(),
                                      rel=1e-12, abs=1e-9)


def test_principal_orientation_conventions():
    assert principal_orientation(Scatter2(5, 1, 0, 0, 0)) == 0.0
    assert principal_orientation(Scatter2(3, 3, 2, 0, 0)) == pytest.approx(math.pi / 4)
    assert principal_orientation(Scatter2(3, 3, 0, 0, 0)) == 0.0
    # 45-degree line literally.
    s = scatter(np.array([[0, 0], [1, 1], [2, 2]]))
    assert principal_orientation(s) == pytest.approx(math.pi / 4)


def test_principal_orientation_stays_in_halfturn():
    rng = np.random.default_rng(23)
    for _ in range(500):
        sxx, syy = rng.uniform(0, 100, 2)
        cap = math.sqrt(sxx * syy)
        sxy = rng.uniform(-cap, cap)
        t = principal_orientation(Scatter2(sxx, syy, sxy, 0, 0))
        assert -math.pi / 2 < t <= math.pi / 2


# ----------------------------------------------------------- oriented box

def filled_rect(width, height):
    return np.array([(x, y) for y in range(height) for x in range(width)])


def test_box_axis_aligned_rectangle():
    box = oriented_bounding_box(filled_rect(10, 4))
    assert box.theta == 0.0
    assert box.extent_major == 10.0
    assert box.extent_minor == 4.0
    assert box.center_x == pytest.approx(4.5)
    assert box.center_y == pytest.approx(1.5)


def test_box_single_pixel():
    box = oriented_bounding_box(np.array([[7, 3]]))
    assert box.theta == 0.0
    assert box.extent_major == 1.0
    assert box.extent_minor == 1.0


def rasterize_rotated_rect(width, height, phi, scale=6):
    """Pixels whose centers fall inside a width x height rectangle rotated
    by phi, rendered on a fine-stepped grid around the origin."""
    half_w, half_h = width / 2.0, height / 2.0
    reach = int(math.ceil(math.hypot(half_w, half_h))) + 2
    c, s = math.cos(phi), math.sin(phi)
    pts = []
    for y in range(-reach, reach + 1):
        for x in range(-reach, reach + 1):
            u = x * c + y * s
            v = -x * s + y * c
            if abs(u) <= half_w and abs(v) <= half_h:
                pts.append((x + reach, y + reach))
    return np.array(pts)


def test_box_rotated_rectangle_close_to_oracle():
    phi = math.radians(30.0)
    pts = rasterize_rotated_rect(10, 4, phi)
    box = oriented_bounding_box(pts)
    assert oracles.angle_gap(box.theta, phi) < math.radians(2.0)
    o_theta, o_major, o_minor = oracles.min_extent_box(pts)
    assert oracles.angle_gap(box.theta, o_theta) < math.radians(2.0)
    assert abs(box.extent_major - o_major) < 2.0
    assert abs(box.extent_minor - o_minor) < 2.0


def test_box_corner_reconstruction():
    rng = np.random.default_rng(31)
    for _ in range(50):
        pts = rng.integers(0, 60, size=(int(rng.integers(2, 80)), 2))
        box = oriented_bounding_box(pts)
        assert np.allclose(box.corners, box.reconstruct_corners(), atol=1e-6)
        assert box.extent_major >= box.extent_minor >= 0


def test_box_contains_every_point_exactly():
    rng = np.random.default_rng(37)
    for _ in range(100):
        pts = rng.integers(0, 80, size=(int(rng.integers(1, 120)), 2)).astype(float)
        box = oriented_bounding_box(pts)
        cx, cy = centroid(pts)
        c, s = math.cos(box.theta), math.sin(box.theta)
        u = (pts[:, 0] - cx) * c + (pts[:, 1] - cy) * s
        v = -(pts[:, 0] - cx) * s + (pts[:, 1] - cy) * c
        # Extents include the +1 footprint, so spans are extent - 1.
        assert u.max() - u.min() <= box.extent_major - 1 + 1e-9
        assert v.max() - v.min() <= box.extent_minor - 1 + 1e-9


def test_box_translation_invariance_is_bit_exact():
    rng = np.random.default_rng(41)
    pts = rng.integers(0, 100, size=(300, 2))
    base = oriented_bounding_box(pts)
    for dx, dy in [(1, 0), (0, 1), (313, -97), (-5, 40), (10000, 10000)]:
        moved = oriented_bounding_box(pts + np.array([dx, dy]))
        assert moved.theta == base.theta
        assert moved.extent_major == base.extent_major
        assert moved.extent_minor == base.extent_minor
        assert moved.center_x == base.center_x + dx
        assert moved.center_y == base.center_y + dy


def test_box_rotation_equivariance_on_ellipses():
    rng = random.Random(43)
    for _ in range(20):
        a = rng.uniform(25, 60)
        b = a / rng.uniform(1.4, 2.5)
        if b < 20:
            b = 20.0
        t0 = rng.uniform(-math.pi / 2, math.pi / 2)
        phi = rng.uniform(0, math.pi)
        size = int(2 * a + 8)
        m0 = oracles.rasterize_ellipse(size / 2, size / 2, a, b, t0, size, size)
        m1 = oracles.rasterize_ellipse(size / 2, size / 2, a, b, t0 + phi, size, size)
        ys, xs = np.nonzero(m0)
        b0 = oriented_bounding_box(np.column_stack((xs, ys)))
        ys, xs = np.nonzero(m1)
        b1 = oriented_bounding_box(np.column_stack((xs, ys)))
        assert oracles.angle_gap(b1.theta, b0.theta + phi) < math.radians(2.0)
        assert abs(b1.extent_major - b0.extent_major) < 0.03 * b0.extent_major
        assert abs(b1.extent_minor - b0.extent_minor) < 0.03 * b0.extent_minor


def test_box_matches_analytic_ellipse_extents():
    # The angle check needs some anisotropy and size to be well posed: near
    # a = b the orientation is ill-conditioned and rasterization noise on a
    # small blob can swing the recovered angle past any fixed tolerance.
    rng = random.Random(47)
    for _ in range(20):
        a = rng.uniform(12, 80)
        b = rng.uniform(10, a / 1.2)
        theta = rng.uniform(-math.pi / 2, math.pi / 2)
        size = int(2 * a + 10)
        grid = oracles.rasterize_ellipse(size / 2, size / 2, a, b, theta, size, size)
        ys, xs = np.nonzero(grid)
        box = oriented_bounding_box(np.column_stack((xs, ys)))
        assert abs(box.extent_major - (2 * a + 1)) < 3.0
        assert abs(box.extent_minor - (2 * b + 1)) < 3.0
        if a >= 20 and a / b > 1.25:
            assert oracles.angle_gap(box.theta, theta) < math.radians(2.0)


# ------------------------------------------------------- corners, refine

def test_box_from_corners_round_trips():
    pts = rasterize_rotated_rect(12, 5, math.radians(20))
    box = oriented_bounding_box(pts)
    rebuilt = box_from_corners(box.corners)
    assert rebuilt.extent_major == pytest.approx(box.extent_major, abs=1e-9)
    assert rebuilt.extent_minor == pytest.approx(box.extent_minor, abs=1e-9)
    assert oracles.angle_gap(rebuilt.theta, box.theta) < 1e-9
    assert rebuilt.center_x == pytest.approx(box.center_x, abs=1e-9)
    assert rebuilt.center_y == pytest.approx(box.center_y, abs=1e-9)


def test_box_from_corners_rejects_non_parallelogram():
    corners = np.array([[0, 0], [10, 0], [10, 4], [0, 9]], dtype=float)
    with pytest.raises(BadBox):
        box_from_corners(corners)


def test_box_from_corners_rejects_degenerate_and_nan():
    with pytest.raises(BadBox):
        box_from_corners(np.zeros((4, 2)))
    corners = np.array([[0, 0], [10, 0], [10, 4], [0, 4]], dtype=float)
    corners[2, 0] = math.nan
    with pytest.raises(BadBox):
        box_from_corners(corners)


def test_box_from_corners_major_axis_follows_longer_edge():
    # Stretch the minor edge past the major one; roles must swap.
    corners = np.array([[0, 0], [10, 0], [10, 30], [0, 30]], dtype=float)
    box = box_from_corners(corners)
    assert box.extent_major == pytest.approx(31.0)
    assert box.extent_minor == pytest.approx(11.0)
    assert oracles.angle_gap(box.theta, math.pi / 2) < 1e-9


# ------------------------------------------------------ dimensions, volume

def test_extract_dimensions_by_view():
    pts = filled_rect(100, 40)
    box = oriented_bounding_box(pts)
    coronal = extract_dimensions(box, "coronal", 0.5)
    assert coronal.length_mm == pytest.approx(50.0)
    assert coronal.width_mm is None
    transverse = extract_dimensions(box, "transverse", 0.5)
    assert transverse.width_mm == pytest.approx(50.0)
    assert transverse.thickness_mm == pytest.approx(20.0)


def test_extract_dimensions_square_tie():
    box = oriented_bounding_box(filled_rect(10, 10))
    m = extract_dimensions(box, "transverse", 1.0)
    assert m.width_mm == pytest.approx(10.0)
    assert m.thickness_mm == pytest.approx(10.0)


def test_extract_dimensions_rejects_bad_spacing():
    box = oriented_bounding_box(filled_rect(4, 2))
    with pytest.raises(NonPositiveDimension):
        extract_dimensions(box, "coronal", 0.0)


def test_ellipsoid_volume_values():
    assert ellipsoid_volume(2, 2, 2) == pytest.approx(4 * math.pi / 3, rel=1e-15)
    assert ellipsoid_volume(1, 1, 1) == pytest.approx(math.pi / 6, rel=1e-15)
    assert ellipsoid_volume(110, 50, 40) == pytest.approx(math.pi / 6 * 220000,
                                                          rel=1e-12)


def test_ellipsoid_volume_rejects_nonpositive():
    for bad in [(0, 1, 1), (1, -2, 1), (1, 1, 0)]:
        with pytest.raises(NonPositiveDimension):
            ellipsoid_volume(*bad)


def test_ellipsoid_volume_permutation_symmetric():
    rng = random.Random(53)
    for _ in range(200):
        l, w, t = (rng.uniform(0.1, 200) for _ in range(3))
        v = ellipsoid_volume(l, w, t)
        assert ellipsoid_volume(w, t, l) == v
        assert ellipsoid_volume(t, l, w) == v
        assert ellipsoid_volume(w, l, t) == v


# ----------------------------------------------------- measurement record

def test_measurement_volume_consistency_enforced():
    v = ellipsoid_volume(100, 50, 40)
    KidneyMeasurement(length_mm=100, width_mm=50, thickness_mm=40, volume_mm3=v)
    with pytest.raises(ValueError):
        KidneyMeasurement(length_mm=100, width_mm=50, thickness_mm=40,
                          volume_mm3=v * 1.01)
    with pytest.raises(ValueError):
        KidneyMeasurement(length_mm=100, volume_mm3=v)


def test_measurement_merge_and_volume():
    coronal = KidneyMeasurement(length_mm=90.0)
    transverse = KidneyMeasurement(width_mm=45.0, thickness_mm=35.0)
    merged = coronal.merged(transverse).with_volume()
    assert merged.length_mm == 90.0
    assert merged.volume_mm3 == pytest.approx(ellipsoid_volume(90, 45, 35))
    refined = coronal.merged(KidneyMeasurement(width_mm=50.0, source="refined"))
    assert refined.source is MeasurementSource.REFINED


def test_measure_mask_end_to_end(make_mask):
    grid = np.zeros((30, 40), dtype=np.uint8)
    grid[10:14, 5:25] = 1  # 20 x 4 block
    grid[11:13, 9:21] = 2  # central strip inside it
    mask = make_mask(grid, pixel_spacing=0.5)
    m, box = measure_mask(mask, "coronal")
    assert box.extent_major == pytest.approx(20.0)
    assert box.extent_minor == pytest.approx(4.0)
    assert m.length_mm == pytest.approx(10.0)
    m2, _ = measure_mask(mask, "transverse", pixel_spacing=1.0)
    assert m2.width_mm == pytest.approx(20.0)
    assert m2.thickness_mm == pytest.approx(4.0)


def test_mask_bytes_round_trip(make_mask):
    rng = np.random.default_rng(59)
    grid = rng.integers(0, 3, size=(17, 23)).astype(np.uint8)
    mask = make_mask(grid, pixel_spacing=0.7)
    back = Mask.from_bytes(mask.to_bytes(), mask.width, mask.height, 0.7)
    assert np.array_equal(back.labels, grid)


def test_mask_validation():
    with pytest.raises(ValueError):
        Mask(np.full((4, 4), 3, dtype=np.uint8))
    with pytest.raises(ValueError):
        Mask(np.zeros((4, 4), dtype=np.uint8), pixel_spacing=0.0)
    with pytest.raises(ValueError):
        Mask(np.zeros(16, dtype=np.uint8))
