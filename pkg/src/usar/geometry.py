"""Oriented-box measurement geometry for segmented kidney masks.

Coordinates are (x, y) pixel positions: x runs along image columns, y along
rows, matching the row-major layout of the mask grids.  Pixels are treated
as unit squares centered on integer coordinates, so a structure occupying
columns 3..12 is 10 px wide (max - min + 1).

The measurement chain is: select the labeled region, keep its largest
8-connected component, find the principal orientation of the pixel scatter,
and take the axis-aligned min/max box in the rotated frame.  Dimensions in
millimeters follow from the box extents and the pixel spacing; volume uses
the standard sonographic ellipsoid estimate (pi/6 * L * W * T).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy import ndimage

from .errors import BadBox, EmptyRegion, NonPositiveDimension

BACKGROUND = 0
CORTEX = 1
CENTRAL_COMPLEX = 2

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class ClassSelector(str, Enum):
    CORTEX = "cortex"
    CENTRAL_COMPLEX = "central_complex"
    UNION = "union"


class View(str, Enum):
    CORONAL = "coronal"
    TRANSVERSE = "transverse"


class MeasurementSource(str, Enum):
    AUTOMATIC = "automatic"
    REFINED = "refined"


@dataclass(eq=False)
class Mask:
    """Labeled pixel grid: 0 background, 1 cortex, 2 central complex.

    `labels` is a (height, width) uint8 array; `pixel_spacing` is isotropic
    millimeters per pixel.
    """

    labels: np.ndarray
    pixel_spacing: float = 1.0

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2 or self.labels.size == 0:
            raise ValueError("labels must be a non-empty 2D array")
        if int(self.labels.max()) > CENTRAL_COMPLEX:
            raise ValueError("label values must be in {0, 1, 2}")
        if not self.pixel_spacing > 0:
            raise ValueError("pixel_spacing must be > 0")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def to_bytes(self) -> bytes:
        return self.labels.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, width: int, height: int,
                   pixel_spacing: float = 1.0) -> "Mask":
        labels = np.frombuffer(data, dtype=np.uint8).reshape(height, width)
        return cls(labels.copy(), pixel_spacing)


@dataclass(frozen=True)
class Scatter2:
    """Un-normalized second moments of a point set about its centroid."""

    sxx: float
    syy: float
    sxy: float
    centroid_x: float
    centroid_y: float


@dataclass(frozen=True, eq=False)
class OrientedBox:
    """Principal-axis-aligned bounding rectangle of a pixel region.

    `theta` is the direction of the major extent, in (-pi/2, pi/2].
    `corners` is a (4, 2) array of (x, y) pairs; corners[0] -> corners[1]
    runs along the major axis and corners[1] -> corners[2] along the minor
    axis, so the corner rectangle spans (extent - 1) pixels per side (the
    extents include the unit pixel footprint).
    """

    center_x: float
    center_y: float
    theta: float
    extent_major: float
    extent_minor: float
    corners: np.ndarray

    def reconstruct_corners(self) -> np.ndarray:
        """Corners recomputed from center/theta/extents (invariant check)."""
        return _corners_from_params(self.center_x, self.center_y, self.theta,
                                    self.extent_major, self.extent_minor)


@dataclass
class KidneyMeasurement:
    """Kidney dimensions in millimeters plus the derived ellipsoid volume.

    Fields stay None until the corresponding scan phase completes.  The
    volume, when present, must match pi/6 * L * W * T.
    """

    length_mm: float | None = None
    width_mm: float | None = None
    thickness_mm: float | None = None
    volume_mm3: float | None = None
    source: MeasurementSource = MeasurementSource.AUTOMATIC

    def __post_init__(self):
        self.source = MeasurementSource(self.source)
        for name in ("length_mm", "width_mm", "thickness_mm", "volume_mm3"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise NonPositiveDimension(f"{name} must be > 0, got {value}")
        if self.volume_mm3 is not None:
            if not self.is_complete:
                raise ValueError("volume requires all of L, W, T")
            expected = ellipsoid_volume(self.length_mm, self.width_mm,
                                        self.thickness_mm)
            if abs(self.volume_mm3 - expected) > 1e-9 * expected:
                raise ValueError("volume inconsistent with dimensions")

    @property
    def is_complete(self) -> bool:
        return None not in (self.length_mm, self.width_mm, self.thickness_mm)

    def merged(self, other: "KidneyMeasurement") -> "KidneyMeasurement":
        """Combine two partial measurements; fields of `other` win."""
        source = self.source
        if MeasurementSource.REFINED in (self.source, other.source):
            source = MeasurementSource.REFINED
        return KidneyMeasurement(
            length_mm=other.length_mm if other.length_mm is not None else self.length_mm,
            width_mm=other.width_mm if other.width_mm is not None else self.width_mm,
            thickness_mm=other.thickness_mm if other.thickness_mm is not None else self.thickness_mm,
            volume_mm3=None,
            source=source,
        )

    def with_volume(self) -> "KidneyMeasurement":
        """Return a copy with the ellipsoid volume filled in."""
        if not self.is_complete:
            raise ValueError("cannot compute volume before L, W and T are set")
        return replace(self, volume_mm3=ellipsoid_volume(
            self.length_mm, self.width_mm, self.thickness_mm))


def select_region(mask: Mask, selector: ClassSelector | str = ClassSelector.UNION) -> np.ndarray:
    """Return the (x, y) coordinates of every pixel matching the selector.

    Points come back in deterministic row-major order (top row first,
    left to right).  Raises EmptyRegion when nothing matches.
    """
    sel = ClassSelector(selector)
    if sel is ClassSelector.UNION:
        hit = mask.labels != BACKGROUND
    elif sel is ClassSelector.CORTEX:
        hit = mask.labels == CORTEX
    else:
        hit = mask.labels == CENTRAL_COMPLEX
    ys, xs = np.nonzero(hit)
    if xs.size == 0:
        raise EmptyRegion(f"no '{sel.value}' pixels in mask")
    return np.column_stack((xs, ys)).astype(np.int64)


def largest_component(points: np.ndarray) -> np.ndarray:
    """Keep the largest 8-connected component of a pixel point set.

    Ties are broken by the smallest (min_y, min_x) of the component.
    Points are returned in row-major order.
    """
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise EmptyRegion("empty point set")
    x0 = int(pts[:, 0].min())
    y0 = int(pts[:, 1].min())
    w = int(pts[:, 0].max()) - x0 + 1
    h = int(pts[:, 1].max()) - y0 + 1
    grid = np.zeros((h, w), dtype=bool)
    grid[pts[:, 1] - y0, pts[:, 0] - x0] = True
    labeled, count = ndimage.label(grid, structure=_EIGHT_CONNECTED)
    if count <= 1:
        return pts
    sizes = np.bincount(labeled.ravel())
    sizes[0] = 0
    best_size = sizes.max()
    candidates = np.flatnonzero(sizes == best_size)
    if candidates.size == 1:
        chosen = candidates[0]
    else:
        keys = []
        for label in candidates:
            cys, cxs = np.nonzero(labeled == label)
            keys.append((int(cys.min()), int(cxs.min()), int(label)))
        chosen = min(keys)[2]
    ys, xs = np.nonzero(labeled == chosen)
    return np.column_stack((xs + x0, ys + y0)).astype(np.int64)


def centroid(points: np.ndarray) -> tuple[float, float]:
    """Mean (x, y) of the point set."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise EmptyRegion("empty point set")
    return float(pts[:, 0].mean()), float(pts[:, 1].mean())


def scatter(points: np.ndarray) -> Scatter2:
    """Sums of squared deviations and cross-deviations about the centroid."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise EmptyRegion("empty point set")
    # Shift to the integer bounding-box origin first so that translating the
    # input by whole pixels cannot perturb any floating-point intermediate.
    x0 = math.floor(float(pts[:, 0].min()))
    y0 = math.floor(float(pts[:, 1].min()))
    lx = pts[:, 0] - x0
    ly = pts[:, 1] - y0
    mx = float(lx.mean())
    my = float(ly.mean())
    dx = lx - mx
    dy = ly - my
    return Scatter2(
        sxx=float(dx @ dx),
        syy=float(dy @ dy),
        sxy=float(dx @ dy),
        centroid_x=mx + x0,
        centroid_y=my + y0,
    )


def principal_orientation(s: Scatter2) -> float:
    """Principal axis angle of the scatter, in (-pi/2, pi/2].

    Isotropic scatter (sxy = 0 and sxx = syy, single points included) is
    pinned to 0 by convention.
    """
    if s.sxy == 0.0 and s.sxx == s.syy:
        return 0.0
    return _normalize_halfturn(0.5 * math.atan2(2.0 * s.sxy, s.sxx - s.syy))


def oriented_bounding_box(points: np.ndarray) -> OrientedBox:
    """Bounding rectangle aligned to the principal orientation.

    The points are rotated by -theta about their centroid, the axis-aligned
    min/max box is taken there (extents are max - min + 1 per axis to cover
    the unit pixel footprint), and the box is rotated back by theta.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise EmptyRegion("empty point set")
    x0 = math.floor(float(pts[:, 0].min()))
    y0 = math.floor(float(pts[:, 1].min()))
    lx = pts[:, 0] - x0
    ly = pts[:, 1] - y0
    s = scatter(pts)
    # Mean taken in the local frame; recovering it from the global centroid
    # would round differently for different translations.
    cx = float(lx.mean())
    cy = float(ly.mean())
    dx = lx - cx
    dy = ly - cy
    theta = principal_orientation(s)

    def rotated_frame(angle):
        c, sn = math.cos(angle), math.sin(angle)
        return c * dx + sn * dy, -sn * dx + c * dy

    u, v = rotated_frame(theta)
    if (v.max() - v.min()) > (u.max() - u.min()):
        # Report theta along the larger extent.
        theta = _normalize_halfturn(theta + math.pi / 2.0)
        u, v = rotated_frame(theta)
    umin, umax = float(u.min()), float(u.max())
    vmin, vmax = float(v.min()), float(v.max())
    extent_major = umax - umin + 1.0
    extent_minor = vmax - vmin + 1.0

    c, sn = math.cos(theta), math.sin(theta)

    def rotate_back(uu, vv):
        return (cx + c * uu - sn * vv + x0, cy + sn * uu + c * vv + y0)

    corners = np.array([
        rotate_back(umin, vmin),
        rotate_back(umax, vmin),
        rotate_back(umax, vmax),
        rotate_back(umin, vmax),
    ])
    center = rotate_back((umin + umax) / 2.0, (vmin + vmax) / 2.0)
    return OrientedBox(center_x=center[0], center_y=center[1], theta=theta,
                       extent_major=extent_major, extent_minor=extent_minor,
                       corners=corners)


def box_from_corners(corners: np.ndarray) -> OrientedBox:
    """Re-derive an OrientedBox from four user-adjusted corner positions.

    Corners must form (near) a parallelogram in the order produced by
    `oriented_bounding_box`.  The returned box is canonicalized: corners are
    rebuilt from the derived center/theta/extents.
    """
    c = np.asarray(corners, dtype=np.float64).reshape(4, 2)
    if not np.all(np.isfinite(c)):
        raise BadBox("corner coordinates must be finite")
    if np.max(np.abs((c[0] + c[2]) - (c[1] + c[3]))) > 1.0:
        raise BadBox("corners do not form a parallelogram")
    edge_a = c[1] - c[0]
    edge_b = c[3] - c[0]
    len_a = float(np.hypot(*edge_a))
    len_b = float(np.hypot(*edge_b))
    if max(len_a, len_b) == 0.0:
        raise BadBox("degenerate box")
    if len_a >= len_b:
        major_vec, extent_major, extent_minor = edge_a, len_a + 1.0, len_b + 1.0
    else:
        major_vec, extent_major, extent_minor = edge_b, len_b + 1.0, len_a + 1.0
    theta = _normalize_halfturn(math.atan2(float(major_vec[1]), float(major_vec[0])))
    center = c.mean(axis=0)
    rebuilt = _corners_from_params(float(center[0]), float(center[1]), theta,
                                   extent_major, extent_minor)
    return OrientedBox(center_x=float(center[0]), center_y=float(center[1]),
                       theta=theta, extent_major=extent_major,
                       extent_minor=extent_minor, corners=rebuilt)


def extract_dimensions(box: OrientedBox, view: View | str, pixel_spacing: float,
                       source: MeasurementSource | str = MeasurementSource.AUTOMATIC,
                       ) -> KidneyMeasurement:
    """Convert box extents to millimeter dimensions for the given view.

    Coronal yields length; transverse yields width (major extent) and
    thickness (minor extent).
    """
    if not pixel_spacing > 0:
        raise NonPositiveDimension("pixel_spacing must be > 0")
    if View(view) is View.CORONAL:
        return KidneyMeasurement(length_mm=box.extent_major * pixel_spacing,
                                 source=source)
    return KidneyMeasurement(width_mm=box.extent_major * pixel_spacing,
                             thickness_mm=box.extent_minor * pixel_spacing,
                             source=source)


def ellipsoid_volume(length_mm: float, width_mm: float, thickness_mm: float) -> float:
    """Ellipsoid volume estimate: pi/6 * L * W * T, in cubic millimeters."""
    for value in (length_mm, width_mm, thickness_mm):
        if not value > 0:
            raise NonPositiveDimension(f"dimensions must be > 0, got {value}")
    # Multiply in sorted order so the result is identical under any
    # permutation of the arguments.
    a, b, c = sorted((length_mm, width_mm, thickness_mm))
    return math.pi / 6.0 * a * b * c


def measure_mask(mask: Mask, view: View | str,
                 selector: ClassSelector | str = ClassSelector.UNION,
                 pixel_spacing: float | None = None,
                 ) -> tuple[KidneyMeasurement, OrientedBox]:
    """Full measurement chain on one mask: select, clean up, box, convert.

    Uses the mask's own pixel spacing unless an explicit one is given.
    """
    points = largest_component(select_region(mask, selector))
    box = oriented_bounding_box(points)
    spacing = mask.pixel_spacing if pixel_spacing is None else pixel_spacing
    return extract_dimensions(box, view, spacing), box


def _normalize_halfturn(theta: float) -> float:
    """Fold an angle into (-pi/2, pi/2]."""
    while theta <= -math.pi / 2.0:
        theta += math.pi
    while theta > math.pi / 2.0:
        theta -= math.pi
    return theta


def _corners_from_params(cx, cy, theta, extent_major, extent_minor):
    hu = (extent_major - 1.0) / 2.0
    hv = (extent_minor - 1.0) / 2.0
    c, sn = math.cos(theta), math.sin(theta)
    out = np.empty((4, 2))
    for i, (uu, vv) in enumerate(((-hu, -hv), (hu, -hv), (hu, hv), (-hu, hv))):
        out[i, 0] = cx + c * uu - sn * vv
        out[i, 1] = cy + sn * uu + c * vv
    return out
