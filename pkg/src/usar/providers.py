"""Frame sources and segmentation providers.

Three interchangeable ways to get images and masks into the pipeline: a
synthetic kidney phantom (deterministic nested ellipses with speckle and
shadow artifacts), a file-replay source reading P5 PGM pairs from a
directory, and segmentation providers that answer asynchronously, either
in-process (oracle with optional degradation and a simulated latency
model) or out-of-process over the TCP bridge (see bridge module).

Providers follow a callback contract: start(on_result, on_error) arms the
delivery side, submit() may be called from any other context, and results
may complete out of request order.
"""

from __future__ import annotations

import heapq
import math
import random
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from scipy import ndimage

from .errors import (DimensionMismatch, MalformedFile, MissingDirectory,
                     ProviderTimeout, UsarError)
from .geometry import Mask, View

PROVIDER_TIMEOUT_MS = 2000.0

# Inference-time profiles (mean, std in ms) emulating published full-volume
# and real-time segmentation models.
LATENCY_PROFILES = {
    "nnunet": (338.0, 45.8),
    "segmenter": (23.4, 2.5),
}


# ---------------------------------------------------------------------------
# PGM codec (P5, maxval 255)

def read_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM with maxval 255 into a (h, w) uint8 array."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise MalformedFile(f"{path.name}: {exc}") from exc
    tokens = []
    pos = 0
    # Header is whitespace-separated tokens, '#' comments run to end of line.
    while len(tokens) < 4 and pos < len(data):
        c = data[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise MalformedFile(f"{path.name}: not a binary PGM")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise MalformedFile(f"{path.name}: bad header numbers") from exc
    if maxval != 255:
        raise MalformedFile(f"{path.name}: maxval {maxval}, expected 255")
    if width <= 0 or height <= 0:
        raise MalformedFile(f"{path.name}: bad dimensions {width}x{height}")
    pos += 1  # single whitespace byte between header and raster
    raster = data[pos:]
    if len(raster) != width * height:
        raise MalformedFile(
            f"{path.name}: raster is {len(raster)} bytes, expected {width * height}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, array: np.ndarray) -> None:
    """Write a (h, w) uint8 array as a binary P5 PGM."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError("expected a 2D array")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes())


# ---------------------------------------------------------------------------
# Synthetic phantom

class ArtifactMode(str, Enum):
    NONE = "none"
    MILD = "mild"
    SEVERE = "severe"


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of the synthetic kidney phantom.

    The phantom is a pair of nested ellipses: the outer ring is cortex
    (label 1), the inner ellipse the central complex (label 2), rotated by
    `theta` and drifting around the image center to mimic probe motion.
    Speckle affects only the image; artifact wedges shadow both image and
    labels.
    """

    width: int = 512
    height: int = 512
    semi_axis_a: float = 160.0
    semi_axis_b: float = 90.0
    inner_scale: float = 0.55
    theta: float = 0.3
    drift_amplitude: float = 6.0
    drift_period: float = 90.0
    noise: float = 0.25
    artifact: ArtifactMode = ArtifactMode.NONE
    pixel_spacing: float = 0.35
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "artifact", ArtifactMode(self.artifact))
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not 0 < self.semi_axis_b <= self.semi_axis_a:
            raise ValueError("semi-axes must satisfy 0 < b <= a")
        if not 0 < self.inner_scale < 1:
            raise ValueError("inner_scale must lie in (0, 1)")
        if self.noise < 0 or self.drift_amplitude < 0 or self.drift_period <= 0:
            raise ValueError("noise/drift parameters out of range")
        if not self.pixel_spacing > 0:
            raise ValueError("pixel_spacing must be > 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        reach = self.semi_axis_a + self.drift_amplitude
        if 2 * reach >= min(self.width, self.height):
            raise ValueError("ellipse does not fit the image")


_GRID_CACHE: dict[tuple[int, int, int, int], tuple[np.ndarray, np.ndarray]] = {}


def _grid(x0: int, x1: int, y0: int, y1: int):
    key = (x0, x1, y0, y1)
    cached = _GRID_CACHE.get(key)
    if cached is None:
        ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
        cached = _GRID_CACHE[key] = (xs, ys)
        if len(_GRID_CACHE) > 16:
            _GRID_CACHE.pop(next(iter(_GRID_CACHE)))
    return cached


def phantom_next(spec: PhantomSpec, t: int) -> tuple[np.ndarray, Mask]:
    """Render frame t of the phantom: (gray image, ground-truth mask).

    Bit-identical for the same (spec, t) on any platform: all randomness
    comes from a generator seeded with (spec.seed, t).
    """
    if t < 0:
        raise ValueError("frame index must be non-negative")
    rng = np.random.default_rng([spec.seed, t])
    phase = 2.0 * math.pi * t / spec.drift_period
    cx = spec.width / 2.0 + spec.drift_amplitude * math.sin(phase)
    cy = spec.height / 2.0 + spec.drift_amplitude * math.cos(phase)
    c, s = math.cos(spec.theta), math.sin(spec.theta)

    # The ellipse only touches a sub-window; its half-extents along x and y
    # are those of the rotated axis-aligned bounding box.
    half_x = math.hypot(spec.semi_axis_a * c, spec.semi_axis_b * s) + 2.0
    half_y = math.hypot(spec.semi_axis_a * s, spec.semi_axis_b * c) + 2.0
    x0 = max(0, int(cx - half_x))
    x1 = min(spec.width, int(cx + half_x) + 1)
    y0 = max(0, int(cy - half_y))
    y1 = min(spec.height, int(cy + half_y) + 1)
    xs, ys = _grid(x0, x1, y0, y1)
    dx = xs - cx
    dy = ys - cy
    xr = (c * dx + s * dy) / spec.semi_axis_a
    yr = (-s * dx + c * dy) / spec.semi_axis_b
    # Same normalized quadratic serves both ellipses: the inner one is the
    # outer scaled uniformly by inner_scale.
    q = xr * xr + yr * yr
    window = np.zeros((y1 - y0, x1 - x0), dtype=np.uint8)
    window[q <= 1.0] = 1
    window[q <= spec.inner_scale ** 2] = 2
    labels = np.zeros((spec.height, spec.width), dtype=np.uint8)
    labels[y0:y1, x0:x1] = window

    levels = np.full(labels.shape, 30.0)
    levels[labels == 1] = 175.0
    levels[labels == 2] = 110.0
    if spec.noise > 0:
        noise = rng.standard_normal(labels.shape)
        noise *= 0.5 * spec.noise
        noise += 1.0
        levels *= noise

    if spec.artifact is not ArtifactMode.NONE:
        # Shadow wedge from a reflector at the top edge: severe cuts straight
        # through the structure and splits it, mild only notches the upper
        # boundary (the shadow stops at the ellipse center).
        if spec.artifact is ArtifactMode.SEVERE:
            apex_x, half, depth = cx, math.radians(8.0), float(spec.height)
        else:
            apex_x, half, depth = cx + 0.5 * spec.semi_axis_a, math.radians(2.5), cy
        gx, gy = _grid(0, spec.width, 0, spec.height)
        angle = np.arctan2(gx - apex_x, np.maximum(gy, 1e-9))
        wedge = (np.abs(angle) < half) & (gy < depth)
        labels[wedge] = 0
        levels[wedge] *= 0.12

    image = np.clip(levels, 0.0, 255.0).astype(np.uint8)
    return image, Mask(labels, spec.pixel_spacing)


class PhantomSource:
    """Single-consumer iterator over phantom frames."""

    def __init__(self, spec: PhantomSpec, count: int | None = None):
        self.spec = spec
        self.count = count
        self._t = 0

    def __iter__(self) -> Iterator[tuple[np.ndarray, Mask]]:
        return self

    def __next__(self) -> tuple[np.ndarray, Mask]:
        if self.count is not None and self._t >= self.count:
            raise StopIteration
        out = phantom_next(self.spec, self._t)
        self._t += 1
        return out


# ---------------------------------------------------------------------------
# File replay

@dataclass
class ReplaySample:
    """One replayed entry: image plus whatever sidecar data exists."""

    stem: str
    image: np.ndarray
    mask: Mask | None = None
    pixel_spacing: float | None = None
    view: View | None = None
    meta: dict[str, str] | None = None


def _read_meta(path: Path) -> dict[str, str]:
    values = {}
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MalformedFile(f"{path.name}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def replay_open(directory) -> Iterator[ReplaySample]:
    """Stream (image, optional mask) pairs from a directory, sorted by name.

    Expects `<stem>.pgm` images, optional `<stem>.mask.pgm` label masks
    (values in {0,1,2}) and optional `<stem>.meta` sidecars carrying
    pixel_spacing_mm= and view= lines.
    """
    root = Path(directory)
    if not root.is_dir():
        raise MissingDirectory(str(root))
    names = sorted(p.name for p in root.iterdir()
                   if p.name.endswith(".pgm") and not p.name.endswith(".mask.pgm"))
    for name in names:
        stem = name[:-len(".pgm")]
        image = read_pgm(root / name)
        sample = ReplaySample(stem=stem, image=image)

        meta_path = root / f"{stem}.meta"
        if meta_path.exists():
            meta = _read_meta(meta_path)
            sample.meta = meta
            if "pixel_spacing_mm" in meta:
                try:
                    sample.pixel_spacing = float(meta["pixel_spacing_mm"])
                except ValueError as exc:
                    raise MalformedFile(
                        f"{meta_path.name}: bad pixel_spacing_mm") from exc
                if not sample.pixel_spacing > 0:
                    raise MalformedFile(f"{meta_path.name}: pixel_spacing_mm <= 0")
            if "view" in meta:
                try:
                    sample.view = View(meta["view"])
                except ValueError as exc:
                    raise MalformedFile(
                        f"{meta_path.name}: view must be coronal or transverse") from exc

        mask_path = root / f"{stem}.mask.pgm"
        if mask_path.exists():
            labels = read_pgm(mask_path)
            if labels.shape != image.shape:
                raise DimensionMismatch(
                    f"{mask_path.name}: mask {labels.shape} for image {image.shape}")
            if int(labels.max(initial=0)) > 2:
                raise MalformedFile(f"{mask_path.name}: label values exceed 2")
            sample.mask = Mask(labels, sample.pixel_spacing or 1.0)
        yield sample


# ---------------------------------------------------------------------------
# Latency model and providers

@dataclass(frozen=True)
class LatencyModel:
    """Truncated-normal inference delay in milliseconds."""

    mean_ms: float = 0.0
    std_ms: float = 0.0

    def __post_init__(self):
        if self.mean_ms < 0 or self.std_ms < 0:
            raise ValueError("latency mean/std must be >= 0")

    def sample_ms(self, rng: random.Random) -> float:
        if self.mean_ms == 0 and self.std_ms == 0:
            return 0.0
        return max(0.0, rng.gauss(self.mean_ms, self.std_ms))

    @classmethod
    def parse(cls, text: str) -> "LatencyModel":
        """Accept 'mean,std' or one of the named profiles."""
        if text in LATENCY_PROFILES:
            return cls(*LATENCY_PROFILES[text])
        try:
            mean, _, std = text.partition(",")
            return cls(float(mean), float(std or 0.0))
        except ValueError as exc:
            raise ValueError(f"bad latency profile {text!r}") from exc


ZERO_DELAY = LatencyModel(0.0, 0.0)


def disk_element(radius: int) -> np.ndarray:
    """Boolean disk of the given radius (pixels within Euclidean distance)."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    return (xx * xx + yy * yy) <= radius * radius


def erode_mask(mask: Mask, radius: int) -> Mask:
    """Shrink each label class independently by a disk of the given radius."""
    if radius == 0:
        return mask
    element = disk_element(radius)
    out = np.zeros_like(mask.labels)
    for label in (1, 2):
        kept = ndimage.binary_erosion(mask.labels == label, structure=element)
        out[kept] = label
    return Mask(out, mask.pixel_spacing)


class OracleProvider:
    """Segmentation provider that returns the known ground truth.

    Optionally degrades the truth by per-class erosion and delays delivery
    per a latency model.  Delivery happens on an internal thread ordered by
    due time, so slow samples overtake fast ones exactly like a real
    asynchronous model.
    """

    def __init__(self, erode_radius: int = 0,
                 latency: LatencyModel = ZERO_DELAY, seed: int = 0):
        if erode_radius < 0:
            raise ValueError("erode_radius must be >= 0")
        self.erode_radius = erode_radius
        self.latency = latency
        self.diagnostics = {"submitted": 0, "delivered": 0}
        self._rng = random.Random(seed)
        self._on_result = None
        self._on_error = None
        self._heap = []  # (due_s, seq, frame_id, Mask)
        self._seq = 0
        self._cond = threading.Condition()
        self._thread = None
        self._closed = False

    def start(self, on_result: Callable[[int, Mask], None],
              on_error: Callable[[Exception], None] | None = None) -> None:
        if self._thread is not None:
            raise RuntimeError("provider already started")
        self._on_result = on_result
        self._on_error = on_error
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name="oracle-provider")
        self._thread.start()

    def submit(self, image: np.ndarray, frame_id: int,
               truth: Mask | None = None) -> None:
        if self._thread is None:
            raise RuntimeError("provider not started")
        if truth is None:
            raise ValueError("oracle provider requires the ground-truth mask")
        if truth.labels.shape != image.shape:
            raise DimensionMismatch(
                f"truth {truth.labels.shape} for image {image.shape}")
        result = erode_mask(truth, self.erode_radius)
        with self._cond:
            if self._closed:
                return
            due = time.monotonic() + self.latency.sample_ms(self._rng) / 1000.0
            heapq.heappush(self._heap, (due, self._seq, frame_id, result))
            self._seq += 1
            self.diagnostics["submitted"] += 1
            self._cond.notify()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify()
        if self._thread is not None:
            self._thread.join(timeout=2.0)

    def _run(self) -> None:
        while True:
            with self._cond:
                while not self._closed and not self._heap:
                    self._cond.wait()
                if self._closed:
                    return
                due = self._heap[0][0]
                wait = due - time.monotonic()
                if wait > 0:
                    self._cond.wait(timeout=wait)
                    continue
                _, _, frame_id, result = heapq.heappop(self._heap)
                self.diagnostics["delivered"] += 1
            self._on_result(frame_id, result)


class _Waiter:
    def __init__(self):
        self.event = threading.Event()
        self.mask: Mask | None = None
        self.error: Exception | None = None


class ResultHub:
    """Routes asynchronous provider results to per-frame waiters.

    Lets synchronous callers (eval, tests) use the callback contract
    without owning a delivery thread of their own.
    """

    def __init__(self, provider):
        self.provider = provider
        self._waiters: dict[int, _Waiter] = {}
        self._lock = threading.Lock()
        provider.start(self._on_result, self._on_error)

    def _on_result(self, frame_id: int, mask: Mask) -> None:
        with self._lock:
            waiter = self._waiters.pop(frame_id, None)
        if waiter is not None:
            waiter.mask = mask
            waiter.event.set()

    def _on_error(self, error: Exception) -> None:
        with self._lock:
            waiters = list(self._waiters.values())
            self._waiters.clear()
        for waiter in waiters:
            waiter.error = error
            waiter.event.set()

    def segment(self, image: np.ndarray, frame_id: int,
                truth: Mask | None = None,
                timeout_ms: float = PROVIDER_TIMEOUT_MS) -> Mask:
        waiter = _Waiter()
        with self._lock:
            self._waiters[frame_id] = waiter
        self.provider.submit(image, frame_id, truth)
        if not waiter.event.wait(timeout_ms / 1000.0):
            with self._lock:
                self._waiters.pop(frame_id, None)
            raise ProviderTimeout(f"no result for frame {frame_id} "
                                  f"within {timeout_ms:.0f} ms")
        if waiter.error is not None:
            raise waiter.error
        return waiter.mask


def segment(hub: ResultHub, image: np.ndarray, frame_id: int,
            truth: Mask | None = None,
            timeout_ms: float = PROVIDER_TIMEOUT_MS) -> Mask:
    """Blocking one-shot segmentation through a ResultHub."""
    return hub.segment(image, frame_id, truth, timeout_ms)


def parse_provider_spec(spec: str, latency: LatencyModel = ZERO_DELAY,
                        seed: int = 0):
    """Build a provider from its CLI spec string.

    Accepts `oracle`, `oracle:erode=<r>` and `bridge:<host:port>`.
    """
    if spec == "oracle":
        return OracleProvider(latency=latency, seed=seed)
    if spec.startswith("oracle:"):
        options = spec[len("oracle:"):]
        radius = 0
        for part in options.split(","):
            key, _, value = part.partition("=")
            if key != "erode":
                raise UsarError(f"unknown oracle option {key!r}")
            radius = int(value)
        return OracleProvider(erode_radius=radius, latency=latency, seed=seed)
    if spec.startswith("bridge:"):
        from .bridge import BridgeProvider
        endpoint = spec[len("bridge:"):]
        host, _, port = endpoint.rpartition(":")
        if not host or not port:
            raise UsarError(f"bridge endpoint must be host:port, got {endpoint!r}")
        return BridgeProvider(host, int(port))
    raise UsarError(f"unknown provider spec {spec!r}")
