"""Offline evaluation and performance bench for the streaming pipeline.

eval_segmentation scores a provider against ground-truth masks (DICE, IoU,
mAP per class); eval_measurements runs the full measurement chain and
reports absolute dimension errors against annotated ground truth next to a
baseline row computed from the ground-truth masks themselves;
bench_latency runs a real loopback server with an instrumented UDP client
and breaks end-to-end latency into per-stage statistics.
"""

from __future__ import annotations

import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import protocol
from .errors import EmptyDataset, EmptyRegion, MalformedFile
from .geometry import Mask, View, measure_mask
from .metrics import MapBreakdown, dice, iou, mean_average_precision
from .providers import (LatencyModel, OracleProvider, PhantomSpec, ResultHub,
                        ZERO_DELAY, phantom_next, replay_open, write_pgm)
from .server import ServerConfig, StreamServer

MEASURE_NAMES = ("length", "width", "thickness")
_VIEW_MEASURES = {View.CORONAL: ("length",),
                  View.TRANSVERSE: ("width", "thickness")}


# ---------------------------------------------------------------------------
# Datasets

@dataclass
class EvalSample:
    """One evaluation item: image, truth mask, view and ground-truth mm."""

    name: str
    image: np.ndarray
    gt_mask: Mask
    view: View
    pixel_spacing: float
    gt_length_mm: float | None = None
    gt_width_mm: float | None = None
    gt_thickness_mm: float | None = None


def phantom_eval_samples(n_coronal: int = 50, n_transverse: int = 50,
                         pixel_spacing: float = 0.5, seed: int = 0,
                         artifact: str = "none") -> list[EvalSample]:
    """Build an in-memory phantom dataset with analytic ground truth.

    Samples are axis-aligned (theta 0) and drift-free so the true extents
    are exactly 2a+1 and 2b+1 pixels; the annotated dimensions follow
    analytically from the semi-axes rather than from any measurement code.
    """
    rng = np.random.default_rng(seed)
    samples = []
    plans = [(View.CORONAL, i) for i in range(n_coronal)]
    plans += [(View.TRANSVERSE, i) for i in range(n_transverse)]
    for view, i in plans:
        if view is View.CORONAL:
            a = int(rng.integers(100, 201))
        else:
            a = int(rng.integers(60, 141))
        b = int(a * rng.uniform(0.45, 0.75))
        spec = PhantomSpec(semi_axis_a=float(a), semi_axis_b=float(b),
                           theta=0.0, drift_amplitude=0.0, noise=0.2,
                           artifact=artifact, pixel_spacing=pixel_spacing,
                           seed=seed + 7919 * (len(samples) + 1))
        image, mask = phantom_next(spec, 0)
        sample = EvalSample(name=f"{view.value}{i:04d}", image=image,
                            gt_mask=mask, view=view,
                            pixel_spacing=pixel_spacing)
        length = (2 * a + 1) * pixel_spacing
        width = (2 * b + 1) * pixel_spacing
        if view is View.CORONAL:
            sample.gt_length_mm = length
        else:
            sample.gt_width_mm = length
            sample.gt_thickness_mm = width
        samples.append(sample)
    return samples


def write_dataset(samples: list[EvalSample], directory) -> None:
    """Materialize samples as a replay directory with annotated sidecars."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        write_pgm(root / f"{sample.name}.pgm", sample.image)
        write_pgm(root / f"{sample.name}.mask.pgm", sample.gt_mask.labels)
        lines = [f"pixel_spacing_mm={sample.pixel_spacing}",
                 f"view={sample.view.value}"]
        for key in ("gt_length_mm", "gt_width_mm", "gt_thickness_mm"):
            value = getattr(sample, key)
            if value is not None:
                lines.append(f"{key}={value}")
        (root / f"{sample.name}.meta").write_text("\n".join(lines) + "\n")


def load_eval_dataset(directory) -> list[EvalSample]:
    """Load a replay directory as evaluation samples.

    Every entry must carry a mask, a view and a pixel spacing; annotated
    dimensions are optional (the ground-truth mask substitutes).
    """
    samples = []
    for item in replay_open(directory):
        if item.mask is None:
            raise MalformedFile(f"{item.stem}: no ground-truth mask")
        if item.view is None:
            raise MalformedFile(f"{item.stem}: sidecar lacks view=")
        if item.pixel_spacing is None:
            raise MalformedFile(f"{item.stem}: sidecar lacks pixel_spacing_mm=")
        sample = EvalSample(name=item.stem, image=item.image,
                            gt_mask=item.mask, view=item.view,
                            pixel_spacing=item.pixel_spacing)
        meta = item.meta or {}
        for key in ("gt_length_mm", "gt_width_mm", "gt_thickness_mm"):
            if key in meta:
                setattr(sample, key, float(meta[key]))
        samples.append(sample)
    if not samples:
        raise EmptyDataset(str(directory))
    return samples


def _resolve(dataset) -> list[EvalSample]:
    if isinstance(dataset, (str, Path)):
        return load_eval_dataset(dataset)
    samples = list(dataset)
    if not samples:
        raise EmptyDataset("no samples")
    return samples


# ---------------------------------------------------------------------------
# Segmentation metrics report

@dataclass
class MetricReport:
    n_images: int
    dice_per_class: dict[int, float]
    iou_per_class: dict[int, float]
    dice_mean: float
    iou_mean: float
    map_breakdown: MapBreakdown
    segment_ms_mean: float
    segment_ms_std: float

    @property
    def map_score(self) -> float:
        return self.map_breakdown.map_score

    def format(self) -> str:
        lines = [f"{'class':<8}{'DICE':>10}{'IoU':>10}{'AP':>10}"]
        for label in sorted(self.dice_per_class):
            ap = self.map_breakdown.per_class.get(label, float('nan'))
            lines.append(f"{label:<8}{self.dice_per_class[label]:>10.4f}"
                         f"{self.iou_per_class[label]:>10.4f}{ap:>10.4f}")
        lines.append(f"{'mean':<8}{self.dice_mean:>10.4f}{self.iou_mean:>10.4f}"
                     f"{self.map_score:>10.4f}")
        lines.append(f"images: {self.n_images}   "
                     f"segment: {self.segment_ms_mean:.1f} "
                     f"+/- {self.segment_ms_std:.1f} ms")
        return "\n".join(lines)

    def to_kv(self) -> str:
        pairs = [("n_images", self.n_images),
                 ("dice_mean", self.dice_mean), ("iou_mean", self.iou_mean),
                 ("map", self.map_score),
                 ("segment_ms_mean", self.segment_ms_mean),
                 ("segment_ms_std", self.segment_ms_std)]
        for label in sorted(self.dice_per_class):
            pairs.append((f"dice_class{label}", self.dice_per_class[label]))
            pairs.append((f"iou_class{label}", self.iou_per_class[label]))
        return "\n".join(f"{k}={v}" for k, v in pairs)


def eval_segmentation(dataset, provider, labels=(1, 2)) -> MetricReport:
    """Run the provider over every sample and score it against the truth."""
    samples = _resolve(dataset)
    hub = ResultHub(provider)
    dices: dict[int, list[float]] = {label: [] for label in labels}
    ious: dict[int, list[float]] = {label: [] for label in labels}
    pairs = []
    timings = []
    for fid, sample in enumerate(samples):
        t0 = time.monotonic()
        predicted = hub.segment(sample.image, fid, truth=sample.gt_mask)
        timings.append((time.monotonic() - t0) * 1000.0)
        pairs.append((predicted.labels, sample.gt_mask.labels))
        for label in labels:
            dices[label].append(dice(predicted.labels, sample.gt_mask.labels, label))
            ious[label].append(iou(predicted.labels, sample.gt_mask.labels, label))
    dice_per_class = {lb: float(np.mean(vals)) for lb, vals in dices.items()}
    iou_per_class = {lb: float(np.mean(vals)) for lb, vals in ious.items()}
    return MetricReport(
        n_images=len(samples),
        dice_per_class=dice_per_class,
        iou_per_class=iou_per_class,
        dice_mean=sum(dice_per_class.values()) / len(dice_per_class),
        iou_mean=sum(iou_per_class.values()) / len(iou_per_class),
        map_breakdown=mean_average_precision(pairs, labels),
        segment_ms_mean=float(np.mean(timings)),
        segment_ms_std=float(np.std(timings)),
    )


# ---------------------------------------------------------------------------
# Measurement error table

@dataclass
class MeasureStats:
    n: int
    mean_mm: float
    std_mm: float


@dataclass
class ErrorTable:
    """Absolute dimension errors, model row and ground-truth baseline row."""

    model: dict[str, MeasureStats]
    baseline: dict[str, MeasureStats]
    n_samples: int
    n_failed: int
    failed: list[str] = field(default_factory=list)

    def format(self) -> str:
        lines = [f"{'measure':<12}{'n':>5}{'model (mm)':>22}"
                 f"{'ground truth (mm)':>22}"]
        for name in MEASURE_NAMES:
            if name not in self.model:
                continue
            m = self.model[name]
            g = self.baseline[name]
            lines.append(f"{name:<12}{m.n:>5}"
                         f"{m.mean_mm:>12.3f} +/- {m.std_mm:<6.3f}"
                         f"{g.mean_mm:>12.3f} +/- {g.std_mm:<6.3f}")
        lines.append(f"samples: {self.n_samples}   failed: {self.n_failed}")
        return "\n".join(lines)

    def to_kv(self) -> str:
        pairs = [("n_samples", self.n_samples), ("n_failed", self.n_failed)]
        for row, stats in (("model", self.model), ("baseline", self.baseline)):
            for name, s in stats.items():
                pairs.append((f"{row}.{name}.n", s.n))
                pairs.append((f"{row}.{name}.mean_mm", s.mean_mm))
                pairs.append((f"{row}.{name}.std_mm", s.std_mm))
        return "\n".join(f"{k}={v}" for k, v in pairs)


def eval_measurements(dataset, provider) -> ErrorTable:
    """Provider -> geometry -> dimensions, scored against ground truth.

    The ground truth per measure is the annotated value when the sample
    has one, else the measurement of the ground-truth mask.  The baseline
    row applies the same scoring to the ground-truth masks themselves.
    """
    samples = _resolve(dataset)
    hub = ResultHub(provider)
    model_err: dict[str, list[float]] = {m: [] for m in MEASURE_NAMES}
    base_err: dict[str, list[float]] = {m: [] for m in MEASURE_NAMES}
    failed: list[str] = []
    for fid, sample in enumerate(samples):
        predicted = hub.segment(sample.image, fid, truth=sample.gt_mask)
        try:
            auto, _ = measure_mask(Mask(predicted.labels, sample.pixel_spacing),
                                   sample.view)
        except EmptyRegion:
            failed.append(sample.name)
            continue
        base, _ = measure_mask(Mask(sample.gt_mask.labels, sample.pixel_spacing),
                               sample.view)
        for name in _VIEW_MEASURES[sample.view]:
            annotated = getattr(sample, f"gt_{name}_mm")
            truth = annotated if annotated is not None else getattr(base, f"{name}_mm")
            model_err[name].append(abs(getattr(auto, f"{name}_mm") - truth))
            base_err[name].append(abs(getattr(base, f"{name}_mm") - truth))

    def reduce(errors: dict[str, list[float]]) -> dict[str, MeasureStats]:
        out = {}
        for name, values in errors.items():
            if values:
                out[name] = MeasureStats(n=len(values),
                                         mean_mm=float(np.mean(values)),
                                         std_mm=float(np.std(values)))
        return out

    return ErrorTable(model=reduce(model_err), baseline=reduce(base_err),
                      n_samples=len(samples), n_failed=len(failed),
                      failed=failed)


# ---------------------------------------------------------------------------
# Latency bench

@dataclass
class StageStats:
    count: int
    mean_ms: float
    std_ms: float
    p50_ms: float
    p99_ms: float

    @classmethod
    def of(cls, values: list[float]) -> "StageStats":
        if not values:
            return cls(0, 0.0, 0.0, 0.0, 0.0)
        arr = np.asarray(values)
        return cls(count=len(values), mean_ms=float(arr.mean()),
                   std_ms=float(arr.std()),
                   p50_ms=float(np.percentile(arr, 50)),
                   p99_ms=float(np.percentile(arr, 99)))


@dataclass
class LatencyReport:
    stages: dict[str, StageStats]
    e2e: StageStats
    achieved_fps: float
    ch1_lag_frames_mean: float
    ch1_lag_frames_std: float
    frames_completed: int
    pairs_completed: int

    def format(self) -> str:
        lines = [f"{'stage':<10}{'n':>6}{'mean':>9}{'std':>9}{'p50':>9}{'p99':>9}"]
        for name in ("acquire", "segment", "encode", "transit", "decode",
                     "measure"):
            s = self.stages.get(name)
            if s is None:
                continue
            lines.append(f"{name:<10}{s.count:>6}{s.mean_ms:>9.3f}"
                         f"{s.std_ms:>9.3f}{s.p50_ms:>9.3f}{s.p99_ms:>9.3f}")
        e = self.e2e
        lines.append(f"{'e2e':<10}{e.count:>6}{e.mean_ms:>9.3f}{e.std_ms:>9.3f}"
                     f"{e.p50_ms:>9.3f}{e.p99_ms:>9.3f}")
        lines.append(f"achieved fps: {self.achieved_fps:.2f}   "
                     f"ch1 lag: {self.ch1_lag_frames_mean:.2f} "
                     f"+/- {self.ch1_lag_frames_std:.2f} frames")
        return "\n".join(lines)

    def to_kv(self) -> str:
        pairs = [("achieved_fps", self.achieved_fps),
                 ("frames_completed", self.frames_completed),
                 ("pairs_completed", self.pairs_completed),
                 ("ch1_lag_frames_mean", self.ch1_lag_frames_mean),
                 ("ch1_lag_frames_std", self.ch1_lag_frames_std)]
        for name, s in list(self.stages.items()) + [("e2e", self.e2e)]:
            for attr in ("count", "mean_ms", "std_ms", "p50_ms", "p99_ms"):
                pairs.append((f"{name}.{attr}", getattr(s, attr)))
        return "\n".join(f"{k}={v}" for k, v in pairs)


class _BenchClient:
    """Lean UDP subscriber that timestamps and reassembles the stream."""

    def __init__(self, host: str, port: int, measure_every: int = 5):
        self.host = host
        self.port = port
        self.measure_every = measure_every
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        # Ask for a deep receive buffer; the forced variant needs privileges
        # and silently degrades to the capped one otherwise.
        for opt in ("SO_RCVBUFFORCE", "SO_RCVBUF"):
            if hasattr(socket, opt):
                try:
                    self.sock.setsockopt(socket.SOL_SOCKET,
                                         getattr(socket, opt), 8 << 20)
                    break
                except OSError:
                    continue
        self.sock.settimeout(0.25)
        self._stop = threading.Event()
        self._buffer: deque = deque()
        self._threads: list[threading.Thread] = []
        # fid -> (t_last_packet, t_assembled)
        self.ch0_times: dict[int, tuple[float, float]] = {}
        self.ch0_order: list[int] = []
        self.ch1_lags: list[float] = []
        self.measure_ms: list[float] = []
        self._latest_ch0 = -1

    def start(self) -> None:
        self.sock.sendto(b"SUB", (self.host, self.port))
        for target, name in ((self._recv_loop, "bench-recv"),
                             (self._assemble_loop, "bench-assemble"),
                             (self._ping_loop, "bench-ping")):
            thread = threading.Thread(target=target, daemon=True, name=name)
            thread.start()
            self._threads.append(thread)

    def stop(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=3.0)
        try:
            self.sock.sendto(b"UNSUB", (self.host, self.port))
        except OSError:
            pass
        self.sock.close()

    def _recv_loop(self) -> None:
        while not self._stop.is_set():
            try:
                data, _ = self.sock.recvfrom(2048)
            except socket.timeout:
                continue
            except OSError:
                return
            self._buffer.append((data, time.monotonic()))

    def _ping_loop(self) -> None:
        while not self._stop.wait(2.0):
            try:
                self.sock.sendto(b"PING", (self.host, self.port))
            except OSError:
                return

    def _assemble_loop(self) -> None:
        assembler = protocol.Reassembler()
        pair_count = 0
        while not (self._stop.is_set() and not self._buffer):
            try:
                data, t_recv = self._buffer.popleft()
            except IndexError:
                time.sleep(0.0005)
                continue
            try:
                packet = protocol.decode_packet(data)
            except Exception:
                continue  # SUB/PING acks share the socket
            for event in assembler.feed(packet, t_recv * 1000.0):
                if not isinstance(event, protocol.Completed):
                    continue
                frame = event.frame
                t_done = time.monotonic()
                if frame.channel == protocol.CH_IMAGE:
                    self.ch0_times[frame.frame_id] = (t_recv, t_done)
                    self.ch0_order.append(frame.frame_id)
                    self._latest_ch0 = max(self._latest_ch0, frame.frame_id)
                else:
                    self.ch1_lags.append(self._latest_ch0 - frame.frame_id)
                    pair_count += 1
                    if pair_count % self.measure_every == 0:
                        self._measure_pair(frame)

    def _measure_pair(self, frame: protocol.Frame) -> None:
        labels = np.frombuffer(frame.mask_bytes, dtype=np.uint8)
        labels = labels.reshape(frame.height, frame.width)
        t0 = time.monotonic()
        try:
            measure_mask(Mask(labels.copy()), View.CORONAL)
        except EmptyRegion:
            return
        self.measure_ms.append((time.monotonic() - t0) * 1000.0)


def bench_latency(fps: float = 30.0, width: int = 512, height: int = 512,
                  duration_s: float = 5.0, latency: LatencyModel = ZERO_DELAY,
                  seed: int = 0) -> LatencyReport:
    """Run the loopback pipeline and report per-stage latency statistics.

    Stages partition the channel-0 path: acquire (source tick to image
    ready), encode (fragment + fan-out), transit (socket to last packet
    arrival), decode (reassembly); segment and measure run on the
    channel-1 path and overlap the others.
    """
    records: dict[str, dict[int, tuple[float, float]]] = {}
    lock = threading.Lock()

    def sink(stage: str, fid: int, dur_ms: float, t: float) -> None:
        with lock:
            records.setdefault(stage, {})[fid] = (dur_ms, t)

    config = ServerConfig(fps=fps, width=width, height=height, seed=seed)
    provider = OracleProvider(latency=latency, seed=seed)
    server = StreamServer(config, provider=provider, stage_sink=sink)
    server.start()
    client = _BenchClient("127.0.0.1", server.udp_port)
    try:
        client.start()
        time.sleep(duration_s)
    finally:
        client.stop()
        server.stop()

    acquire = [v[0] for v in records.get("acquire", {}).values()]
    segment = [v[0] for v in records.get("segment", {}).values()]
    encode = [v[0] for v in records.get("encode0", {}).values()]
    transit, decode, e2e = [], [], []
    ticks = records.get("tick", {})
    sent = records.get("encode0", {})
    for fid, (t_last, t_done) in client.ch0_times.items():
        if fid in sent:
            transit.append(max(0.0, (t_last - sent[fid][1]) * 1000.0))
            decode.append((t_done - t_last) * 1000.0)
        if fid in ticks:
            e2e.append((t_done - ticks[fid][1]) * 1000.0)

    completions = sorted(t for _, t in client.ch0_times.values())
    if len(completions) > 1:
        achieved = (len(completions) - 1) / (completions[-1] - completions[0])
    else:
        achieved = 0.0
    lags = client.ch1_lags
    return LatencyReport(
        stages={"acquire": StageStats.of(acquire),
                "segment": StageStats.of(segment),
                "encode": StageStats.of(encode),
                "transit": StageStats.of(transit),
                "decode": StageStats.of(decode),
                "measure": StageStats.of(client.measure_ms)},
        e2e=StageStats.of(e2e),
        achieved_fps=achieved,
        ch1_lag_frames_mean=float(np.mean(lags)) if lags else 0.0,
        ch1_lag_frames_std=float(np.std(lags)) if lags else 0.0,
        frames_completed=len(client.ch0_times),
        pairs_completed=len(lags),
    )
