"""Live pipeline: source frames in, two stream channels out, one session.

Thread layout: an acquisition thread paces the source and never waits on
segmentation (channel 0 is emitted immediately, the provider is fed
asynchronously); the provider delivers results on its own thread, where
channel-1 pairs are encoded and fanned out; client I/O runs on accept and
per-client reader threads; and a single command thread owns the
measurement session, so all session mutations are serialized through its
queue.

Clients subscribe either by UDP control datagram (SUB/PING/UNSUB) or by
connecting to the WebSocket bridge, which carries the identical packet
bytes as binary messages plus a line-oriented text side: `CMD <name>
[args]` answered by `OK ...`/`ERR <code> ...`, `PING` answered by `PONG`,
and unsolicited `STATE ...` broadcasts on session changes.  Clients silent
for 5 s or failing 3 consecutive sends are dropped.
"""

from __future__ import annotations

import queue
import socket
import threading
import time
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from . import protocol, wsbridge
from .errors import (BadBox, EmptyRegion, IllegalTransition,
                     MeasurementFailed, NoFrameAvailable, UsarError)
from .geometry import (ClassSelector, KidneyMeasurement, Mask,
                       MeasurementSource, OrientedBox, View, box_from_corners,
                       extract_dimensions, largest_component,
                       oriented_bounding_box, select_region)
from .protocol import AlignedPair
from .providers import (LatencyModel, PhantomSource, PhantomSpec,
                        parse_provider_spec, replay_open)

HEARTBEAT_TIMEOUT_S = 5.0
MAX_SEND_FAILURES = 3
PROVIDER_TIMEOUT_MS = 2000.0
# Pace the combined fan-out (all threads, all clients) so same-host receive
# buffers are never hit with a whole frame in one burst: a short pause after
# every burst of datagrams caps the instantaneous send rate well below what
# a lean receive loop drains.
FANOUT_BURST = 24
FANOUT_PAUSE_S = 0.0006


class Phase(str, Enum):
    IDLE = "idle"
    STREAMING = "streaming"
    CORONAL_REVIEW = "coronal_review"
    TRANSVERSE_REVIEW = "transverse_review"
    COMPLETE = "complete"


_REVIEW_VIEW = {Phase.CORONAL_REVIEW: View.CORONAL,
                Phase.TRANSVERSE_REVIEW: View.TRANSVERSE}

COMMANDS = ("capture_coronal", "capture_transverse", "adjust_box",
            "accept_measurement", "recompute", "reset")


class MeasurementSession:
    """Two-phase measurement state machine, free of any I/O.

    Phases: idle -> streaming -> coronal_review -> streaming ->
    transverse_review -> complete, with retakes allowed inside each review
    phase and reset available everywhere.  The latest frame pair comes
    from an injected supplier so the machine can be driven without a
    running pipeline.
    """

    def __init__(self, pixel_spacing: float = 1.0,
                 pair_supplier: Callable[[], AlignedPair | None] | None = None):
        self.pixel_spacing = pixel_spacing
        self.pair_supplier = pair_supplier or (lambda: None)
        self.phase = Phase.IDLE
        self.measurement = KidneyMeasurement()
        self.box: OrientedBox | None = None
        self.box_source = MeasurementSource.AUTOMATIC
        self.captured: AlignedPair | None = None
        self.accepted_views: list[View] = []

    def start_streaming(self) -> None:
        if self.phase is Phase.IDLE:
            self.phase = Phase.STREAMING

    # -- command entry point ------------------------------------------------

    def handle(self, name: str, args: list[str] | None = None) -> dict:
        """Execute one command; returns the fields for the reply line."""
        args = args or []
        if name == "capture_coronal":
            return self._capture(View.CORONAL)
        if name == "capture_transverse":
            return self._capture(View.TRANSVERSE)
        if name == "adjust_box":
            return self._adjust_box(args)
        if name == "recompute":
            return self._recompute()
        if name == "accept_measurement":
            return self._accept()
        if name == "reset":
            return self._reset()
        raise UsarError(f"unknown command {name!r}")

    # -- individual commands ------------------------------------------------

    def _capture(self, view: View) -> dict:
        review = (Phase.CORONAL_REVIEW if view is View.CORONAL
                  else Phase.TRANSVERSE_REVIEW)
        retake = self.phase is review
        if not retake:
            if self.phase is not Phase.STREAMING:
                raise IllegalTransition(
                    f"cannot capture in phase {self.phase.value}")
            if view is View.CORONAL and self.measurement.length_mm is not None:
                raise IllegalTransition("coronal length already accepted")
            if view is View.TRANSVERSE and self.measurement.length_mm is None:
                raise IllegalTransition("transverse requires accepted coronal")
        pair = self.pair_supplier()
        if pair is None:
            raise NoFrameAvailable("no segmented frame available yet")
        box = self._measure_pair(pair)
        self.captured = pair
        self.box = box
        self.box_source = MeasurementSource.AUTOMATIC
        self.phase = review
        return self.snapshot()

    def _measure_pair(self, pair: AlignedPair) -> OrientedBox:
        mask = Mask(pair.mask_labels, self.pixel_spacing)
        try:
            points = largest_component(select_region(mask, ClassSelector.UNION))
        except EmptyRegion as exc:
            # Stay in the current phase; the operator captures again.
            raise MeasurementFailed(str(exc)) from exc
        return oriented_bounding_box(points)

    def _require_review(self) -> View:
        view = _REVIEW_VIEW.get(self.phase)
        if view is None:
            raise IllegalTransition(f"no box under review in {self.phase.value}")
        return view

    def _adjust_box(self, args: list[str]) -> dict:
        self._require_review()
        if len(args) != 8:
            raise BadBox(f"adjust_box needs 8 coordinates, got {len(args)}")
        try:
            values = [float(a) for a in args]
        except ValueError as exc:
            raise BadBox("corner coordinates must be numbers") from exc
        corners = np.array(values, dtype=np.float64).reshape(4, 2)
        self.box = box_from_corners(corners)
        self.box_source = MeasurementSource.REFINED
        return self.snapshot()

    def _recompute(self) -> dict:
        self._require_review()
        self.box = self._measure_pair(self.captured)
        self.box_source = MeasurementSource.AUTOMATIC
        return self.snapshot()

    def _accept(self) -> dict:
        view = self._require_review()
        part = extract_dimensions(self.box, view, self.pixel_spacing,
                                  self.box_source)
        self.measurement = self.measurement.merged(part)
        self.accepted_views.append(view)
        self.box = None
        self.captured = None
        if view is View.CORONAL:
            self.phase = Phase.STREAMING
        else:
            self.measurement = self.measurement.with_volume()
            self.phase = Phase.COMPLETE
        return self.snapshot()

    def _reset(self) -> dict:
        self.measurement = KidneyMeasurement()
        self.box = None
        self.captured = None
        self.box_source = MeasurementSource.AUTOMATIC
        self.accepted_views = []
        if self.phase is not Phase.IDLE:
            self.phase = Phase.STREAMING
        return self.snapshot()

    # -- reporting ----------------------------------------------------------

    def snapshot(self) -> dict:
        """Session state as flat reply/broadcast fields."""
        out = {"phase": self.phase.value}
        if self.box is not None:
            out["box"] = ",".join(f"{v:.3f}" for v in self.box.corners.ravel())
            out["theta"] = f"{self.box.theta:.6f}"
            out["extent_major"] = f"{self.box.extent_major:.3f}"
            out["extent_minor"] = f"{self.box.extent_minor:.3f}"
            out["source"] = self.box_source.value
            # Viewers convert box pixels to mm while dragging handles.
            out["pixel_spacing_mm"] = f"{self.pixel_spacing:.6f}"
        if self.captured is not None:
            out["frame_id"] = str(self.captured.frame_id)
        m = self.measurement
        for name in ("length_mm", "width_mm", "thickness_mm", "volume_mm3"):
            value = getattr(m, name)
            if value is not None:
                out[name] = f"{value:.6f}"
        return out


# ---------------------------------------------------------------------------
# Client registry

class _WsOutbox:
    """Per-client outbound queue for binary frames.

    A slow WebSocket reader must never stall the pipeline, so fan-out only
    enqueues; a writer thread drains, and when the queue overflows the
    oldest frames are dropped (the stream refreshes itself anyway).
    """

    def __init__(self, ws: wsbridge.WsSocket, on_dead: Callable[[], None],
                 capacity: int = 4096):
        self.ws = ws
        self.capacity = capacity
        self.dropped = 0
        self._on_dead = on_dead
        self._queue: list[bytes] = []
        self._cond = threading.Condition()
        self._closed = False
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name="ws-writer")
        self._thread.start()

    def push(self, block: bytes) -> None:
        with self._cond:
            if self._closed:
                return
            if len(self._queue) >= self.capacity:
                del self._queue[0]
                self.dropped += 1
            self._queue.append(block)
            self._cond.notify()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify()

    def _run(self) -> None:
        while True:
            with self._cond:
                while not self._queue and not self._closed:
                    self._cond.wait()
                if self._closed and not self._queue:
                    return
                block = self._queue.pop(0)
            try:
                self.ws.send_binary(block)
            except OSError:
                self.close()
                self._on_dead()
                return


@dataclass
class _Client:
    key: str
    kind: str  # "udp" or "ws"
    send: Callable[[bytes], None]
    ws: wsbridge.WsSocket | None = None
    outbox: _WsOutbox | None = None
    last_heartbeat: float = field(default_factory=time.monotonic)
    failures: int = 0


class ClientRegistry:
    """Subscribed clients on both transports, with liveness bookkeeping."""

    def __init__(self):
        self._clients: dict[str, _Client] = {}
        self._lock = threading.Lock()
        self._pace_lock = threading.Lock()
        self._pace_count = 0

    def add_udp(self, sock: socket.socket, addr) -> str:
        key = f"udp:{addr[0]}:{addr[1]}"
        with self._lock:
            self._clients[key] = _Client(
                key=key, kind="udp",
                send=lambda data, s=sock, a=addr: s.sendto(data, a))
        return key

    def add_ws(self, ws: wsbridge.WsSocket) -> str:
        key = f"ws:{id(ws):x}"
        outbox = _WsOutbox(ws, on_dead=lambda: self.remove(key))
        with self._lock:
            self._clients[key] = _Client(key=key, kind="ws", send=outbox.push,
                                         ws=ws, outbox=outbox)
        return key

    def heartbeat(self, key: str) -> None:
        with self._lock:
            client = self._clients.get(key)
            if client is not None:
                client.last_heartbeat = time.monotonic()

    def remove(self, key: str) -> None:
        with self._lock:
            client = self._clients.pop(key, None)
        if client is not None and client.outbox is not None:
            client.outbox.close()
        if client is not None and client.ws is not None:
            client.ws.close()

    def evict_stale(self, timeout_s: float = HEARTBEAT_TIMEOUT_S) -> list[str]:
        cutoff = time.monotonic() - timeout_s
        with self._lock:
            stale = [k for k, c in self._clients.items()
                     if c.last_heartbeat < cutoff]
        for key in stale:
            self.remove(key)
        return stale

    def _snapshot(self) -> list[_Client]:
        with self._lock:
            return list(self._clients.values())

    def _pace(self) -> None:
        with self._pace_lock:
            self._pace_count += 1
            pause = self._pace_count % FANOUT_BURST == 0
        if pause:
            time.sleep(FANOUT_PAUSE_S)

    def fanout(self, blocks: list[bytes]) -> None:
        """Send every block to every live client, dropping broken ones."""
        clients = self._snapshot()
        if not clients:
            return
        for block in blocks:
            for client in clients:
                try:
                    client.send(block)
                    client.failures = 0
                except OSError:
                    client.failures += 1
                    if client.failures >= MAX_SEND_FAILURES:
                        self.remove(client.key)
            self._pace()

    def fanout_text(self, line: str) -> None:
        for client in self._snapshot():
            if client.ws is None:
                continue
            try:
                client.ws.send_text(line)
            except OSError:
                client.failures += 1
                if client.failures >= MAX_SEND_FAILURES:
                    self.remove(client.key)

    def __len__(self) -> int:
        with self._lock:
            return len(self._clients)


# ---------------------------------------------------------------------------
# Configuration and event log

@dataclass
class ServerConfig:
    source: str = "phantom"
    provider: str = "oracle"
    latency_profile: str = "0,0"
    fps: float = 30.0
    host: str = "127.0.0.1"
    udp_port: int = 0
    ws_port: int = 0
    pixel_spacing: float | None = None
    width: int = 512
    height: int = 512
    artifact: str = "none"
    seed: int = 0
    log_path: str | None = None
    max_frames: int | None = None
    page_path: str | None = None

    def apply_file(self, path) -> "ServerConfig":
        """Override fields from a plain key=value file."""
        known = {f.name: f for f in fields(self)}
        updates = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsarError(f"config line is not key=value: {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in known:
                raise UsarError(f"unknown config key {key!r}")
            current = getattr(self, key)
            target = known[key].type
            if target in ("int", "int | None") or isinstance(current, int):
                updates[key] = int(value)
            elif target in ("float", "float | None") or isinstance(current, float):
                updates[key] = float(value)
            else:
                updates[key] = value.strip()
        return replace(self, **updates)


class EventLog:
    """Structured one-line-per-event log: `<ms> <kind> k=v ...`."""

    def __init__(self, path=None):
        self._file = open(path, "w") if path else None
        self._lock = threading.Lock()
        self._t0 = time.monotonic()
        self.lines: list[str] = []

    def emit(self, kind: str, **fields_) -> None:
        stamp = (time.monotonic() - self._t0) * 1000.0
        body = " ".join(f"{k}={v}" for k, v in fields_.items())
        line = f"{stamp:.3f} {kind} {body}".rstrip()
        with self._lock:
            if self._file is not None:
                self._file.write(line + "\n")
            else:
                self.lines.append(line)

    def close(self) -> None:
        with self._lock:
            if self._file is not None:
                self._file.flush()
                self._file.close()
                self._file = None


# ---------------------------------------------------------------------------
# The server

ERROR_CODES = {
    IllegalTransition: "illegal_transition",
    NoFrameAvailable: "no_frame",
    MeasurementFailed: "measurement_failed",
    BadBox: "bad_box",
}


class StreamServer:
    """Owns sockets, threads, the provider and the measurement session."""

    def __init__(self, config: ServerConfig,
                 source=None, provider=None,
                 stage_sink: Callable[[str, int, float, float], None] | None = None):
        self.config = config
        self.log = EventLog(config.log_path)
        self._stage = stage_sink or (lambda stage, fid, dur, t: None)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.registry = ClientRegistry()

        self._source, spacing = self._build_source(source)
        self.pixel_spacing = (config.pixel_spacing if config.pixel_spacing
                              else spacing)
        self.provider = provider if provider is not None else parse_provider_spec(
            config.provider, LatencyModel.parse(config.latency_profile),
            config.seed)

        self._pair_lock = threading.Lock()
        self._latest_pair: AlignedPair | None = None
        self._in_flight: dict[int, tuple[bytes, int, int, float]] = {}
        self._in_flight_lock = threading.Lock()

        self.session = MeasurementSession(self.pixel_spacing, self.latest_pair)
        self._commands: queue.Queue = queue.Queue()

        self._udp_sock: socket.socket | None = None
        self._ws_sock: socket.socket | None = None
        self.udp_port = 0
        self.ws_port = 0

    def _build_source(self, source):
        if source is not None:
            return source, 1.0
        cfg = self.config
        if cfg.source == "phantom":
            # Scale the default ellipse with the frame so small frames
            # (bench runs) still fit a drifting phantom.
            scale = min(cfg.width, cfg.height) / 512.0
            spec = PhantomSpec(width=cfg.width, height=cfg.height,
                               semi_axis_a=160.0 * scale,
                               semi_axis_b=90.0 * scale,
                               drift_amplitude=6.0 * scale,
                               artifact=cfg.artifact, seed=cfg.seed)
            return PhantomSource(spec, cfg.max_frames), spec.pixel_spacing
        if cfg.source.startswith("replay:"):
            directory = cfg.source[len("replay:"):]
            samples = replay_open(directory)
            spacing = cfg.pixel_spacing or 1.0

            def generate():
                for sample in samples:
                    yield sample.image, sample.mask
            return generate(), spacing
        raise UsarError(f"unknown source {self.config.source!r}")

    def latest_pair(self) -> AlignedPair | None:
        with self._pair_lock:
            return self._latest_pair

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        cfg = self.config
        self._udp_sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._udp_sock.bind((cfg.host, cfg.udp_port))
        self._udp_sock.settimeout(0.25)
        self.udp_port = self._udp_sock.getsockname()[1]
        try:
            self._udp_sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF,
                                      4 << 20)
        except OSError:
            pass

        self._ws_sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._ws_sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._ws_sock.bind((cfg.host, cfg.ws_port))
        self._ws_sock.listen(8)
        self._ws_sock.settimeout(0.25)
        self.ws_port = self._ws_sock.getsockname()[1]

        self.provider.start(self._on_result, self._on_provider_error)
        self.session.start_streaming()
        self.log.emit("transition", phase=self.session.phase.value)

        for target, name in ((self._acquire_loop, "acquire"),
                             (self._udp_loop, "udp"),
                             (self._ws_accept_loop, "ws-accept"),
                             (self._command_loop, "commands")):
            thread = threading.Thread(target=target, daemon=True, name=name)
            thread.start()
            self._threads.append(thread)

    def stop(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=3.0)
        self.provider.close()
        if self._udp_sock is not None:
            self._udp_sock.close()
        if self._ws_sock is not None:
            self._ws_sock.close()
        for client in self.registry._snapshot():
            self.registry.remove(client.key)
        self.log.close()

    def run_forever(self) -> None:
        self.start()
        try:
            while not self._stop.wait(0.5):
                pass
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    # -- acquisition --------------------------------------------------------

    def _acquire_loop(self) -> None:
        period = 1.0 / self.config.fps
        frame_id = 0
        next_tick = time.monotonic()
        while not self._stop.is_set():
            now = time.monotonic()
            if now < next_tick:
                time.sleep(next_tick - now)
            t_tick = time.monotonic()
            try:
                image, truth = next(self._source)
            except StopIteration:
                self.log.emit("source_end", frames=frame_id)
                self._stop.set()
                return
            arr = np.ascontiguousarray(image, dtype=np.uint8)
            height, width = arr.shape
            image_bytes = arr.tobytes()
            t_ready = time.monotonic()
            self._stage("tick", frame_id, 0.0, t_tick)
            self._stage("acquire", frame_id, (t_ready - t_tick) * 1000.0, t_ready)

            with self._in_flight_lock:
                self._in_flight[frame_id] = (image_bytes, width, height, t_ready)
            try:
                self.provider.submit(arr, frame_id, truth)
            except Exception as exc:
                with self._in_flight_lock:
                    self._in_flight.pop(frame_id, None)
                self.log.emit("provider_error", frame_id=frame_id, error=repr(exc))

            blocks = protocol.encode(frame_id, protocol.CH_IMAGE, image_bytes,
                                     None, width, height)
            self.registry.fanout(blocks)
            t_sent = time.monotonic()
            self._stage("encode0", frame_id, (t_sent - t_ready) * 1000.0, t_sent)
            self.log.emit("frame", frame_id=frame_id,
                          acquire_ms=f"{(t_ready - t_tick) * 1000.0:.3f}",
                          encode_ms=f"{(t_sent - t_ready) * 1000.0:.3f}")

            self._purge_in_flight(t_sent)
            self.registry.evict_stale()
            frame_id += 1
            next_tick += period
            if time.monotonic() - next_tick > 5 * period:
                # Fell badly behind (suspended process); resync, don't sprint.
                next_tick = time.monotonic() + period

    def _purge_in_flight(self, now: float) -> None:
        cutoff = now - PROVIDER_TIMEOUT_MS / 1000.0
        with self._in_flight_lock:
            dead = [fid for fid, entry in self._in_flight.items()
                    if entry[3] < cutoff]
            for fid in dead:
                del self._in_flight[fid]
        for fid in dead:
            self.log.emit("provider_timeout", frame_id=fid)

    # -- provider completion ------------------------------------------------

    def _on_result(self, frame_id: int, mask: Mask) -> None:
        with self._in_flight_lock:
            entry = self._in_flight.pop(frame_id, None)
        if entry is None or self._stop.is_set():
            return
        image_bytes, width, height, t_submit = entry
        t_result = time.monotonic()
        if mask.labels.shape != (height, width):
            self.log.emit("provider_error", frame_id=frame_id,
                          error="mask dimensions mismatch")
            return
        self._stage("segment", frame_id, (t_result - t_submit) * 1000.0, t_result)
        mask_bytes = mask.labels.tobytes()
        blocks = protocol.encode(frame_id, protocol.CH_IMAGE_MASK, image_bytes,
                                 mask_bytes, width, height)
        self.registry.fanout(blocks)
        t_sent = time.monotonic()
        self._stage("encode1", frame_id, (t_sent - t_result) * 1000.0, t_sent)

        image = np.frombuffer(image_bytes, dtype=np.uint8).reshape(height, width)
        pair = AlignedPair(frame_id=frame_id, image=image,
                           mask_labels=mask.labels,
                           segmentation_latency_ms=(t_result - t_submit) * 1000.0)
        with self._pair_lock:
            self._latest_pair = pair
        self.log.emit("pair", frame_id=frame_id,
                      segment_ms=f"{(t_result - t_submit) * 1000.0:.3f}")

    def _on_provider_error(self, error: Exception) -> None:
        self.log.emit("provider_crashed", error=repr(error))

    # -- client I/O ---------------------------------------------------------

    def _udp_loop(self) -> None:
        while not self._stop.is_set():
            try:
                data, addr = self._udp_sock.recvfrom(2048)
            except socket.timeout:
                continue
            except OSError:
                return
            text = data.decode("ascii", "replace").strip()
            key = f"udp:{addr[0]}:{addr[1]}"
            if text == "SUB":
                self.registry.add_udp(self._udp_sock, addr)
                self._udp_sock.sendto(b"OK", addr)
                self.log.emit("subscribe", client=key)
            elif text == "PING":
                self.registry.heartbeat(key)
                self._udp_sock.sendto(b"PONG", addr)
            elif text == "UNSUB":
                self.registry.remove(key)
                self.log.emit("unsubscribe", client=key)

    def _ws_accept_loop(self) -> None:
        page = None
        if self.config.page_path:
            page = Path(self.config.page_path).read_bytes()
        while not self._stop.is_set():
            try:
                conn, _ = self._ws_sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                ws = wsbridge.accept_upgrade(conn, page)
            except OSError:
                continue
            if ws is None:
                continue
            key = self.registry.add_ws(ws)
            self.log.emit("subscribe", client=key)
            thread = threading.Thread(target=self._ws_client_loop,
                                      args=(ws, key), daemon=True,
                                      name=f"ws-{key}")
            thread.start()

    def _ws_client_loop(self, ws: wsbridge.WsSocket, key: str) -> None:
        while not self._stop.is_set():
            message = ws.recv_message()
            if message is None:
                break
            self.registry.heartbeat(key)
            opcode, payload = message
            if opcode != wsbridge.OP_TEXT:
                continue
            line = payload.decode("utf-8", "replace").strip()
            if line == "PING":
                try:
                    ws.send_text("PONG")
                except OSError:
                    break
            elif line:
                self._commands.put((line, ws))
        self.registry.remove(key)
        self.log.emit("disconnect", client=key)

    # -- command processing ---------------------------------------------------

    def _command_loop(self) -> None:
        while not self._stop.is_set():
            try:
                line, ws = self._commands.get(timeout=0.25)
            except queue.Empty:
                continue
            reply, broadcast = self.execute_command(line)
            try:
                ws.send_text(reply)
            except OSError:
                pass
            if broadcast is not None:
                self.registry.fanout_text(broadcast)

    def execute_command(self, line: str) -> tuple[str, str | None]:
        """Run one text command; returns (reply, optional STATE broadcast)."""
        parts = line.split()
        if len(parts) < 2 or parts[0] != "CMD":
            return "ERR bad_command expected CMD <name> [args]", None
        name, args = parts[1], parts[2:]
        if name not in COMMANDS:
            return f"ERR bad_command unknown command {name}", None
        before = self.session.phase
        try:
            result = self.session.handle(name, args)
        except UsarError as exc:
            code = ERROR_CODES.get(type(exc), "error")
            return f"ERR {code} {exc}", None
        fields_ = " ".join(f"{k}={v}" for k, v in result.items())
        if self.session.phase is not before:
            self.log.emit("transition", phase=self.session.phase.value,
                          command=name)
        state = f"STATE {fields_}"
        return f"OK {name} {fields_}", state
