"""External segmentation over TCP: wire packets on a reliable stream.

The bridge reuses the datagram format verbatim; each packet travels as one
u32 little-endian length-prefixed block.  The pipeline side connects out to
the bridge process, sends every request as a fragmented channel-0 frame,
and expects a channel-1 image+mask pair bearing the same frame_id in
return.  Any runtime able to speak the framing can sit on the other end.

Requests on one connection are serialized; replies may interleave in any
order since alignment is by frame_id.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from typing import Callable

import numpy as np

from .errors import ProviderCrashed
from .geometry import Mask
from . import protocol

_LENGTH = struct.Struct("<I")


def send_block(sock: socket.socket, data: bytes) -> None:
    sock.sendall(_LENGTH.pack(len(data)) + data)


def _recv_exact(sock: socket.socket, count: int) -> bytes | None:
    """Read exactly count bytes, or None on a clean EOF."""
    chunks = []
    while count:
        piece = sock.recv(count)
        if not piece:
            return None
        chunks.append(piece)
        count -= len(piece)
    return b"".join(chunks)


def read_block(sock: socket.socket) -> bytes | None:
    header = _recv_exact(sock, _LENGTH.size)
    if header is None:
        return None
    (length,) = _LENGTH.unpack(header)
    if length > protocol.PACKET_OVERHEAD + protocol.MAX_PAYLOAD:
        raise ProviderCrashed(f"oversized bridge block of {length} bytes")
    return _recv_exact(sock, length)


class BridgeProvider:
    """Provider that forwards requests to an external bridge process."""

    def __init__(self, host: str, port: int, connect_timeout_s: float = 5.0):
        self.host = host
        self.port = port
        self.connect_timeout_s = connect_timeout_s
        self.diagnostics = {"submitted": 0, "delivered": 0, "mismatched": 0}
        self._on_result = None
        self._on_error = None
        self._sock: socket.socket | None = None
        self._reader: threading.Thread | None = None
        self._send_lock = threading.Lock()
        self._outstanding: set[int] = set()
        self._lock = threading.Lock()
        self._closed = False

    def start(self, on_result: Callable[[int, Mask], None],
              on_error: Callable[[Exception], None] | None = None) -> None:
        if self._sock is not None:
            raise RuntimeError("provider already started")
        self._on_result = on_result
        self._on_error = on_error
        try:
            self._sock = socket.create_connection((self.host, self.port),
                                                  timeout=self.connect_timeout_s)
        except OSError as exc:
            raise ProviderCrashed(
                f"cannot reach bridge at {self.host}:{self.port}: {exc}") from exc
        self._sock.settimeout(None)
        self._reader = threading.Thread(target=self._read_loop, daemon=True,
                                        name="bridge-reader")
        self._reader.start()

    def submit(self, image: np.ndarray, frame_id: int,
               truth: Mask | None = None) -> None:
        if self._sock is None:
            raise RuntimeError("provider not started")
        if self._closed:
            raise ProviderCrashed("bridge connection is closed")
        arr = np.ascontiguousarray(image, dtype=np.uint8)
        height, width = arr.shape
        blocks = protocol.encode(frame_id, protocol.CH_IMAGE, arr.tobytes(),
                                 None, width, height)
        with self._lock:
            self._outstanding.add(frame_id)
        try:
            with self._send_lock:
                for block in blocks:
                    send_block(self._sock, block)
        except OSError as exc:
            self._fail(ProviderCrashed(f"bridge send failed: {exc}"))
            raise ProviderCrashed(f"bridge send failed: {exc}") from exc
        self.diagnostics["submitted"] += 1

    def close(self) -> None:
        self._closed = True
        if self._sock is not None:
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()
        if self._reader is not None:
            self._reader.join(timeout=2.0)

    def _fail(self, error: Exception) -> None:
        if self._closed:
            return
        self._closed = True
        if self._on_error is not None:
            self._on_error(error)

    def _read_loop(self) -> None:
        assembler = protocol.Reassembler()
        try:
            while True:
                block = read_block(self._sock)
                if block is None:
                    self._fail(ProviderCrashed("bridge closed the connection"))
                    return
                packet = protocol.decode_packet(block)
                for event in assembler.feed(packet, time.monotonic() * 1000.0):
                    if isinstance(event, protocol.Completed):
                        self._deliver(event.frame)
        except (OSError, ValueError) as exc:
            self._fail(ProviderCrashed(f"bridge read failed: {exc}"))

    def _deliver(self, frame: protocol.Frame) -> None:
        if frame.channel != protocol.CH_IMAGE_MASK:
            self.diagnostics["mismatched"] += 1
            return
        with self._lock:
            known = frame.frame_id in self._outstanding
            if known:
                self._outstanding.discard(frame.frame_id)
        if not known:
            # Contract rule: replies must echo a requested frame_id.
            self.diagnostics["mismatched"] += 1
            return
        labels = np.frombuffer(frame.mask_bytes, dtype=np.uint8)
        labels = labels.reshape(frame.height, frame.width).copy()
        self.diagnostics["delivered"] += 1
        self._on_result(frame.frame_id, Mask(labels))


def run_bridge(host: str, port: int,
               segment_fn: Callable[[np.ndarray, int], np.ndarray],
               connections: int | None = 1,
               ready: threading.Event | None = None,
               on_bound: Callable[[int], None] | None = None) -> None:
    """Serve the bridge side: answer channel-0 frames with channel-1 pairs.

    segment_fn(image, frame_id) -> label array of the same shape.  Handles
    `connections` sequential connections (None = forever).  `ready` is set
    once the socket is listening; `on_bound` receives the actual port first,
    which matters when binding port 0.
    """
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host, port))
    listener.listen(1)
    if on_bound is not None:
        on_bound(listener.getsockname()[1])
    if ready is not None:
        ready.set()
    served = 0
    try:
        while connections is None or served < connections:
            conn, _ = listener.accept()
            served += 1
            try:
                _serve_connection(conn, segment_fn)
            finally:
                conn.close()
    finally:
        listener.close()


def _serve_connection(conn: socket.socket,
                      segment_fn: Callable[[np.ndarray, int], np.ndarray]) -> None:
    assembler = protocol.Reassembler()
    while True:
        block = read_block(conn)
        if block is None:
            return
        packet = protocol.decode_packet(block)
        for event in assembler.feed(packet, time.monotonic() * 1000.0):
            if not isinstance(event, protocol.Completed):
                continue
            frame = event.frame
            image = np.frombuffer(frame.image_bytes, dtype=np.uint8)
            image = image.reshape(frame.height, frame.width)
            labels = np.ascontiguousarray(segment_fn(image, frame.frame_id),
                                          dtype=np.uint8)
            blocks = protocol.encode(frame.frame_id, protocol.CH_IMAGE_MASK,
                                     image.tobytes(), labels.tobytes(),
                                     frame.width, frame.height)
            for out in blocks:
                send_block(conn, out)
