"""Datagram wire format, reassembly and channel alignment for frame streams.

Every datagram starts with a fixed 20-byte header followed by a 2-byte
payload length and the payload itself.  All integers are little-endian:

    offset  size  field
    0       4     magic "USAR" (0x55 0x53 0x41 0x52)
    4       1     version (currently 1)
    5       1     channel (0 = raw image, 1 = image+mask pair)
    6       1     pixel_format (0 = gray-8, 1 = mask-8 labels)
    7       1     flags (bit 0 set on the last fragment of a frame)
    8       4     frame_id
    12      2     width in pixels
    14      2     height in pixels
    16      2     fragment index (0-based)
    18      2     fragment count for the frame
    20      2     payload length (at most 1400)
    22      ...   payload bytes

Channel 0 carries width*height grayscale bytes per frame; channel 1 carries
the image immediately followed by the same-size label mask (2*width*height
bytes), so a pair survives the loss of its channel-0 sibling.  Frames are
split into payloads of 1400 bytes (MTU-safe), last one short.

Reassembly is keyed by (channel, frame_id), tolerates reordering and
duplication, and discards partial frames that stall for 200 ms.  There is
no retransmission: the stream refreshes continuously, so stale fragments
are worthless.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadChannel, BadMagic, BadVersion, BoundsViolation,
                     Oversize, Truncated)

MAGIC = b"USAR"
VERSION = 1
CH_IMAGE = 0
CH_IMAGE_MASK = 1
FMT_GRAY8 = 0
FMT_MASK8 = 1
FLAG_LAST_FRAGMENT = 0x01

MAX_PAYLOAD = 1400
HEADER_SIZE = 20
# Header plus the payload-length prefix.
PACKET_OVERHEAD = 22
MAX_FRAGMENTS = 0xFFFF

REASSEMBLY_TIMEOUT_MS = 200
COMPLETED_MEMORY_MS = 1000

_LAYOUT = struct.Struct("<4sBBBBIHHHHH")
assert _LAYOUT.size == PACKET_OVERHEAD


@dataclass(frozen=True)
class WirePacket:
    """One fragment of a frame, as carried in a single datagram."""

    channel: int
    frame_id: int
    width: int
    height: int
    frag_index: int
    frag_count: int
    payload: bytes
    pixel_format: int = FMT_GRAY8

    @property
    def is_last(self) -> bool:
        return self.frag_index == self.frag_count - 1


@dataclass(frozen=True)
class Frame:
    """A fully assembled frame: raw image, optionally paired with a mask."""

    channel: int
    frame_id: int
    width: int
    height: int
    payload: bytes
    pixel_format: int = FMT_GRAY8

    @property
    def image_bytes(self) -> bytes:
        return self.payload[:self.width * self.height]

    @property
    def mask_bytes(self) -> bytes:
        if self.channel != CH_IMAGE_MASK:
            raise BadChannel("frame carries no mask")
        return self.payload[self.width * self.height:]


@dataclass(frozen=True)
class AlignedPair:
    """A channel-1 completion: image plus mask labels for one frame_id.

    segmentation_latency_ms is the arrival gap to the matching channel-0
    frame, when that frame was observed; None otherwise.
    """

    frame_id: int
    image: np.ndarray
    mask_labels: np.ndarray
    segmentation_latency_ms: float | None = None


@dataclass(frozen=True)
class Completed:
    frame: Frame


@dataclass(frozen=True)
class Expired:
    channel: int
    frame_id: int
    received: int
    expected: int


@dataclass(frozen=True)
class Rejected:
    channel: int
    frame_id: int
    reason: str


def frame_byte_size(width: int, height: int, channel: int) -> int:
    per_pixel = 2 if channel == CH_IMAGE_MASK else 1
    return width * height * per_pixel


def expected_fragments(width: int, height: int, channel: int) -> int:
    """Number of 1400-byte fragments a frame splits into."""
    size = frame_byte_size(width, height, channel)
    return max(1, -(-size // MAX_PAYLOAD))


def encode_packet(packet: WirePacket) -> bytes:
    """Serialize one packet to datagram bytes."""
    if len(packet.payload) > MAX_PAYLOAD:
        raise BoundsViolation(
            f"payload of {len(packet.payload)} exceeds {MAX_PAYLOAD}")
    flags = FLAG_LAST_FRAGMENT if packet.is_last else 0
    return _LAYOUT.pack(MAGIC, VERSION, packet.channel, packet.pixel_format,
                        flags, packet.frame_id, packet.width, packet.height,
                        packet.frag_index, packet.frag_count,
                        len(packet.payload)) + packet.payload


def decode_packet(data: bytes) -> WirePacket:
    """Parse and validate one datagram; the buffer must hold exactly one."""
    if len(data) < PACKET_OVERHEAD:
        raise Truncated(f"datagram of {len(data)} bytes is shorter than the header")
    (magic, version, channel, pixel_format, flags, frame_id, width, height,
     frag_index, frag_count, payload_len) = _LAYOUT.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if channel not in (CH_IMAGE, CH_IMAGE_MASK):
        raise BadChannel(f"unknown channel {channel}")
    if pixel_format not in (FMT_GRAY8, FMT_MASK8):
        raise BoundsViolation(f"unknown pixel format {pixel_format}")
    if payload_len > MAX_PAYLOAD:
        raise BoundsViolation(
            f"declared payload of {payload_len} exceeds {MAX_PAYLOAD}")
    if len(data) < PACKET_OVERHEAD + payload_len:
        raise Truncated("datagram shorter than its declared payload")
    if len(data) > PACKET_OVERHEAD + payload_len:
        raise BoundsViolation("payload length mismatch: trailing bytes")
    if frag_count == 0 or frag_index >= frag_count:
        raise BoundsViolation(
            f"fragment {frag_index} out of range for count {frag_count}")
    is_last = frag_index == frag_count - 1
    if bool(flags & FLAG_LAST_FRAGMENT) != is_last:
        raise BoundsViolation("last-fragment flag inconsistent with index")
    if width == 0 or height == 0:
        raise BoundsViolation("zero frame dimensions")
    payload = data[PACKET_OVERHEAD:PACKET_OVERHEAD + payload_len]
    return WirePacket(channel=channel, frame_id=frame_id, width=width,
                      height=height, frag_index=frag_index,
                      frag_count=frag_count, payload=payload,
                      pixel_format=pixel_format)


def fragment_frame(frame: Frame) -> list[WirePacket]:
    """Split a frame into wire packets of at most MAX_PAYLOAD bytes each."""
    if frame.width == 0 or frame.height == 0:
        raise BoundsViolation("zero frame dimensions")
    expected = frame_byte_size(frame.width, frame.height, frame.channel)
    if len(frame.payload) != expected:
        raise BoundsViolation(
            f"payload of {len(frame.payload)} bytes, expected {expected}")
    count = expected_fragments(frame.width, frame.height, frame.channel)
    if count > MAX_FRAGMENTS:
        raise Oversize(f"frame needs {count} fragments, limit {MAX_FRAGMENTS}")
    packets = []
    for index in range(count):
        chunk = frame.payload[index * MAX_PAYLOAD:(index + 1) * MAX_PAYLOAD]
        packets.append(WirePacket(channel=frame.channel, frame_id=frame.frame_id,
                                  width=frame.width, height=frame.height,
                                  frag_index=index, frag_count=count,
                                  payload=chunk, pixel_format=frame.pixel_format))
    return packets


def encode(frame_id: int, channel: int, image: bytes, mask: bytes | None,
           width: int, height: int) -> list[bytes]:
    """Encode one frame straight to its ordered datagram byte blocks.

    Channel 0 takes image bytes only; channel 1 requires the mask, which is
    appended after the image.
    """
    if channel == CH_IMAGE:
        if mask is not None:
            raise BadChannel("channel 0 carries no mask")
        payload, pixel_format = bytes(image), FMT_GRAY8
    elif channel == CH_IMAGE_MASK:
        if mask is None:
            raise BadChannel("channel 1 requires a mask")
        payload, pixel_format = bytes(image) + bytes(mask), FMT_MASK8
    else:
        raise BadChannel(f"unknown channel {channel}")
    frame = Frame(channel=channel, frame_id=frame_id, width=width,
                  height=height, payload=payload, pixel_format=pixel_format)
    return [encode_packet(p) for p in fragment_frame(frame)]


@dataclass
class _Assembly:
    width: int
    height: int
    pixel_format: int
    frag_count: int
    chunks: dict[int, bytes] = field(default_factory=dict)
    last_seen_ms: float = 0.0


class Reassembler:
    """Rebuilds frames from out-of-order, possibly duplicated fragments.

    All timing comes from the caller-supplied now_ms, so behaviour is fully
    deterministic under test.  feed() performs expiry housekeeping too, so
    its event list can include Expired entries for other frames.  Instances
    are single-writer: one execution context feeds each.
    """

    def __init__(self, timeout_ms: float = REASSEMBLY_TIMEOUT_MS):
        self.timeout_ms = timeout_ms
        self._pending: dict[tuple[int, int], _Assembly] = {}
        # Recently completed (channel, frame_id) keys, so that a fully
        # duplicated stream still completes each frame exactly once.
        self._completed: dict[tuple[int, int], float] = {}

    def feed(self, packet: WirePacket, now_ms: float) -> list:
        events = self.sweep(now_ms)
        key = (packet.channel, packet.frame_id)
        if key in self._completed:
            return events
        assembly = self._pending.get(key)
        if assembly is None:
            assembly = _Assembly(width=packet.width, height=packet.height,
                                 pixel_format=packet.pixel_format,
                                 frag_count=packet.frag_count)
            self._pending[key] = assembly
        elif (assembly.width != packet.width
              or assembly.height != packet.height
              or assembly.frag_count != packet.frag_count
              or assembly.pixel_format != packet.pixel_format):
            events.append(Rejected(packet.channel, packet.frame_id,
                                   "fragment metadata mismatch"))
            return events
        assembly.last_seen_ms = now_ms
        if packet.frag_index in assembly.chunks:
            return events
        assembly.chunks[packet.frag_index] = packet.payload
        if len(assembly.chunks) < assembly.frag_count:
            return events
        payload = b"".join(assembly.chunks[i] for i in range(assembly.frag_count))
        del self._pending[key]
        self._completed[key] = now_ms + COMPLETED_MEMORY_MS
        expected = frame_byte_size(assembly.width, assembly.height, packet.channel)
        if len(payload) != expected:
            events.append(Rejected(packet.channel, packet.frame_id,
                                   f"assembled {len(payload)} bytes, expected {expected}"))
            return events
        events.append(Completed(Frame(channel=packet.channel,
                                      frame_id=packet.frame_id,
                                      width=assembly.width,
                                      height=assembly.height,
                                      payload=payload,
                                      pixel_format=assembly.pixel_format)))
        return events

    def sweep(self, now_ms: float) -> list:
        """Expire stalled assemblies and age out the completed-id memory."""
        events = []
        for key in [k for k, a in self._pending.items()
                    if now_ms - a.last_seen_ms > self.timeout_ms]:
            assembly = self._pending.pop(key)
            events.append(Expired(key[0], key[1], len(assembly.chunks),
                                  assembly.frag_count))
        for key in [k for k, expiry in self._completed.items() if now_ms > expiry]:
            del self._completed[key]
        return events

    @property
    def pending_count(self) -> int:
        return len(self._pending)


class Aligner:
    """Pairs channel-1 completions with channel-0 arrival times.

    Channel-1 frames are self-contained (they embed the image), so every
    one yields a pair immediately; the channel-0 sibling only contributes
    the latency measurement.  Single-writer, like Reassembler.
    """

    def __init__(self, history: int = 1024):
        self._history = history
        self._seen_ch0: OrderedDict[int, float] = OrderedDict()

    def feed(self, frame: Frame, now_ms: float) -> AlignedPair | None:
        if frame.channel == CH_IMAGE:
            self._seen_ch0[frame.frame_id] = now_ms
            while len(self._seen_ch0) > self._history:
                self._seen_ch0.popitem(last=False)
            return None
        pixels = frame.width * frame.height
        if len(frame.payload) != 2 * pixels:
            raise BoundsViolation("pair payload does not hold two planes")
        shape = (frame.height, frame.width)
        image = np.frombuffer(frame.image_bytes, dtype=np.uint8).reshape(shape)
        labels = np.frombuffer(frame.mask_bytes, dtype=np.uint8).reshape(shape)
        seen = self._seen_ch0.get(frame.frame_id)
        latency = None if seen is None else now_ms - seen
        return AlignedPair(frame_id=frame.frame_id, image=image.copy(),
                           mask_labels=labels.copy(),
                           segmentation_latency_ms=latency)
