// Binary wire format shared with the streaming server, plus the text
// command protocol. Byte layout (little-endian):
//   magic "USAR" | version u8 | channel u8 | format u8 | flags u8
//   frame_id u32 | width u16 | height u16 | frag_index u16 | frag_count u16
//   payload_len u16 | payload

export const MAGIC = 0x55534152; // "USAR" big-endian read of the 4 bytes
export const VERSION = 1;
export const CH_IMAGE = 0;
export const CH_IMAGE_MASK = 1;
export const FLAG_LAST_FRAGMENT = 0x01;
export const HEADER_SIZE = 20;
export const PACKET_OVERHEAD = 22;
export const MAX_PAYLOAD = 1400;

export const ASSEMBLY_TIMEOUT_MS = 200;
export const COMPLETED_MEMORY_MS = 1000;

export interface WirePacket {
  channel: number;
  pixelFormat: number;
  frameId: number;
  width: number;
  height: number;
  fragIndex: number;
  fragCount: number;
  payload: Uint8Array;
}

export class ProtocolError extends Error {
  constructor(readonly code: string, message: string) {
    super(message);
  }
}

export function decodePacket(buffer: ArrayBuffer): WirePacket {
  if (buffer.byteLength < PACKET_OVERHEAD) {
    throw new ProtocolError("truncated", `packet of ${buffer.byteLength} bytes`);
  }
  const view = new DataView(buffer);
  if (view.getUint32(0, false) !== MAGIC) {
    throw new ProtocolError("bad_magic", "magic mismatch");
  }
  if (view.getUint8(4) !== VERSION) {
    throw new ProtocolError("bad_version", `version ${view.getUint8(4)}`);
  }
  const channel = view.getUint8(5);
  if (channel > CH_IMAGE_MASK) {
    throw new ProtocolError("bad_channel", `channel ${channel}`);
  }
  const pixelFormat = view.getUint8(6);
  const flags = view.getUint8(7);
  const frameId = view.getUint32(8, true);
  const width = view.getUint16(12, true);
  const height = view.getUint16(14, true);
  const fragIndex = view.getUint16(16, true);
  const fragCount = view.getUint16(18, true);
  const payloadLen = view.getUint16(20, true);
  if (width === 0 || height === 0 || fragCount === 0 || fragIndex >= fragCount
      || payloadLen > MAX_PAYLOAD) {
    throw new ProtocolError("bounds", "header field out of range");
  }
  const isLast = fragIndex === fragCount - 1;
  if (((flags & FLAG_LAST_FRAGMENT) !== 0) !== isLast) {
    throw new ProtocolError("bounds", "last-fragment flag mismatch");
  }
  if (buffer.byteLength !== PACKET_OVERHEAD + payloadLen) {
    throw new ProtocolError(
      "truncated", `expected ${PACKET_OVERHEAD + payloadLen} bytes`);
  }
  return {
    channel, pixelFormat, frameId, width, height, fragIndex, fragCount,
    payload: new Uint8Array(buffer, PACKET_OVERHEAD, payloadLen),
  };
}

export interface Frame {
  channel: number;
  frameId: number;
  width: number;
  height: number;
  payload: Uint8Array;
}

/** Channel-1 payload is the gray frame followed by the label mask. */
export function splitPair(frame: Frame): { image: Uint8Array; mask: Uint8Array } {
  const n = frame.width * frame.height;
  return {
    image: frame.payload.subarray(0, n),
    mask: frame.payload.subarray(n, 2 * n),
  };
}

interface Assembly {
  width: number;
  height: number;
  fragCount: number;
  parts: Array<Uint8Array | undefined>;
  received: number;
  startedMs: number;
}

/**
 * Groups fragments into frames, keyed by (channel, frame id).
 *
 * Duplicates are ignored, partial frames are dropped after
 * ASSEMBLY_TIMEOUT_MS, and a just-completed key is remembered for
 * COMPLETED_MEMORY_MS so late duplicate fragments cannot rebuild the
 * frame. The caller supplies the clock so tests control time.
 */
export class Reassembler {
  private pending = new Map<string, Assembly>();
  private completed = new Map<string, number>();
  dropped = 0;

  feed(packet: WirePacket, nowMs: number): Frame | null {
    this.sweep(nowMs);
    const key = `${packet.channel}:${packet.frameId}`;
    const doneAt = this.completed.get(key);
    if (doneAt !== undefined) {
      return null;
    }
    let entry = this.pending.get(key);
    if (entry === undefined) {
      entry = {
        width: packet.width,
        height: packet.height,
        fragCount: packet.fragCount,
        parts: new Array(packet.fragCount),
        received: 0,
        startedMs: nowMs,
      };
      this.pending.set(key, entry);
    } else if (entry.width !== packet.width || entry.height !== packet.height
               || entry.fragCount !== packet.fragCount) {
      // Inconsistent metadata poisons the whole frame.
      this.pending.delete(key);
      this.dropped += 1;
      return null;
    }
    if (entry.parts[packet.fragIndex] !== undefined) {
      return null;
    }
    entry.parts[packet.fragIndex] = packet.payload;
    entry.received += 1;
    if (entry.received < entry.fragCount) {
      return null;
    }
    this.pending.delete(key);
    this.completed.set(key, nowMs);
    let total = 0;
    for (const part of entry.parts) total += part!.length;
    const payload = new Uint8Array(total);
    let offset = 0;
    for (const part of entry.parts) {
      payload.set(part!, offset);
      offset += part!.length;
    }
    return {
      channel: packet.channel,
      frameId: packet.frameId,
      width: entry.width,
      height: entry.height,
      payload,
    };
  }

  private sweep(nowMs: number): void {
    for (const [key, entry] of this.pending) {
      if (nowMs - entry.startedMs > ASSEMBLY_TIMEOUT_MS) {
        this.pending.delete(key);
        this.dropped += 1;
      }
    }
    for (const [key, doneMs] of this.completed) {
      if (nowMs - doneMs > COMPLETED_MEMORY_MS) {
        this.completed.delete(key);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Text side

export type ReplyKind = "ok" | "err" | "state" | "pong" | "other";

export interface Reply {
  kind: ReplyKind;
  name: string;             // command name for ok, error code for err
  message: string;          // free text for err
  fields: Map<string, string>;
}

function parseFields(parts: string[]): Map<string, string> {
  const fields = new Map<string, string>();
  for (const part of parts) {
    const eq = part.indexOf("=");
    if (eq > 0) {
      fields.set(part.slice(0, eq), part.slice(eq + 1));
    }
  }
  return fields;
}

export function parseLine(line: string): Reply {
  const parts = line.trim().split(/\s+/);
  const head = parts[0] ?? "";
  if (head === "OK" && parts.length >= 2) {
    return { kind: "ok", name: parts[1]!, message: "",
             fields: parseFields(parts.slice(2)) };
  }
  if (head === "ERR" && parts.length >= 2) {
    return { kind: "err", name: parts[1]!,
             message: parts.slice(2).join(" "), fields: new Map() };
  }
  if (head === "STATE") {
    return { kind: "state", name: "", message: "",
             fields: parseFields(parts.slice(1)) };
  }
  if (head === "PONG") {
    return { kind: "pong", name: "", message: "", fields: new Map() };
  }
  return { kind: "other", name: head, message: line, fields: new Map() };
}

export function command(name: string, args: Array<string | number> = []): string {
  return ["CMD", name, ...args.map(String)].join(" ");
}
