import { describe, expect, it } from "vitest";

import {
  ASSEMBLY_TIMEOUT_MS, CH_IMAGE_MASK, COMPLETED_MEMORY_MS, FLAG_LAST_FRAGMENT,
  MAX_PAYLOAD, PACKET_OVERHEAD, ProtocolError, Reassembler,
  command, decodePacket, parseLine, splitPair,
} from "../src/protocol.js";

// Independent packet writer so the decoder is not tested against itself.
function encodePacket(fields: {
  channel: number; frameId: number; width: number; height: number;
  fragIndex: number; fragCount: number; payload: Uint8Array;
  version?: number; magic?: number; flags?: number; payloadLen?: number;
}): ArrayBuffer {
  const payloadLen = fields.payloadLen ?? fields.payload.length;
  const buffer = new ArrayBuffer(PACKET_OVERHEAD + fields.payload.length);
  const view = new DataView(buffer);
  view.setUint32(0, fields.magic ?? 0x55534152, false);
  view.setUint8(4, fields.version ?? 1);
  view.setUint8(5, fields.channel);
  view.setUint8(6, 0);
  const defaultFlags =
    fields.fragIndex === fields.fragCount - 1 ? FLAG_LAST_FRAGMENT : 0;
  view.setUint8(7, fields.flags ?? defaultFlags);
  view.setUint32(8, fields.frameId, true);
  view.setUint16(12, fields.width, true);
  view.setUint16(14, fields.height, true);
  view.setUint16(16, fields.fragIndex, true);
  view.setUint16(18, fields.fragCount, true);
  view.setUint16(20, payloadLen, true);
  new Uint8Array(buffer, PACKET_OVERHEAD).set(fields.payload);
  return buffer;
}

function fragmentsOf(channel: number, frameId: number, width: number,
                     height: number, payload: Uint8Array): ArrayBuffer[] {
  const count = Math.max(1, Math.ceil(payload.length / MAX_PAYLOAD));
  const out: ArrayBuffer[] = [];
  for (let i = 0; i < count; i++) {
    out.push(encodePacket({
      channel, frameId, width, height, fragIndex: i, fragCount: count,
      payload: payload.subarray(i * MAX_PAYLOAD, (i + 1) * MAX_PAYLOAD),
    }));
  }
  return out;
}

function patternBytes(n: number, seed: number): Uint8Array {
  const out = new Uint8Array(n);
  for (let i = 0; i < n; i++) out[i] = (i * 31 + seed * 7) & 0xff;
  return out;
}

function hexToBuffer(hex: string): ArrayBuffer {
  const clean = hex.replace(/\s+/g, "");
  const bytes = new Uint8Array(clean.length / 2);
  for (let i = 0; i < bytes.length; i++) {
    bytes[i] = parseInt(clean.slice(2 * i, 2 * i + 2), 16);
  }
  return bytes.buffer;
}

const GOLDEN_HEADER =
  "55534152 01 00 00 00 01020304 0002 0002 0200 bc00";

describe("decodePacket", () => {
  it("reads the golden header", () => {
    const payload = new Uint8Array(1400).fill(0xab);
    const head = new Uint8Array(hexToBuffer(GOLDEN_HEADER + " 7805"));
    const whole = new Uint8Array(head.length + payload.length);
    whole.set(head);
    whole.set(payload, head.length);
    const packet = decodePacket(whole.buffer);
    expect(packet.channel).toBe(0);
    expect(packet.frameId).toBe(0x04030201);
    expect(packet.width).toBe(512);
    expect(packet.height).toBe(512);
    expect(packet.fragIndex).toBe(2);
    expect(packet.fragCount).toBe(188);
    expect(packet.payload.length).toBe(1400);
    expect(packet.payload[0]).toBe(0xab);
  });

  it("round trips through the local encoder", () => {
    const payload = patternBytes(300, 3);
    const packet = decodePacket(encodePacket({
      channel: 1, frameId: 4242, width: 40, height: 30,
      fragIndex: 1, fragCount: 2, payload,
    }));
    expect(packet.channel).toBe(1);
    expect(packet.frameId).toBe(4242);
    expect(Array.from(packet.payload)).toEqual(Array.from(payload));
  });

  const base = {
    channel: 0, frameId: 7, width: 16, height: 16,
    fragIndex: 0, fragCount: 1, payload: patternBytes(256, 1),
  };

  function codeOf(buffer: ArrayBuffer): string {
    try {
      decodePacket(buffer);
    } catch (err) {
      if (err instanceof ProtocolError) return err.code;
      throw err;
    }
    return "accepted";
  }

  it("rejects malformed packets with the right codes", () => {
    expect(codeOf(new ArrayBuffer(PACKET_OVERHEAD - 1))).toBe("truncated");
    expect(codeOf(encodePacket({ ...base, magic: 0x55534153 })))
      .toBe("bad_magic");
    expect(codeOf(encodePacket({ ...base, version: 2 }))).toBe("bad_version");
    expect(codeOf(encodePacket({ ...base, channel: 2 }))).toBe("bad_channel");
    expect(codeOf(encodePacket({ ...base, width: 0 }))).toBe("bounds");
    expect(codeOf(encodePacket({ ...base, height: 0 }))).toBe("bounds");
    expect(codeOf(encodePacket({ ...base, fragCount: 0 }))).toBe("bounds");
    expect(codeOf(encodePacket({ ...base, fragIndex: 1 }))).toBe("bounds");
    expect(codeOf(encodePacket({
      ...base, payload: new Uint8Array(MAX_PAYLOAD + 1),
    }))).toBe("bounds");
    // Flag and index must agree in both directions.
    expect(codeOf(encodePacket({ ...base, flags: 0 }))).toBe("bounds");
    expect(codeOf(encodePacket({
      ...base, fragCount: 2, flags: FLAG_LAST_FRAGMENT,
    }))).toBe("bounds");
    // Declared length shorter than the buffer.
    expect(codeOf(encodePacket({ ...base, payloadLen: 200 })))
      .toBe("truncated");
    expect(codeOf(encodePacket(base))).toBe("accepted");
  });
});

describe("Reassembler", () => {
  it("completes an in-order frame exactly once", () => {
    const reasm = new Reassembler();
    const payload = patternBytes(4000, 9);
    const packets = fragmentsOf(0, 11, 80, 50, payload);
    expect(packets.length).toBe(3);
    const results = packets.map((p) => reasm.feed(decodePacket(p), 10));
    expect(results[0]).toBeNull();
    expect(results[1]).toBeNull();
    const frame = results[2];
    expect(frame).not.toBeNull();
    expect(frame!.frameId).toBe(11);
    expect(frame!.width).toBe(80);
    expect(frame!.height).toBe(50);
    expect(Array.from(frame!.payload)).toEqual(Array.from(payload));
  });

  it("is order and duplication insensitive", () => {
    const reasm = new Reassembler();
    const payload = patternBytes(7000, 2);
    const packets = fragmentsOf(1, 5, 70, 100, payload);
    const feed = [...packets, ...packets.slice(0, 3)];
    // Fixed permutation; determinism matters more than randomness here.
    feed.reverse();
    const frames = feed
      .map((p) => reasm.feed(decodePacket(p), 20))
      .filter((f) => f !== null);
    expect(frames.length).toBe(1);
    expect(Array.from(frames[0]!.payload)).toEqual(Array.from(payload));
  });

  it("drops stale partial frames but allows a full retry", () => {
    const reasm = new Reassembler();
    const payload = patternBytes(2000, 4);
    const [a, b] = fragmentsOf(0, 3, 40, 50, payload);
    expect(reasm.feed(decodePacket(a!), 0)).toBeNull();
    const late = ASSEMBLY_TIMEOUT_MS + 50;
    expect(reasm.feed(decodePacket(b!), late)).toBeNull();
    expect(reasm.dropped).toBe(1);
    const frame = reasm.feed(decodePacket(a!), late + 10);
    expect(frame).not.toBeNull();
    expect(Array.from(frame!.payload)).toEqual(Array.from(payload));
  });

  it("swallows duplicates of a completed frame, then forgets", () => {
    const reasm = new Reassembler();
    const payload = patternBytes(500, 5);
    const [only] = fragmentsOf(0, 8, 25, 20, payload);
    expect(reasm.feed(decodePacket(only!), 100)).not.toBeNull();
    expect(reasm.feed(decodePacket(only!), 150)).toBeNull();
    const later = 100 + COMPLETED_MEMORY_MS + 1;
    expect(reasm.feed(decodePacket(only!), later)).not.toBeNull();
  });

  it("poisons a frame whose fragments disagree on metadata", () => {
    const reasm = new Reassembler();
    const payload = patternBytes(2000, 6);
    const [a, b] = fragmentsOf(0, 9, 40, 50, payload);
    expect(reasm.feed(decodePacket(a!), 0)).toBeNull();
    const liar = encodePacket({
      channel: 0, frameId: 9, width: 41, height: 50,
      fragIndex: 1, fragCount: 2, payload: new Uint8Array(600),
    });
    expect(reasm.feed(decodePacket(liar), 1)).toBeNull();
    expect(reasm.dropped).toBe(1);
    expect(reasm.feed(decodePacket(a!), 2)).toBeNull();
    expect(reasm.feed(decodePacket(b!), 3)).not.toBeNull();
  });

  it("keeps channels separate", () => {
    const reasm = new Reassembler();
    const gray = patternBytes(100, 7);
    const pair = patternBytes(200, 8);
    const [p0] = fragmentsOf(0, 12, 10, 10, gray);
    const [p1] = fragmentsOf(1, 12, 10, 10, pair);
    const f0 = reasm.feed(decodePacket(p0!), 0);
    const f1 = reasm.feed(decodePacket(p1!), 0);
    expect(f0!.channel).toBe(0);
    expect(f1!.channel).toBe(CH_IMAGE_MASK);
    expect(f1!.payload.length).toBe(200);
  });
});

describe("splitPair", () => {
  it("splits image then mask", () => {
    const frame = {
      channel: 1, frameId: 1, width: 2, height: 2,
      payload: new Uint8Array([1, 2, 3, 4, 5, 6, 7, 8]),
    };
    const { image, mask } = splitPair(frame);
    expect(Array.from(image)).toEqual([1, 2, 3, 4]);
    expect(Array.from(mask)).toEqual([5, 6, 7, 8]);
  });
});

describe("parseLine", () => {
  it("parses OK replies with fields", () => {
    const reply = parseLine(
      "OK capture_coronal phase=coronal_review box=1.0,2.0 source=automatic");
    expect(reply.kind).toBe("ok");
    expect(reply.name).toBe("capture_coronal");
    expect(reply.fields.get("phase")).toBe("coronal_review");
    expect(reply.fields.get("box")).toBe("1.0,2.0");
  });

  it("parses ERR replies with code and message", () => {
    const reply = parseLine("ERR bad_box corner coordinates must be numbers");
    expect(reply.kind).toBe("err");
    expect(reply.name).toBe("bad_box");
    expect(reply.message).toBe("corner coordinates must be numbers");
  });

  it("parses STATE broadcasts and PONG", () => {
    const state = parseLine("STATE phase=streaming length_mm=120.5");
    expect(state.kind).toBe("state");
    expect(state.fields.get("length_mm")).toBe("120.5");
    expect(parseLine("PONG").kind).toBe("pong");
    expect(parseLine("what even is this").kind).toBe("other");
  });
});

describe("command", () => {
  it("builds space separated command lines", () => {
    expect(command("reset")).toBe("CMD reset");
    expect(command("adjust_box", [1, 2.5, "3"])).toBe("CMD adjust_box 1 2.5 3");
  });
});
