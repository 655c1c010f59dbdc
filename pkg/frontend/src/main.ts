// Browser entry point: one WebSocket carries wire packets as binary
// messages and the command protocol as text lines.  Rendering is
// latest-wins; packets never queue behind the paint loop.

import {
  CH_IMAGE, CH_IMAGE_MASK, Frame, ProtocolError, Reassembler,
  command, decodePacket, splitPair,
} from "./protocol.js";
import { renderOverlay } from "./overlay.js";
import { Workflow } from "./workflow.js";
import { cornersOf } from "./box.js";

const HANDLE_RADIUS_PX = 14;
const PING_INTERVAL_MS = 5000;
const PAIR_STALE_FRAMES = 30;

function fmtMm(value: number | null): string {
  return value === null ? "--" : `${value.toFixed(1)}mm`;
}

function must<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (el === null) throw new Error(`missing element #${id}`);
  return el as T;
}

class FpsMeter {
  private stamps: number[] = [];

  tick(now: number): void {
    this.stamps.push(now);
    while (this.stamps.length > 0 && (this.stamps[0] ?? 0) < now - 1000) {
      this.stamps.shift();
    }
  }

  get value(): number {
    return this.stamps.length;
  }
}

class Viewer {
  private readonly canvas = must<HTMLCanvasElement>("view");
  private readonly ctx: CanvasRenderingContext2D;
  private readonly hud = {
    phase: must<HTMLElement>("hud-phase"),
    dims: must<HTMLElement>("hud-dims"),
    volume: must<HTMLElement>("hud-volume"),
    fps: must<HTMLElement>("hud-fps"),
    link: must<HTMLElement>("hud-link"),
    error: must<HTMLElement>("hud-error"),
  };
  private readonly workflow = new Workflow();
  private readonly reasm = new Reassembler();
  private readonly fps = new FpsMeter();
  private ws: WebSocket | null = null;
  private latestImage: Frame | null = null;
  private latestPair: Frame | null = null;
  private drawnFrameId = -1;
  private pixels: ImageData | null = null;
  private drag: { corner: number; x: number; y: number } | null = null;

  constructor() {
    const ctx = this.canvas.getContext("2d");
    if (ctx === null) throw new Error("canvas 2d context unavailable");
    this.ctx = ctx;
    this.bindControls();
    this.bindPointer();
    this.connect();
    window.setInterval(() => this.send("PING"), PING_INTERVAL_MS);
    requestAnimationFrame(() => this.paint());
  }

  private connect(): void {
    const ws = new WebSocket(`ws://${location.host}/`);
    ws.binaryType = "arraybuffer";
    ws.onopen = () => { this.hud.link.textContent = "connected"; };
    ws.onclose = () => {
      this.hud.link.textContent = "disconnected";
      // The stream server may restart under the page; retry quietly.
      window.setTimeout(() => this.connect(), 1000);
    };
    ws.onmessage = (event) => {
      if (typeof event.data === "string") {
        this.workflow.handleLine(event.data);
        this.refreshHud();
      } else {
        this.onPacket(event.data as ArrayBuffer);
      }
    };
    this.ws = ws;
  }

  private send(line: string): void {
    if (this.ws !== null && this.ws.readyState === WebSocket.OPEN) {
      this.ws.send(line);
    }
  }

  private onPacket(data: ArrayBuffer): void {
    let frame: Frame | null;
    try {
      frame = this.reasm.feed(decodePacket(data), performance.now());
    } catch (err) {
      if (err instanceof ProtocolError) return; // foreign traffic
      throw err;
    }
    if (frame === null) return;
    if (frame.channel === CH_IMAGE) this.latestImage = frame;
    else this.latestPair = frame;
  }

  // -- painting ------------------------------------------------------------

  private paint(): void {
    const frame = this.pickFrame();
    if (frame !== null && frame.frameId !== this.drawnFrameId) {
      this.drawFrame(frame);
      this.drawnFrameId = frame.frameId;
      this.fps.tick(performance.now());
    } else if (this.workflow.edited !== null && frame !== null) {
      this.drawFrame(frame); // box handle moved without a new frame
    }
    this.refreshHud();
    requestAnimationFrame(() => this.paint());
  }

  /** Prefer the segmented pair unless it stalled far behind the raw feed. */
  private pickFrame(): Frame | null {
    const pair = this.latestPair;
    const image = this.latestImage;
    if (pair === null) return image;
    if (image !== null && image.frameId > pair.frameId + PAIR_STALE_FRAMES) {
      return image;
    }
    return pair;
  }

  private drawFrame(frame: Frame): void {
    const { width, height } = frame;
    if (this.canvas.width !== width || this.canvas.height !== height) {
      this.canvas.width = width;
      this.canvas.height = height;
      this.pixels = null;
    }
    if (this.pixels === null) {
      this.pixels = this.ctx.createImageData(width, height);
    }
    if (frame.channel === CH_IMAGE_MASK) {
      const { image, mask } = splitPair(frame);
      renderOverlay(image, mask, width, height, this.pixels.data);
    } else {
      renderOverlay(frame.payload, null, width, height, this.pixels.data);
    }
    this.ctx.putImageData(this.pixels, 0, 0);
    this.drawBox();
  }

  private drawBox(): void {
    const box = this.workflow.displayedBox();
    if (box === null || !this.workflow.inReview) return;
    const corners = cornersOf(box);
    const first = corners[0];
    if (first === undefined) return;
    this.ctx.save();
    this.ctx.strokeStyle =
      this.workflow.edited !== null ? "#ffd166" : "#4cc9f0";
    this.ctx.lineWidth = Math.max(1, this.canvas.width / 512);
    this.ctx.beginPath();
    this.ctx.moveTo(first[0], first[1]);
    for (const [x, y] of corners.slice(1)) this.ctx.lineTo(x, y);
    this.ctx.closePath();
    this.ctx.stroke();
    const r = this.ctx.lineWidth * 3;
    this.ctx.fillStyle = this.ctx.strokeStyle;
    for (const [x, y] of corners) {
      this.ctx.fillRect(x - r, y - r, 2 * r, 2 * r);
    }
    this.ctx.restore();
  }

  private refreshHud(): void {
    const w = this.workflow;
    this.hud.phase.textContent = `${w.phase} (${w.boxSource})`;
    const d = w.displayedDims();
    this.hud.dims.textContent =
      `L ${fmtMm(d.lengthMm)}  W ${fmtMm(d.widthMm)}  T ${fmtMm(d.thicknessMm)}`;
    const ml = w.displayedVolumeMl();
    this.hud.volume.textContent = ml === null ? "--" : `${ml.toFixed(1)} mL`;
    this.hud.fps.textContent = `${this.fps.value} fps`;
    this.hud.error.textContent = w.lastError;
  }

  // -- controls ------------------------------------------------------------

  private bindControls(): void {
    const actions: Array<[string, () => void]> = [
      ["btn-coronal", () => this.send(command("capture_coronal"))],
      ["btn-transverse", () => this.send(command("capture_transverse"))],
      ["btn-accept", () => this.send(command("accept_measurement"))],
      ["btn-recompute", () => this.send(command("recompute"))],
      ["btn-reset", () => this.send(command("reset"))],
      ["btn-apply", () => this.applyBox()],
    ];
    for (const [id, run] of actions) {
      must<HTMLButtonElement>(id).addEventListener("click", run);
    }
  }

  private applyBox(): void {
    const line = this.workflow.adjustCommand();
    if (line !== null) this.send(line);
  }

  private bindPointer(): void {
    this.canvas.addEventListener("pointerdown", (event) => {
      const pos = this.toImageCoords(event);
      const corner = this.hitCorner(pos.x, pos.y);
      if (corner === null) return;
      this.drag = { corner, x: pos.x, y: pos.y };
      this.canvas.setPointerCapture(event.pointerId);
    });
    this.canvas.addEventListener("pointermove", (event) => {
      if (this.drag === null) return;
      const pos = this.toImageCoords(event);
      this.workflow.dragCorner(this.drag.corner,
                               pos.x - this.drag.x, pos.y - this.drag.y);
      this.drag.x = pos.x;
      this.drag.y = pos.y;
    });
    const stop = (event: PointerEvent) => {
      if (this.drag === null) return;
      this.drag = null;
      this.canvas.releasePointerCapture(event.pointerId);
    };
    this.canvas.addEventListener("pointerup", stop);
    this.canvas.addEventListener("pointercancel", stop);
  }

  private toImageCoords(event: PointerEvent): { x: number; y: number } {
    const rect = this.canvas.getBoundingClientRect();
    return {
      x: (event.clientX - rect.left) * (this.canvas.width / rect.width),
      y: (event.clientY - rect.top) * (this.canvas.height / rect.height),
    };
  }

  private hitCorner(x: number, y: number): number | null {
    const box = this.workflow.displayedBox();
    if (box === null || !this.workflow.inReview) return null;
    const scale = this.canvas.width / 512;
    const radius = HANDLE_RADIUS_PX * Math.max(1, scale);
    let best: number | null = null;
    let bestDist = radius;
    cornersOf(box).forEach(([cx, cy], index) => {
      const dist = Math.hypot(cx - x, cy - y);
      if (dist <= bestDist) {
        best = index;
        bestDist = dist;
      }
    });
    return best;
  }
}

new Viewer();
