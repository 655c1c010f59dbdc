// Client-side mirror of the measurement session. The server owns the
// state machine; this tracks its replies and broadcasts so the UI knows
// the phase, the box under review (including local edits not yet sent),
// and the accumulated measurements.

import { OrientedBox, boxFromField, cornersOf, dragCorner, volumeMm3 } from "./box.js";
import { Reply, command, parseLine } from "./protocol.js";

export interface Measured {
  lengthMm: number | null;
  widthMm: number | null;
  thicknessMm: number | null;
  volumeMm3: number | null;
}

const REVIEW_PHASES = new Set(["coronal_review", "transverse_review"]);

export class Workflow {
  phase = "idle";
  box: OrientedBox | null = null;
  boxSource = "automatic";
  pixelSpacingMm = 1;
  frameId: number | null = null;
  measured: Measured = {
    lengthMm: null, widthMm: null, thicknessMm: null, volumeMm3: null,
  };
  lastError = "";

  /** Local drag state; null means the server's box is displayed as-is. */
  edited: OrientedBox | null = null;

  handleLine(line: string): Reply {
    const reply = parseLine(line);
    if (reply.kind === "ok" || reply.kind === "state") {
      this.applyFields(reply.fields);
      if (reply.kind === "ok") this.lastError = "";
    } else if (reply.kind === "err") {
      this.lastError = `${reply.name}: ${reply.message}`;
    }
    return reply;
  }

  private applyFields(fields: Map<string, string>): void {
    const phase = fields.get("phase");
    if (phase === undefined) return; // PONG-like lines carry no state
    this.phase = phase;
    const boxField = fields.get("box");
    this.box = boxField !== undefined ? boxFromField(boxField) : null;
    this.edited = null;
    this.boxSource = fields.get("source") ?? "automatic";
    const spacing = fields.get("pixel_spacing_mm");
    if (spacing !== undefined) this.pixelSpacingMm = Number(spacing);
    const fid = fields.get("frame_id");
    this.frameId = fid !== undefined ? Number(fid) : null;
    this.measured = {
      lengthMm: numberOrNull(fields.get("length_mm")),
      widthMm: numberOrNull(fields.get("width_mm")),
      thicknessMm: numberOrNull(fields.get("thickness_mm")),
      volumeMm3: numberOrNull(fields.get("volume_mm3")),
    };
  }

  get inReview(): boolean {
    return REVIEW_PHASES.has(this.phase);
  }

  /** Box to draw: local edits win over the server's copy. */
  displayedBox(): OrientedBox | null {
    return this.edited ?? this.box;
  }

  /** The dimensions implied by the displayed state, in mm. */
  displayedDims(): Measured {
    const out = { ...this.measured };
    const box = this.displayedBox();
    if (box !== null && this.inReview) {
      const major = box.extentMajor * this.pixelSpacingMm;
      const minor = box.extentMinor * this.pixelSpacingMm;
      if (this.phase === "coronal_review") {
        out.lengthMm = major;
      } else {
        out.widthMm = major;
        out.thicknessMm = minor;
      }
    }
    if (out.lengthMm !== null && out.widthMm !== null
        && out.thicknessMm !== null) {
      out.volumeMm3 = volumeMm3(out.lengthMm, out.widthMm, out.thicknessMm);
    }
    return out;
  }

  displayedVolumeMl(): number | null {
    const v = this.displayedDims().volumeMm3;
    return v === null ? null : v / 1000;
  }

  dragCorner(index: number, dx: number, dy: number): void {
    const box = this.displayedBox();
    if (box === null || !this.inReview) return;
    this.edited = dragCorner(box, index, dx, dy);
  }

  /** Command line submitting the locally edited box, or null if clean. */
  adjustCommand(): string | null {
    if (this.edited === null) return null;
    const args = cornersOf(this.edited)
      .flatMap(([x, y]) => [x.toFixed(3), y.toFixed(3)]);
    return command("adjust_box", args);
  }

  captureCommand(): string {
    return this.measured.lengthMm === null || this.phase === "coronal_review"
      ? command("capture_coronal")
      : command("capture_transverse");
  }
}

function numberOrNull(text: string | undefined): number | null {
  return text === undefined ? null : Number(text);
}
