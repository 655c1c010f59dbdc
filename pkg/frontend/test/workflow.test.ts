import { describe, expect, it } from "vitest";

import { boxFromField } from "../src/box.js";
import { Workflow } from "../src/workflow.js";

// Matches the reply the server builds for a captured coronal frame:
// an axis aligned 121 x 61 box at 0.5 mm/px.
const CORONAL_OK =
  "OK capture_coronal phase=coronal_review"
  + " box=196.000,170.000,316.000,170.000,316.000,230.000,196.000,230.000"
  + " theta=0.000000 extent_major=121.000 extent_minor=61.000"
  + " source=automatic pixel_spacing_mm=0.500000 frame_id=77";

const TRANSVERSE_OK =
  "OK capture_transverse phase=transverse_review"
  + " box=236.000,180.000,316.000,180.000,316.000,224.000,236.000,224.000"
  + " theta=0.000000 extent_major=81.000 extent_minor=45.000"
  + " source=automatic pixel_spacing_mm=0.500000 frame_id=140"
  + " length_mm=60.500000";

describe("Workflow", () => {
  it("mirrors a coronal capture reply", () => {
    const w = new Workflow();
    expect(w.phase).toBe("idle");
    w.handleLine(CORONAL_OK);
    expect(w.phase).toBe("coronal_review");
    expect(w.inReview).toBe(true);
    expect(w.frameId).toBe(77);
    expect(w.pixelSpacingMm).toBe(0.5);
    expect(w.boxSource).toBe("automatic");
    const box = w.displayedBox();
    expect(box).not.toBeNull();
    expect(box!.extentMajor).toBeCloseTo(121, 9);
    const dims = w.displayedDims();
    expect(dims.lengthMm).toBeCloseTo(60.5, 9);
    expect(dims.widthMm).toBeNull();
  });

  it("moves the readout by drag distance times spacing", () => {
    const w = new Workflow();
    w.handleLine(CORONAL_OK);
    const before = w.displayedDims().lengthMm!;
    w.dragCorner(2, 10, 0); // along the major axis of this box
    expect(w.edited).not.toBeNull();
    const after = w.displayedDims().lengthMm!;
    expect(after - before).toBe(5);
  });

  it("emits the edited corners and clears them on the server's reply", () => {
    const w = new Workflow();
    w.handleLine(CORONAL_OK);
    expect(w.adjustCommand()).toBeNull();
    w.dragCorner(2, 10, 0);
    const line = w.adjustCommand();
    expect(line).not.toBeNull();
    const parts = line!.split(" ");
    expect(parts.slice(0, 2)).toEqual(["CMD", "adjust_box"]);
    expect(parts.length).toBe(10);
    const sent = boxFromField(parts.slice(2).join(","));
    expect(sent.extentMajor).toBeCloseTo(131, 2);
    // Server answers with the refined box; local edits are superseded.
    w.handleLine(
      "OK adjust_box phase=coronal_review"
      + " box=196.000,170.000,326.000,170.000,326.000,230.000,196.000,230.000"
      + " theta=0.000000 extent_major=131.000 extent_minor=61.000"
      + " source=refined pixel_spacing_mm=0.500000 frame_id=77");
    expect(w.edited).toBeNull();
    expect(w.boxSource).toBe("refined");
    expect(w.displayedDims().lengthMm).toBeCloseTo(65.5, 9);
  });

  it("keeps state on errors", () => {
    const w = new Workflow();
    w.handleLine(CORONAL_OK);
    const reply = w.handleLine("ERR bad_box corner coordinates must be numbers");
    expect(reply.kind).toBe("err");
    expect(w.phase).toBe("coronal_review");
    expect(w.displayedBox()).not.toBeNull();
    expect(w.lastError).toBe("bad_box: corner coordinates must be numbers");
    w.handleLine("OK recompute phase=coronal_review"
                 + " box=196.000,170.000,316.000,170.000,316.000,230.000,196.000,230.000"
                 + " theta=0.000000 extent_major=121.000 extent_minor=61.000"
                 + " source=automatic pixel_spacing_mm=0.500000 frame_id=77");
    expect(w.lastError).toBe("");
  });

  it("accumulates measurements across the whole pass", () => {
    const w = new Workflow();
    w.handleLine(CORONAL_OK);
    w.handleLine("OK accept_measurement phase=streaming length_mm=60.500000");
    expect(w.phase).toBe("streaming");
    expect(w.inReview).toBe(false);
    expect(w.displayedBox()).toBeNull();
    expect(w.displayedDims().lengthMm).toBe(60.5);

    w.handleLine(TRANSVERSE_OK);
    const dims = w.displayedDims();
    expect(dims.lengthMm).toBe(60.5);
    expect(dims.widthMm).toBeCloseTo(40.5, 9);
    expect(dims.thicknessMm).toBeCloseTo(22.5, 9);

    const expected = (Math.PI / 6) * 60.5 * 40.5 * 22.5;
    w.handleLine(
      "OK accept_measurement phase=complete length_mm=60.500000"
      + " width_mm=40.500000 thickness_mm=22.500000"
      + ` volume_mm3=${expected.toFixed(6)}`);
    expect(w.phase).toBe("complete");
    // Displayed volume recomputes the ellipsoid formula and must agree
    // with the server's figure well inside a tenth of a millilitre.
    const ml = w.displayedVolumeMl();
    expect(ml).not.toBeNull();
    expect(Math.abs(ml! - w.measured.volumeMm3! / 1000)).toBeLessThan(1e-4);
    expect(ml!).toBeCloseTo(expected / 1000, 6);
  });

  it("shows live box dimensions during transverse review", () => {
    const w = new Workflow();
    w.handleLine(CORONAL_OK);
    w.handleLine("OK accept_measurement phase=streaming length_mm=60.500000");
    w.handleLine(TRANSVERSE_OK);
    const before = w.displayedDims().widthMm!;
    w.dragCorner(1, 10, 0);
    const after = w.displayedDims();
    expect(after.widthMm! - before).toBe(5);
    expect(after.lengthMm).toBe(60.5); // untouched by the transverse drag
    // Volume preview follows the live width.
    const ml = w.displayedVolumeMl()!;
    expect(ml).toBeCloseTo((Math.PI / 6) * 60.5 * 45.5 * 22.5 / 1000, 9);
  });

  it("resets and ignores non-state lines", () => {
    const w = new Workflow();
    w.handleLine(CORONAL_OK);
    w.handleLine("STATE phase=streaming");
    expect(w.phase).toBe("streaming");
    expect(w.displayedBox()).toBeNull();
    expect(w.handleLine("PONG").kind).toBe("pong");
    expect(w.phase).toBe("streaming");
  });

  it("suggests the capture matching the session progress", () => {
    const w = new Workflow();
    expect(w.captureCommand()).toBe("CMD capture_coronal");
    w.handleLine(CORONAL_OK);
    expect(w.captureCommand()).toBe("CMD capture_coronal"); // retake
    w.handleLine("OK accept_measurement phase=streaming length_mm=60.500000");
    expect(w.captureCommand()).toBe("CMD capture_transverse");
  });
});
