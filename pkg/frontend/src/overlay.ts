// Segmentation overlay: gray frame tinted where the mask has a class.
// Cortex (label 1) renders violet, central complex (label 2) yellow,
// blended as out = (1 - alpha) * gray + alpha * tint.

export const OVERLAY_ALPHA = 0.45;

export const CLASS_COLORS: ReadonlyMap<number, readonly [number, number, number]> =
  new Map([
    [1, [238, 130, 238] as const],
    [2, [255, 255, 0] as const],
  ]);

/**
 * Fill an RGBA buffer from a gray frame and an optional label mask.
 * `out` must hold width * height * 4 bytes (an ImageData buffer).
 */
export function renderOverlay(
  gray: Uint8Array,
  mask: Uint8Array | null,
  width: number,
  height: number,
  out: Uint8ClampedArray,
): void {
  const n = width * height;
  const alpha = OVERLAY_ALPHA;
  const keep = 1 - alpha;
  for (let i = 0; i < n; i++) {
    const g = gray[i]!;
    let r = g, gn = g, b = g;
    const label = mask === null ? 0 : mask[i]!;
    if (label !== 0) {
      const tint = CLASS_COLORS.get(label);
      if (tint !== undefined) {
        r = keep * g + alpha * tint[0];
        gn = keep * g + alpha * tint[1];
        b = keep * g + alpha * tint[2];
      }
    }
    const o = i * 4;
    out[o] = r;
    out[o + 1] = gn;
    out[o + 2] = b;
    out[o + 3] = 255;
  }
}
