// Oriented measurement box: center, orientation and extents in pixels.
// Extents use the unit-pixel convention (edge length + 1), matching the
// server, so converting an extent to millimetres is a single multiply.

export interface OrientedBox {
  cx: number;
  cy: number;
  theta: number;        // radians along the major extent, (-pi/2, pi/2]
  extentMajor: number;
  extentMinor: number;
}

export type Corner = readonly [number, number];

function foldHalfTurn(theta: number): number {
  let t = theta % Math.PI;
  if (t > Math.PI / 2) t -= Math.PI;
  else if (t <= -Math.PI / 2) t += Math.PI;
  return t;
}

/** Corner order: (-u,-v), (+u,-v), (+u,+v), (-u,+v) in the box frame. */
export function cornersOf(box: OrientedBox): Corner[] {
  const c = Math.cos(box.theta);
  const s = Math.sin(box.theta);
  const hu = (box.extentMajor - 1) / 2;
  const hv = (box.extentMinor - 1) / 2;
  const signs: Array<[number, number]> = [[-1, -1], [1, -1], [1, 1], [-1, 1]];
  return signs.map(([su, sv]) => [
    box.cx + su * hu * c - sv * hv * s,
    box.cy + su * hu * s + sv * hv * c,
  ] as const);
}

/**
 * Rebuild a box from 4 corners (same validation as the server: opposite
 * edges must agree within a pixel). Major axis follows the longer edge.
 */
export function boxFromCorners(corners: Corner[]): OrientedBox {
  if (corners.length !== 4) {
    throw new Error(`need 4 corners, got ${corners.length}`);
  }
  const [p0, p1, p2, p3] = corners as [Corner, Corner, Corner, Corner];
  const e01 = [p1[0] - p0[0], p1[1] - p0[1]];
  const e32 = [p2[0] - p3[0], p2[1] - p3[1]];
  const e03 = [p3[0] - p0[0], p3[1] - p0[1]];
  const e12 = [p2[0] - p1[0], p2[1] - p1[1]];
  if (Math.abs(e01[0]! - e32[0]!) > 1 || Math.abs(e01[1]! - e32[1]!) > 1
      || Math.abs(e03[0]! - e12[0]!) > 1 || Math.abs(e03[1]! - e12[1]!) > 1) {
    throw new Error("corners do not form a parallelogram");
  }
  const lenA = Math.hypot(e01[0]!, e01[1]!);
  const lenB = Math.hypot(e03[0]!, e03[1]!);
  let theta: number;
  let major: number;
  let minor: number;
  if (lenA >= lenB) {
    theta = Math.atan2(e01[1]!, e01[0]!);
    major = lenA + 1;
    minor = lenB + 1;
  } else {
    theta = Math.atan2(e03[1]!, e03[0]!);
    major = lenB + 1;
    minor = lenA + 1;
  }
  return {
    cx: (p0[0] + p1[0] + p2[0] + p3[0]) / 4,
    cy: (p0[1] + p1[1] + p2[1] + p3[1]) / 4,
    theta: foldHalfTurn(theta),
    extentMajor: major,
    extentMinor: minor,
  };
}

/**
 * Drag one corner by (dx, dy), keeping the box a rectangle: the drag is
 * projected onto the box axes and only the two edges meeting at that
 * corner move. Dragging a corner outward by d pixels along the major
 * axis therefore grows extentMajor by exactly d.
 */
export function dragCorner(
  box: OrientedBox, cornerIndex: number, dx: number, dy: number,
): OrientedBox {
  const signs: Array<[number, number]> = [[-1, -1], [1, -1], [1, 1], [-1, 1]];
  const sign = signs[cornerIndex];
  if (sign === undefined) {
    throw new Error(`corner index ${cornerIndex} out of range`);
  }
  const [su, sv] = sign;
  const c = Math.cos(box.theta);
  const s = Math.sin(box.theta);
  const du = dx * c + dy * s;
  const dv = -dx * s + dy * c;
  const edgeMajor = Math.max(1, box.extentMajor - 1 + su * du);
  const edgeMinor = Math.max(1, box.extentMinor - 1 + sv * dv);
  const growU = edgeMajor - (box.extentMajor - 1);
  const growV = edgeMinor - (box.extentMinor - 1);
  return {
    cx: box.cx + (su * growU / 2) * c - (sv * growV / 2) * s,
    cy: box.cy + (su * growU / 2) * s + (sv * growV / 2) * c,
    theta: box.theta,
    extentMajor: edgeMajor + 1,
    extentMinor: edgeMinor + 1,
  };
}

/** Parse the server's box=x,y,... reply field. */
export function boxFromField(field: string): OrientedBox {
  const values = field.split(",").map(Number);
  if (values.length !== 8 || values.some(Number.isNaN)) {
    throw new Error(`bad box field ${field}`);
  }
  const corners: Corner[] = [];
  for (let i = 0; i < 8; i += 2) {
    corners.push([values[i]!, values[i + 1]!]);
  }
  return boxFromCorners(corners);
}

export function volumeMm3(l: number, w: number, t: number): number {
  return (Math.PI / 6) * l * w * t;
}
