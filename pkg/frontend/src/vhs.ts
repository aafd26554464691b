// Local mirror of the server's score arithmetic. The server stays the
// authority: every save cross-checks this value against POST /vhs and a
// divergence above 1e-6 is surfaced to the user, never reconciled.

export const VHS_FACTOR = 6.0;
export const SMALL_MAX = 8.2;
export const LARGE_MIN = 10.0;
export const EF_EPSILON = 1e-6;

export const POINT_NAMES = ["A", "B", "C", "D", "E", "F"] as const;
export type PointName = (typeof POINT_NAMES)[number];

export interface Point {
  x: number;
  y: number;
}

export type HeartClass = 0 | 1 | 2;
export const CLASS_NAMES: Record<HeartClass, string> = {
  0: "small",
  1: "normal",
  2: "large",
};

export class DegenerateVertebraError extends Error {}

export function distance(a: Point, b: Point): number {
  return Math.hypot(a.x - b.x, a.y - b.y);
}

/** 6 * (|AB| + |CD|) / |EF|. A,B long axis; C,D short axis; E,F vertebra. */
export function calcVhs(points: readonly Point[]): number {
  if (points.length !== 6) {
    throw new Error(`need exactly six points, got ${points.length}`);
  }
  const ef = distance(points[4], points[5]);
  if (ef <= EF_EPSILON) {
    throw new DegenerateVertebraError("vertebral segment is degenerate");
  }
  const axes = distance(points[0], points[1]) + distance(points[2], points[3]);
  return (VHS_FACTOR * axes) / ef;
}

/** Below 8.2 small, 8.2 through 10 normal (inclusive both ends), above 10 large. */
export function classify(vhs: number): HeartClass {
  if (!Number.isFinite(vhs)) {
    throw new Error(`score must be finite, got ${vhs}`);
  }
  if (vhs < SMALL_MAX) return 0;
  if (vhs <= LARGE_MIN) return 1;
  return 2;
}
