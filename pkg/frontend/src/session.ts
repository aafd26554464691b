// Editable annotation state for one sample. Points go down strictly in
// protocol order (A,B long axis, then C,D short axis, then E,F
// vertebra); the score preview exists only once all six are placed and
// the vertebral segment is non-degenerate.

import {
  DegenerateVertebraError,
  HeartClass,
  POINT_NAMES,
  Point,
  calcVhs,
  classify,
  distance,
} from "./vhs.js";

export interface Preview {
  vhs: number;
  heartClass: HeartClass;
}

export type PlaceResult =
  | { kind: "placed"; index: number }
  | { kind: "dragged"; index: number }
  | { kind: "rejected"; reason: string };

function inImage(p: Point): boolean {
  return p.x >= 0 && p.x <= 1 && p.y >= 0 && p.y <= 1;
}

export class AnnotationSession {
  points: Point[] = [];
  dirty = false;
  /** Last {vhs, class} acknowledged by the server, if any. */
  confirmed: Preview | null = null;

  constructor(
    public readonly sampleId: string,
    existing?: readonly Point[],
    public readonly hitRadius = 0.02,
  ) {
    if (existing) {
      if (existing.length !== 6) {
        throw new Error("an existing annotation has exactly six points");
      }
      this.points = existing.map((p) => ({ ...p }));
    }
  }

  get complete(): boolean {
    return this.points.length === 6;
  }

  /** Name of the next point a click would place, null when all six exist. */
  get nextName(): string | null {
    return this.complete ? null : POINT_NAMES[this.points.length];
  }

  /** Index of the placed point within hitRadius of p, or -1. */
  hitTest(p: Point): number {
    let best = -1;
    let bestDist = this.hitRadius;
    this.points.forEach((q, i) => {
      const d = distance(p, q);
      if (d <= bestDist) {
        best = i;
        bestDist = d;
      }
    });
    return best;
  }

  /** A click: drags the nearest existing point when one is in reach,
   * otherwise places the next point in protocol order. */
  place(p: Point): PlaceResult {
    if (!inImage(p)) {
      return { kind: "rejected", reason: "outside the image" };
    }
    const hit = this.hitTest(p);
    if (hit >= 0) {
      this.points[hit] = { ...p };
      this.dirty = true;
      return { kind: "dragged", index: hit };
    }
    if (this.complete) {
      return { kind: "rejected", reason: "all six points are placed" };
    }
    this.points.push({ ...p });
    this.dirty = true;
    return { kind: "placed", index: this.points.length - 1 };
  }

  /** Move one placed point directly (mouse drag). */
  dragTo(index: number, p: Point): PlaceResult {
    if (index < 0 || index >= this.points.length) {
      return { kind: "rejected", reason: "no such point" };
    }
    if (!inImage(p)) {
      return { kind: "rejected", reason: "outside the image" };
    }
    this.points[index] = { ...p };
    this.dirty = true;
    return { kind: "dragged", index };
  }

  /** Remove the most recently placed point. */
  undo(): boolean {
    if (this.points.length === 0) return false;
    this.points.pop();
    this.dirty = true;
    return true;
  }

  /** Adopt a predicted mean as the working annotation. */
  acceptPrediction(mu: readonly Point[]): void {
    if (mu.length !== 6) throw new Error("a prediction has exactly six points");
    this.points = mu.map((p) => ({ ...p }));
    this.dirty = true;
  }

  get degenerate(): boolean {
    if (!this.complete) return false;
    try {
      calcVhs(this.points);
      return false;
    } catch (err) {
      if (err instanceof DegenerateVertebraError) return true;
      throw err;
    }
  }

  /** Live score, or null while incomplete or degenerate. */
  preview(): Preview | null {
    if (!this.complete || this.degenerate) return null;
    const vhs = calcVhs(this.points);
    return { vhs, heartClass: classify(vhs) };
  }

  get canSave(): boolean {
    return this.complete && !this.degenerate;
  }

  asPairs(): [number, number][] {
    return this.points.map((p) => [p.x, p.y]);
  }

  /** Record a successful save: remember the server's verdict, clear dirty. */
  markSaved(confirmed: Preview): void {
    this.confirmed = confirmed;
    this.dirty = false;
  }
}
