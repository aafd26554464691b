// Read-only model-prediction overlay: mean keypoints with a per-point
// uncertainty radius of max(sigma_x, sigma_y). The confident flag uses
// the same strict inequality as the server's pool filter.

import { Point } from "./vhs.js";

export interface PredictionOverlay {
  mu: Point[];
  radii: number[];
  maxSigma: number;
}

export function buildOverlay(
  mu: readonly [number, number][],
  sigma: readonly [number, number][],
): PredictionOverlay {
  if (mu.length !== 6 || sigma.length !== 6) {
    throw new Error("a prediction carries six mean points and six spreads");
  }
  const radii = sigma.map(([sx, sy]) => Math.max(sx, sy));
  return {
    mu: mu.map(([x, y]) => ({ x, y })),
    radii,
    maxSigma: Math.max(...radii),
  };
}

/** Strictly below tau counts as confident, exactly tau does not. */
export function isConfident(overlay: PredictionOverlay, tau: number): boolean {
  return overlay.maxSigma < tau;
}
