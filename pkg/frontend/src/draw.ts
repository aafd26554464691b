// Canvas rendering. Human annotations draw blue, model predictions red,
// so the two are never confusable on screen.

import { PredictionOverlay } from "./overlay.js";
import { POINT_NAMES, Point } from "./vhs.js";

export const HUMAN_COLOR = "#2563eb";
export const PREDICTION_COLOR = "#dc2626";

const SEGMENTS: [number, number][] = [
  [0, 1], // long axis
  [2, 3], // short axis
  [4, 5], // vertebral segment
];

function toPixels(p: Point, w: number, h: number): [number, number] {
  return [p.x * w, p.y * h];
}

export function drawPoints(
  ctx: CanvasRenderingContext2D,
  points: readonly Point[],
  w: number,
  h: number,
  color = HUMAN_COLOR,
): void {
  ctx.strokeStyle = color;
  ctx.lineWidth = 1.5;
  for (const [a, b] of SEGMENTS) {
    if (points.length <= b) break;
    const [ax, ay] = toPixels(points[a], w, h);
    const [bx, by] = toPixels(points[b], w, h);
    ctx.beginPath();
    ctx.moveTo(ax, ay);
    ctx.lineTo(bx, by);
    ctx.stroke();
  }

  ctx.fillStyle = color;
  ctx.font = "12px sans-serif";
  points.forEach((p, i) => {
    const [x, y] = toPixels(p, w, h);
    ctx.beginPath();
    ctx.arc(x, y, 4, 0, 2 * Math.PI);
    ctx.fill();
    ctx.fillText(POINT_NAMES[i], x + 6, y - 6);
  });
}

export function drawOverlay(
  ctx: CanvasRenderingContext2D,
  overlay: PredictionOverlay,
  w: number,
  h: number,
  confident: boolean,
): void {
  ctx.save();
  if (!confident) ctx.setLineDash([4, 3]);
  ctx.strokeStyle = PREDICTION_COLOR;
  ctx.fillStyle = PREDICTION_COLOR;
  overlay.mu.forEach((p, i) => {
    const [x, y] = toPixels(p, w, h);
    ctx.beginPath();
    ctx.arc(x, y, 3, 0, 2 * Math.PI);
    ctx.fill();
    // uncertainty radius, normalized units scaled to the wider canvas side
    const r = overlay.radii[i] * Math.max(w, h);
    if (r > 0.5) {
      ctx.beginPath();
      ctx.arc(x, y, r, 0, 2 * Math.PI);
      ctx.stroke();
    }
  });
  ctx.restore();
}
