// Canvas point splatter. Points are colored by height only: the annotator
// must never see cluster boundaries or any label-derived coloring, and the
// highlighted point is the one visual exception.

import { OrbitCamera } from "./camera.js";
import type { PointPayload } from "./api.js";

export const MAX_RENDER_POINTS = 50_000;

// Subset of CanvasRenderingContext2D the renderer touches; tests inject a
// recording fake.
export interface Draw2D {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  clearRect(x: number, y: number, w: number, h: number): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  fill(): void;
  stroke(): void;
}

export function decimate(points: PointPayload[], keepIndex: number, cap: number): PointPayload[] {
  if (points.length <= cap) {
    return points;
  }
  const stride = Math.ceil(points.length / cap);
  const out: PointPayload[] = [];
  let kept = false;
  for (let i = 0; i < points.length; i += stride) {
    out.push(points[i]);
    if (points[i].index === keepIndex) {
      kept = true;
    }
  }
  if (!kept) {
    const hl = points.find((p) => p.index === keepIndex);
    if (hl) {
      out.push(hl);
    }
  }
  return out;
}

export function heightColor(z: number, zMin: number, zMax: number): string {
  const t = zMax > zMin ? (z - zMin) / (zMax - zMin) : 0.5;
  const r = Math.round(40 + 200 * t);
  const g = Math.round(70 + 140 * t);
  const b = Math.round(180 - 120 * t);
  return `rgb(${r},${g},${b})`;
}

export class PointCloudRenderer {
  constructor(
    private readonly ctx: Draw2D,
    readonly width: number,
    readonly height: number,
    readonly camera: OrbitCamera,
  ) {}

  render(context: PointPayload[], highlight: PointPayload | null): void {
    const ctx = this.ctx;
    ctx.fillStyle = "#10141a";
    ctx.clearRect(0, 0, this.width, this.height);
    ctx.fillRect(0, 0, this.width, this.height);

    const points = decimate(
      context,
      highlight ? highlight.index : -1,
      MAX_RENDER_POINTS,
    );
    if (points.length === 0) {
      return;
    }
    let zMin = Infinity;
    let zMax = -Infinity;
    for (const p of points) {
      if (p.z < zMin) zMin = p.z;
      if (p.z > zMax) zMax = p.z;
    }
    for (const p of points) {
      if (highlight && p.index === highlight.index) {
        continue; // drawn last, on top
      }
      const pr = this.camera.project(p, this.width, this.height);
      if (!pr.visible) {
        continue;
      }
      ctx.fillStyle = heightColor(p.z, zMin, zMax);
      ctx.beginPath();
      ctx.arc(pr.sx, pr.sy, 1.6, 0, 2 * Math.PI);
      ctx.fill();
    }
    if (highlight) {
      const pr = this.camera.project(highlight, this.width, this.height);
      if (pr.visible) {
        ctx.fillStyle = "#ff3860";
        ctx.beginPath();
        ctx.arc(pr.sx, pr.sy, 5, 0, 2 * Math.PI);
        ctx.fill();
        ctx.strokeStyle = "#ffffff";
        ctx.lineWidth = 2;
        ctx.beginPath();
        ctx.arc(pr.sx, pr.sy, 9, 0, 2 * Math.PI);
        ctx.stroke();
      }
    }
  }
}
