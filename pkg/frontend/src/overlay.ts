// Screw outline overlay: place the 2D cross-section polyline in the world
// using the instrument frame, project every vertex per view, draw.

import {
  Pose,
  ProjectionGeometry,
  Vec3,
  add,
  projectPoint,
  scale,
} from "./geometry.js";
import { instrumentFrame } from "./state.js";

/** 3D positions of the outline vertices for a draft pose. */
export function outlineWorldPoints(outline: number[][], pose: Pose): Vec3[] {
  const [ex, ey] = instrumentFrame(pose.axis, pose.rollDeg);
  return outline.map(([x, y]) =>
    add(pose.origin, add(scale(ex, x), scale(ey, y))),
  );
}

/** Projected outline (pixel coordinates) plus the projected origin. */
export function projectOverlay(
  outline: number[][], pose: Pose, g: ProjectionGeometry,
): { path: [number, number][]; origin: [number, number] } {
  const path = outlineWorldPoints(outline, pose).map((p) =>
    projectPoint(p, g),
  );
  return { path, origin: projectPoint(pose.origin, g) };
}

export function drawOverlay(
  ctx: CanvasRenderingContext2D,
  overlay: { path: [number, number][]; origin: [number, number] },
  color = "#35d06a",
): void {
  ctx.save();
  ctx.strokeStyle = color;
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  overlay.path.forEach(([u, v], i) => {
    if (i === 0) ctx.moveTo(u, v);
    else ctx.lineTo(u, v);
  });
  ctx.stroke();

  const [ou, ov] = overlay.origin;
  ctx.beginPath();
  ctx.arc(ou, ov, 3, 0, 2 * Math.PI);
  ctx.fillStyle = color;
  ctx.fill();
  ctx.restore();
}
