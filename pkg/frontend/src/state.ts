// The draft pose is the single source of truth: both viewports render it,
// every interaction produces a new draft, and undo replays the history.

import {
  Pose,
  ProjectionGeometry,
  Vec3,
  add,
  cross,
  detectorNormal,
  mmPerPixelAt,
  normalize,
  rayThroughPixel,
  projectPoint,
  rotateAbout,
  scale,
} from "./geometry.js";

export function clonePose(p: Pose): Pose {
  return { origin: [...p.origin], axis: [...p.axis], rollDeg: p.rollDeg };
}

export class DraftHistory {
  private stack: Pose[] = [];
  current: Pose;

  constructor(initial: Pose) {
    this.current = clonePose(initial);
  }

  apply(next: Pose): void {
    this.stack.push(clonePose(this.current));
    this.current = clonePose(next);
  }

  undo(): boolean {
    const prev = this.stack.pop();
    if (!prev) return false;
    this.current = prev;
    return true;
  }

  reset(pose: Pose): void {
    this.stack = [];
    this.current = clonePose(pose);
  }
}

/**
 * Translate within the detector-parallel plane through the current origin
 * of the active view; (du, dv) are pixel deltas in that view.
 */
export function translateInPlane(
  pose: Pose, g: ProjectionGeometry, duPx: number, dvPx: number,
): Pose {
  const mmPerPx = mmPerPixelAt(g, pose.origin);
  const delta = add(
    scale(g.detector_u, duPx * mmPerPx),
    scale(g.detector_v, dvPx * mmPerPx),
  );
  return { ...clonePose(pose), origin: add(pose.origin, delta) };
}

/**
 * Arcball-style pitch/yaw: horizontal drag rotates the axis about the
 * view's vertical direction, vertical drag about the horizontal one.
 * The origin stays fixed; roll is untouched.
 */
export function arcballOrient(
  pose: Pose, g: ProjectionGeometry, duPx: number, dvPx: number,
  gainDegPerPx = 0.5,
): Pose {
  let axis = pose.axis;
  axis = rotateAbout(axis, g.detector_v, duPx * gainDegPerPx);
  axis = rotateAbout(axis, g.detector_u, dvPx * gainDegPerPx);
  return { ...clonePose(pose), axis: normalize(axis) };
}

/** Move along the active view's ray through the current origin. */
export function dolly(
  pose: Pose, g: ProjectionGeometry, steps: number, mmPerStep = 5.0,
): Pose {
  const [u, v] = projectPoint(pose.origin, g);
  const ray = rayThroughPixel(g, u, v);
  return { ...clonePose(pose), origin: add(pose.origin, scale(ray, steps * mmPerStep)) };
}

export function rollBy(pose: Pose, deg: number): Pose {
  let r = pose.rollDeg + deg;
  r = r - 360 * Math.floor((r + 180) / 360);
  if (r === 180) r = -180;
  return { ...clonePose(pose), rollDeg: r };
}

/** Keyboard nudge: 1 px translate or 1 degree orient in the active view. */
export function nudge(
  pose: Pose, g: ProjectionGeometry, key: string, orient: boolean,
): Pose | null {
  const step: Record<string, [number, number]> = {
    ArrowLeft: [-1, 0],
    ArrowRight: [1, 0],
    ArrowUp: [0, -1],
    ArrowDown: [0, 1],
  };
  const d = step[key];
  if (!d) return null;
  if (orient) return arcballOrient(pose, g, d[0], d[1], 1.0);
  return translateInPlane(pose, g, d[0], d[1]);
}

/** Out-of-plane sign and tilt are not edited directly; expose for display. */
export function tiltDeg(pose: Pose, g: ProjectionGeometry): number {
  const n = detectorNormal(g);
  const s = Math.max(-1, Math.min(1, pose.axis[0] * n[0] + pose.axis[1] * n[1] + pose.axis[2] * n[2]));
  return (Math.asin(s) * 180) / Math.PI;
}

/** Build the instrument frame (ex = axis, ey rolled); mirrors the backend. */
export function instrumentFrame(axis: Vec3, rollDeg: number): [Vec3, Vec3, Vec3] {
  const ex = normalize(axis);
  const abs = [Math.abs(ex[0]), Math.abs(ex[1]), Math.abs(ex[2])];
  let idx = 0;
  if (abs[1] < abs[idx]) idx = 1;
  if (abs[2] < abs[idx]) idx = 2;
  const ref: Vec3 = [0, 0, 0];
  ref[idx] = 1;
  let ey = normalize(cross(ex, ref));
  if (rollDeg !== 0) ey = rotateAbout(ey, ex, rollDeg);
  const ez = cross(ex, ey);
  return [ex, ey, ez];
}
