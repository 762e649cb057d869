// Pinhole projection math. This must agree with the backend's geometry
// module to sub-pixel precision: the overlay is drawn by projecting world
// points with exactly the same formulas the renderer used.

export type Vec3 = [number, number, number];

export interface ProjectionGeometry {
  source: Vec3;
  detector_origin: Vec3;
  detector_u: Vec3;
  detector_v: Vec3;
  pixel_spacing: number;
  image_width: number;
  image_height: number;
}

export interface Pose {
  origin: Vec3;
  axis: Vec3;
  rollDeg: number;
}

export function add(a: Vec3, b: Vec3): Vec3 {
  return [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
}

export function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

export function scale(a: Vec3, s: number): Vec3 {
  return [a[0] * s, a[1] * s, a[2] * s];
}

export function dot(a: Vec3, b: Vec3): number {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

export function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

export function norm(a: Vec3): number {
  return Math.sqrt(dot(a, a));
}

export function normalize(a: Vec3): Vec3 {
  const n = norm(a);
  if (n === 0) throw new Error("cannot normalize zero vector");
  return scale(a, 1 / n);
}

export function rotateAbout(v: Vec3, axis: Vec3, angleDeg: number): Vec3 {
  // Rodrigues rotation of v about a unit axis
  const k = normalize(axis);
  const th = (angleDeg * Math.PI) / 180;
  const c = Math.cos(th);
  const s = Math.sin(th);
  const kxv = cross(k, v);
  const kdv = dot(k, v);
  return add(add(scale(v, c), scale(kxv, s)), scale(k, kdv * (1 - c)));
}

/** Unit detector normal oriented from the source toward the detector. */
export function detectorNormal(g: ProjectionGeometry): Vec3 {
  let n = cross(g.detector_u, g.detector_v);
  if (dot(sub(g.detector_origin, g.source), n) < 0) n = scale(n, -1);
  return normalize(n);
}

/** Continuous pixel coordinates of a world point (ray/plane intersection). */
export function projectPoint(p: Vec3, g: ProjectionGeometry): [number, number] {
  const n = cross(g.detector_u, g.detector_v);
  const d = sub(p, g.source);
  const denom = dot(d, n);
  if (Math.abs(denom) < 1e-12) {
    throw new Error("ray parallel to detector");
  }
  const t = dot(sub(g.detector_origin, g.source), n) / denom;
  const hit = add(g.source, scale(d, t));
  const rel = sub(hit, g.detector_origin);
  return [
    dot(rel, g.detector_u) / g.pixel_spacing,
    dot(rel, g.detector_v) / g.pixel_spacing,
  ];
}

/** World position of a continuous pixel on the detector plane. */
export function pixelToWorld(g: ProjectionGeometry, u: number, v: number): Vec3 {
  return add(
    g.detector_origin,
    add(
      scale(g.detector_u, u * g.pixel_spacing),
      scale(g.detector_v, v * g.pixel_spacing),
    ),
  );
}

/** Unit direction of the viewing ray through a pixel. */
export function rayThroughPixel(g: ProjectionGeometry, u: number, v: number): Vec3 {
  return normalize(sub(pixelToWorld(g, u, v), g.source));
}

/** Distance from the source along the viewing ray of a point. */
export function sourceDistance(g: ProjectionGeometry, p: Vec3): number {
  return norm(sub(p, g.source));
}

/** Millimeters per pixel on the detector-parallel plane through a point. */
export function mmPerPixelAt(g: ProjectionGeometry, p: Vec3): number {
  const n = detectorNormal(g);
  const dSource = dot(sub(p, g.source), n);
  const dDetector = dot(sub(g.detector_origin, g.source), n);
  return (g.pixel_spacing * dSource) / dDetector;
}
