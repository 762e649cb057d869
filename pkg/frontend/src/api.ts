// Thin typed client for the annotation service endpoints.

import { Pose, ProjectionGeometry } from "./geometry.js";

export interface TaskSummary {
  task_id: string;
  status: "pending" | "done";
}

export interface TaskView {
  image_id: string;
  image_url: string;
  geometry: ProjectionGeometry;
}

export interface TaskDetail {
  task_id: string;
  screw_id: string;
  mode: "practice" | "study";
  views: TaskView[];
}

export interface ScrewInfo {
  outline: number[][];
  dimensions: Record<string, number>;
}

export interface ViewScore {
  view: number;
  pos_err_mm: number;
  fwd_angle_err_deg: number;
  tilt_gt_deg: number;
}

export interface SubmitResponse {
  task_id: string;
  annotator: string;
  attempt: number;
  views?: ViewScore[];
}

export interface SelfTestCase {
  task_id: string;
  pose: { origin: number[]; axis: number[]; roll_deg: number };
  image_poses: { x_instr: [number, number]; alpha_deg: number }[];
}

async function getJson<T>(url: string): Promise<T> {
  const r = await fetch(url);
  if (!r.ok) throw new Error(`${url}: HTTP ${r.status}`);
  return (await r.json()) as T;
}

export function fetchTasks(annotator: string): Promise<TaskSummary[]> {
  return getJson(`/api/tasks?annotator=${encodeURIComponent(annotator)}`);
}

export function fetchTask(taskId: string): Promise<TaskDetail> {
  return getJson(`/api/tasks/${encodeURIComponent(taskId)}`);
}

export function fetchScrew(screwId: string): Promise<ScrewInfo> {
  return getJson(`/api/screw/${encodeURIComponent(screwId)}`);
}

export function fetchSelfTest(): Promise<SelfTestCase> {
  return getJson("/api/selftest");
}

export async function submitPose(
  taskId: string, annotator: string, pose: Pose, startedAt: number | null,
): Promise<SubmitResponse> {
  const r = await fetch(`/api/tasks/${encodeURIComponent(taskId)}/annotations`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({
      annotator,
      started_at: startedAt,
      pose: { origin: pose.origin, axis: pose.axis, roll_deg: pose.rollDeg },
    }),
  });
  if (!r.ok) {
    const detail = await r.text();
    throw new Error(`submit failed (HTTP ${r.status}): ${detail}`);
  }
  return (await r.json()) as SubmitResponse;
}

export async function fetchResultsCsv(): Promise<string> {
  const r = await fetch("/api/results.csv");
  if (!r.ok) throw new Error(`results: HTTP ${r.status}`);
  return await r.text();
}
