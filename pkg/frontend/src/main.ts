// Split-screen annotation tool: two projections of one scene, a shared
// 5-DOF draft pose, and a projected screw outline as the cursor.
//
// Bindings: left-drag translates in the active view's detector-parallel
// plane, shift-drag orients (pitch/yaw arcball), the wheel moves depth
// along the active view's ray, alt-drag adjusts roll (display only),
// arrows nudge 1 px (shift+arrows 1 degree), ctrl+z undoes, Enter submits.

import {
  fetchResultsCsv,
  fetchScrew,
  fetchSelfTest,
  fetchTask,
  fetchTasks,
  submitPose,
  TaskDetail,
  TaskSummary,
} from "./api.js";
import { Pose, ProjectionGeometry, projectPoint } from "./geometry.js";
import { drawOverlay, projectOverlay } from "./overlay.js";
import {
  DraftHistory,
  arcballOrient,
  dolly,
  nudge,
  rollBy,
  translateInPlane,
} from "./state.js";

interface Viewport {
  canvas: HTMLCanvasElement;
  ctx: CanvasRenderingContext2D;
  image: HTMLImageElement;
  geometry: ProjectionGeometry;
}

const state = {
  annotator: "anonymous",
  tasks: [] as TaskSummary[],
  task: null as TaskDetail | null,
  outline: [] as number[][],
  viewports: [] as Viewport[],
  history: null as DraftHistory | null,
  activeView: 0,
  startedAt: null as number | null,
  selftest: false,
};

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`#${id} missing`);
  return node as T;
}

function status(text: string): void {
  el<HTMLDivElement>("status").textContent = text;
}

function redraw(): void {
  const draft = state.history?.current;
  if (!draft) return;
  for (const vp of state.viewports) {
    vp.ctx.clearRect(0, 0, vp.canvas.width, vp.canvas.height);
    vp.ctx.drawImage(vp.image, 0, 0);
    try {
      drawOverlay(vp.ctx, projectOverlay(state.outline, draft, vp.geometry));
    } catch {
      // pose momentarily unprojectable in this view: leave the image bare
    }
  }
  const d = state.history!.current;
  el<HTMLDivElement>("pose-readout").textContent =
    `origin [${d.origin.map((x) => x.toFixed(1)).join(", ")}] mm  ` +
    `axis [${d.axis.map((x) => x.toFixed(3)).join(", ")}]  ` +
    `roll ${d.rollDeg.toFixed(0)} deg`;
}

function apply(next: Pose): void {
  state.history!.apply(next);
  redraw();
}

function initialDraft(task: TaskDetail): Pose {
  // start on the principal ray of view 0, axis along the image x direction
  const g = task.views[0].geometry;
  const n: Pose = {
    origin: [0, 0, 0],
    axis: [...g.detector_u] as Pose["axis"],
    rollDeg: 0,
  };
  return n;
}

async function loadTask(taskId: string): Promise<void> {
  const task = await fetchTask(taskId);
  state.task = task;
  state.startedAt = Date.now() / 1000;
  const host = el<HTMLDivElement>("views");
  host.innerHTML = "";
  state.viewports = [];
  for (const [idx, view] of task.views.entries()) {
    const canvas = document.createElement("canvas");
    canvas.width = view.geometry.image_width;
    canvas.height = view.geometry.image_height;
    canvas.className = "viewport";
    canvas.dataset.view = String(idx);
    host.appendChild(canvas);
    const ctx = canvas.getContext("2d");
    if (!ctx) throw new Error("2d context unavailable");
    const image = new Image();
    image.src = view.image_url;
    await image.decode();
    state.viewports.push({ canvas, ctx, image, geometry: view.geometry });
    bindPointer(canvas, idx);
  }
  state.history = new DraftHistory(initialDraft(task));
  status(`task ${task.task_id} (${task.mode} mode)`);
  redraw();
}

function bindPointer(canvas: HTMLCanvasElement, viewIdx: number): void {
  let dragging = false;
  let lastX = 0;
  let lastY = 0;

  canvas.addEventListener("pointerdown", (ev) => {
    dragging = true;
    state.activeView = viewIdx;
    lastX = ev.offsetX;
    lastY = ev.offsetY;
    canvas.setPointerCapture(ev.pointerId);
  });
  canvas.addEventListener("pointerup", () => {
    dragging = false;
  });
  canvas.addEventListener("pointermove", (ev) => {
    if (!dragging || !state.history) return;
    const du = ev.offsetX - lastX;
    const dv = ev.offsetY - lastY;
    lastX = ev.offsetX;
    lastY = ev.offsetY;
    const g = state.viewports[viewIdx].geometry;
    const draft = state.history.current;
    if (ev.altKey) {
      apply(rollBy(draft, du * 0.5));
    } else if (ev.shiftKey) {
      apply(arcballOrient(draft, g, du, dv));
    } else {
      apply(translateInPlane(draft, g, du, dv));
    }
  });
  canvas.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    if (!state.history) return;
    state.activeView = viewIdx;
    const g = state.viewports[viewIdx].geometry;
    const steps = ev.deltaY > 0 ? 1 : -1;
    apply(dolly(state.history.current, g, steps));
  });
}

function bindKeyboard(): void {
  window.addEventListener("keydown", (ev) => {
    if (!state.history) return;
    if ((ev.ctrlKey || ev.metaKey) && ev.key.toLowerCase() === "z") {
      ev.preventDefault();
      if (state.history.undo()) redraw();
      return;
    }
    if (ev.key === "Enter") {
      void submitCurrent();
      return;
    }
    const g = state.viewports[state.activeView]?.geometry;
    if (!g) return;
    const next = nudge(state.history.current, g, ev.key, ev.shiftKey);
    if (next) {
      ev.preventDefault();
      apply(next);
    }
  });
}

function renderTaskList(): void {
  const host = el<HTMLUListElement>("task-list");
  host.innerHTML = "";
  for (const t of state.tasks) {
    const li = document.createElement("li");
    li.textContent = `${t.task_id} ${t.status === "done" ? "[done]" : ""}`;
    li.className = t.status;
    li.onclick = () => void loadTask(t.task_id);
    host.appendChild(li);
  }
}

async function refreshTasks(): Promise<void> {
  state.tasks = await fetchTasks(state.annotator);
  renderTaskList();
}

async function submitCurrent(): Promise<void> {
  if (!state.task || !state.history) return;
  try {
    const r = await submitPose(state.task.task_id, state.annotator,
      state.history.current, state.startedAt);
    if (r.views) {
      const v0 = r.views[0];
      status(`submitted: ${v0.pos_err_mm.toFixed(2)} mm, ` +
        `${v0.fwd_angle_err_deg.toFixed(1)} deg (view 0)`);
    } else {
      status("submitted (errors withheld until the session closes)");
    }
    await refreshTasks();
    const next = state.tasks.find((t) => t.status === "pending");
    if (next) {
      await loadTask(next.task_id);
    } else {
      const csv = await fetchResultsCsv();
      const n = Math.max(csv.trim().split("\n").length - 1, 0);
      status(`all tasks done; ${n} scored view rows recorded`);
    }
  } catch (err) {
    // a rejected submission keeps the draft editable
    status(String(err));
  }
}

/**
 * Self-test: fetch a known pose from the service, project its origin with
 * the client math, and compare against the server-computed pixel location
 * in both viewports (must agree within 1 px).
 */
async function runSelfTest(): Promise<void> {
  const test = await fetchSelfTest();
  await loadTask(test.task_id);
  const pose: Pose = {
    origin: test.pose.origin as Pose["origin"],
    axis: test.pose.axis as Pose["axis"],
    rollDeg: test.pose.roll_deg,
  };
  state.history!.reset(pose);
  redraw();
  const deltas: number[] = [];
  for (const [idx, vp] of state.viewports.entries()) {
    const [u, v] = projectPoint(pose.origin, vp.geometry);
    const [su, sv] = test.image_poses[idx].x_instr;
    deltas.push(Math.hypot(u - su, v - sv));
  }
  const worst = Math.max(...deltas);
  const ok = worst < 1.0;
  status(`SELF-TEST ${ok ? "PASS" : "FAIL"}: overlay origin within ` +
    `${worst.toExponential(2)} px of the rendered screw origin ` +
    `(views: ${deltas.map((d) => d.toExponential(2)).join(", ")})`);
}

async function start(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  state.annotator = params.get("annotator") ?? "anonymous";
  state.selftest = params.get("selftest") === "1";
  el<HTMLSpanElement>("annotator").textContent = state.annotator;
  bindKeyboard();
  el<HTMLButtonElement>("submit").onclick = () => void submitCurrent();
  el<HTMLButtonElement>("undo").onclick = () => {
    if (state.history?.undo()) redraw();
  };

  const screw = await fetchScrew("default");
  state.outline = screw.outline;
  await refreshTasks();
  if (state.selftest) {
    await runSelfTest();
    return;
  }
  const first = state.tasks.find((t) => t.status === "pending")
    ?? state.tasks[0];
  if (first) await loadTask(first.task_id);
  else status("no tasks available");
}

void start();
