// Overlay consistency acceptance: the client-side projection of a known
// pose must land on the rendered screw origin in both viewports. The
// fixture carries backend-computed ground truth (pose plus per-view
// x_instr); the live UI repeats this check against /api/selftest.

import { describe, expect, it } from "vitest";
import { readFileSync } from "node:fs";

import { Pose, ProjectionGeometry, projectPoint } from "../src/geometry.js";

const fixtures = JSON.parse(readFileSync(
  new URL("./fixtures/projection_cases.json", import.meta.url), "utf-8"));

describe("acceptance: overlay origin consistency (criterion 9)", () => {
  it("overlay origin lands within 1 px of the rendered screw origin", () => {
    const st = fixtures.selftest_case;
    const pose: Pose = {
      origin: st.pose.origin as Pose["origin"],
      axis: st.pose.axis as Pose["axis"],
      rollDeg: st.pose.roll_deg,
    };
    const deltas: number[] = [];
    st.views.forEach((geometry: ProjectionGeometry, idx: number) => {
      const [u, v] = projectPoint(pose.origin, geometry);
      const [su, sv] = st.image_poses[idx].x_instr;
      deltas.push(Math.hypot(u - su, v - sv));
    });
    const worst = Math.max(...deltas);
    // eslint-disable-next-line no-console
    console.log(`ACCEPTANCE 9 ${worst < 1 ? "PASS" : "FAIL"}: ` +
      `overlay origin within ${worst.toExponential(2)} px in both viewports`);
    expect(worst).toBeLessThan(1.0);
    expect(deltas.length).toBe(2);
  });
});
