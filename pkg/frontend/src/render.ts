// Top-down scene rendering, split in two: buildDrawList turns a ViewState
// into plain geometry (testable, no DOM), and main.ts rasterizes that onto a
// canvas. Past trail is yellow, forecast blue (grey once stale), matching
// the input/output color convention of the forecasting model's telemetry.

import type { ViewState } from "./viewstate.js";
import { forecastStale } from "./viewstate.js";
import type { Quat, Vec3 } from "./wire.js";

export interface Camera {
  centerX: number;
  centerY: number;
  scale: number; // pixels per meter
  width: number;
  height: number;
}

export interface Polyline {
  id: string;
  points: Array<[number, number]>;
  color: string;
  width: number;
}

export interface Polygon {
  id: string;
  points: Array<[number, number]>;
  fill: string;
  stroke: string;
}

export interface Marker {
  id: string;
  x: number;
  y: number;
  radius: number;
  color: string;
  filled: boolean;
}

export interface Badge {
  id: string;
  text: string;
  color: string;
}

export interface DrawList {
  polylines: Polyline[];
  polygons: Polygon[];
  markers: Marker[];
  badges: Badge[];
  border: string | null;
  banner: string | null;
}

export const PAST_COLOR = "#f5c518";
export const FORECAST_COLOR = "#3b7bf6";
export const STALE_COLOR = "#9aa0a6";
export const MANUAL_BORDER = "#e0303b";

export function defaultCamera(width: number, height: number): Camera {
  return { centerX: 0.28, centerY: -0.04, scale: Math.min(width, height) / 0.9, width, height };
}

export function worldToScreen(cam: Camera, x: number, y: number): [number, number] {
  // world x grows to the right, world y grows up
  return [
    cam.width / 2 + (x - cam.centerX) * cam.scale,
    cam.height / 2 - (y - cam.centerY) * cam.scale,
  ];
}

function yawOf(q: Quat): number {
  return 2.0 * Math.atan2(q[3], q[0]);
}

function boxOutline(cam: Camera, p: Vec3, q: Quat, hx: number, hy: number): Array<[number, number]> {
  const yaw = yawOf(q);
  const c = Math.cos(yaw);
  const s = Math.sin(yaw);
  const signs: Array<[number, number]> = [
    [-1, -1],
    [1, -1],
    [1, 1],
    [-1, 1],
  ];
  return signs.map(([sx, sy]) => {
    const lx = sx * hx;
    const ly = sy * hy;
    return worldToScreen(cam, p[0] + c * lx - s * ly, p[1] + s * lx + c * ly);
  });
}

export function buildDrawList(vs: ViewState, cam: Camera, nowMs: number): DrawList {
  const list: DrawList = {
    polylines: [],
    polygons: [],
    markers: [],
    badges: [],
    border: null,
    banner: vs.banner,
  };
  const st = vs.state;
  if (st === null) {
    list.badges.push({ id: "mode", text: vs.connection, color: STALE_COLOR });
    return list;
  }

  if (st.drawer !== null) {
    const d = st.drawer;
    list.polygons.push({
      id: "drawer",
      points: boxOutline(cam, d.base_p, d.base_q, d.interior_extents[0], d.interior_extents[1]),
      fill: "none",
      stroke: "#7a6f5d",
    });
    const open: Vec3 = [
      d.base_p[0] + d.axis[0] * d.travel,
      d.base_p[1] + d.axis[1] * d.travel,
      d.base_p[2] + d.axis[2] * d.travel,
    ];
    list.polygons.push({
      id: "drawer-body",
      points: boxOutline(cam, open, d.base_q, d.interior_extents[0], d.interior_extents[1]),
      fill: "rgba(122,111,93,0.25)",
      stroke: "#7a6f5d",
    });
    const [hx, hy] = worldToScreen(cam, d.handle[0], d.handle[1]);
    list.markers.push({ id: "drawer-handle", x: hx, y: hy, radius: 4, color: "#7a6f5d", filled: d.grasped });
  }

  for (const obj of st.objects) {
    list.polygons.push({
      id: `object:${obj.id}`,
      points: boxOutline(cam, obj.p, obj.q, obj.extents[0], obj.extents[1]),
      fill: obj.attached ? "rgba(59,123,246,0.25)" : "rgba(110,160,110,0.35)",
      stroke: obj.attached ? FORECAST_COLOR : "#4d7a4d",
    });
  }

  if (vs.trail.length >= 2) {
    list.polylines.push({
      id: "past-trail",
      points: vs.trail.map((p) => worldToScreen(cam, p[0], p[1])),
      color: PAST_COLOR,
      width: 2,
    });
  }

  if (vs.forecast !== null) {
    const stale = forecastStale(vs, nowMs);
    list.polylines.push({
      id: "forecast-trail",
      points: vs.forecast.ee.map((pose) => worldToScreen(cam, pose.p[0], pose.p[1])),
      color: stale ? STALE_COLOR : FORECAST_COLOR,
      width: 2,
    });
  }

  const [ex, ey] = worldToScreen(cam, st.ee.p[0], st.ee.p[1]);
  // height shown by marker size: low and close to the table reads small
  const radius = 4 + st.ee.p[2] * 24;
  list.markers.push({
    id: "ee",
    x: ex,
    y: ey,
    radius,
    color: st.gripper < 0.5 ? MANUAL_BORDER : "#e8eaed",
    filled: st.gripper < 0.5,
  });

  const manual = st.mode === "manual";
  list.border = manual ? MANUAL_BORDER : null;
  list.badges.push({
    id: "mode",
    text: manual ? "Manual" : "Auto",
    color: manual ? MANUAL_BORDER : "#2e7d32",
  });
  list.badges.push({
    id: "counters",
    text:
      `t=${st.t}  manual ${st.counters.manual_time_s.toFixed(2)}s` +
      `  interventions ${st.counters.interventions}`,
    color: "#555555",
  });
  if (vs.ended !== null) {
    list.badges.push({
      id: "episode",
      text: vs.ended.success ? "success" : "episode over",
      color: vs.ended.success ? "#2e7d32" : MANUAL_BORDER,
    });
  }
  return list;
}
