// Wire schema for the live session service. JSON text frames; the "kind"
// field selects the shape. Poses are {p: [x,y,z], q: [w,x,y,z]}; manual
// actions give the target pose in the current end-effector frame.

export type Vec3 = [number, number, number];
export type Quat = [number, number, number, number];

export interface WirePose {
  p: Vec3;
  q: Quat;
}

export interface WireObject extends WirePose {
  id: string;
  extents: Vec3;
  attached: boolean;
}

export interface WireDrawer {
  travel: number;
  max_travel: number;
  max_reached: number;
  grasped: boolean;
  base_p: Vec3;
  base_q: Quat;
  axis: Vec3;
  handle: Vec3;
  interior_extents: Vec3;
}

export interface StateUpdate {
  kind: "state_update";
  t: number;
  time_s: number;
  mode: "auto" | "manual";
  task: string;
  seed: number;
  ee: WirePose;
  gripper: number;
  holding: string | null;
  objects: WireObject[];
  drawer: WireDrawer | null;
  counters: {
    manual_steps: number;
    manual_time_s: number;
    interventions: number;
  };
}

export interface ForecastUpdate {
  kind: "forecast_update";
  t: number;
  ee: WirePose[];
  grip: number[];
}

export interface EpisodeEnd {
  kind: "episode_end";
  t: number;
  success: boolean;
  steps: number;
  manual_steps: number;
  manual_time_s: number;
  interventions: number;
  task: string;
  seed: number;
}

export interface ErrorFrame {
  kind: "error";
  message: string;
}

export type ServerFrame = StateUpdate | ForecastUpdate | EpisodeEnd | ErrorFrame;

export interface ResetMsg {
  kind: "reset";
  task: string;
  seed: number;
}

export interface TakeoverMsg {
  kind: "takeover";
}

export interface ReleaseMsg {
  kind: "release";
}

export interface ManualActionMsg {
  kind: "manual_action";
  p: Vec3;
  q: Quat;
  grip: 0 | 1;
}

export type ClientMsg = ResetMsg | TakeoverMsg | ReleaseMsg | ManualActionMsg;

const KINDS = new Set(["state_update", "forecast_update", "episode_end", "error"]);

/** Parse one server frame; null for anything that is not a known frame. */
export function parseFrame(text: string): ServerFrame | null {
  let raw: unknown;
  try {
    raw = JSON.parse(text);
  } catch {
    return null;
  }
  if (typeof raw !== "object" || raw === null) return null;
  const kind = (raw as { kind?: unknown }).kind;
  if (typeof kind !== "string" || !KINDS.has(kind)) return null;
  return raw as ServerFrame;
}

export function encode(msg: ClientMsg): string {
  return JSON.stringify(msg);
}
