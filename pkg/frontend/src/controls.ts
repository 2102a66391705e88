// Operator nudge controls: while the session is in Manual mode, held keys and
// pointer drags are folded into a target-pose delta (expressed in the current
// end-effector frame) and sent as one manual_action per tick. Keys: WASD moves
// in the plane, R/F moves up/down, Q/E yaws, Space toggles the gripper.

import type { SessionClient } from "./client.js";
import type { Quat, Vec3 } from "./wire.js";

export const KEY_STEP_M = 0.008; // per-tick translation nudge
export const KEY_STEP_RAD = 0.06; // per-tick yaw nudge
export const DRAG_GAIN = 1.0; // world metres per metre of screen-projected drag

export interface PoseDelta {
  p: Vec3;
  q: Quat;
}

export const IDENTITY_Q: Quat = [1, 0, 0, 0];

export function yawQuat(theta: number): Quat {
  return [Math.cos(theta / 2), 0, 0, Math.sin(theta / 2)];
}

/** Map currently held keys to one tick's pose delta; null when idle. */
export function deltaFromKeys(held: ReadonlySet<string>, stepM = KEY_STEP_M, stepRad = KEY_STEP_RAD): PoseDelta | null {
  let x = 0;
  let y = 0;
  let z = 0;
  let yaw = 0;
  if (held.has("KeyW")) y += stepM;
  if (held.has("KeyS")) y -= stepM;
  if (held.has("KeyD")) x += stepM;
  if (held.has("KeyA")) x -= stepM;
  if (held.has("KeyR")) z += stepM;
  if (held.has("KeyF")) z -= stepM;
  if (held.has("KeyQ")) yaw += stepRad;
  if (held.has("KeyE")) yaw -= stepRad;
  if (x === 0 && y === 0 && z === 0 && yaw === 0) return null;
  return { p: [x, y, z], q: yawQuat(yaw) };
}

/** Convert a pointer drag in screen pixels to a planar world delta (top-down view, y up). */
export function dragToDelta(dxPx: number, dyPx: number, pixelsPerMetre: number): Vec3 {
  return [(dxPx / pixelsPerMetre) * DRAG_GAIN, (-dyPx / pixelsPerMetre) * DRAG_GAIN, 0];
}

export class ControlLoop {
  readonly held = new Set<string>();
  gripOpen = true;
  private pendingDrag: Vec3 = [0, 0, 0];
  private sendGrip = false;

  constructor(private client: SessionClient) {}

  keyDown(code: string): void {
    if (code === "Space") {
      this.gripOpen = !this.gripOpen;
      this.sendGrip = true;
      return;
    }
    this.held.add(code);
  }

  keyUp(code: string): void {
    this.held.delete(code);
  }

  addDrag(dxPx: number, dyPx: number, pixelsPerMetre: number): void {
    const d = dragToDelta(dxPx, dyPx, pixelsPerMetre);
    this.pendingDrag = [
      this.pendingDrag[0] + d[0],
      this.pendingDrag[1] + d[1],
      this.pendingDrag[2] + d[2],
    ];
  }

  /** One control tick: emit at most one manual_action from keys + drag. */
  tick(): void {
    if (this.client.view.state?.mode !== "manual") {
      this.pendingDrag = [0, 0, 0];
      this.sendGrip = false;
      return;
    }
    const keyed = deltaFromKeys(this.held);
    const drag = this.pendingDrag;
    this.pendingDrag = [0, 0, 0];
    const dragging = drag[0] !== 0 || drag[1] !== 0 || drag[2] !== 0;
    if (keyed === null && !dragging && !this.sendGrip) return;
    this.sendGrip = false;
    const p: Vec3 = [
      (keyed?.p[0] ?? 0) + drag[0],
      (keyed?.p[1] ?? 0) + drag[1],
      (keyed?.p[2] ?? 0) + drag[2],
    ];
    this.client.send({
      kind: "manual_action",
      p,
      q: keyed?.q ?? IDENTITY_Q,
      grip: this.gripOpen ? 1 : 0,
    });
  }
}
