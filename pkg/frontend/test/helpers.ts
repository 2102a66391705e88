// Shared frame builders for the unit tests.

import type { ForecastUpdate, StateUpdate, WirePose } from "../src/wire.js";

export function mkState(overrides: Partial<StateUpdate> = {}): StateUpdate {
  return {
    kind: "state_update",
    t: 0,
    time_s: 0,
    mode: "auto",
    task: "A_stack",
    seed: 1,
    ee: { p: [0.25, -0.15, 0.2], q: [1, 0, 0, 0] },
    gripper: 1,
    holding: null,
    objects: [
      {
        id: "block_a",
        p: [0.3, 0.1, 0.025],
        q: [1, 0, 0, 0],
        extents: [0.025, 0.025, 0.025],
        attached: false,
      },
    ],
    drawer: null,
    counters: { manual_steps: 0, manual_time_s: 0, interventions: 0 },
    ...overrides,
  };
}

export function mkForecast(n: number, t = 1): ForecastUpdate {
  const ee: WirePose[] = [];
  const grip: number[] = [];
  for (let i = 0; i < n; i++) {
    ee.push({ p: [0.25 + i * 0.001, -0.15, 0.2], q: [1, 0, 0, 0] });
    grip.push(1);
  }
  return { kind: "forecast_update", t, ee, grip };
}
