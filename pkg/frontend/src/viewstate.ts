// Client-side view of the session. Everything displayed comes from server
// frames; the client never simulates. The only derived quantity is forecast
// staleness, judged against a caller-supplied clock so tests can drive time.

import type { EpisodeEnd, ForecastUpdate, ServerFrame, StateUpdate } from "./wire.js";

export const FORECAST_STALE_MS = 1000;

export type Connection = "connecting" | "open" | "reconnecting";

export interface ViewState {
  connection: Connection;
  state: StateUpdate | null;
  forecast: ForecastUpdate | null;
  forecastAtMs: number;
  ended: EpisodeEnd | null;
  banner: string | null;
  trail: Array<[number, number, number]>;
}

export const TRAIL_LIMIT = 250;

export function initialViewState(): ViewState {
  return {
    connection: "connecting",
    state: null,
    forecast: null,
    forecastAtMs: 0,
    ended: null,
    banner: null,
    trail: [],
  };
}

/** Fold one server frame into the view; mutates and returns the state. */
export function applyFrame(vs: ViewState, frame: ServerFrame, nowMs: number): ViewState {
  switch (frame.kind) {
    case "state_update": {
      const fresh =
        vs.state === null || vs.state.seed !== frame.seed || vs.state.task !== frame.task || frame.t < vs.state.t;
      if (fresh) {
        vs.trail = [];
        vs.ended = null;
        vs.forecast = null;
      }
      vs.state = frame;
      vs.trail.push([frame.ee.p[0], frame.ee.p[1], frame.ee.p[2]]);
      if (vs.trail.length > TRAIL_LIMIT) vs.trail.splice(0, vs.trail.length - TRAIL_LIMIT);
      break;
    }
    case "forecast_update":
      vs.forecast = frame;
      vs.forecastAtMs = nowMs;
      break;
    case "episode_end":
      vs.ended = frame;
      break;
    case "error":
      vs.banner = frame.message;
      break;
  }
  return vs;
}

export function forecastStale(vs: ViewState, nowMs: number): boolean {
  return vs.forecast !== null && nowMs - vs.forecastAtMs > FORECAST_STALE_MS;
}

export function clearBanner(vs: ViewState): void {
  vs.banner = null;
}
