"""Closed-loop control: model-driven stepping with a human-style override lane.

A ControlSession keeps the executed (state, action) history, forecasts the
remainder of the episode from it, and can either execute the model's next
action or an externally supplied one. Benchmarks compare three drivers:
the model alone, the scripted operator alone, and the model with scripted
corrective bursts whenever the forecast stops making progress toward the
operator's current waypoint.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .demos import DEFAULT_PACE, Waypoint, build_plan
from .geometry import (
    DEFAULT_BIN_SIZE,
    BoxExtents,
    Pose,
    corner_distance,
    positional_tokens,
    quat_angle_between,
    quat_canonical,
    quat_slerp,
)
from .model import (
    ACTION_DIM,
    ActionVector,
    ModelConfig,
    StateVector,
    Window,
    decode_action,
    decode_state,
    forward_masked,
    state_dim,
)
from .simworld import (
    DT,
    OMEGA_MAX,
    V_MAX,
    EpisodeFault,
    Scene,
    TaskSpec,
    check_success,
    observe,
    sample_scene,
    step,
)


@dataclass(frozen=True)
class RolloutConfig:
    """Closed-loop horizon settings; history plus forecast must fit the model window."""

    T_p_eval: int = 250
    T_f: int = 150
    T_e: int = 10
    warmup_steps: int = 1
    pace: float = DEFAULT_PACE
    progress_frac: float = 0.25
    gripper_weight: float = 0.4
    bin_size: float = DEFAULT_BIN_SIZE
    extents: BoxExtents = BoxExtents()

    def __post_init__(self):
        if self.T_p_eval < 1 or self.T_f < 1 or self.T_e < 1:
            raise ValueError("T_p_eval, T_f and T_e must all be at least 1")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be at least 1")
        if not 0.0 < self.pace <= 1.0:
            raise ValueError(f"pace must be in (0, 1], got {self.pace}")


@dataclass(frozen=True)
class Forecast:
    """Model completion of the episode: decoded states and actions from T_p onward."""

    T_p: int
    states: np.ndarray
    actions: np.ndarray

    def ee_pose(self, i: int) -> Pose:
        return Pose.from_flat(self.states[i, :7])

    def action_at(self, i: int) -> ActionVector:
        return ActionVector.from_flat(self.actions[i])


class ControlSession:
    """One live episode: real scene, executed history, forecasting, stepping."""

    def __init__(
        self,
        params,
        model_config: ModelConfig,
        task: TaskSpec,
        scene: Scene,
        config: RolloutConfig | None = None,
    ):
        self.config = config or RolloutConfig()
        if self.config.T_p_eval + self.config.T_f > model_config.T_s:
            raise ValueError(
                f"history {self.config.T_p_eval} + forecast {self.config.T_f} "
                f"exceeds the model window {model_config.T_s}"
            )
        if task.j_max != model_config.j_max:
            raise ValueError(
                f"task expects j_max={task.j_max}, model built for {model_config.j_max}"
            )
        self.params = params
        self.model_config = model_config
        self.task = task
        self.scene = scene
        self.history_states: list[np.ndarray] = []
        self.history_actions: list[np.ndarray] = []
        self.steps = 0
        self.manual_steps = 0

    @property
    def dt(self) -> float:
        return self.scene.dt

    @property
    def time_s(self) -> float:
        return self.steps * self.scene.dt

    @property
    def manual_time_s(self) -> float:
        return self.manual_steps * self.scene.dt

    def observe_now(self) -> StateVector:
        return observe(self.scene, self.task)

    def success(self) -> bool:
        return check_success(self.scene, self.task)

    def _window(self) -> Window:
        cfg = self.model_config
        T_p = min(len(self.history_states), self.config.T_p_eval)
        if T_p == 0:
            raise ValueError("cannot forecast from an empty history")
        states = np.zeros((cfg.T_s, state_dim(cfg.j_max)))
        actions = np.zeros((cfg.T_s, ACTION_DIM))
        states[:T_p] = self.history_states[-T_p:]
        actions[:T_p] = self.history_actions[-T_p:]
        tokens = np.zeros(cfg.T_s, dtype=np.int64)
        path = [Pose.from_flat(row[:7]) for row in states[:T_p]]
        tokens[:T_p] = positional_tokens(
            path, self.config.extents, bin_size=self.config.bin_size, vocab_max=cfg.vocab_max
        )
        return Window.masked_from(states, actions, tokens, T_p)

    def forecast(self) -> Forecast:
        """Pure read: completes the episode from the recorded history."""
        window = self._window()
        s_out, a_out = forward_masked(window, self.params, self.model_config)
        cfg = self.model_config
        T_p = window.T_p
        span = range(T_p, T_p + self.config.T_f)
        states = np.stack([decode_state(s_out.data[0, t], cfg.j_max).flat(cfg.j_max) for t in span])
        actions = np.stack([decode_action(a_out.data[0, t]).flat() for t in span])
        return Forecast(T_p=T_p, states=states, actions=actions)

    def _execute(self, action: ActionVector, manual: bool) -> None:
        s_flat = self.observe_now().flat(self.model_config.j_max)
        self.scene = step(self.scene, action)
        self.history_states.append(s_flat)
        self.history_actions.append(action.flat())
        self.steps += 1
        if manual:
            self.manual_steps += 1

    def step_forecast(self) -> Forecast:
        """Forecast once, execute its first action, and return that forecast."""
        fc = self.forecast()
        self._execute(fc.action_at(0), manual=False)
        return fc

    def step_model(self) -> ActionVector:
        """Execute the first forecast action against the real scene."""
        return self.step_forecast().action_at(0)

    def step_external(self, action: ActionVector) -> None:
        self._execute(action, manual=True)

    def intervene(self, actions) -> int:
        """Execute an operator burst; returns how many actions ran."""
        n = 0
        for action in actions:
            self.step_external(action)
            n += 1
        return n


class WaypointFollower:
    """Paced scripted operator that can resume from any scene state."""

    ARRIVE_TOL = 0.015
    ROT_TOL = 0.05

    def __init__(self, task: TaskSpec, scene: Scene, rng: np.random.Generator, pace: float = DEFAULT_PACE):
        self.plan = build_plan(task, scene, rng)
        self.pace = pace
        self.sub = pace * V_MAX * scene.dt
        self.rot_sub = pace * OMEGA_MAX * scene.dt
        self.idx = 0

    def done(self) -> bool:
        return self.idx >= len(self.plan)

    def current(self) -> Waypoint | None:
        return None if self.done() else self.plan[self.idx]

    def _complete(self, scene: Scene, wp: Waypoint) -> bool:
        dist = float(np.linalg.norm(wp.p - scene.ee.p))
        ang = quat_angle_between(scene.ee.q, wp.q)
        if dist > max(self.sub, self.ARRIVE_TOL) or ang > max(self.rot_sub, self.ROT_TOL):
            return False
        closing = wp.grip >= 0.5
        frac_target = 0.0 if closing else 1.0
        if scene.gripper != frac_target:
            return False
        return not closing or scene.holding_anything()

    def advance(self, scene: Scene) -> None:
        """Skip past every waypoint the scene already satisfies, in order."""
        while not self.done() and self._complete(scene, self.plan[self.idx]):
            self.idx += 1

    def action(self, scene: Scene) -> ActionVector:
        wp = self.current()
        if wp is None:
            return ActionVector(Pose.identity(), 0.0)
        delta = wp.p - scene.ee.p
        dist = float(np.linalg.norm(delta))
        ang = quat_angle_between(scene.ee.q, wp.q)
        tgt_p = wp.p if dist <= self.sub else scene.ee.p + delta * (self.sub / dist)
        tgt_q = wp.q if ang <= self.rot_sub else quat_slerp(scene.ee.q, wp.q, self.rot_sub / ang)
        local = scene.ee.inverse().compose(Pose(tgt_p, tgt_q))
        return ActionVector(Pose(local.p, quat_canonical(local.q)), wp.grip)


class ScriptedIntervener:
    """Overrides when the forecast stops closing on the operator's waypoint.

    Distance to a waypoint combines the corner offset of the ee box with a
    gripper mismatch term, so a model that parks in the right place but
    never closes (or opens) still registers as stalled.
    """

    def __init__(self, config: RolloutConfig):
        self.config = config

    def progress_min(self, dt: float) -> float:
        # corner units: 8 corners times the paced translation over one burst
        return 8.0 * self.config.progress_frac * self.config.pace * V_MAX * dt * self.config.T_e

    def _distance(self, ee: Pose, fraction: float, wp: Waypoint) -> float:
        target_frac = 0.0 if wp.grip >= 0.5 else 1.0
        pose_term = corner_distance(ee, Pose(wp.p, wp.q), self.config.extents)
        return pose_term + self.config.gripper_weight * abs(fraction - target_frac)

    def should_intervene(self, session: ControlSession, wp: Waypoint | None) -> bool:
        if wp is None:
            return False
        d_now = self._distance(session.scene.ee, session.scene.gripper, wp)
        fc = session.forecast()
        k = min(self.config.T_e, fc.states.shape[0]) - 1
        d_future = self._distance(fc.ee_pose(k), float(fc.states[k, 7]), wp)
        return (d_now - d_future) < self.progress_min(session.scene.dt)


@dataclass(frozen=True)
class EpisodeResult:
    task: str
    mode: str
    scene_seed: int
    success: bool
    steps: int
    manual_steps: int
    manual_time_s: float
    interventions: int


MODES = ("auto", "assistive", "manual")


def run_episode(
    params,
    model_config: ModelConfig,
    task: TaskSpec,
    scene_seed: int,
    mode: str,
    config: RolloutConfig | None = None,
    dt: float = DT,
) -> EpisodeResult:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got '{mode}'")
    cfg = config or RolloutConfig()
    rng = np.random.default_rng(scene_seed)
    scene = sample_scene(task, rng, dt=dt)
    follower = WaypointFollower(task, scene, rng, pace=cfg.pace)
    session = ControlSession(params, model_config, task, scene, cfg)
    intervener = ScriptedIntervener(cfg)
    interventions = 0

    def finished() -> bool:
        return session.success() or session.steps >= task.horizon

    def advance_or_replan() -> None:
        # a persistent operator retries from wherever the scene ended up
        nonlocal follower
        follower.advance(session.scene)
        if follower.done():
            follower = WaypointFollower(task, session.scene, rng, pace=cfg.pace)
            follower.advance(session.scene)

    if mode in ("auto", "assistive"):
        for _ in range(cfg.warmup_steps):
            if finished():
                break
            follower.advance(session.scene)
            session.step_external(follower.action(session.scene))

    try:
        while not finished():
            if mode == "manual":
                advance_or_replan()
                if follower.done():
                    break
                session.step_external(follower.action(session.scene))
            elif mode == "auto":
                session.step_model()
            else:
                advance_or_replan()
                wp = follower.current()
                if wp is not None and intervener.should_intervene(session, wp):
                    interventions += 1
                    for _ in range(cfg.T_e):
                        if finished():
                            break
                        advance_or_replan()
                        session.step_external(follower.action(session.scene))
                else:
                    session.step_model()
    except EpisodeFault:
        pass

    return EpisodeResult(
        task=task.id,
        mode=mode,
        scene_seed=scene_seed,
        success=session.success(),
        steps=session.steps,
        manual_steps=session.manual_steps,
        manual_time_s=session.manual_time_s,
        interventions=interventions,
    )


def _episode_seed(base_seed: int, task_index: int, mode_index: int, episode: int) -> int:
    ss = np.random.SeedSequence([base_seed, task_index, mode_index, episode])
    return int(ss.generate_state(1)[0])


BENCHMARK_COLUMNS = ["task", "mode", "n", "success_rate", "mean_manual_time_s", "mean_steps"]


def benchmark(
    params,
    model_config: ModelConfig,
    tasks: list[TaskSpec],
    modes,
    n: int,
    base_seed: int = 0,
    config: RolloutConfig | None = None,
    dt: float = DT,
    csv_path=None,
    json_path=None,
    meta: dict | None = None,
) -> list[dict]:
    """Aggregate episode outcomes per (task, mode); optionally write CSV and JSON."""
    episodes: list[EpisodeResult] = []
    rows: list[dict] = []
    for ti, task in enumerate(tasks):
        for mi, mode in enumerate(modes):
            if mode not in MODES:
                raise ValueError(f"mode must be one of {MODES}, got '{mode}'")
            batch = [
                run_episode(
                    params,
                    model_config,
                    task,
                    _episode_seed(base_seed, ti, mi, ep),
                    mode,
                    config=config,
                    dt=dt,
                )
                for ep in range(n)
            ]
            episodes.extend(batch)
            rows.append(
                {
                    "task": task.id,
                    "mode": mode,
                    "n": n,
                    "success_rate": sum(e.success for e in batch) / n,
                    "mean_manual_time_s": sum(e.manual_time_s for e in batch) / n,
                    "mean_steps": sum(e.steps for e in batch) / n,
                }
            )
    if csv_path is not None:
        _write_benchmark_csv(csv_path, rows)
    if json_path is not None:
        _write_benchmark_json(json_path, rows, episodes, meta=meta)
    return rows


def _write_benchmark_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCHMARK_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in BENCHMARK_COLUMNS})
    os.replace(tmp, path)


def _write_benchmark_json(path, rows: list[dict], episodes: list[EpisodeResult], meta: dict | None = None) -> None:
    path = Path(path)
    payload = {
        "meta": meta or {},
        "summary": rows,
        "episodes": [
            {
                "task": e.task,
                "mode": e.mode,
                "scene_seed": e.scene_seed,
                "success": e.success,
                "steps": e.steps,
                "manual_steps": e.manual_steps,
                "manual_time_s": e.manual_time_s,
                "interventions": e.interventions,
            }
            for e in episodes
        ],
    }
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
