"""Live control sessions over WebSocket, one interactive session per connection.

After a reset the session ticks at a fixed rate. In Auto mode each tick
executes one model action against the scene; after a takeover the ticks only
refresh the forecast while the operator streams manual actions, which are
applied the moment they arrive. Every tick emits exactly one state_update
frame, and a forecast_update follows whenever a new forecast was computed.
Boundary events (reset, takeover, release, each applied manual action) emit
an extra state_update so clients see the effect immediately. When the
connection backs up, stale forecast_update frames are dropped oldest-first;
state_update frames are never dropped.

Wire schema. JSON text frames, field "kind" selects the shape:

  client to server
    {"kind": "reset", "task": <task id>, "seed": <int, >= 0>}
    {"kind": "takeover"}
    {"kind": "release"}
    {"kind": "manual_action", "p": [x, y, z], "q": [w, x, y, z], "grip": 0 or 1}
      p and q give the target pose in the current ee frame, like ActionVector.

  server to client
    {"kind": "state_update", "t", "time_s", "mode", "task", "seed",
     "ee": {"p", "q"}, "gripper", "holding", "objects": [{"id", "p", "q",
     "extents", "attached"}, ...], "drawer": null or {"travel", "max_travel",
     "max_reached", "grasped", "base_p", "base_q", "axis", "handle",
     "interior_extents"}, "counters": {"manual_steps", "manual_time_s",
     "interventions"}}
    {"kind": "forecast_update", "t", "ee": [{"p", "q"}, ... T_f entries],
     "grip": [T_f commands]}
    {"kind": "episode_end", "t", "success", "steps", "manual_steps",
     "manual_time_s", "interventions", "task", "seed"}
    {"kind": "error", "message"}

Protocol rules: manual_action is honored only between takeover and release;
anything malformed or out of order draws an error frame and the session
continues. reset always starts a fresh episode, replacing any running one.
"""

from __future__ import annotations

import asyncio
import json
import math
import os
from collections import deque
from typing import Literal

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .checkpoint import load_model
from .config import build_run_config
from .geometry import GeometryError, Pose
from .model import ActionVector, ModelConfig
from .rollout import ControlSession, Forecast, RolloutConfig, WaypointFollower
from .simworld import DT, EpisodeFault, TaskSpec, get_task, list_tasks, sample_scene

DEFAULT_TICK_HZ = 15.0


class ProtocolError(ValueError):
    """Client fault that should bounce back as an error frame."""


class ResetFrame(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["reset"]
    task: str
    seed: int = Field(ge=0)


class TakeoverFrame(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["takeover"]


class ReleaseFrame(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["release"]


class ManualActionFrame(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["manual_action"]
    p: list[float] = Field(min_length=3, max_length=3)
    q: list[float] = Field(min_length=4, max_length=4)
    grip: float

    @field_validator("p", "q")
    @classmethod
    def _finite(cls, v: list[float]) -> list[float]:
        if not all(math.isfinite(x) for x in v):
            raise ValueError("components must be finite")
        return v

    @field_validator("grip")
    @classmethod
    def _binary(cls, v: float) -> float:
        if v not in (0.0, 1.0):
            raise ValueError("grip must be 0 or 1")
        return v

    def action(self) -> ActionVector:
        return ActionVector(Pose(np.asarray(self.p), np.asarray(self.q)), float(self.grip))


_FRAME_TYPES = {
    "reset": ResetFrame,
    "takeover": TakeoverFrame,
    "release": ReleaseFrame,
    "manual_action": ManualActionFrame,
}


def parse_frame(text: str) -> ResetFrame | TakeoverFrame | ReleaseFrame | ManualActionFrame:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"frame is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ProtocolError("frame must be a JSON object")
    kind = raw.get("kind")
    if kind not in _FRAME_TYPES:
        known = ", ".join(sorted(_FRAME_TYPES))
        raise ProtocolError(f"unknown message kind {kind!r}, expected one of: {known}")
    try:
        return _FRAME_TYPES[kind].model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"]) or kind
        raise ProtocolError(f"bad {kind} frame: {where}: {first['msg']}") from None


class Outbox:
    """Ordered send queue where droppable frames are superseded by newer ones."""

    def __init__(self):
        self._frames: deque[tuple[str, bool]] = deque()
        self._wake = asyncio.Event()

    def put(self, frame: dict, droppable: bool = False) -> None:
        if droppable:
            # a fresher forecast makes any queued one stale; keep the rest
            self._frames = deque(item for item in self._frames if not item[1])
        self._frames.append((json.dumps(frame), droppable))
        self._wake.set()

    async def run(self, ws: WebSocket) -> None:
        while True:
            await self._wake.wait()
            self._wake.clear()
            while self._frames:
                text, _ = self._frames.popleft()
                await ws.send_text(text)


def _floats(values) -> list[float]:
    return [float(v) for v in values]


def _pose_dict(pose: Pose) -> dict:
    return {"p": _floats(pose.p), "q": _floats(pose.q)}


_IDLE, _RUNNING, _ENDED = "idle", "running", "ended"


class SessionActor:
    """State machine for one connection.

    Handlers and ticks all run on the event loop and never await mid-mutation,
    so every session change is serialized. A seeded episode therefore plays
    out exactly like run_episode given the same inputs.
    """

    def __init__(
        self,
        params,
        model_config: ModelConfig,
        rollout: RolloutConfig,
        tasks: dict[str, TaskSpec],
        tick_hz: float,
        outbox: Outbox,
    ):
        self.params = params
        self.model_config = model_config
        self.rollout = rollout
        self.tasks = tasks
        self.tick_hz = tick_hz
        self.outbox = outbox
        self.phase = _IDLE
        self.mode = "auto"
        self.session: ControlSession | None = None
        self.follower: WaypointFollower | None = None
        self.task: TaskSpec | None = None
        self.seed = 0
        self.interventions = 0
        self.warmup_left = 0
        self._tick_task: asyncio.Task | None = None

    def handle(self, text: str) -> None:
        try:
            frame = parse_frame(text)
            if isinstance(frame, ResetFrame):
                self._reset(frame.task, frame.seed)
            elif isinstance(frame, TakeoverFrame):
                self._takeover()
            elif isinstance(frame, ReleaseFrame):
                self._release()
            else:
                self._manual(frame)
        except ProtocolError as e:
            self.outbox.put({"kind": "error", "message": str(e)})

    def shutdown(self) -> None:
        if self._tick_task is not None:
            self._tick_task.cancel()
            self._tick_task = None

    # -- client messages ----------------------------------------------------

    def _reset(self, task_id: str, seed: int) -> None:
        if task_id not in self.tasks:
            served = ", ".join(sorted(self.tasks))
            raise ProtocolError(f"unknown task '{task_id}', serving: {served}")
        task = self.tasks[task_id]
        # construction order matches run_episode so seeded episodes agree
        rng = np.random.default_rng(seed)
        scene = sample_scene(task, rng)
        follower = WaypointFollower(task, scene, rng, pace=self.rollout.pace)
        try:
            session = ControlSession(self.params, self.model_config, task, scene, self.rollout)
        except ValueError as e:
            raise ProtocolError(str(e)) from None
        self.shutdown()
        self.session = session
        self.follower = follower
        self.task = task
        self.seed = seed
        self.mode = "auto"
        self.interventions = 0
        self.warmup_left = self.rollout.warmup_steps
        self.phase = _RUNNING
        self._emit_state()
        if self._finished():
            self._finish()
            return
        self._tick_task = asyncio.create_task(self._tick_loop())

    def _takeover(self) -> None:
        self._require_running("takeover")
        if self.mode == "manual":
            raise ProtocolError("already in manual mode")
        self.mode = "manual"
        self.interventions += 1
        self._emit_state()

    def _release(self) -> None:
        self._require_running("release")
        if self.mode != "manual":
            raise ProtocolError("not in manual mode")
        self.mode = "auto"
        self._emit_state()

    def _manual(self, frame: ManualActionFrame) -> None:
        self._require_running("manual_action")
        if self.mode != "manual":
            raise ProtocolError("manual_action requires takeover first")
        try:
            action = frame.action()
        except (GeometryError, ValueError) as e:
            raise ProtocolError(f"bad manual_action: {e}") from None
        try:
            self.session.intervene([action])
        except EpisodeFault:
            self._emit_state()
            self._finish()
            return
        if self.warmup_left > 0:
            # operator input seeds the history just as well as scripted warmup
            self.warmup_left -= 1
        self._emit_state()
        if self._finished():
            self._finish()

    def _require_running(self, what: str) -> None:
        if self.phase == _IDLE:
            raise ProtocolError(f"{what} before reset; send reset first")
        if self.phase == _ENDED:
            raise ProtocolError(f"{what} after episode_end; send reset to start a new episode")

    # -- ticking ------------------------------------------------------------

    async def _tick_loop(self) -> None:
        # first tick lands one period after reset so a client reacting to the
        # snapshot (say, an immediate takeover) is heard before any auto step
        period = 1.0 / self.tick_hz
        loop = asyncio.get_running_loop()
        due = loop.time() + period
        try:
            while True:
                await asyncio.sleep(max(0.0, due - loop.time()))
                if self.phase != _RUNNING:
                    break
                self._tick()
                # a late tick is skipped, not replayed in a burst
                due = max(due + period, loop.time())
        except asyncio.CancelledError:
            raise
        except Exception as e:  # pragma: no cover - defensive
            self.phase = _ENDED
            self.outbox.put({"kind": "error", "message": f"session aborted: {e}"})

    def _tick(self) -> None:
        s = self.session
        if self.mode == "auto":
            fc: Forecast | None = None
            try:
                if self.warmup_left > 0:
                    # history is empty right after reset; the scripted operator
                    # seeds it exactly like the batch rollout path does
                    self.follower.advance(s.scene)
                    s.step_external(self.follower.action(s.scene))
                    self.warmup_left -= 1
                else:
                    fc = s.step_forecast()
            except EpisodeFault:
                self._emit_state()
                self._finish()
                return
            self._emit_state()
            if fc is not None:
                self._emit_forecast(fc)
            if self._finished():
                self._finish()
        else:
            # manual keepalive: one state per tick, forecast refreshed so the
            # operator can watch the model get back on track before releasing
            self._emit_state()
            if s.history_states:
                self._emit_forecast(s.forecast())

    # -- frames -------------------------------------------------------------

    def _finished(self) -> bool:
        return self.session.success() or self.session.steps >= self.task.horizon

    def _finish(self) -> None:
        self.phase = _ENDED
        s = self.session
        self.outbox.put(
            {
                "kind": "episode_end",
                "t": s.steps,
                "success": s.success(),
                "steps": s.steps,
                "manual_steps": s.manual_steps,
                "manual_time_s": s.manual_time_s,
                "interventions": self.interventions,
                "task": self.task.id,
                "seed": self.seed,
            }
        )

    def _emit_state(self) -> None:
        s = self.session
        sc = s.scene
        held = sc.held_object()
        objects = [
            {
                "id": o.id,
                "p": _floats(o.pose.p),
                "q": _floats(o.pose.q),
                "extents": _floats(o.extents.h),
                "attached": bool(o.attached),
            }
            for o in sc.objects
        ]
        drawer = None
        if sc.drawer is not None:
            d = sc.drawer
            drawer = {
                "travel": float(d.travel),
                "max_travel": float(d.max_travel),
                "max_reached": float(d.max_reached),
                "grasped": bool(d.grasped),
                "base_p": _floats(d.base.p),
                "base_q": _floats(d.base.q),
                "axis": _floats(d.axis_global()),
                "handle": _floats(d.handle_point()),
                "interior_extents": _floats(d.interior_extents),
            }
        self.outbox.put(
            {
                "kind": "state_update",
                "t": s.steps,
                "time_s": s.time_s,
                "mode": self.mode,
                "task": self.task.id,
                "seed": self.seed,
                "ee": _pose_dict(sc.ee),
                "gripper": float(sc.gripper),
                "holding": held.id if held is not None else None,
                "objects": objects,
                "drawer": drawer,
                "counters": {
                    "manual_steps": s.manual_steps,
                    "manual_time_s": s.manual_time_s,
                    "interventions": self.interventions,
                },
            }
        )

    def _emit_forecast(self, fc: Forecast) -> None:
        self.outbox.put(
            {
                "kind": "forecast_update",
                "t": self.session.steps,
                "ee": [{"p": _floats(row[:3]), "q": _floats(row[3:7])} for row in fc.states],
                "grip": _floats(fc.actions[:, 7]),
            },
            droppable=True,
        )


class TaskInfo(BaseModel):
    id: str
    horizon: int
    j_max: int
    objects: list[str]
    drawer: bool


class HealthInfo(BaseModel):
    status: str
    checkpoint: str
    tasks: list[str]
    tick_hz: float
    dt: float
    T_f: int


def create_app(checkpoint_path: str, task_ids=None, tick_hz: float = DEFAULT_TICK_HZ) -> FastAPI:
    """App factory. Loads the checkpoint once; sessions share the weights read-only."""
    if tick_hz <= 0:
        raise ValueError(f"tick_hz must be positive, got {tick_hz}")
    params, layer = load_model(checkpoint_path)
    run = build_run_config(layer)
    ids = list(task_ids) if task_ids else list_tasks()
    tasks = {tid: get_task(tid) for tid in ids}  # unknown ids fail startup

    app = FastAPI(title="trajcast live sessions")

    @app.get("/health", response_model=HealthInfo)
    def health() -> HealthInfo:
        return HealthInfo(
            status="ok",
            checkpoint=os.path.basename(checkpoint_path),
            tasks=sorted(tasks),
            tick_hz=tick_hz,
            dt=DT,
            T_f=run.rollout.T_f,
        )

    @app.get("/tasks", response_model=list[TaskInfo])
    def task_list() -> list[TaskInfo]:
        return [
            TaskInfo(
                id=t.id,
                horizon=t.horizon,
                j_max=t.j_max,
                objects=[o.id for o in t.objects],
                drawer=t.drawer is not None,
            )
            for _, t in sorted(tasks.items())
        ]

    @app.websocket("/session")
    async def session_socket(ws: WebSocket) -> None:
        await ws.accept()
        outbox = Outbox()
        writer = asyncio.create_task(outbox.run(ws))
        actor = SessionActor(params, run.model, run.rollout, tasks, tick_hz, outbox)
        try:
            while True:
                actor.handle(await ws.receive_text())
        except WebSocketDisconnect:
            pass
        finally:
            actor.shutdown()
            writer.cancel()

    return app
