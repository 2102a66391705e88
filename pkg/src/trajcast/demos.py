"""Scripted-expert demonstrations and trajectory datasets.

The expert builds a waypoint plan from the initial scene (with small
Gaussian jitter on waypoint positions), then paces toward each waypoint a
fixed fraction of the speed cap per tick, so every step lands exactly on
its sub-target and episodes replay bit-for-bit from the scene seed.

Trajectories are JSONL: one header object, one row per step with the flat
state observed before the action and the flat action applied, and a final
success marker. A dataset is a directory of trajectory files plus a single
manifest JSON.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose, quat_angle_between, quat_canonical, quat_slerp
from .model import ACTION_DIM, ActionVector, state_dim
from .simworld import (
    DT,
    OMEGA_MAX,
    V_MAX,
    Scene,
    TaskSpec,
    check_success,
    get_task,
    in_workspace,
    observe,
    sample_scene,
    step,
)

FORMAT_VERSION = 1
APPROACH_HEIGHT = 0.10
WAYPOINT_SIGMA = 0.005
GRIP_DWELL = 5
PULL_FRACTION = 0.95
DROP_CLEARANCE = 0.01
MAX_ATTEMPTS = 10
DEFAULT_PACE = 0.25

IDQ = np.array([1.0, 0.0, 0.0, 0.0])


class DemoError(RuntimeError):
    """Expert could not produce a successful episode."""


class TrajectoryFormatError(ValueError):
    pass


class ReplayError(RuntimeError):
    """Recorded states disagree with re-simulated states."""


@dataclass(frozen=True)
class Waypoint:
    p: np.ndarray
    q: np.ndarray
    grip: float
    dwell: int = 0


@dataclass(frozen=True)
class Trajectory:
    task: str
    scene_seed: int
    j_max: int
    dt: float
    states: np.ndarray
    actions: np.ndarray
    success: bool

    def __len__(self) -> int:
        return self.states.shape[0]


def _jit(rng: np.random.Generator, p) -> np.ndarray:
    return np.asarray(p, dtype=np.float64) + rng.normal(0.0, WAYPOINT_SIGMA, size=3)


def _pick_and_place(rng, obj, place_p, lift_z) -> list[Waypoint]:
    # grasping keys on center distance alone, so the wrist stays at identity
    grasp = _jit(rng, obj.pose.p)
    above = _jit(rng, obj.pose.p + [0.0, 0.0, APPROACH_HEIGHT])
    lift = _jit(rng, [obj.pose.p[0], obj.pose.p[1], lift_z])
    above_place = _jit(rng, [place_p[0], place_p[1], lift_z])
    place = _jit(rng, place_p)
    retreat = _jit(rng, place_p + [0.0, 0.0, APPROACH_HEIGHT])
    return [
        Waypoint(above, IDQ, 0.0),
        Waypoint(grasp, IDQ, 0.0),
        Waypoint(grasp, IDQ, 1.0, dwell=GRIP_DWELL),
        Waypoint(lift, IDQ, 1.0),
        Waypoint(above_place, IDQ, 1.0),
        Waypoint(place, IDQ, 1.0),
        Waypoint(place, IDQ, 0.0, dwell=GRIP_DWELL),
        Waypoint(retreat, IDQ, 0.0),
    ]


def _drawer_pull(rng, drawer) -> tuple[list[Waypoint], float]:
    """Open-drawer waypoints plus the travel they will produce."""
    handle = drawer.handle_point()
    axis = drawer.axis_global()
    above = _jit(rng, handle + [0.0, 0.0, APPROACH_HEIGHT])
    grasp = _jit(rng, handle)
    pull = _jit(rng, grasp + axis * (PULL_FRACTION * drawer.max_travel))
    travel = float(np.clip(np.dot(pull - grasp, axis), 0.0, drawer.max_travel))
    plan = [
        Waypoint(above, IDQ, 0.0),
        Waypoint(grasp, IDQ, 0.0),
        Waypoint(grasp, IDQ, 1.0, dwell=GRIP_DWELL),
        Waypoint(pull, IDQ, 1.0),
        Waypoint(pull, IDQ, 0.0, dwell=GRIP_DWELL),
        Waypoint(pull + [0.0, 0.0, APPROACH_HEIGHT], IDQ, 0.0),
    ]
    return plan, travel


def build_plan(task: TaskSpec, scene: Scene, rng: np.random.Generator) -> list[Waypoint]:
    if task.id == "A_stack":
        a = scene.object_by_id("block_a")
        b = scene.object_by_id("block_b")
        stack_z = b.pose.p[2] + b.extents.h[2] + a.extents.h[2]
        place = np.array([b.pose.p[0], b.pose.p[1], stack_z + DROP_CLEARANCE])
        plan = _pick_and_place(rng, a, place, lift_z=stack_z + APPROACH_HEIGHT)
    elif task.id == "B_peg":
        nut = scene.object_by_id("nut")
        peg = scene.object_by_id("peg")
        peg_top = peg.pose.p[2] + peg.extents.h[2]
        drop = np.array([peg.pose.p[0], peg.pose.p[1], peg_top + 0.05])
        plan = _pick_and_place(rng, nut, drop, lift_z=peg_top + 0.08)
    elif task.id == "D_drawer":
        plan, _ = _drawer_pull(rng, scene.drawer)
    elif task.id == "E_bowl_in_drawer":
        plan, travel = _drawer_pull(rng, scene.drawer)
        d = scene.drawer
        center = d.base.transform_point(d.interior_center_local + d.axis_local * travel)
        bowl = scene.object_by_id("bowl")
        drop = np.array([center[0], center[1], center[2] + 0.06])
        plan += _pick_and_place(rng, bowl, drop, lift_z=bowl.pose.p[2] + 0.2)
    else:
        raise DemoError(f"no expert plan for task '{task.id}'")
    for wp in plan:
        if not in_workspace(wp.p):
            raise DemoError(f"waypoint {wp.p} outside the workspace")
    return plan


def execute_plan(
    scene: Scene, task: TaskSpec, plan: list[Waypoint], pace: float = DEFAULT_PACE
) -> tuple[np.ndarray, np.ndarray, Scene, bool]:
    """Pace through the plan, recording (state, action) per tick."""
    if not 0.0 < pace <= 1.0:
        raise ValueError(f"pace must be in (0, 1], got {pace}")
    sub = pace * V_MAX * scene.dt
    rot_sub = pace * OMEGA_MAX * scene.dt
    states: list[np.ndarray] = []
    actions: list[np.ndarray] = []

    def record(act: ActionVector) -> bool:
        if len(states) >= task.horizon:
            return False
        states.append(observe(scene, task).flat(task.j_max))
        actions.append(act.flat())
        return True

    timed_out = False
    for wp in plan:
        while not timed_out:
            delta = wp.p - scene.ee.p
            dist = float(np.linalg.norm(delta))
            ang = quat_angle_between(scene.ee.q, wp.q)
            landing = dist <= sub and ang <= rot_sub
            tgt_p = wp.p if landing else scene.ee.p + delta * (min(sub, dist) / max(dist, 1e-300))
            tgt_q = wp.q if ang <= rot_sub else quat_slerp(scene.ee.q, wp.q, rot_sub / ang)
            local = scene.ee.inverse().compose(Pose(tgt_p, tgt_q))
            act = ActionVector(Pose(local.p, quat_canonical(local.q)), wp.grip)
            if not record(act):
                timed_out = True
                break
            scene = step(scene, act)
            if landing:
                break
        for _ in range(wp.dwell):
            if timed_out:
                break
            act = ActionVector(Pose.identity(), wp.grip)
            if not record(act):
                timed_out = True
                break
            scene = step(scene, act)
        if timed_out:
            break
    success = not timed_out and check_success(scene, task)
    return np.asarray(states), np.asarray(actions), scene, success


def _scene_seed(base_seed: int, episode: int, attempt: int) -> int:
    ss = np.random.SeedSequence([base_seed, episode, attempt])
    return int(ss.generate_state(1)[0])


def run_expert_episode(
    task: TaskSpec, scene_seed: int, pace: float = DEFAULT_PACE, dt: float = DT
) -> Trajectory:
    rng = np.random.default_rng(scene_seed)
    scene = sample_scene(task, rng, dt=dt)
    plan = build_plan(task, scene, rng)
    states, actions, _, success = execute_plan(scene, task, plan, pace)
    return Trajectory(
        task=task.id,
        scene_seed=scene_seed,
        j_max=task.j_max,
        dt=dt,
        states=states,
        actions=actions,
        success=success,
    )


def save_trajectory(path, traj: Trajectory) -> None:
    path = Path(path)
    header = {
        "format_version": FORMAT_VERSION,
        "task": traj.task,
        "seed": traj.scene_seed,
        "J_max": traj.j_max,
        "dt": traj.dt,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for t in range(len(traj)):
        row = {"t": t, "s": traj.states[t].tolist(), "a": traj.actions[t].tolist()}
        lines.append(json.dumps(row))
    lines.append(json.dumps({"success": traj.success}))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_trajectory(path) -> Trajectory:
    path = Path(path)
    lines = path.read_text().splitlines()
    if len(lines) < 2:
        raise TrajectoryFormatError(f"{path}: too short to hold a header and a success marker")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise TrajectoryFormatError(f"{path}: bad header: {e}") from e
    for key in ("format_version", "task", "seed", "J_max", "dt"):
        if key not in header:
            raise TrajectoryFormatError(f"{path}: header missing '{key}'")
    if header["format_version"] != FORMAT_VERSION:
        raise TrajectoryFormatError(
            f"{path}: format version {header['format_version']}, expected {FORMAT_VERSION}"
        )
    footer = json.loads(lines[-1])
    if "success" not in footer:
        raise TrajectoryFormatError(f"{path}: missing success marker")
    j_max = int(header["J_max"])
    width = state_dim(j_max)
    states, actions = [], []
    for t, line in enumerate(lines[1:-1]):
        try:
            row = json.loads(line)
        except json.JSONDecodeError as e:
            raise TrajectoryFormatError(f"{path}: bad row {t}: {e}") from e
        if row.get("t") != t:
            raise TrajectoryFormatError(f"{path}: row {t} has t={row.get('t')}")
        s, a = row.get("s"), row.get("a")
        if s is None or len(s) != width:
            raise TrajectoryFormatError(f"{path}: row {t} state width != {width}")
        if a is None or len(a) != ACTION_DIM:
            raise TrajectoryFormatError(f"{path}: row {t} action width != {ACTION_DIM}")
        states.append(s)
        actions.append(a)
    return Trajectory(
        task=header["task"],
        scene_seed=int(header["seed"]),
        j_max=j_max,
        dt=float(header["dt"]),
        states=np.asarray(states, dtype=np.float64),
        actions=np.asarray(actions, dtype=np.float64),
        success=bool(footer["success"]),
    )


def replay_trajectory(traj: Trajectory, tol: float = 1e-9) -> None:
    """Re-simulate from the scene seed and compare against the recorded states."""
    task = get_task(traj.task)
    scene = sample_scene(task, np.random.default_rng(traj.scene_seed), dt=traj.dt)
    for t in range(len(traj)):
        obs = observe(scene, task).flat(traj.j_max)
        err = float(np.max(np.abs(obs - traj.states[t]))) if obs.size else 0.0
        if err > tol:
            raise ReplayError(f"step {t}: replayed state deviates by {err:.3e}")
        scene = step(scene, ActionVector.from_flat(traj.actions[t]))
    if check_success(scene, task) != traj.success:
        raise ReplayError("replayed outcome disagrees with the recorded success flag")


def generate_dataset(
    task_id: str,
    n: int,
    out_dir,
    base_seed: int = 0,
    pace: float = DEFAULT_PACE,
    dt: float = DT,
) -> Path:
    """Write n successful expert episodes plus a manifest; returns the manifest path."""
    task = get_task(task_id)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for ep in range(n):
        traj = None
        for attempt in range(MAX_ATTEMPTS):
            cand = run_expert_episode(task, _scene_seed(base_seed, ep, attempt), pace=pace, dt=dt)
            if cand.success:
                traj = cand
                break
        if traj is None:
            raise DemoError(f"episode {ep}: expert failed {MAX_ATTEMPTS} attempts")
        fname = f"{task_id}_{ep:04d}.jsonl"
        save_trajectory(out / fname, traj)
        entries.append(
            {"file": fname, "steps": len(traj), "scene_seed": traj.scene_seed, "success": True}
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "task": task_id,
        "seed": base_seed,
        "pace": pace,
        "dt": dt,
        "count": n,
        "trajectories": entries,
    }
    mpath = out / "manifest.json"
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, mpath)
    return mpath


def load_dataset(manifest_path, validate_fraction: float = 0.05, tol: float = 1e-9) -> list[Trajectory]:
    """Load every trajectory in a manifest, re-simulating a sample to confirm fidelity."""
    mpath = Path(manifest_path)
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise TrajectoryFormatError(f"{mpath}: bad manifest: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise TrajectoryFormatError(f"{mpath}: unsupported manifest version")
    trajs = [load_trajectory(mpath.parent / e["file"]) for e in manifest["trajectories"]]
    if trajs and validate_fraction > 0.0:
        n_check = max(1, math.ceil(validate_fraction * len(trajs)))
        for i in sorted(set(np.linspace(0, len(trajs) - 1, n_check).astype(int))):
            replay_trajectory(trajs[i], tol=tol)
    return trajs
