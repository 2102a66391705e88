"""Deterministic kinematic tabletop world.

Scenes are immutable snapshots; step() applies one control tick: the
end-effector tracks a local target pose under speed caps, the gripper
rate-limits toward its commanded side, proximity grasping rigidly attaches
one object, releasing settles it onto the nearest support below, and a
grasped drawer handle converts ee motion along the drawer axis into travel.
Tasks are defined by JSON files in the package's tasks/ directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from .geometry import (
    BoxExtents,
    Pose,
    quat_angle_between,
    quat_from_axis_angle,
    quat_slerp,
    rotate_point,
)
from .model import StateVector

DT = 1.0 / 15.0
V_MAX = 0.5
OMEGA_MAX = 2.0
GRASP_TOL = 0.03
GRIP_RATE = 0.5
WORKSPACE_HALF = 0.8
Z_AXIS = np.array([0.0, 0.0, 1.0])


class EpisodeFault(RuntimeError):
    pass


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    id: str
    pose: Pose
    extents: BoxExtents
    attached: bool = False
    is_support: bool = True
    attach_local: Pose | None = None


@dataclass(frozen=True)
class Drawer:
    """Prismatic joint: a body sliding along axis_local in the base frame."""

    base: Pose
    axis_local: np.ndarray
    max_travel: float
    handle_local: np.ndarray
    interior_extents: np.ndarray
    interior_center_local: np.ndarray
    travel: float = 0.0
    max_reached: float = 0.0
    grasped: bool = False

    def axis_global(self) -> np.ndarray:
        return rotate_point(self.base.q, self.axis_local)

    def handle_point(self) -> np.ndarray:
        return self.base.transform_point(self.handle_local + self.axis_local * self.travel)

    def handle_pose(self) -> Pose:
        return Pose(self.handle_point(), self.base.q)

    def interior_center(self) -> np.ndarray:
        return self.base.transform_point(self.interior_center_local + self.axis_local * self.travel)

    def contains(self, point: np.ndarray) -> bool:
        local = rotate_point(self.base.inverse().q, point - self.base.p)
        rel = local - (self.interior_center_local + self.axis_local * self.travel)
        return bool(np.all(np.abs(rel) <= self.interior_extents))

    def footprint_contains(self, point: np.ndarray) -> bool:
        local = rotate_point(self.base.inverse().q, point - self.base.p)
        rel = local - (self.interior_center_local + self.axis_local * self.travel)
        return bool(np.all(np.abs(rel[:2]) <= self.interior_extents[:2]))

    def interior_bottom_z(self) -> float:
        return float(self.interior_center()[2] - self.interior_extents[2])


@dataclass(frozen=True)
class Scene:
    ee: Pose
    gripper: float
    objects: tuple[SceneObject, ...]
    drawer: Drawer | None
    time: int = 0
    dt: float = DT

    def object_by_id(self, oid: str) -> SceneObject:
        for obj in self.objects:
            if obj.id == oid:
                return obj
        raise KeyError(f"no object '{oid}' in scene")

    def held_object(self) -> SceneObject | None:
        for obj in self.objects:
            if obj.attached:
                return obj
        return None

    def holding_anything(self) -> bool:
        if self.held_object() is not None:
            return True
        return self.drawer is not None and self.drawer.grasped


@dataclass(frozen=True)
class ObjectTemplate:
    id: str
    extents: np.ndarray
    position: np.ndarray
    random_planar: float = 0.0
    random_yaw_deg: float = 0.0
    random_unidirectional: tuple[np.ndarray, float] | None = None
    is_support: bool = True


@dataclass(frozen=True)
class DrawerTemplate:
    base_position: np.ndarray
    random_yaw_deg: float
    axis_local: np.ndarray
    max_travel: float
    handle_local: np.ndarray
    interior_extents: np.ndarray
    interior_center_local: np.ndarray


@dataclass(frozen=True)
class TaskSpec:
    id: str
    horizon: int
    ee_start: np.ndarray
    slots: tuple[str, ...]
    objects: tuple[ObjectTemplate, ...]
    drawer: DrawerTemplate | None
    success: dict
    j_max: int = 2

    @classmethod
    def from_json(cls, text: str) -> "TaskSpec":
        raw = json.loads(text)
        objects = []
        for o in raw["objects"]:
            uni = None
            if o.get("random_unidirectional"):
                uni = (
                    np.asarray(o["random_unidirectional"]["axis"], dtype=np.float64),
                    float(o["random_unidirectional"]["range"]),
                )
            objects.append(
                ObjectTemplate(
                    id=o["id"],
                    extents=np.asarray(o["extents"], dtype=np.float64),
                    position=np.asarray(o["position"], dtype=np.float64),
                    random_planar=float(o.get("random_planar", 0.0)),
                    random_yaw_deg=float(o.get("random_yaw_deg", 0.0)),
                    random_unidirectional=uni,
                    is_support=bool(o.get("is_support", True)),
                )
            )
        drawer = None
        if raw.get("drawer"):
            d = raw["drawer"]
            drawer = DrawerTemplate(
                base_position=np.asarray(d["base_position"], dtype=np.float64),
                random_yaw_deg=float(d.get("random_yaw_deg", 0.0)),
                axis_local=np.asarray(d["axis_local"], dtype=np.float64),
                max_travel=float(d["max_travel"]),
                handle_local=np.asarray(d["handle_local"], dtype=np.float64),
                interior_extents=np.asarray(d["interior_extents"], dtype=np.float64),
                interior_center_local=np.asarray(d["interior_center_local"], dtype=np.float64),
            )
        return cls(
            id=raw["id"],
            horizon=int(raw["horizon"]),
            ee_start=np.asarray(raw["ee_start"], dtype=np.float64),
            slots=tuple(raw["slots"]),
            objects=tuple(objects),
            drawer=drawer,
            success=raw["success"],
        )


def _task_dir():
    return resources.files("trajcast") / "tasks"


def list_tasks() -> list[str]:
    names = []
    for entry in _task_dir().iterdir():
        if entry.name.endswith(".json"):
            names.append(entry.name[: -len(".json")])
    return sorted(names)


def get_task(task_id: str) -> TaskSpec:
    path = _task_dir() / f"{task_id}.json"
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise TaskError(f"unknown task '{task_id}', available: {list_tasks()}")
    spec = TaskSpec.from_json(text)
    if spec.id != task_id:
        raise TaskError(f"task file {task_id}.json declares id '{spec.id}'")
    return spec


def sample_scene(task: TaskSpec, rng: np.random.Generator, dt: float = DT) -> Scene:
    """Initial scene with per-task pose randomization applied."""
    objects = []
    for tmpl in task.objects:
        pos = tmpl.position.copy()
        if tmpl.random_planar > 0.0:
            pos[:2] += rng.uniform(-tmpl.random_planar, tmpl.random_planar, size=2)
        if tmpl.random_unidirectional is not None:
            axis, rng_range = tmpl.random_unidirectional
            pos += axis * rng.uniform(-rng_range, rng_range)
        yaw = 0.0
        if tmpl.random_yaw_deg > 0.0:
            bound = math.radians(tmpl.random_yaw_deg)
            yaw = rng.uniform(-bound, bound)
        objects.append(
            SceneObject(
                id=tmpl.id,
                pose=Pose(pos, quat_from_axis_angle(Z_AXIS, yaw)),
                extents=BoxExtents(tmpl.extents),
                is_support=tmpl.is_support,
            )
        )
    drawer = None
    if task.drawer is not None:
        d = task.drawer
        yaw = 0.0
        if d.random_yaw_deg > 0.0:
            bound = math.radians(d.random_yaw_deg)
            yaw = rng.uniform(-bound, bound)
        drawer = Drawer(
            base=Pose(d.base_position, quat_from_axis_angle(Z_AXIS, yaw)),
            axis_local=d.axis_local,
            max_travel=d.max_travel,
            handle_local=d.handle_local,
            interior_extents=d.interior_extents,
            interior_center_local=d.interior_center_local,
        )
    return Scene(
        ee=Pose(task.ee_start, np.array([1.0, 0.0, 0.0, 0.0])),
        gripper=1.0,
        objects=tuple(objects),
        drawer=drawer,
        dt=dt,
    )


def _settle_z(obj: SceneObject, others: tuple[SceneObject, ...], drawer: Drawer | None) -> Pose:
    """Drop a released object straight down onto the highest support under it."""
    p = obj.pose.p.copy()
    hz = obj.extents.h[2]
    best = hz  # table surface at z = 0
    slack = 1e-9
    for other in others:
        if other.id == obj.id or not other.is_support or other.attached:
            continue
        span = obj.extents.h[:2] + other.extents.h[:2]
        if np.all(np.abs(p[:2] - other.pose.p[:2]) <= span):
            top = other.pose.p[2] + other.extents.h[2]
            if top <= p[2] + slack and top + hz > best:
                best = top + hz
    if drawer is not None and drawer.footprint_contains(p):
        bottom = drawer.interior_bottom_z()
        if bottom <= p[2] + slack and bottom + hz > best:
            best = bottom + hz
    return Pose(np.array([p[0], p[1], best]), obj.pose.q)


def step(scene: Scene, action) -> Scene:
    """Advance one tick; pure function of (scene, action)."""
    a_flat = np.concatenate([action.target.flat(), [action.gripper]])
    if not np.all(np.isfinite(a_flat)):
        raise EpisodeFault("non-finite action")
    ee = scene.ee
    target = ee.compose(action.target)
    max_step = V_MAX * scene.dt
    delta = target.p - ee.p
    dist = float(np.linalg.norm(delta))
    new_p = target.p if dist <= max_step else ee.p + delta * (max_step / dist)
    max_rot = OMEGA_MAX * scene.dt
    ang = quat_angle_between(ee.q, target.q)
    new_q = target.q if ang <= max_rot else quat_slerp(ee.q, target.q, max_rot / ang)
    new_ee = Pose(new_p, new_q)

    drawer = scene.drawer
    if drawer is not None and drawer.grasped:
        moved = float(np.dot(new_ee.p - ee.p, drawer.axis_global()))
        travel = float(np.clip(drawer.travel + moved, 0.0, drawer.max_travel))
        drawer = replace(drawer, travel=travel, max_reached=max(drawer.max_reached, travel))

    close_cmd = action.gripper >= 0.5
    frac_target = 0.0 if close_cmd else 1.0
    if frac_target > scene.gripper:
        gripper = min(frac_target, scene.gripper + GRIP_RATE)
    else:
        gripper = max(frac_target, scene.gripper - GRIP_RATE)

    objects = list(scene.objects)

    if not close_cmd:
        held = scene.held_object()
        if held is not None:
            idx = objects.index(held)
            freed = replace(held, attached=False, attach_local=None)
            settled = replace(freed, pose=_settle_z(freed, tuple(objects), drawer))
            objects[idx] = settled
        if drawer is not None and drawer.grasped:
            drawer = replace(drawer, grasped=False)
    elif not scene.holding_anything():
        candidates = [
            (float(np.linalg.norm(new_ee.p - obj.pose.p)), i)
            for i, obj in enumerate(objects)
            if float(np.linalg.norm(new_ee.p - obj.pose.p)) <= GRASP_TOL
        ]
        if candidates:
            _, i = min(candidates)
            local = new_ee.inverse().compose(objects[i].pose)
            objects[i] = replace(objects[i], attached=True, attach_local=local)
        elif drawer is not None and float(np.linalg.norm(new_ee.p - drawer.handle_point())) <= GRASP_TOL:
            drawer = replace(drawer, grasped=True)

    for i, obj in enumerate(objects):
        if obj.attached:
            objects[i] = replace(obj, pose=new_ee.compose(obj.attach_local))

    return Scene(
        ee=new_ee,
        gripper=gripper,
        objects=tuple(objects),
        drawer=drawer,
        time=scene.time + 1,
        dt=scene.dt,
    )


def observe(scene: Scene, task: TaskSpec) -> StateVector:
    """Model-facing state: object poses re-expressed in the ee frame, fixed slot order."""
    inv = scene.ee.inverse()
    slots = []
    for name in task.slots:
        if name == "drawer":
            pose = scene.drawer.handle_pose()
        else:
            pose = scene.object_by_id(name).pose
        slots.append(inv.compose(pose))
    slots += [None] * (task.j_max - len(slots))
    return StateVector(ee=scene.ee, gripper=scene.gripper, objects=tuple(slots))


def check_success(scene: Scene, task: TaskSpec) -> bool:
    kind = task.success["kind"]
    if kind == "stack":
        pick = scene.object_by_id(task.success["pick"])
        base = scene.object_by_id(task.success["base"])
        if pick.attached:
            return False
        dxy = float(np.linalg.norm(pick.pose.p[:2] - base.pose.p[:2]))
        height = float(pick.extents.h[2] + base.extents.h[2])
        dz = float(pick.pose.p[2] - base.pose.p[2])
        return bool(dxy <= task.success["xy_tol"] and abs(dz - height) <= task.success["z_tol"])
    if kind == "on_peg":
        nut = scene.object_by_id(task.success["nut"])
        peg = scene.object_by_id(task.success["peg"])
        dxy = float(np.linalg.norm(nut.pose.p[:2] - peg.pose.p[:2]))
        peg_top = float(peg.pose.p[2] + peg.extents.h[2])
        return bool(dxy <= task.success["xy_tol"] and float(nut.pose.p[2]) < peg_top and not nut.attached)
    if kind == "drawer_open":
        d = scene.drawer
        return bool(float(d.travel) >= task.success["fraction"] * d.max_travel)
    if kind == "bowl_in_drawer":
        d = scene.drawer
        bowl = scene.object_by_id(task.success["bowl"])
        opened = float(d.max_reached) >= task.success["fraction"] * d.max_travel
        return bool(opened and not bowl.attached and d.contains(bowl.pose.p))
    raise TaskError(f"unknown success kind '{kind}'")


def in_workspace(point: np.ndarray) -> bool:
    return bool(
        np.all(np.abs(point[:2]) <= WORKSPACE_HALF) and 0.0 <= point[2] <= WORKSPACE_HALF
    )
