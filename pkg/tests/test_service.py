"""Live session service tests: REST endpoints, wire protocol, and parity.

The parity tests drive the service with a scripted operator that mirrors the
in-process rollout loop on a local scene replica, so every streamed state can
be compared float for float against what the engine itself would produce.
"""

import asyncio
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from trajcast.checkpoint import save_checkpoint
from trajcast.config import build_run_config
from trajcast.geometry import Pose
from trajcast.model import ActionVector, init_params
from trajcast.rollout import WaypointFollower, run_episode
from trajcast.service import Outbox, create_app
from trajcast.simworld import DT, check_success, get_task, list_tasks, sample_scene, step

TINY = {
    "model": {
        "layers": 1,
        "heads": 2,
        "d_model": 32,
        "d_emb": 16,
        "T_s": 30,
        "j_max": 2,
        "vocab_max": 64,
        "dropout": 0.0,
        "activation": "relu",
    },
    "rollout": {"T_p_eval": 10, "T_f": 20, "T_e": 5},
}

NUDGE = {"kind": "manual_action", "p": [0.0, 0.0, 0.01], "q": [1.0, 0.0, 0.0, 0.0], "grip": 0.0}


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    run = build_run_config(TINY)
    params = init_params(run.model, np.random.default_rng(3))
    path = tmp_path_factory.mktemp("service") / "tiny.ckpt"
    save_checkpoint(str(path), params, dict(run.to_dict()["model"]), extra={"run_config": run.to_dict()})
    return str(path), params, run


@pytest.fixture(scope="module")
def client(bundle):
    # moderate tick rate: wide enough windows for reset-then-takeover tests
    path, _, _ = bundle
    return TestClient(create_app(path, None, tick_hz=100.0))


@pytest.fixture(scope="module")
def fast_client(bundle):
    # high tick rate keeps full-horizon auto episodes quick
    path, _, _ = bundle
    return TestClient(create_app(path, None, tick_hz=500.0))


def wire_floats(values):
    return [float(v) for v in values]


def read_until(ws, pred, limit=20000):
    for _ in range(limit):
        frame = ws.receive_json()
        if pred(frame):
            return frame
    raise AssertionError("expected frame not seen within limit")


def expect_error(ws, needle):
    frame = read_until(ws, lambda f: f["kind"] == "error")
    assert needle in frame["message"], frame["message"]
    return frame


class TestRest:
    def test_health(self, client, bundle):
        _, _, run = bundle
        body = client.get("/health").json()
        assert body["status"] == "ok"
        assert body["checkpoint"] == "tiny.ckpt"
        assert body["tasks"] == sorted(list_tasks())
        assert body["tick_hz"] == 100.0
        assert body["dt"] == DT
        assert body["T_f"] == run.rollout.T_f

    def test_task_listing(self, client):
        rows = client.get("/tasks").json()
        assert [r["id"] for r in rows] == sorted(list_tasks())
        by_id = {r["id"]: r for r in rows}
        a = get_task("A_stack")
        assert by_id["A_stack"]["horizon"] == a.horizon
        assert by_id["A_stack"]["j_max"] == a.j_max
        assert by_id["A_stack"]["objects"] == [o.id for o in a.objects]
        assert by_id["A_stack"]["drawer"] is False
        assert by_id["D_drawer"]["drawer"] is True


class TestReset:
    def test_first_state_reflects_seeded_scene(self, client):
        task = get_task("A_stack")
        scene = sample_scene(task, np.random.default_rng(7))
        with client.websocket_connect("/session") as ws:
            ws.send_json({"kind": "reset", "task": "A_stack", "seed": 7})
            frame = ws.receive_json()
            assert frame["kind"] == "state_update"
            assert frame["t"] == 0
            assert frame["mode"] == "auto"
            assert frame["task"] == "A_stack"
            assert frame["seed"] == 7
            assert frame["ee"]["p"] == wire_floats(scene.ee.p)
            assert frame["ee"]["q"] == wire_floats(scene.ee.q)
            assert frame["gripper"] == float(scene.gripper)
            assert frame["drawer"] is None
            for got, obj in zip(frame["objects"], scene.objects):
                assert got["id"] == obj.id
                assert got["p"] == wire_floats(obj.pose.p)
                assert got["q"] == wire_floats(obj.pose.q)
                assert got["extents"] == wire_floats(obj.extents.h)
            assert frame["counters"] == {"manual_steps": 0, "manual_time_s": 0.0, "interventions": 0}

    def test_drawer_fields_serialized(self, client):
        task = get_task("D_drawer")
        scene = sample_scene(task, np.random.default_rng(3))
        with client.websocket_connect("/session") as ws:
            ws.send_json({"kind": "reset", "task": "D_drawer", "seed": 3})
            frame = ws.receive_json()
            d = frame["drawer"]
            assert d["travel"] == 0.0
            assert d["max_travel"] == float(scene.drawer.max_travel)
            assert d["base_p"] == wire_floats(scene.drawer.base.p)
            assert d["axis"] == wire_floats(scene.drawer.axis_global())
            assert d["handle"] == wire_floats(scene.drawer.handle_point())
            assert d["grasped"] is False

    def test_reset_replaces_running_episode(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_json({"kind": "reset", "task": "A_stack", "seed": 1})
            read_until(ws, lambda f: f["kind"] == "state_update" and f["t"] >= 2)
            ws.send_json({"kind": "reset", "task": "B_peg", "seed": 2})
            frame = read_until(ws, lambda f: f["kind"] == "state_update" and f["task"] == "B_peg")
            assert frame["t"] == 0
            assert frame["seed"] == 2


class TestAutoEpisode:
    def test_runs_to_episode_end_and_matches_run_episode(self, bundle, fast_client):
        _, params, run = bundle
        task = get_task("A_stack")
        seed = 7
        states = []
        forecasts = []
        with fast_client.websocket_connect("/session") as ws:
            ws.send_json({"kind": "reset", "task": "A_stack", "seed": seed})
            while True:
                frame = ws.receive_json()
                if frame["kind"] == "state_update":
                    states.append(frame)
                elif frame["kind"] == "forecast_update":
                    forecasts.append(frame)
                elif frame["kind"] == "episode_end":
                    end = frame
                    break

        # untouched session: one state per step from snapshot to horizon
        assert [f["t"] for f in states] == list(range(task.horizon + 1))
        assert all(f["mode"] == "auto" for f in states)

        # the first executed step is the scripted warmup, bit for bit
        rng = np.random.default_rng(seed)
        local = sample_scene(task, rng)
        follower = WaypointFollower(task, local, rng, pace=run.rollout.pace)
        follower.advance(local)
        local = step(local, follower.action(local))
        assert states[1]["ee"]["p"] == wire_floats(local.ee.p)
        assert states[1]["ee"]["q"] == wire_floats(local.ee.q)
        assert states[1]["counters"]["manual_steps"] == 1

        # every forecast spans exactly the configured horizon
        assert forecasts
        assert all(len(f["ee"]) == run.rollout.T_f for f in forecasts)
        assert all(len(f["grip"]) == run.rollout.T_f for f in forecasts)
        assert all(set(e) == {"p", "q"} for f in forecasts for e in f["ee"])

        ref = run_episode(params, run.model, task, seed, "auto", config=run.rollout)
        assert end["success"] == ref.success
        assert end["steps"] == ref.steps
        assert end["manual_steps"] == ref.manual_steps
        assert end["manual_time_s"] == ref.manual_time_s
        assert end["interventions"] == 0
        assert end["t"] == end["steps"]


class TestManualParity:
    def test_scripted_operator_reproduces_local_episode(self, bundle, client):
        _, params, run = bundle
        task = get_task("A_stack")
        seed = 11
        ref = run_episode(params, run.model, task, seed, "manual", config=run.rollout)
        assert ref.success  # the scripted operator finishes this scene

        rng = np.random.default_rng(seed)
        local = sample_scene(task, rng)
        follower = WaypointFollower(task, local, rng, pace=run.rollout.pace)

        with client.websocket_connect("/session") as ws:
            ws.send_json({"kind": "reset", "task": "A_stack", "seed": seed})
            ws.send_json({"kind": "takeover"})  # lands before the first tick
            first = ws.receive_json()
            assert first["t"] == 0 and first["mode"] == "auto"
            echo = read_until(ws, lambda f: f["kind"] == "state_update" and f["mode"] == "manual")
            assert echo["t"] == 0, "takeover raced an auto step"
            assert echo["counters"]["interventions"] == 1

            sent = 0
            ended = None
            while not (check_success(local, task) or sent >= task.horizon):
                follower.advance(local)
                if follower.done():
                    follower = WaypointFollower(task, local, rng, pace=run.rollout.pace)
                    follower.advance(local)
                    if follower.done():
                        break
                a = follower.action(local)
                wire = {
                    "kind": "manual_action",
                    "p": wire_floats(a.target.p),
                    "q": wire_floats(a.target.q),
                    "grip": float(a.gripper),
                }
                ws.send_json(wire)
                # mirror the server's wire decode before stepping the replica
                decoded = ActionVector(
                    Pose(np.asarray(wire["p"]), np.asarray(wire["q"])), float(wire["grip"])
                )
                local = step(local, decoded)
                sent += 1
                frame = read_until(
                    ws,
                    lambda f: f["kind"] == "episode_end"
                    or (f["kind"] == "state_update" and f["t"] == sent),
                )
                if frame["kind"] == "episode_end":
                    ended = frame
                    break
                assert frame["ee"]["p"] == wire_floats(local.ee.p)
                assert frame["ee"]["q"] == wire_floats(local.ee.q)
                assert frame["gripper"] == float(local.gripper)
                for got in frame["objects"]:
                    obj = local.object_by_id(got["id"])
                    assert got["p"] == wire_floats(obj.pose.p)
                    assert got["q"] == wire_floats(obj.pose.q)
                assert frame["counters"]["manual_steps"] == sent
            if ended is None:
                ended = read_until(ws, lambda f: f["kind"] == "episode_end")

        assert ended["success"] == ref.success
        assert ended["steps"] == ref.steps == sent
        assert ended["manual_steps"] == ref.manual_steps
        assert ended["manual_time_s"] == ref.manual_time_s
        assert ended["interventions"] == 1


class TestProtocol:
    def test_before_reset_rejected(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_json({"kind": "takeover"})
            expect_error(ws, "before reset")
            ws.send_json(dict(NUDGE))
            expect_error(ws, "before reset")

    def test_manual_action_requires_takeover(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_json({"kind": "reset", "task": "A_stack", "seed": 0})
            ws.receive_json()
            ws.send_json(dict(NUDGE))
            expect_error(ws, "requires takeover")
            # the session keeps running: a takeover is still accepted
            ws.send_json({"kind": "takeover"})
            frame = read_until(ws, lambda f: f["kind"] == "state_update" and f["mode"] == "manual")
            assert frame["counters"]["interventions"] == 1

    def test_double_takeover_and_bad_release(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_json({"kind": "reset", "task": "A_stack", "seed": 0})
            ws.receive_json()
            ws.send_json({"kind": "release"})
            expect_error(ws, "not in manual mode")
            ws.send_json({"kind": "takeover"})
            ws.send_json({"kind": "takeover"})
            expect_error(ws, "already in manual mode")

    def test_malformed_frames_keep_session_alive(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_text("not json at all")
            expect_error(ws, "not valid JSON")
            ws.send_text(json.dumps([1, 2, 3]))
            expect_error(ws, "JSON object")
            ws.send_json({"kind": "selfdestruct"})
            expect_error(ws, "unknown message kind 'selfdestruct'")
            ws.send_json({"kind": "reset", "task": "A_stack"})
            expect_error(ws, "seed")
            ws.send_json({"kind": "reset", "task": "A_stack", "seed": 4, "bonus": 1})
            expect_error(ws, "bonus")
            ws.send_json({"kind": "reset", "task": "Z_lift", "seed": 4})
            expect_error(ws, "unknown task 'Z_lift'")
            # after all that abuse a clean reset still starts an episode
            ws.send_json({"kind": "reset", "task": "A_stack", "seed": 4})
            frame = read_until(ws, lambda f: f["kind"] == "state_update")
            assert frame["t"] == 0 and frame["seed"] == 4

    def test_bad_manual_action_payloads(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_json({"kind": "reset", "task": "A_stack", "seed": 0})
            ws.receive_json()
            ws.send_json({"kind": "takeover"})
            echo = read_until(ws, lambda f: f["kind"] == "state_update" and f["mode"] == "manual")
            base = echo["counters"]["manual_steps"]
            bad_grip = dict(NUDGE, grip=0.5)
            ws.send_json(bad_grip)
            expect_error(ws, "grip must be 0 or 1")
            bad_quat = dict(NUDGE, q=[0.0, 0.0, 0.0, 0.0])
            ws.send_json(bad_quat)
            expect_error(ws, "bad manual_action")
            short = dict(NUDGE, p=[1.0])
            ws.send_json(short)
            expect_error(ws, "p")
            # only the valid nudge lands afterwards; the rejects left no trace
            ws.send_json(dict(NUDGE))
            frame = read_until(
                ws,
                lambda f: f["kind"] == "state_update"
                and f["counters"]["manual_steps"] == base + 1,
            )
            assert frame["mode"] == "manual"

    def test_episode_end_freezes_session_until_reset(self, bundle):
        # a dedicated brisk app so the horizon passes in well under a second
        path, _, _ = bundle
        quick = TestClient(create_app(path, ["A_stack"], tick_hz=2000.0))
        with quick.websocket_connect("/session") as ws:
            ws.send_json({"kind": "reset", "task": "A_stack", "seed": 5})
            read_until(ws, lambda f: f["kind"] == "episode_end")
            ws.send_json({"kind": "takeover"})
            expect_error(ws, "after episode_end")
            ws.send_json({"kind": "reset", "task": "A_stack", "seed": 6})
            frame = read_until(ws, lambda f: f["kind"] == "state_update")
            assert frame["t"] == 0 and frame["seed"] == 6


class TestTakeoverRelease:
    def test_counters_and_mode_flow(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_json({"kind": "reset", "task": "A_stack", "seed": 9})
            before = read_until(ws, lambda f: f["kind"] == "state_update" and f["t"] >= 3)
            ws.send_json({"kind": "takeover"})
            manual = read_until(ws, lambda f: f["kind"] == "state_update" and f["mode"] == "manual")
            ws.send_json({"kind": "release"})
            released = read_until(ws, lambda f: f["kind"] == "state_update" and f["mode"] == "auto")
            # takeover and release alone leave no trace in the manual counters
            assert released["counters"]["manual_steps"] == before["counters"]["manual_steps"]
            assert released["counters"]["manual_time_s"] == before["counters"]["manual_time_s"]
            assert manual["counters"]["interventions"] == 1
            # auto execution resumes after release
            later = read_until(ws, lambda f: f["kind"] == "state_update" and f["t"] > released["t"])
            assert later["mode"] == "auto"

    def test_release_resumes_model_from_manual_history(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_json({"kind": "reset", "task": "A_stack", "seed": 2})
            ws.send_json({"kind": "takeover"})
            echo = read_until(ws, lambda f: f["kind"] == "state_update" and f["mode"] == "manual")
            target = echo["counters"]["manual_steps"] + 3
            for _ in range(3):
                ws.send_json(dict(NUDGE))
            landed = read_until(
                ws,
                lambda f: f["kind"] == "state_update"
                and f["counters"]["manual_steps"] == target,
            )
            ws.send_json({"kind": "release"})
            # the next executed step comes from the model, fed by manual history
            frame = read_until(
                ws, lambda f: f["kind"] == "state_update" and f["t"] == landed["t"] + 1
            )
            assert frame["mode"] == "auto"
            assert frame["counters"]["manual_steps"] == target
            fc = read_until(
                ws, lambda f: f["kind"] == "forecast_update" and f["t"] > landed["t"]
            )
            assert len(fc["ee"]) == 20

    def test_forecast_refreshes_during_manual_mode(self, client):
        with client.websocket_connect("/session") as ws:
            ws.send_json({"kind": "reset", "task": "A_stack", "seed": 2})
            ws.send_json({"kind": "takeover"})
            read_until(ws, lambda f: f["kind"] == "state_update" and f["mode"] == "manual")
            ws.send_json(dict(NUDGE))
            fc = read_until(ws, lambda f: f["kind"] == "forecast_update")
            assert fc["t"] >= 1
            assert len(fc["ee"]) == 20


class TestConcurrentSessions:
    def test_two_connections_stay_independent(self, client):
        with client.websocket_connect("/session") as a, client.websocket_connect("/session") as b:
            a.send_json({"kind": "reset", "task": "A_stack", "seed": 1})
            b.send_json({"kind": "reset", "task": "A_stack", "seed": 2})
            fa = a.receive_json()
            fb = b.receive_json()
            assert fa["seed"] == 1 and fb["seed"] == 2
            # different seeds place the movable block differently
            pa = next(o["p"] for o in fa["objects"] if not o["attached"])
            pb = next(o["p"] for o in fb["objects"] if not o["attached"])
            assert pa != pb
            # takeover on one must not pause the other
            a.send_json({"kind": "takeover"})
            read_until(a, lambda f: f["kind"] == "state_update" and f["mode"] == "manual")
            fb2 = read_until(b, lambda f: f["kind"] == "state_update" and f["t"] >= 2)
            assert fb2["mode"] == "auto"
            assert all(f["seed"] == 2 for f in [fb, fb2])

    def test_task_subset_is_enforced(self, bundle):
        path, _, _ = bundle
        limited = TestClient(create_app(path, ["A_stack", "B_peg"], tick_hz=100.0))
        assert limited.get("/health").json()["tasks"] == ["A_stack", "B_peg"]
        with limited.websocket_connect("/session") as ws:
            ws.send_json({"kind": "reset", "task": "D_drawer", "seed": 0})
            expect_error(ws, "unknown task 'D_drawer'")


class TestOutbox:
    def test_droppable_frames_are_superseded(self):
        box = Outbox()
        box.put({"kind": "state_update", "t": 1})
        box.put({"kind": "forecast_update", "t": 1}, droppable=True)
        box.put({"kind": "state_update", "t": 2})
        box.put({"kind": "forecast_update", "t": 2}, droppable=True)
        box.put({"kind": "forecast_update", "t": 3}, droppable=True)
        frames = [json.loads(text) for text, _ in box._frames]
        assert [f["kind"] for f in frames] == ["state_update", "state_update", "forecast_update"]
        assert frames[-1]["t"] == 3
        assert [f["t"] for f in frames if f["kind"] == "state_update"] == [1, 2]

    def test_writer_sends_in_order(self):
        class Sink:
            def __init__(self):
                self.sent = []

            async def send_text(self, text):
                self.sent.append(json.loads(text))

        async def drive():
            box = Outbox()
            sink = Sink()
            writer = asyncio.ensure_future(box.run(sink))
            box.put({"kind": "state_update", "t": 1})
            box.put({"kind": "forecast_update", "t": 1}, droppable=True)
            await asyncio.sleep(0.01)
            writer.cancel()
            return sink.sent

        sent = asyncio.run(drive())
        assert [f["kind"] for f in sent] == ["state_update", "forecast_update"]


class TestAppFactory:
    def test_rejects_bad_tick_rate(self, bundle):
        path, _, _ = bundle
        with pytest.raises(ValueError, match="tick_hz"):
            create_app(path, None, tick_hz=0.0)

    def test_rejects_unknown_task_at_startup(self, bundle):
        path, _, _ = bundle
        with pytest.raises(Exception, match="unknown task"):
            create_app(path, ["A_stack", "Z_lift"], tick_hz=100.0)
