import dataclasses
import json

import numpy as np
import pytest

from trajcast import demos
from trajcast import simworld as sw

ALL_TASKS = ["A_stack", "B_peg", "D_drawer", "E_bowl_in_drawer"]


def one_episode(task_id="A_stack", seed=0):
    task = sw.get_task(task_id)
    return demos.run_expert_episode(task, demos._scene_seed(seed, 0, 0))


class TestExpert:
    def test_hundred_successes_every_task(self, tmp_path):
        # generate_dataset only returns once every episode succeeded (retries allowed)
        for tid in ALL_TASKS:
            mpath = demos.generate_dataset(tid, 100, tmp_path / tid, base_seed=1)
            manifest = json.loads(mpath.read_text())
            assert manifest["count"] == 100
            assert len(manifest["trajectories"]) == 100
            assert all(e["success"] for e in manifest["trajectories"])
            horizon = sw.get_task(tid).horizon
            assert all(e["steps"] <= horizon for e in manifest["trajectories"])
            trajs = demos.load_dataset(mpath)  # replays a 5% sample
            assert all(t.success for t in trajs)

    def test_single_episode_fields(self):
        traj = one_episode()
        assert traj.task == "A_stack"
        assert traj.success
        assert traj.states.shape == (len(traj), 22)
        assert traj.actions.shape == (len(traj), 8)
        assert len(traj) <= sw.get_task("A_stack").horizon

    def test_gripper_commands_binary_and_used(self):
        traj = one_episode()
        grips = traj.actions[:, 7]
        assert set(np.unique(grips)) == {0.0, 1.0}

    def test_gripper_reopens_by_end(self):
        # the plan releases and retreats, so the recorded fraction recovers to open
        traj = one_episode()
        assert traj.states[-1, 7] == 1.0
        assert np.min(traj.states[:, 7]) == 0.0

    def test_plan_waypoints_inside_workspace(self):
        for tid in ALL_TASKS:
            task = sw.get_task(tid)
            rng = np.random.default_rng(3)
            scene = sw.sample_scene(task, rng)
            for wp in demos.build_plan(task, scene, rng):
                assert sw.in_workspace(wp.p)

    def test_grasp_waypoint_near_target(self):
        task = sw.get_task("A_stack")
        rng = np.random.default_rng(5)
        scene = sw.sample_scene(task, rng)
        plan = demos.build_plan(task, scene, rng)
        grasp = plan[1]
        d = np.linalg.norm(grasp.p - scene.object_by_id("block_a").pose.p)
        assert d <= sw.GRASP_TOL

    def test_unplannable_task_rejected(self):
        task = dataclasses.replace(sw.get_task("A_stack"), id="mystery")
        scene = sw.sample_scene(sw.get_task("A_stack"), np.random.default_rng(0))
        with pytest.raises(demos.DemoError, match="no expert plan"):
            demos.build_plan(task, scene, np.random.default_rng(0))

    def test_pace_validated(self):
        task = sw.get_task("A_stack")
        rng = np.random.default_rng(0)
        scene = sw.sample_scene(task, rng)
        plan = demos.build_plan(task, scene, rng)
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError, match="pace"):
                demos.execute_plan(scene, task, plan, pace=bad)

    def test_horizon_timeout_marks_failure(self):
        task = dataclasses.replace(sw.get_task("A_stack"), horizon=20)
        rng = np.random.default_rng(0)
        scene = sw.sample_scene(task, rng)
        plan = demos.build_plan(task, scene, rng)
        states, actions, _, success = demos.execute_plan(scene, task, plan)
        assert not success
        assert states.shape[0] == 20 and actions.shape[0] == 20

    def test_scene_seeds_distinct(self):
        seeds = {
            demos._scene_seed(0, ep, k) for ep in range(10) for k in range(3)
        }
        assert len(seeds) == 30
        assert demos._scene_seed(0, 4, 1) == demos._scene_seed(0, 4, 1)


class TestTrajectoryIO:
    def test_save_load_roundtrip_exact(self, tmp_path):
        traj = one_episode()
        path = tmp_path / "t.jsonl"
        demos.save_trajectory(path, traj)
        back = demos.load_trajectory(path)
        assert back.task == traj.task
        assert back.scene_seed == traj.scene_seed
        assert back.j_max == traj.j_max
        assert back.dt == traj.dt
        assert back.success == traj.success
        assert np.array_equal(back.states, traj.states)
        assert np.array_equal(back.actions, traj.actions)

    def test_replay_is_bit_exact(self, tmp_path):
        traj = one_episode()
        path = tmp_path / "t.jsonl"
        demos.save_trajectory(path, traj)
        demos.replay_trajectory(demos.load_trajectory(path), tol=0.0)

    def test_replay_within_default_tolerance(self):
        demos.replay_trajectory(one_episode("D_drawer"), tol=1e-9)

    def test_tampered_state_fails_replay(self):
        traj = one_episode()
        states = traj.states.copy()
        states[10, 0] += 1e-6
        bad = dataclasses.replace(traj, states=states)
        with pytest.raises(demos.ReplayError, match="deviates"):
            demos.replay_trajectory(bad, tol=1e-9)

    def test_tampered_outcome_fails_replay(self):
        traj = one_episode()
        bad = dataclasses.replace(traj, success=False)
        with pytest.raises(demos.ReplayError, match="outcome"):
            demos.replay_trajectory(bad)

    def test_header_line_contents(self, tmp_path):
        traj = one_episode()
        path = tmp_path / "t.jsonl"
        demos.save_trajectory(path, traj)
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        assert header == {
            "format_version": 1,
            "task": "A_stack",
            "seed": traj.scene_seed,
            "J_max": 2,
            "dt": traj.dt,
        }
        assert json.loads(lines[-1]) == {"success": True}
        row0 = json.loads(lines[1])
        assert row0["t"] == 0
        assert len(row0["s"]) == 22 and len(row0["a"]) == 8


class TestFormatErrors:
    def write_lines(self, tmp_path, lines):
        p = tmp_path / "bad.jsonl"
        p.write_text("\n".join(lines) + "\n")
        return p

    def good_lines(self, tmp_path):
        traj = one_episode("D_drawer")
        p = tmp_path / "good.jsonl"
        demos.save_trajectory(p, traj)
        return p.read_text().splitlines()

    def test_wrong_version(self, tmp_path):
        lines = self.good_lines(tmp_path)
        header = json.loads(lines[0])
        header["format_version"] = 9
        p = self.write_lines(tmp_path, [json.dumps(header)] + lines[1:])
        with pytest.raises(demos.TrajectoryFormatError, match="version"):
            demos.load_trajectory(p)

    def test_missing_header_key(self, tmp_path):
        lines = self.good_lines(tmp_path)
        header = json.loads(lines[0])
        del header["dt"]
        p = self.write_lines(tmp_path, [json.dumps(header)] + lines[1:])
        with pytest.raises(demos.TrajectoryFormatError, match="dt"):
            demos.load_trajectory(p)

    def test_missing_success_marker(self, tmp_path):
        lines = self.good_lines(tmp_path)
        p = self.write_lines(tmp_path, lines[:-1])
        with pytest.raises(demos.TrajectoryFormatError, match="success"):
            demos.load_trajectory(p)

    def test_non_monotonic_steps(self, tmp_path):
        lines = self.good_lines(tmp_path)
        row = json.loads(lines[2])
        row["t"] = 7
        lines[2] = json.dumps(row)
        p = self.write_lines(tmp_path, lines)
        with pytest.raises(demos.TrajectoryFormatError, match="t="):
            demos.load_trajectory(p)

    def test_wrong_state_width(self, tmp_path):
        lines = self.good_lines(tmp_path)
        row = json.loads(lines[1])
        row["s"] = row["s"][:-1]
        lines[1] = json.dumps(row)
        p = self.write_lines(tmp_path, lines)
        with pytest.raises(demos.TrajectoryFormatError, match="width"):
            demos.load_trajectory(p)

    def test_garbled_row(self, tmp_path):
        lines = self.good_lines(tmp_path)
        lines[3] = "{not json"
        p = self.write_lines(tmp_path, lines)
        with pytest.raises(demos.TrajectoryFormatError, match="bad row"):
            demos.load_trajectory(p)

    def test_truncated_file(self, tmp_path):
        p = self.write_lines(tmp_path, ["{}"])
        with pytest.raises(demos.TrajectoryFormatError, match="too short"):
            demos.load_trajectory(p)

    def test_manifest_version_checked(self, tmp_path):
        demos.generate_dataset("D_drawer", 2, tmp_path, base_seed=0)
        mpath = tmp_path / "manifest.json"
        m = json.loads(mpath.read_text())
        m["format_version"] = 3
        mpath.write_text(json.dumps(m))
        with pytest.raises(demos.TrajectoryFormatError, match="manifest version"):
            demos.load_dataset(mpath)


class TestDatasets:
    def test_generation_byte_identical(self, tmp_path):
        a = demos.generate_dataset("B_peg", 5, tmp_path / "a", base_seed=9)
        b = demos.generate_dataset("B_peg", 5, tmp_path / "b", base_seed=9)
        files_a = sorted(p.name for p in a.parent.iterdir())
        files_b = sorted(p.name for p in b.parent.iterdir())
        assert files_a == files_b
        for name in files_a:
            assert (a.parent / name).read_bytes() == (b.parent / name).read_bytes()

    def test_seed_changes_content(self, tmp_path):
        a = demos.generate_dataset("D_drawer", 2, tmp_path / "a", base_seed=0)
        b = demos.generate_dataset("D_drawer", 2, tmp_path / "b", base_seed=1)
        name = "D_drawer_0000.jsonl"
        assert (a.parent / name).read_bytes() != (b.parent / name).read_bytes()

    def test_load_order_matches_manifest(self, tmp_path):
        mpath = demos.generate_dataset("D_drawer", 4, tmp_path, base_seed=2)
        manifest = json.loads(mpath.read_text())
        trajs = demos.load_dataset(mpath, validate_fraction=0.0)
        assert [t.scene_seed for t in trajs] == [
            e["scene_seed"] for e in manifest["trajectories"]
        ]

    def test_validation_catches_edited_file(self, tmp_path):
        mpath = demos.generate_dataset("D_drawer", 2, tmp_path, base_seed=4)
        fpath = tmp_path / "D_drawer_0000.jsonl"
        lines = fpath.read_text().splitlines()
        row = json.loads(lines[5])
        row["s"][0] += 1e-5
        lines[5] = json.dumps(row)
        fpath.write_text("\n".join(lines) + "\n")
        with pytest.raises(demos.ReplayError):
            demos.load_dataset(mpath, validate_fraction=1.0)
