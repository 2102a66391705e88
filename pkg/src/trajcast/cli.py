"""Command line interface: demo generation, training, evaluation, serving.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures. Every
artifact a command writes embeds the effective configuration and seed that
produced it, so runs can be reproduced from the artifact alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, load_model, restore_params, save_checkpoint
from .config import ConfigError, build_run_config, load_config_file
from .demos import DEFAULT_PACE, generate_dataset, load_dataset
from .model import count_params, init_params
from .rollout import MODES, _episode_seed, benchmark, run_episode
from .simworld import DT, get_task, list_tasks
from .training import train_loop, write_loss_curve

PROG = "trajcast"
DEFAULT_BIND = "127.0.0.1:8765"
BIND_ENV = "TELEOP_BIND"


class _UsageError(Exception):
    def __init__(self, parser: argparse.ArgumentParser, message: str):
        super().__init__(message)
        self.parser = parser
        self.message = message


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; this CLI reserves 2 for
    # runtime failures, so usage problems are rerouted to exit code 1
    def error(self, message):
        raise _UsageError(self, message)


def build_parser() -> _Parser:
    p = _Parser(prog=PROG, description="trajectory autocomplete for teleoperated manipulation")
    p.add_argument("--workdir", default=".", help="base directory for relative paths")
    sub = p.add_subparsers(dest="command", metavar="command")

    g = sub.add_parser("gen-data", help="record scripted expert demonstrations")
    g.add_argument("--task", required=True, help="task id, e.g. A_stack")
    g.add_argument("--n", type=int, required=True, help="number of successful episodes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--pace", type=float, default=DEFAULT_PACE)

    for name, hlp in (
        ("pretrain", "train a model from scratch on demonstration data"),
        ("finetune", "train on demonstration data, optionally from a checkpoint"),
    ):
        t = sub.add_parser(name, help=hlp)
        t.add_argument("--data", nargs="+", required=True, help="dataset manifest path(s)")
        if name == "finetune":
            t.add_argument("--init", default=None, help="checkpoint to initialize from")
        t.add_argument("--config", default=None, help="JSON config profile")
        t.add_argument("--out", required=True, help="checkpoint path to write")
        t.add_argument("--steps", type=int, default=None)
        t.add_argument("--batch-size", type=int, default=None)
        t.add_argument("--seed", type=int, default=None)

    e = sub.add_parser("eval", help="run closed-loop episodes from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", required=True)
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--mode", choices=MODES, default="auto")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--config", default=None, help="JSON config profile (rollout overrides)")
    e.add_argument("--out", default=None, help="write a JSON report here")

    b = sub.add_parser("benchmark", help="run a task x mode suite, write CSV and JSON")
    b.add_argument("--suite", required=True, help="suite description JSON")
    b.add_argument("--out", required=True, help="output path prefix")

    s = sub.add_parser("serve", help="serve live control sessions over WebSocket")
    s.add_argument("--bind", default=None, help=f"host:port (default ${BIND_ENV} or {DEFAULT_BIND})")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--tasks", nargs="+", default=None, help="task ids to expose (default: all)")
    s.add_argument("--tick-hz", type=float, default=15.0)
    return p


def _resolve(workdir: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else workdir / p


def _load_profile(workdir: Path, path) -> dict:
    if path is None:
        return {}
    return load_config_file(_resolve(workdir, path))


def _load_training_data(workdir: Path, manifest_args: list[str]):
    dataset = []
    manifests = []
    for arg in manifest_args:
        mpath = _resolve(workdir, arg)
        trajs = load_dataset(mpath)
        dataset.extend((t.states, t.actions) for t in trajs)
        manifests.append(str(mpath))
    return dataset, manifests


def _train_command(args, workdir: Path) -> int:
    layers = []
    init_arrays = None
    init_path = getattr(args, "init", None)
    if init_path is not None:
        init_arrays, header = load_checkpoint(str(_resolve(workdir, init_path)))
        # carry the whole embedded run config so training continues under the
        # settings the checkpoint was built with, unless overridden below
        embedded = dict(header.get("extra", {}).get("run_config", {}))
        embedded["model"] = dict(header["config"])
        layers.append(embedded)
    layers.append(_load_profile(workdir, args.config))
    flags: dict = {}
    if args.steps is not None:
        flags["steps"] = args.steps
    if args.batch_size is not None:
        flags["batch_size"] = args.batch_size
    if args.seed is not None:
        flags["seed"] = args.seed
    layers.append({"train": flags} if flags else {})
    run = build_run_config(*layers)
    dataset, manifests = _load_training_data(workdir, args.data)

    params = init_params(run.model, np.random.default_rng(run.train.seed))
    if init_arrays is not None:
        restore_params(params, init_arrays)
    result = train_loop(dataset, run.model, run.train, weights=run.loss, init=params)
    if result.diverged:
        raise RuntimeError(f"training diverged after {result.steps_run} steps")

    out = _resolve(workdir, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    extra = {
        "command": args.command,
        "run_config": run.to_dict(),
        "seed": run.train.seed,
        "data": [Path(m).name for m in manifests],
        "init": Path(init_path).name if init_path else None,
        "steps_run": result.steps_run,
    }
    save_checkpoint(str(out), result.params, dict(run.to_dict()["model"]), extra=extra)
    write_loss_curve(str(out.with_name(out.stem + ".curve.csv")), result.curve)
    final = result.curve[-1]["total"] if result.curve else float("nan")
    print(f"checkpoint={out} params={count_params(result.params)} steps={result.steps_run} final_loss={final!r}")
    return 0


def _eval_command(args, workdir: Path) -> int:
    ckpt = _resolve(workdir, args.checkpoint)
    params, ckpt_layer = load_model(str(ckpt))
    run = build_run_config(ckpt_layer, _load_profile(workdir, args.config))
    task = get_task(args.task)
    if args.episodes < 1:
        raise ValueError("--episodes must be at least 1")

    results = []
    for ep in range(args.episodes):
        seed = _episode_seed(args.seed, 0, MODES.index(args.mode), ep)
        results.append(run_episode(params, run.model, task, seed, args.mode, config=run.rollout))
    rate = sum(r.success for r in results) / len(results)
    mean_steps = sum(r.steps for r in results) / len(results)
    mean_manual = sum(r.manual_time_s for r in results) / len(results)
    print(
        f"task={args.task} mode={args.mode} episodes={args.episodes} "
        f"success_rate={rate!r} mean_steps={mean_steps!r} mean_manual_time_s={mean_manual!r}"
    )
    if args.out is not None:
        report = {
            "checkpoint": ckpt.name,
            "task": args.task,
            "mode": args.mode,
            "episodes": args.episodes,
            "seed": args.seed,
            "success_rate": rate,
            "mean_steps": mean_steps,
            "mean_manual_time_s": mean_manual,
            "config": run.to_dict(),
            "per_episode": [
                {
                    "scene_seed": r.scene_seed,
                    "success": r.success,
                    "steps": r.steps,
                    "manual_steps": r.manual_steps,
                    "manual_time_s": r.manual_time_s,
                    "interventions": r.interventions,
                }
                for r in results
            ],
        }
        out = _resolve(workdir, args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = out.with_name(out.name + ".tmp")
        tmp.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, out)
    return 0


_SUITE_KEYS = {"checkpoint", "tasks", "modes", "n", "seed", "rollout"}


def _benchmark_command(args, workdir: Path) -> int:
    suite_path = _resolve(workdir, args.suite)
    try:
        suite = json.loads(suite_path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{suite_path}: not valid JSON: {e}") from e
    if not isinstance(suite, dict):
        raise ConfigError(f"{suite_path}: suite must be an object")
    for key in suite:
        if key not in _SUITE_KEYS:
            raise ConfigError(f"{suite_path}: unknown suite key '{key}'")
    for key in ("checkpoint", "tasks", "n"):
        if key not in suite:
            raise ConfigError(f"{suite_path}: suite is missing required key '{key}'")

    ckpt = _resolve(suite_path.parent, suite["checkpoint"])
    params, ckpt_layer = load_model(str(ckpt))
    rollout_layer = {"rollout": suite["rollout"]} if "rollout" in suite else {}
    run = build_run_config(ckpt_layer, rollout_layer)
    tasks = [get_task(t) for t in suite["tasks"]]
    modes = suite.get("modes", list(MODES))
    n = int(suite["n"])
    seed = int(suite.get("seed", 0))

    out = _resolve(workdir, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out.with_name(out.name + ".csv")
    json_path = out.with_name(out.name + ".json")
    meta = {
        "checkpoint": ckpt.name,
        "tasks": [t.id for t in tasks],
        "modes": list(modes),
        "n": n,
        "seed": seed,
        "config": run.to_dict(),
    }
    benchmark(
        params,
        run.model,
        tasks,
        modes,
        n,
        base_seed=seed,
        config=run.rollout,
        csv_path=csv_path,
        json_path=json_path,
        meta=meta,
    )
    print(f"wrote {csv_path} and {json_path}")
    return 0


def resolve_bind(bind_arg: str | None) -> tuple[str, int]:
    """Explicit --bind wins, then the TELEOP_BIND environment variable, then the default."""
    bind = bind_arg or os.environ.get(BIND_ENV) or DEFAULT_BIND
    host, _, port_text = bind.rpartition(":")
    if not host or not port_text.isdigit():
        raise ValueError(f"--bind expects host:port, got '{bind}'")
    return host, int(port_text)


def _serve_command(args, workdir: Path) -> int:
    import uvicorn

    from .service import create_app

    host, port = resolve_bind(args.bind)
    if args.tick_hz <= 0:
        raise ValueError("--tick-hz must be positive")
    task_ids = args.tasks if args.tasks is not None else list_tasks()
    app = create_app(
        checkpoint_path=str(_resolve(workdir, args.checkpoint)),
        task_ids=task_ids,
        tick_hz=args.tick_hz,
    )
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a command is required")
        workdir = Path(args.workdir).resolve()
        if args.command == "gen-data":
            manifest = generate_dataset(
                args.task, args.n, _resolve(workdir, args.out), base_seed=args.seed, pace=args.pace
            )
            print(str(manifest))
            return 0
        if args.command in ("pretrain", "finetune"):
            return _train_command(args, workdir)
        if args.command == "eval":
            return _eval_command(args, workdir)
        if args.command == "benchmark":
            return _benchmark_command(args, workdir)
        if args.command == "serve":
            return _serve_command(args, workdir)
        parser.error(f"unknown command '{args.command}'")
    except _UsageError as e:
        sys.stderr.write(e.parser.format_usage())
        sys.stderr.write(f"{PROG}: error: {e.message}\n")
        return 1
    except SystemExit as e:  # argparse --help
        return int(e.code or 0)
    except KeyboardInterrupt:
        return 2
    except Exception as e:
        sys.stderr.write(f"{PROG}: error: {e}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
