"""Command-line entry point.

Subcommands: validate, plan, train, schedule, optimize, simulate, report.
Every command is deterministic under a fixed seed and configuration, and
re-runs produce byte-identical outputs.  Exit status is 0 only when there
are no errors and no invariant violations (1 = violations, 2 = errors).

Options resolve in precedence order: command-line flag, then environment
variable ``BLOCKPIPE_<NAME>``, then the --config JSON file, then the
built-in default.  The freezing knob is exposed as ``--frozen-ratio`` (the
fraction of prerequisite columns held fixed); ``--delta`` is its
complement (the activated fraction), and the two are mutually exclusive.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .costs import load_profile
from .errors import BlockPipeError
from .optimize import StageTasks, optimize, result_to_dict
from .plan import build_plan, partition_blocks, plan_to_dict, validate_plan
from .schedule import (
    Grouping,
    Partition,
    build_task_schedule,
    schedule_from_dict,
    schedule_to_dict,
    simulate,
    trace_summary_rows,
    trace_to_rows,
)
from .taskgraph import extract_layers, graph_from_dict, prerequisites
from .trainer import init_model, run_plan, save_checkpoint, synthetic_dataset
from . import report as report_mod

ENV_PREFIX = "BLOCKPIPE_"

EXIT_OK = 0
EXIT_VIOLATIONS = 1
EXIT_ERROR = 2


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for a reproducible run; the seed has no default."""

    graph: str | None
    costs: str | None
    d_out: int
    d_in: int
    rank: int
    frozen_ratio: float
    lr: float
    steps_per_stage: int
    seed: int | None
    k_max: int
    dataset_size: int
    out: str | None

    @property
    def delta(self) -> float:
        return 1.0 - self.frozen_ratio


_DEFAULTS = RunConfig(
    graph=None,
    costs=None,
    d_out=4,
    d_in=0,  # 0 means "one column per task times four"
    rank=2,
    frozen_ratio=1.0,
    lr=0.05,
    steps_per_stage=200,
    seed=None,
    k_max=4,
    dataset_size=32,
    out=None,
)


def _resolve(args, name: str, cast, cfg: dict, default):
    flag = getattr(args, name, None)
    if flag is not None:
        return flag
    env = os.environ.get(ENV_PREFIX + name.upper())
    if env is not None:
        return cast(env)
    if name in cfg:
        return cast(cfg[name])
    return default


def _load_config(args) -> RunConfig:
    cfg = {}
    if getattr(args, "config", None):
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    frozen_ratio = _resolve(args, "frozen_ratio", float, cfg, None)
    delta = _resolve(args, "delta", float, cfg, None)
    if frozen_ratio is None:
        frozen_ratio = 1.0 - delta if delta is not None else _DEFAULTS.frozen_ratio
    if not 0.0 <= frozen_ratio <= 1.0:
        raise ValueError(f"frozen_ratio must lie in [0, 1], got {frozen_ratio}")
    return RunConfig(
        graph=_resolve(args, "graph", str, cfg, _DEFAULTS.graph),
        costs=_resolve(args, "costs", str, cfg, _DEFAULTS.costs),
        d_out=_resolve(args, "d_out", int, cfg, _DEFAULTS.d_out),
        d_in=_resolve(args, "d_in", int, cfg, _DEFAULTS.d_in),
        rank=_resolve(args, "rank", int, cfg, _DEFAULTS.rank),
        frozen_ratio=frozen_ratio,
        lr=_resolve(args, "lr", float, cfg, _DEFAULTS.lr),
        steps_per_stage=_resolve(args, "steps_per_stage", int, cfg, _DEFAULTS.steps_per_stage),
        seed=_resolve(args, "seed", int, cfg, _DEFAULTS.seed),
        k_max=_resolve(args, "k_max", int, cfg, _DEFAULTS.k_max),
        dataset_size=_resolve(args, "dataset_size", int, cfg, _DEFAULTS.dataset_size),
        out=_resolve(args, "out", str, cfg, _DEFAULTS.out),
    )


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _print_json(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


def _read_graph(path: str):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return graph_from_dict(doc)


def _read_costs(path: str):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return load_profile(doc)


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip())


# ---------------------------------------------------------------- commands


def cmd_validate(args) -> int:
    graph = _read_graph(args.graph)
    layers = extract_layers(graph)
    _print_json(layers.as_dict())
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = _load_config(args)
    if cfg.graph is None:
        raise ValueError("--graph is required")
    graph = _read_graph(cfg.graph)
    d_in = cfg.d_in or 4 * graph.n
    widths = [int(w) for w in _csv_list(args.widths)] if args.widths else None
    layout = partition_blocks(cfg.d_out, d_in, cfg.rank, graph, widths)
    plan = build_plan(graph, layout, cfg.delta)
    doc = plan_to_dict(plan)
    if cfg.out:
        _write_json(Path(cfg.out) / "plan.json", doc)
    else:
        _print_json(doc)
    return EXIT_OK


def _corrupt_plan(plan):
    """Fault injection: promote one masked block to trainable in the last
    stage that has one, leaving the audit's reference plan untouched."""
    for pos in range(len(plan.stages) - 1, -1, -1):
        sp = plan.stages[pos]
        if sp.mask_blocks:
            victim = sp.mask_blocks[0]
            width = plan.layout.width(victim)
            bad = replace(
                sp,
                train_blocks=sp.train_blocks + ((victim, 0, width),),
                mask_blocks=tuple(t for t in sp.mask_blocks if t != victim),
            )
            stages = plan.stages[:pos] + (bad,) + plan.stages[pos + 1 :]
            return replace(plan, stages=stages)
    raise ValueError("no masked block available to corrupt")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if cfg.graph is None:
        raise ValueError("--graph is required")
    if cfg.seed is None:
        raise ValueError("--seed is required (runs must be reproducible)")
    if cfg.out is None:
        raise ValueError("--out is required")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    graph = _read_graph(cfg.graph)
    d_in = cfg.d_in or 4 * graph.n
    layout = partition_blocks(cfg.d_out, d_in, cfg.rank, graph)
    clean_plan = build_plan(graph, layout, cfg.delta)
    plan_report = validate_plan(clean_plan)

    exec_plan = clean_plan
    corrupted = bool(getattr(args, "debug_corrupt_plan", False))
    if corrupted:
        exec_plan = _corrupt_plan(clean_plan)

    model = init_model(layout, cfg.seed)
    data = synthetic_dataset(model, cfg.dataset_size, cfg.seed)
    results = run_plan(
        model,
        exec_plan,
        data,
        cfg.steps_per_stage,
        cfg.lr,
        reference=clean_plan,
        validate=not corrupted,
    )

    _write_json(out / "config.json", {**cfg.__dict__, "d_in": d_in, "delta": cfg.delta})
    _write_json(out / "plan.json", plan_to_dict(exec_plan))
    save_checkpoint(model, out / "checkpoint.json")

    tasks = layout.tasks
    with open(out / "stage_results.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["stage", "trainee", "loss", "steps"] + [f"delta_{t}" for t in tasks])
        for r in results:
            norms = {d.task: d.total for d in r.block_deltas}
            writer.writerow([r.stage_index, r.trainee, repr(r.loss), r.steps] + [repr(norms[t]) for t in tasks])
    with open(out / "stage_results.jsonl", "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(
                json.dumps(
                    {
                        "stage": r.stage_index,
                        "trainee": r.trainee,
                        "loss": r.loss,
                        "steps": r.steps,
                        "blocks": [
                            {"task": d.task, "total": d.total, "locked": d.locked}
                            for d in r.block_deltas
                        ],
                    },
                    sort_keys=True,
                )
                + "\n"
            )

    stage_audits = []
    violation_count = len(plan_report.violations)
    for r in results:
        locked = {d.task: d.locked for d in r.block_deltas}
        bad = sorted(t for t, v in locked.items() if v != 0.0)
        violation_count += len(bad)
        stage_audits.append(
            {
                "stage": r.stage_index,
                "trainee": r.trainee,
                "locked_norms": locked,
                "violating_blocks": bad,
                "ok": not bad,
            }
        )
    _write_json(
        out / "audit.json",
        {
            "plan_violations": list(plan_report.violations),
            "stages": stage_audits,
            "violations": violation_count,
        },
    )
    if violation_count:
        print(f"audit: {violation_count} invariant violation(s); see {out / 'audit.json'}", file=sys.stderr)
        return EXIT_VIOLATIONS
    return EXIT_OK


def _tasks_from_args(args) -> StageTasks:
    if getattr(args, "trainee", None):
        if not getattr(args, "graph", None):
            raise ValueError("--trainee needs --graph")
        graph = _read_graph(args.graph)
        frozen = tuple(sorted(prerequisites(graph, args.trainee), key=graph.index))
        return StageTasks((args.trainee,), frozen)
    training = _csv_list(args.train_tasks or "")
    frozen = _csv_list(args.frozen_tasks or "")
    if not training:
        raise ValueError("give --trainee with --graph, or --train-tasks")
    return StageTasks(training, frozen)


def _grouping_from_args(args) -> Grouping:
    return Grouping(
        _csv_list(args.train_devices or ""),
        _csv_list(args.frozen_devices or ""),
        _csv_list(args.offload or ""),
    )


def _partition_from_args(args, grouping: Grouping) -> Partition:
    assignments = _csv_list(args.partition)
    train = set(grouping.train_devices)
    boundary = len(assignments)
    for i, dev in enumerate(assignments):
        if dev not in train:
            boundary = i
            break
    return Partition(assignments, boundary)


def _micro_batches(args, k: int) -> int:
    if getattr(args, "micro_batches", None) is not None:
        return args.micro_batches
    if getattr(args, "dataset_size", None) is not None:
        return math.ceil(args.dataset_size / k)
    raise ValueError("give --micro-batches or --dataset-size")


def _built_schedule(args):
    tasks = _tasks_from_args(args)
    grouping = _grouping_from_args(args)
    partition = _partition_from_args(args, grouping)
    k = args.k
    n = _micro_batches(args, k)
    return build_task_schedule(
        tasks.training, tasks.frozen, grouping, partition, k, n, serial=bool(args.serial)
    )


def cmd_schedule(args) -> int:
    sched = _built_schedule(args)
    doc = schedule_to_dict(sched)
    if args.out:
        _write_json(Path(args.out) / "schedule.json", doc)
    else:
        _print_json(doc)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cm = _read_costs(args.costs)
    if args.schedule:
        sched = schedule_from_dict(json.loads(Path(args.schedule).read_text(encoding="utf-8")))
    else:
        sched = _built_schedule(args)
    trace = simulate(sched, cm)
    rows = trace_to_rows(trace)
    summary = trace_summary_rows(trace)
    if args.out:
        out = Path(args.out)
        _write_json(out / "trace.json", rows)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["metric", "value"])
            for name, value in summary:
                writer.writerow([name, repr(value)])
    else:
        _print_json({"trace": rows, "summary": {k: v for k, v in summary}})
    return EXIT_OK


def cmd_optimize(args) -> int:
    cfg = _load_config(args)
    if cfg.costs is None:
        raise ValueError("--costs is required")
    cm = _read_costs(cfg.costs)
    tasks = _tasks_from_args(args)
    devices = _csv_list(args.devices) if args.devices else cm.device_ids
    result = optimize(cm, tasks, devices, cm.n_layers, cfg.k_max, cfg.dataset_size)
    doc = result_to_dict(result)

    sched = build_task_schedule(
        tasks.training,
        tasks.frozen,
        result.grouping,
        result.partition,
        result.batch_size,
        result.micro_batches,
    )
    trace = simulate(sched, cm)
    rows = trace_to_rows(trace)
    if cfg.out:
        out = Path(cfg.out)
        _write_json(out / "result.json", doc)
        _write_json(out / "trace.json", rows)
        with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["metric", "value"])
            for name, value in trace_summary_rows(trace):
                writer.writerow([name, repr(value)])
    else:
        _print_json(doc)
    return EXIT_OK


def cmd_report(args) -> int:
    written = report_mod.write_report([Path(p) for p in args.runs], Path(args.out))
    for path in written:
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_ratio_flags(p) -> None:
    group = p.add_mutually_exclusive_group()
    group.add_argument("--frozen-ratio", dest="frozen_ratio", type=float,
                       help="fraction of prerequisite columns held fixed (1 - delta)")
    group.add_argument("--delta", dest="delta", type=float,
                       help="activated fraction of prerequisite columns (1 - frozen ratio)")


def _add_layout_flags(p) -> None:
    p.add_argument("--d-out", dest="d_out", type=int)
    p.add_argument("--d-in", dest="d_in", type=int)
    p.add_argument("--rank", dest="rank", type=int)


def _add_task_flags(p) -> None:
    p.add_argument("--graph", help="graph JSON; with --trainee, frozen tasks are its prerequisites")
    p.add_argument("--trainee")
    p.add_argument("--train-tasks", dest="train_tasks")
    p.add_argument("--frozen-tasks", dest="frozen_tasks")


def _add_build_flags(p) -> None:
    _add_task_flags(p)
    p.add_argument("--train-devices", dest="train_devices")
    p.add_argument("--frozen-devices", dest="frozen_devices")
    p.add_argument("--offload", help="comma list of frozen tasks to run on the train group")
    p.add_argument("--partition", help="comma list: owning device of each model layer")
    p.add_argument("--k", type=int, default=1, help="micro-batch size")
    p.add_argument("--micro-batches", dest="micro_batches", type=int)
    p.add_argument("--dataset-size", dest="dataset_size", type=int)
    p.add_argument("--serial", action="store_true", help="build the unpipelined baseline")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockpipe", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse a graph file and print its layers")
    p.add_argument("--graph", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("plan", help="emit the staged train/freeze/mask plan")
    p.add_argument("--graph")
    p.add_argument("--config")
    p.add_argument("--widths", help="comma list of per-task segment widths")
    p.add_argument("--out")
    _add_layout_flags(p)
    _add_ratio_flags(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="run the reference trainer over a plan")
    p.add_argument("--graph")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps-per-stage", dest="steps_per_stage", type=int)
    p.add_argument("--dataset-size", dest="dataset_size", type=int)
    p.add_argument("--out")
    p.add_argument("--debug-corrupt-plan", dest="debug_corrupt_plan", action="store_true",
                   help="fault injection: execute a corrupted plan and audit against the clean one")
    _add_layout_flags(p)
    _add_ratio_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("schedule", help="build a two-group pipeline event schedule")
    _add_build_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", help="simulate a schedule against a cost profile")
    p.add_argument("--costs", required=True)
    p.add_argument("--schedule", help="schedule.json produced by the schedule command")
    _add_build_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("optimize", help="search grouping, partition and batch size")
    p.add_argument("--costs")
    p.add_argument("--config")
    p.add_argument("--devices", help="comma list restricting the device pool")
    p.add_argument("--k-max", dest="k_max", type=int)
    p.add_argument("--dataset-size", dest="dataset_size", type=int)
    p.add_argument("--out")
    _add_task_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("report", help="render figures and a summary CSV from run outputs")
    p.add_argument("runs", nargs="+", help="run directories produced by train/simulate/optimize")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (BlockPipeError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
