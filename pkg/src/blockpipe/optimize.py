"""Two-phase pipeline strategy search: device grouping, then partition and batch.

Phase one minimizes the static computation gap

    |R_c(D_t) - R_r(V_t)| + |R_c(D_f) - R_r(V_f)|

over device bipartitions and frozen-task allocations (training work is
pinned to the training group).  Phase two, with the grouping fixed, sweeps
every prefix split of the model layers, every contiguous within-group
layer assignment, and every batch size up to the cap, scoring each
candidate by the simulated makespan and keeping the argmin.

Both phases enumerate exhaustively; candidate evaluation is independent
and the tie-break key is a total order, so the result does not depend on
evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

from .costs import CostModel
from .errors import InfeasibleError, UnknownTaskError
from .plan import StagePlan
from .schedule import Grouping, Partition, build_task_schedule, simulate

__all__ = [
    "StageTasks",
    "GapResult",
    "OptResult",
    "tasks_from_stage",
    "minimize_gap",
    "search_partition_batch",
    "optimize",
    "result_to_dict",
]


@dataclass(frozen=True)
class StageTasks:
    """Role split of the tasks in the pipeline."""

    training: tuple[str, ...]
    frozen: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "training", tuple(dict.fromkeys(self.training)))
        object.__setattr__(self, "frozen", tuple(dict.fromkeys(self.frozen)))
        if set(self.training) & set(self.frozen):
            raise ValueError("a task cannot be both training and frozen")


def tasks_from_stage(stage: StagePlan) -> StageTasks:
    frozen = tuple(dict.fromkeys(t for t, _, _ in stage.freeze_blocks))
    return StageTasks((stage.trainee,), frozen)


@dataclass(frozen=True)
class GapResult:
    grouping: Grouping
    train_tasks: tuple[str, ...]   # V_t: training plus offloaded frozen
    frozen_tasks: tuple[str, ...]  # V_f
    gap: float


@dataclass(frozen=True)
class OptResult:
    grouping: Grouping
    tasks: StageTasks
    partition: Partition
    batch_size: int
    micro_batches: int
    best_time: float
    evaluated: int


def minimize_gap(cm: CostModel, tasks: StageTasks, devices) -> GapResult:
    """Exhaustive grouping/allocation search for the minimal computation gap.

    Ties prefer the larger training-group capacity, then the
    lexicographically smallest training device set, then the smallest V_t.
    """
    devices = tuple(sorted(dict.fromkeys(devices)))
    if not devices:
        raise InfeasibleError("no devices to group")
    for d in devices:
        cm.device(d)
    if not tasks.training:
        raise ValueError("at least one training task is required")
    for t in tasks.training + tasks.frozen:
        cm.task(t)

    train_req = sum(cm.task(t).train_work for t in tasks.training)

    if len(devices) == 1:
        bipartitions = [(devices, ())]
    else:
        bipartitions = []
        for size in range(1, len(devices)):
            for dt in combinations(devices, size):
                df = tuple(d for d in devices if d not in dt)
                bipartitions.append((dt, df))

    best = None
    best_key = None
    for dt, df in bipartitions:
        rc_t = sum(cm.device(d).capacity for d in dt)
        rc_f = sum(cm.device(d).capacity for d in df)
        n_frozen = len(tasks.frozen)
        for pattern in range(1 << n_frozen):
            offloaded = tuple(
                t for bit, t in enumerate(tasks.frozen) if pattern >> bit & 1
            )
            remote = tuple(t for t in tasks.frozen if t not in offloaded)
            if remote and not df:
                continue  # nothing can stay on an empty frozen group
            rr_t = train_req + sum(cm.task(t).frozen_work for t in offloaded)
            rr_f = sum(cm.task(t).frozen_work for t in remote)
            gap = abs(rc_t - rr_t) + abs(rc_f - rr_f)
            v_t = tuple(sorted(tasks.training + offloaded))
            key = (gap, -rc_t, dt, v_t)
            if best_key is None or key < best_key:
                best_key = key
                best = GapResult(Grouping(dt, df, offloaded), v_t, tuple(sorted(remote)), gap)
    if best is None:
        raise InfeasibleError("no feasible grouping")
    return best


def _compositions(total: int, parts: int):
    """All tuples of ``parts`` positive ints summing to ``total``, lexicographic."""
    if parts == 0:
        if total == 0:
            yield ()
        return
    if parts == 1:
        if total >= 1:
            yield (total,)
        return
    for first in range(1, total - parts + 2):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def _assignments(devices, sizes):
    out = []
    for dev, size in zip(devices, sizes):
        out.extend([dev] * size)
    return out


def search_partition_batch(
    grouping: Grouping,
    cm: CostModel,
    tasks: StageTasks,
    n_layers: int,
    k_max: int,
    dataset_size: int,
) -> OptResult:
    """Exhaustive (partition, batch size) sweep scored by the simulator.

    Micro-batch count is ``ceil(dataset_size / k)``.  Ties prefer the
    smaller batch size, then the smaller prefix length, then the
    lexicographically first within-group compositions.
    """
    if n_layers != cm.n_layers:
        raise ValueError(f"n_layers={n_layers} but the cost model has {cm.n_layers}")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if dataset_size < 1:
        raise ValueError("dataset_size must be >= 1")

    train_devs = grouping.train_devices
    frozen_devs = grouping.frozen_devices
    if not frozen_devs and any(t not in grouping.offloaded for t in tasks.frozen):
        raise InfeasibleError("frozen tasks without frozen devices must be offloaded")

    if frozen_devs:
        nt_candidates = range(1, n_layers)
    else:
        nt_candidates = [n_layers]

    best = None
    best_key = None
    evaluated = 0
    for nt in nt_candidates:
        nf = n_layers - nt
        for comp_t in _compositions(nt, len(train_devs)):
            for comp_f in _compositions(nf, len(frozen_devs)):
                assignments = _assignments(train_devs, comp_t) + _assignments(
                    frozen_devs, comp_f
                )
                partition = Partition(tuple(assignments), nt)
                for k in range(1, k_max + 1):
                    n_mb = math.ceil(dataset_size / k)
                    sched = build_task_schedule(
                        tasks.training, tasks.frozen, grouping, partition, k, n_mb
                    )
                    trace = simulate(sched, cm)
                    evaluated += 1
                    key = (trace.makespan, k, nt, comp_t, comp_f)
                    if best_key is None or key < best_key:
                        best_key = key
                        best = OptResult(
                            grouping, tasks, partition, k, n_mb, trace.makespan, 0
                        )
    if best is None:
        raise InfeasibleError(
            f"no feasible layer partition for {n_layers} layers over "
            f"{len(train_devs)}+{len(frozen_devs)} devices"
        )
    return OptResult(
        best.grouping,
        best.tasks,
        best.partition,
        best.batch_size,
        best.micro_batches,
        best.best_time,
        evaluated,
    )


def optimize(
    cm: CostModel,
    tasks: StageTasks,
    devices,
    n_layers: int,
    k_max: int,
    dataset_size: int,
) -> OptResult:
    """Full strategy search: fix the grouping first, then sweep (Q, k)."""
    gap = minimize_gap(cm, tasks, devices)
    return search_partition_batch(gap.grouping, cm, tasks, n_layers, k_max, dataset_size)


def result_to_dict(result: OptResult) -> dict:
    v_t = tuple(sorted(result.tasks.training + result.grouping.offloaded))
    return {
        "D_t": list(result.grouping.train_devices),
        "V_t": list(v_t),
        "Q": list(result.partition.assignments),
        "k": result.batch_size,
        "C_min": result.best_time,
        "evaluated": result.evaluated,
    }
