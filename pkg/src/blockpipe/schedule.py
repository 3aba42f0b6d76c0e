"""Two-group pipeline schedules and a deterministic event simulator.

Devices split into a training group (forward plus backward for the trainee)
and a frozen group (forward only for frozen-block tasks).  Model layers are
partitioned as a prefix on the training group and a suffix on the frozen
group, each group's layers spread contiguously over its devices in sorted
id order.  Per micro-batch the cycle structure is

    first cycle : FP0 of every frozen task, FP0 of the trainee
    cycle i     : FPi (frozen), FPi (trainee), BP(i-1) (trainee)
    last cycle  : BP(n-1) alone

and frozen executions never emit a backward event.  Offloaded frozen tasks
ride the training pipeline's layer ranges on the training devices; the rest
run the suffix ranges on the frozen group.

Simulation is earliest-start list scheduling: one event at a time, a device
serializes its work, successors wait for predecessor completion plus the
activation transfer time across device hops.  Identical inputs give
byte-identical traces.
"""

from __future__ import annotations

from dataclasses import dataclass

from .costs import CostModel, t_bwd, t_comm, t_fwd
from .errors import InvalidGroupingError
from .plan import StagePlan

__all__ = [
    "FP_FROZEN",
    "FP_TRAIN",
    "BP_TRAIN",
    "Grouping",
    "Partition",
    "Event",
    "PipelineSchedule",
    "TimedEvent",
    "Trace",
    "build_schedule",
    "build_task_schedule",
    "simulate",
    "group_completion",
    "serial_baseline",
    "trace_to_rows",
    "trace_summary_rows",
    "schedule_to_dict",
    "schedule_from_dict",
]

FP_FROZEN = "FP_f"
FP_TRAIN = "FP_t"
BP_TRAIN = "BP_t"


@dataclass(frozen=True)
class Grouping:
    """Disjoint device groups; offloaded frozen tasks run on the train group."""

    train_devices: tuple[str, ...]
    frozen_devices: tuple[str, ...]
    offloaded: tuple[str, ...] = ()

    def __post_init__(self):
        train = tuple(sorted(set(self.train_devices)))
        frozen = tuple(sorted(set(self.frozen_devices)))
        if not train:
            raise InvalidGroupingError("the training device group must be nonempty")
        if set(train) & set(frozen):
            raise InvalidGroupingError("device groups overlap")
        object.__setattr__(self, "train_devices", train)
        object.__setattr__(self, "frozen_devices", frozen)
        object.__setattr__(self, "offloaded", tuple(sorted(set(self.offloaded))))

    @property
    def all_devices(self) -> tuple[str, ...]:
        return tuple(sorted(self.train_devices + self.frozen_devices))


@dataclass(frozen=True)
class Partition:
    """Device per layer; the first ``boundary`` layers sit on the train group."""

    assignments: tuple[str, ...]
    boundary: int

    def __post_init__(self):
        n = len(self.assignments)
        if not 0 <= self.boundary <= n:
            raise InvalidGroupingError(f"boundary {self.boundary} outside [0, {n}]")
        # contiguity: a device owns exactly one run of consecutive layers
        seen: set[str] = set()
        prev = None
        for dev in self.assignments:
            if dev != prev and dev in seen:
                raise InvalidGroupingError(f"device {dev!r} owns non-contiguous layers")
            if dev != prev:
                seen.add(dev)
            prev = dev
        if 0 < self.boundary < n and self.assignments[self.boundary - 1] == self.assignments[self.boundary]:
            raise InvalidGroupingError("the group boundary must fall between devices")

    @property
    def n_layers(self) -> int:
        return len(self.assignments)

    def _runs(self, lo: int, hi: int) -> tuple[tuple[str, int, int], ...]:
        runs = []
        start = lo
        for i in range(lo + 1, hi + 1):
            if i == hi or self.assignments[i] != self.assignments[start]:
                runs.append((self.assignments[start], start, i))
                start = i
        return tuple(runs)

    def train_stages(self) -> tuple[tuple[str, int, int], ...]:
        """(device, first layer, stop layer) runs over the prefix."""
        return self._runs(0, self.boundary) if self.boundary else ()

    def frozen_stages(self) -> tuple[tuple[str, int, int], ...]:
        return self._runs(self.boundary, self.n_layers) if self.boundary < self.n_layers else ()


@dataclass(frozen=True)
class Event:
    kind: str
    micro_batch: int
    task: str
    device: str
    layers: tuple[int, int]


@dataclass(frozen=True)
class PipelineSchedule:
    """Events in deterministic priority order plus dependency edges.

    A dependency ``(pred, succ, boundary)`` delays the successor by the
    activation transfer of layer ``boundary`` across the device hop;
    ``boundary is None`` means a pure ordering constraint.
    """

    micro_batches: int
    batch_size: int
    grouping: Grouping
    events: tuple[Event, ...]
    deps: tuple[tuple[int, int, int | None], ...]


@dataclass(frozen=True)
class TimedEvent:
    event: Event
    start: float
    end: float


@dataclass(frozen=True)
class Trace:
    """Simulated timeline; makespan is the latest event end."""

    events: tuple[TimedEvent, ...]
    makespan: float
    busy: tuple[tuple[str, float], ...]
    grouping: Grouping

    def busy_of(self, device: str) -> float:
        for dev, total in self.busy:
            if dev == device:
                return total
        return 0.0


def build_schedule(
    stage: StagePlan,
    grouping: Grouping,
    partition: Partition,
    k: int,
    n: int,
    serial: bool = False,
) -> PipelineSchedule:
    """Schedule one plan stage: the trainee trains, its frozen blocks run forward."""
    frozen = tuple(dict.fromkeys(t for t, _, _ in stage.freeze_blocks))
    return build_task_schedule((stage.trainee,), frozen, grouping, partition, k, n, serial)


def build_task_schedule(
    training: tuple[str, ...],
    frozen: tuple[str, ...],
    grouping: Grouping,
    partition: Partition,
    k: int,
    n: int,
    serial: bool = False,
) -> PipelineSchedule:
    if n < 1:
        raise ValueError("micro-batch count must be >= 1")
    if k < 1:
        raise ValueError("batch size must be >= 1")
    train_set = set(grouping.train_devices)
    frozen_set = set(grouping.frozen_devices)
    if set(grouping.offloaded) - set(frozen):
        raise InvalidGroupingError("offloaded tasks must be frozen tasks")
    train_stages = partition.train_stages()
    frozen_stages = partition.frozen_stages()
    for dev, _, _ in train_stages:
        if dev not in train_set:
            raise InvalidGroupingError(f"prefix layer device {dev!r} is not in the train group")
    for dev, _, _ in frozen_stages:
        if dev not in frozen_set:
            raise InvalidGroupingError(f"suffix layer device {dev!r} is not in the frozen group")
    if training and not train_stages:
        raise InvalidGroupingError("training tasks need at least one prefix layer")
    remote_frozen = [t for t in frozen if t not in grouping.offloaded]
    if remote_frozen and not frozen_stages:
        raise InvalidGroupingError(
            f"frozen tasks {remote_frozen} have no suffix layers; offload them or move the boundary"
        )

    events: list[Event] = []
    deps: list[tuple[int, int, int | None]] = []
    fp_first: dict[tuple[str, int], int] = {}  # (task, mb) -> first/last FP event
    fp_last: dict[tuple[str, int], int] = {}
    bp_first: dict[tuple[str, int], int] = {}
    bp_last: dict[tuple[str, int], int] = {}

    def emit_fp(kind: str, mb: int, task: str, stages) -> None:
        prev = None
        for dev, lo, hi in stages:
            idx = len(events)
            events.append(Event(kind, mb, task, dev, (lo, hi)))
            if prev is None:
                fp_first[(task, mb)] = idx
            else:
                deps.append((prev, idx, lo - 1))  # upstream run's last layer feeds this one
            prev = idx
        fp_last[(task, mb)] = prev

    def emit_bp(mb: int) -> None:
        for task in training:
            prev = None
            for pos, (dev, lo, hi) in enumerate(reversed(train_stages)):
                idx = len(events)
                events.append(Event(BP_TRAIN, mb, task, dev, (lo, hi)))
                if pos == 0:
                    deps.append((fp_last[(task, mb)], idx, None))
                    bp_first[(task, mb)] = idx
                else:
                    deps.append((prev, idx, hi - 1))  # gradient crosses the same boundary back
                prev = idx
            bp_last[(task, mb)] = prev

    for i in range(n):
        for task in frozen:
            stages = train_stages if task in grouping.offloaded else frozen_stages
            emit_fp(FP_FROZEN, i, task, stages)
        for task in training:
            emit_fp(FP_TRAIN, i, task, train_stages)
        if i >= 1 and training:
            emit_bp(i - 1)
    if training:
        emit_bp(n - 1)

    if serial:
        # barrier semantics: all forwards of a micro-batch precede its backward,
        # and the next micro-batch starts only after this one fully completes
        all_tasks = list(frozen) + list(training)
        for i in range(n):
            for t in training:
                for other in all_tasks:
                    if other != t:
                        deps.append((fp_last[(other, i)], bp_first[(t, i)], None))
            if i + 1 < n:
                if training:
                    tails = [bp_last[(t, i)] for t in training]
                else:
                    tails = [fp_last[(t, i)] for t in all_tasks]
                heads = [fp_first[(t, i + 1)] for t in all_tasks]
                for tail in tails:
                    for head in heads:
                        deps.append((tail, head, None))

    return PipelineSchedule(n, k, grouping, tuple(events), tuple(sorted(set(deps))))


def _duration(ev: Event, cm: CostModel, k: int) -> float:
    dev = cm.device(ev.device)
    lo, hi = ev.layers
    total = 0.0
    for layer_idx in range(lo, hi):
        lc = cm.layer(layer_idx)
        if ev.kind == BP_TRAIN:
            total += t_bwd(lc, dev, k)
        else:
            total += t_fwd(lc, dev, k)
    return total


def simulate(schedule: PipelineSchedule, cm: CostModel) -> Trace:
    """Deterministic earliest-start list scheduling of the event list.

    Among ready events the earliest feasible start wins; ties fall back to
    schedule order, which puts a cycle's forwards before the previous
    micro-batch's backward on a shared device.
    """
    events = schedule.events
    k = schedule.batch_size
    durations = [_duration(ev, cm, k) for ev in events]

    preds: dict[int, list[tuple[int, int | None]]] = {i: [] for i in range(len(events))}
    for p, s, boundary in schedule.deps:
        preds[s].append((p, boundary))

    start = [0.0] * len(events)
    end = [0.0] * len(events)
    done = [False] * len(events)
    device_free: dict[str, float] = {}
    remaining = set(range(len(events)))

    while remaining:
        best = None
        best_key = None
        for idx in remaining:
            ready = 0.0
            blocked = False
            for p, boundary in preds[idx]:
                if not done[p]:
                    blocked = True
                    break
                delay = 0.0
                if boundary is not None and events[p].device != events[idx].device:
                    delay = t_comm(
                        cm.device(events[p].device),
                        cm.device(events[idx].device),
                        cm.layer(boundary).activation_bytes * k,
                    )
                ready = max(ready, end[p] + delay)
            if blocked:
                continue
            est = max(ready, device_free.get(events[idx].device, 0.0))
            key = (est, idx)
            if best_key is None or key < best_key:
                best, best_key = idx, key
        if best is None:  # unreachable for well-formed deps
            raise ValueError("dependency cycle in schedule")
        start[best] = best_key[0]
        end[best] = best_key[0] + durations[best]
        device_free[events[best].device] = end[best]
        done[best] = True
        remaining.remove(best)

    timed = tuple(TimedEvent(ev, start[i], end[i]) for i, ev in enumerate(events))
    makespan = max((t.end for t in timed), default=0.0)
    busy: dict[str, float] = {}
    for i, ev in enumerate(events):
        busy[ev.device] = busy.get(ev.device, 0.0) + durations[i]
    return Trace(timed, makespan, tuple(sorted(busy.items())), schedule.grouping)


def group_completion(trace: Trace) -> tuple[float, float]:
    """Latest end time on the train group and on the frozen group."""
    train = set(trace.grouping.train_devices)
    frozen = set(trace.grouping.frozen_devices)
    c_t = max((t.end for t in trace.events if t.event.device in train), default=0.0)
    c_f = max((t.end for t in trace.events if t.event.device in frozen), default=0.0)
    return (c_t, c_f)


def serial_baseline(
    stage_or_tasks,
    grouping: Grouping,
    partition: Partition,
    k: int,
    n: int,
    cm: CostModel,
) -> Trace:
    """Makespan reference: same assignment, one micro-batch at a time."""
    if isinstance(stage_or_tasks, StagePlan):
        sched = build_schedule(stage_or_tasks, grouping, partition, k, n, serial=True)
    else:
        training, frozen = stage_or_tasks
        sched = build_task_schedule(tuple(training), tuple(frozen), grouping, partition, k, n, serial=True)
    return simulate(sched, cm)


def trace_to_rows(trace: Trace) -> list[dict]:
    """Gantt rows, ordered by start time then device."""
    rows = []
    for t in sorted(trace.events, key=lambda t: (t.start, t.event.device, t.end)):
        rows.append(
            {
                "device": t.event.device,
                "event": t.event.kind,
                "mb": t.event.micro_batch,
                "start": t.start,
                "end": t.end,
                "task": t.event.task,
                "layers": list(t.event.layers),
            }
        )
    return rows


def trace_summary_rows(trace: Trace) -> list[tuple[str, float]]:
    c_t, c_f = group_completion(trace)
    rows = [("makespan", trace.makespan), ("C_T", c_t), ("C_F", c_f)]
    for dev, busy in trace.busy:
        util = busy / trace.makespan if trace.makespan > 0 else 0.0
        rows.append((f"utilization:{dev}", util))
    return rows


def schedule_to_dict(schedule: PipelineSchedule) -> dict:
    return {
        "micro_batches": schedule.micro_batches,
        "batch_size": schedule.batch_size,
        "grouping": {
            "train_devices": list(schedule.grouping.train_devices),
            "frozen_devices": list(schedule.grouping.frozen_devices),
            "offloaded": list(schedule.grouping.offloaded),
        },
        "events": [
            {
                "kind": ev.kind,
                "mb": ev.micro_batch,
                "task": ev.task,
                "device": ev.device,
                "layers": list(ev.layers),
            }
            for ev in schedule.events
        ],
        "deps": [[p, s, b] for p, s, b in schedule.deps],
    }


def schedule_from_dict(doc: dict) -> PipelineSchedule:
    grouping = Grouping(
        tuple(doc["grouping"]["train_devices"]),
        tuple(doc["grouping"]["frozen_devices"]),
        tuple(doc["grouping"].get("offloaded", ())),
    )
    events = tuple(
        Event(e["kind"], int(e["mb"]), e["task"], e["device"], (int(e["layers"][0]), int(e["layers"][1])))
        for e in doc["events"]
    )
    deps = tuple((int(p), int(s), None if b is None else int(b)) for p, s, b in doc["deps"])
    return PipelineSchedule(int(doc["micro_batches"]), int(doc["batch_size"]), grouping, events, deps)
