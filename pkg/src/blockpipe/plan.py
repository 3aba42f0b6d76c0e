"""Column-block layout of the adapter matrix and staged train/freeze/mask plans.

The adapter matrix is split into one contiguous column segment per task.
For every task, in layer order, a stage marks each block either trainable,
frozen, or masked: the trainee's own block is fully trainable, the first
``ceil(delta * width)`` columns of every prerequisite block are trainable
and the rest frozen, and every other block is masked.  The three column
sets always partition ``[0, d_in)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DimensionError, UnknownTaskError
from .taskgraph import TaskGraph, extract_layers, prerequisites

__all__ = [
    "BlockLayout",
    "StagePlan",
    "TrainingPlan",
    "ValidationReport",
    "partition_blocks",
    "build_plan",
    "validate_plan",
    "active_prefix_width",
    "plan_to_dict",
]

# Guard against binary-float overshoot in width * delta (e.g. 5 * 0.2 is
# slightly above 1.0 in IEEE doubles, which would otherwise ceil to 2).
_CEIL_GUARD = 1e-9


def active_prefix_width(delta: float, width: int) -> int:
    """Columns of a prerequisite block activated at ratio ``delta``.

    Ceiling rule: any positive ratio activates at least one column and
    ``delta == 0`` activates none.
    """
    if delta <= 0.0:
        return 0
    if delta >= 1.0:
        return width
    return min(width, max(1, math.ceil(width * delta - _CEIL_GUARD)))


@dataclass(frozen=True)
class BlockLayout:
    """Per-task contiguous column segments covering ``[0, d_in)``."""

    d_out: int
    d_in: int
    rank: int
    segments: tuple[tuple[str, int, int], ...]  # (task, start, stop), declaration order

    def __post_init__(self):
        if self.d_out < 1 or self.d_in < 1 or self.rank < 1:
            raise DimensionError("d_out, d_in and rank must all be >= 1")
        cursor = 0
        for task, start, stop in self.segments:
            if start != cursor or stop <= start:
                raise DimensionError(
                    f"segment for {task!r} is [{start}, {stop}); expected a "
                    f"contiguous nonempty range starting at {cursor}"
                )
            cursor = stop
        if cursor != self.d_in:
            raise DimensionError(f"segments cover [0, {cursor}) but d_in is {self.d_in}")
        if len({t for t, _, _ in self.segments}) != len(self.segments):
            raise DimensionError("duplicate task in segment table")

    @property
    def tasks(self) -> tuple[str, ...]:
        return tuple(t for t, _, _ in self.segments)

    def segment(self, task: str) -> tuple[int, int]:
        for t, start, stop in self.segments:
            if t == task:
                return (start, stop)
        raise UnknownTaskError(f"no segment for task {task!r}")

    def width(self, task: str) -> int:
        start, stop = self.segment(task)
        return stop - start


@dataclass(frozen=True)
class StagePlan:
    """Train/freeze/mask assignment for one task's training stage.

    Block ranges are half-open and relative to the owning block's columns.
    """

    stage_index: int
    trainee: str
    train_blocks: tuple[tuple[str, int, int], ...]
    freeze_blocks: tuple[tuple[str, int, int], ...]
    mask_blocks: tuple[str, ...]
    delta: float


@dataclass(frozen=True)
class TrainingPlan:
    """One stage per task, ordered by layer then declaration index."""

    stages: tuple[StagePlan, ...]
    layout: BlockLayout
    graph: TaskGraph


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def partition_blocks(d_out: int, d_in: int, rank: int, g: TaskGraph, widths=None) -> BlockLayout:
    """Split ``d_in`` columns into one segment per task.

    Default is an equal split with the remainder going to the first
    ``d_in mod n`` tasks; explicit ``widths`` (declaration order) override it.
    """
    n = g.n
    if d_in < n:
        raise DimensionError(f"d_in={d_in} cannot host {n} nonempty segments")
    if widths is None:
        base, rem = divmod(d_in, n)
        widths = [base + 1] * rem + [base] * (n - rem)
    else:
        widths = [int(w) for w in widths]
        if len(widths) != n:
            raise DimensionError(f"{len(widths)} widths for {n} tasks")
        if any(w < 1 for w in widths):
            raise DimensionError("every segment width must be >= 1")
        if sum(widths) != d_in:
            raise DimensionError(f"widths sum to {sum(widths)}, expected d_in={d_in}")
    segments = []
    cursor = 0
    for task, w in zip(g.tasks, widths):
        segments.append((task, cursor, cursor + w))
        cursor += w
    return BlockLayout(d_out, d_in, rank, tuple(segments))


def build_plan(g: TaskGraph, layout: BlockLayout, delta: float) -> TrainingPlan:
    """One stage per task in layer order, applying the delta column split."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    if layout.tasks != g.tasks:
        raise DimensionError("layout segments do not match the graph's tasks")

    stages = []
    stage_index = 0
    for layer in extract_layers(g).layers:
        for trainee in layer:
            prereqs = sorted(prerequisites(g, trainee), key=g.index)
            train = [(trainee, 0, layout.width(trainee))]
            freeze = []
            for p in prereqs:
                w = layout.width(p)
                a = active_prefix_width(delta, w)
                if a > 0:
                    train.append((p, 0, a))
                if a < w:
                    freeze.append((p, a, w))
            involved = {trainee, *prereqs}
            mask = tuple(t for t in g.tasks if t not in involved)
            stages.append(
                StagePlan(
                    stage_index=stage_index,
                    trainee=trainee,
                    train_blocks=tuple(sorted(train, key=lambda b: g.index(b[0]))),
                    freeze_blocks=tuple(sorted(freeze, key=lambda b: g.index(b[0]))),
                    mask_blocks=mask,
                    delta=delta,
                )
            )
            stage_index += 1
    return TrainingPlan(tuple(stages), layout, g)


def _stage_violations(plan: TrainingPlan, sp: StagePlan, layer_of: dict) -> list[str]:
    layout = plan.layout
    g = plan.graph
    out = []
    tag = f"stage {sp.stage_index} (trainee {sp.trainee})"

    known = set(g.tasks)
    for kind, blocks in (("train", sp.train_blocks), ("freeze", sp.freeze_blocks)):
        for task, start, stop in blocks:
            if task not in known:
                out.append(f"{tag}: {kind} block references unknown task {task!r}")
            elif not (0 <= start < stop <= layout.width(task)):
                out.append(f"{tag}: {kind} range [{start},{stop}) exceeds block {task!r}")
    for task in sp.mask_blocks:
        if task not in known:
            out.append(f"{tag}: mask references unknown task {task!r}")

    train = {t: (a, b) for t, a, b in sp.train_blocks}
    if train.get(sp.trainee) != (0, layout.width(sp.trainee)):
        out.append(f"{tag}: trainee block is not fully trainable")

    prereqs = prerequisites(g, sp.trainee)
    freeze = {t: (a, b) for t, a, b in sp.freeze_blocks}
    for p in sorted(prereqs, key=g.index):
        w = layout.width(p)
        a = active_prefix_width(sp.delta, w)
        want_train = (0, a) if a > 0 else None
        want_freeze = (a, w) if a < w else None
        if train.get(p) != want_train:
            out.append(f"{tag}: prerequisite {p!r} trainable range is {train.get(p)}, expected {want_train}")
        if freeze.get(p) != want_freeze:
            out.append(f"{tag}: prerequisite {p!r} frozen range is {freeze.get(p)}, expected {want_freeze}")
    for t in train:
        if t != sp.trainee and t not in prereqs:
            out.append(f"{tag}: non-prerequisite {t!r} appears in train blocks")
    for t in freeze:
        if t not in prereqs:
            out.append(f"{tag}: non-prerequisite {t!r} appears in freeze blocks")

    if layer_of.get(sp.trainee) == 0 and sp.freeze_blocks:
        out.append(f"{tag}: first-layer trainee has a nonempty freeze set")

    # partition of [0, d_in): train/freeze columns plus masked blocks
    covered = [0] * layout.d_in
    for t, a, b in list(sp.train_blocks) + list(sp.freeze_blocks):
        if t in known and 0 <= a < b <= layout.width(t):
            s0, _ = layout.segment(t)
            for c in range(s0 + a, s0 + b):
                covered[c] += 1
    for t in sp.mask_blocks:
        if t in known:
            s0, s1 = layout.segment(t)
            for c in range(s0, s1):
                covered[c] += 1
    if any(c > 1 for c in covered):
        out.append(f"{tag}: train/freeze/mask column sets overlap")
    if any(c == 0 for c in covered):
        out.append(f"{tag}: train/freeze/mask column sets do not cover [0, d_in)")
    return out


def validate_plan(plan: TrainingPlan) -> ValidationReport:
    """Diagnostic check of every plan invariant; empty report iff valid."""
    out: list[str] = []
    g = plan.graph
    layers = extract_layers(g)
    layer_of = {t: i for i, layer in enumerate(layers.layers) for t in layer}

    trainees = [sp.trainee for sp in plan.stages]
    for t in g.tasks:
        c = trainees.count(t)
        if c == 0:
            out.append(f"task {t!r} is never trained")
        elif c > 1:
            out.append(f"task {t!r} is trained in {c} stages")
    for pos, sp in enumerate(plan.stages):
        if sp.stage_index != pos:
            out.append(f"stage at position {pos} carries index {sp.stage_index}")
    seq = [layer_of[t] for t in trainees if t in layer_of]
    if any(a > b for a, b in zip(seq, seq[1:])):
        out.append("stage order does not respect layer order")

    for sp in plan.stages:
        out.extend(_stage_violations(plan, sp, layer_of))
    return ValidationReport(tuple(out))


def plan_to_dict(plan: TrainingPlan) -> dict:
    """JSON form: per stage ``{"trainee", "train", "freeze", "mask"}``."""
    stages = []
    for sp in plan.stages:
        stages.append(
            {
                "trainee": sp.trainee,
                "train": {t: [a, b] for t, a, b in sp.train_blocks},
                "freeze": {t: [a, b] for t, a, b in sp.freeze_blocks},
                "mask": list(sp.mask_blocks),
            }
        )
    return {
        "delta": plan.stages[0].delta if plan.stages else None,
        "d_out": plan.layout.d_out,
        "d_in": plan.layout.d_in,
        "rank": plan.layout.rank,
        "segments": {t: [a, b] for t, a, b in plan.layout.segments},
        "stages": stages,
    }
