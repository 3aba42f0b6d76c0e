"""Desk-scale numeric reference trainer for block-partitioned adapters.

The model is a single linear layer ``y = W_eff(active) @ x`` with

    W_eff(active) = base + sum over active blocks t of embed(up_t @ down_t)

where ``base`` is frozen forever, each task owns a low-rank factor pair
(``up``: d_out x r, ``down``: r x width) over its column segment, and
``embed`` places the product into the segment's columns.  The squared-error
loss is ``mean ||y - target||^2 / 2``; with residual ``G = E @ X.T / m``
restricted to a block's segment columns, the hand-derived gradients are

    dL/d(up)   = G_seg @ down.T
    dL/d(down) = up.T @ G_seg.

Gradient updates touch exactly the trainable columns of a stage: the
trainee updates both factors; a prerequisite updates only the activated
columns of ``down`` (its ``up`` has no per-column meaning and stays put);
frozen columns and masked blocks are never written.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, UnknownTaskError
from .plan import BlockLayout, StagePlan, TrainingPlan, validate_plan
from .taskgraph import TaskGraph, ancestors

__all__ = [
    "AdapterBlock",
    "ToyModel",
    "TaskDataset",
    "BlockDelta",
    "StageResult",
    "ComposedView",
    "init_model",
    "forward",
    "mse_loss",
    "stage_step",
    "run_plan",
    "compose",
    "stage_active_columns",
    "synthetic_dataset",
    "model_to_dict",
    "model_from_dict",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class AdapterBlock:
    up: np.ndarray    # d_out x r
    down: np.ndarray  # r x width

    def copy(self) -> "AdapterBlock":
        return AdapterBlock(self.up.copy(), self.down.copy())


@dataclass
class ToyModel:
    """Mutable during a plan run; single writer, read-only sharing after."""

    layout: BlockLayout
    base: np.ndarray  # d_out x d_in, write-locked at init
    blocks: dict[str, AdapterBlock]

    def copy(self) -> "ToyModel":
        base = self.base.copy()
        base.setflags(write=False)
        return ToyModel(self.layout, base, {t: b.copy() for t, b in self.blocks.items()})

    def without_block(self, task: str) -> "ToyModel":
        """Pluggability: drop one task's factors, everything else untouched."""
        if task not in self.blocks:
            raise UnknownTaskError(f"no block for task {task!r}")
        m = self.copy()
        del m.blocks[task]
        return m


@dataclass(frozen=True)
class TaskDataset:
    """Per-task sample matrices; columns of (X, Y) are the (x, y) pairs."""

    seed: int
    samples: dict[str, tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class BlockDelta:
    """Parameter-change norms for one block over one stage.

    ``locked`` covers everything the stage must not touch: both factors of a
    masked or fully frozen block, and the up-factor plus non-activated down
    columns of a partially activated prerequisite.  It is exactly 0.0 on a
    correct run.
    """

    task: str
    total: float
    locked: float


@dataclass(frozen=True)
class StageResult:
    stage_index: int
    trainee: str
    loss: float
    steps: int
    block_deltas: tuple[BlockDelta, ...]


def init_model(layout: BlockLayout, seed: int) -> ToyModel:
    """Seeded init: uniform(-0.5, 0.5) base, Gaussian up, zero down.

    The zero down-factor makes every block's initial contribution exactly
    zero, so a fresh model coincides with its base.
    """
    rng = np.random.default_rng(seed)
    base = rng.uniform(-0.5, 0.5, size=(layout.d_out, layout.d_in))
    base.setflags(write=False)
    blocks = {}
    for task in layout.tasks:
        up = rng.standard_normal((layout.d_out, layout.rank)) / math.sqrt(layout.rank)
        down = np.zeros((layout.rank, layout.width(task)))
        blocks[task] = AdapterBlock(up, down)
    return ToyModel(layout, base, blocks)


def _normalize_active(model: ToyModel, active) -> dict[str, tuple[int, int]]:
    if isinstance(active, dict):
        items = active.items()
    else:
        items = ((t, None) for t in active)
    out = {}
    for task, rng_ in items:
        if task not in model.blocks:
            raise UnknownTaskError(f"no block for task {task!r}")
        w = model.layout.width(task)
        a, b = (0, w) if rng_ is None else rng_
        if not (0 <= a < b <= w):
            raise DimensionError(f"active range [{a},{b}) exceeds block {task!r}")
        out[task] = (a, b)
    return out


def forward(model: ToyModel, active, x: np.ndarray) -> np.ndarray:
    """``W_eff(active) @ x``; non-active columns contribute only the base.

    ``active`` is an iterable of task names (full blocks) or a mapping
    task -> (start, stop) of block-relative column subranges.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] != model.layout.d_in:
        raise DimensionError(f"input has {x.shape[0]} rows, expected d_in={model.layout.d_in}")
    y = model.base @ x
    for task, (a, b) in _normalize_active(model, active).items():
        s0, _ = model.layout.segment(task)
        blk = model.blocks[task]
        y = y + blk.up @ (blk.down[:, a:b] @ x[s0 + a : s0 + b])
    return y


def mse_loss(y: np.ndarray, target: np.ndarray) -> float:
    """``mean ||y - target||^2 / 2`` over sample columns."""
    e = y - target
    m = e.shape[1] if e.ndim == 2 else 1
    return float((e * e).sum() / (2.0 * m))


def stage_active_columns(stage: StagePlan) -> dict[str, tuple[int, int]]:
    """Columns participating in a stage's forward: train plus freeze."""
    spans: dict[str, list[tuple[int, int]]] = {}
    for t, a, b in list(stage.train_blocks) + list(stage.freeze_blocks):
        spans.setdefault(t, []).append((a, b))
    merged = {}
    for t, parts in spans.items():
        parts.sort()
        lo, hi = parts[0]
        for a, b in parts[1:]:
            if a != hi:
                raise DimensionError(f"non-contiguous active columns for {t!r}")
            hi = b
        merged[t] = (lo, hi)
    return merged


def stage_step(model: ToyModel, stage: StagePlan, batch, lr: float) -> float:
    """One gradient-descent step on the stage's batch; returns the pre-step loss.

    Masked blocks are excluded from the forward pass entirely; frozen
    columns participate in the forward but receive no update.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    x, target = batch
    x = np.asarray(x, dtype=float)
    target = np.asarray(target, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if target.ndim == 1:
        target = target[:, None]
    if target.shape[0] != model.layout.d_out or target.shape[1] != x.shape[1]:
        raise DimensionError("target shape does not match outputs")

    active = stage_active_columns(stage)
    y = forward(model, active, x)
    e = y - target
    m = x.shape[1]
    loss = float((e * e).sum() / (2.0 * m))
    grad_w = e @ x.T / m  # dL/dW_eff, d_out x d_in

    for task, a, b in stage.train_blocks:
        s0, _ = model.layout.segment(task)
        blk = model.blocks[task]
        g_seg = grad_w[:, s0 + a : s0 + b]
        if task == stage.trainee:
            grad_up = g_seg @ blk.down.T
            grad_down = blk.up.T @ g_seg
            blk.up -= lr * grad_up
            blk.down -= lr * grad_down
        else:
            # activated prefix of a prerequisite: down columns only
            blk.down[:, a:b] -= lr * (blk.up.T @ g_seg)
    return loss


def _locked_delta(stage: StagePlan, task: str, before: AdapterBlock, after: AdapterBlock) -> float:
    if task == stage.trainee:
        return 0.0
    trained = {t: (a, b) for t, a, b in stage.train_blocks}
    d_up = after.up - before.up
    d_down = after.down - before.down
    if task in trained:
        a, b = trained[task]
        d_down = np.delete(d_down, np.s_[a:b], axis=1)
    return float(math.sqrt((d_up * d_up).sum() + (d_down * d_down).sum()))


def run_plan(
    model: ToyModel,
    plan: TrainingPlan,
    data: TaskDataset,
    steps_per_stage: int,
    lr: float,
    *,
    reference: TrainingPlan | None = None,
    validate: bool = True,
) -> list[StageResult]:
    """Execute every stage in plan order, mutating ``model`` in place.

    ``reference`` (defaults to the executed plan) defines which parameters
    each stage was supposed to leave untouched when accounting the
    per-block change norms; passing the clean plan while executing a
    corrupted one turns the results into an immutability audit.
    """
    if validate:
        report = validate_plan(plan)
        if not report.ok:
            raise ValueError("invalid plan: " + "; ".join(report.violations))
    ref = reference if reference is not None else plan
    if len(ref.stages) != len(plan.stages):
        raise ValueError("reference plan has a different stage count")

    results = []
    for stage, ref_stage in zip(plan.stages, ref.stages):
        if stage.trainee not in data.samples:
            raise UnknownTaskError(f"no dataset for task {stage.trainee!r}")
        before = {t: blk.copy() for t, blk in model.blocks.items()}
        batch = data.samples[stage.trainee]
        for _ in range(steps_per_stage):
            stage_step(model, stage, batch, lr)
        final_loss = mse_loss(forward(model, stage_active_columns(stage), batch[0]), batch[1])
        deltas = []
        for task in model.layout.tasks:
            b0, b1 = before[task], model.blocks[task]
            d_up = b1.up - b0.up
            d_down = b1.down - b0.down
            total = float(math.sqrt((d_up * d_up).sum() + (d_down * d_down).sum()))
            deltas.append(BlockDelta(task, total, _locked_delta(ref_stage, task, b0, b1)))
        results.append(
            StageResult(stage.stage_index, stage.trainee, final_loss, steps_per_stage, tuple(deltas))
        )
    return results


@dataclass(frozen=True)
class ComposedView:
    """Read-only forward over a chosen task set plus its ancestors."""

    model: ToyModel
    active_tasks: frozenset[str]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return forward(self.model, sorted(self.active_tasks), x)


def compose(model: ToyModel, graph: TaskGraph, tasks) -> ComposedView:
    """Deployable sub-model: the requested tasks and their dependency closure."""
    chosen = set(tasks)
    for t in chosen:
        if t not in model.blocks:
            raise UnknownTaskError(f"no block for task {t!r}")
    closure = set(chosen)
    for t in chosen:
        closure |= ancestors(graph, t)
    missing = closure - set(model.blocks)
    if missing:
        raise UnknownTaskError(f"model lacks blocks for ancestors: {sorted(missing)}")
    return ComposedView(model, frozenset(closure))


def synthetic_dataset(
    model: ToyModel,
    n_samples: int,
    seed: int,
    planted: dict[str, np.ndarray] | None = None,
    noise: float = 0.0,
) -> TaskDataset:
    """Deterministic linear-regression data per task.

    Targets are ``(base + D_t) @ x`` with an optional ``noise`` level; by
    default ``D_t`` is a seeded rank-``r`` matrix planted on the task's own
    segment, and ``planted`` overrides it with full d_out x d_in matrices.
    Each task draws from its own child stream of ``seed``, so corrupting
    one task's samples cannot perturb another's.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    layout = model.layout
    children = np.random.SeedSequence(seed).spawn(len(layout.tasks))
    samples = {}
    for child, task in zip(children, layout.tasks):
        rng = np.random.default_rng(child)
        x = rng.standard_normal((layout.d_in, n_samples))
        if planted is not None and task in planted:
            d = np.asarray(planted[task], dtype=float)
            if d.shape != (layout.d_out, layout.d_in):
                raise DimensionError(f"planted matrix for {task!r} has shape {d.shape}")
        else:
            s0, s1 = layout.segment(task)
            u = rng.standard_normal((layout.d_out, layout.rank)) / math.sqrt(layout.rank)
            v = rng.standard_normal((layout.rank, s1 - s0)) / math.sqrt(s1 - s0)
            d = np.zeros((layout.d_out, layout.d_in))
            d[:, s0:s1] = u @ v
        y = (model.base + d) @ x
        if noise:
            y = y + noise * rng.standard_normal(y.shape)
        samples[task] = (x, y)
    return TaskDataset(seed, samples)


def model_to_dict(model: ToyModel) -> dict:
    """Checkpoint form: named row-major matrices plus the layout."""
    return {
        "layout": {
            "d_out": model.layout.d_out,
            "d_in": model.layout.d_in,
            "rank": model.layout.rank,
            "segments": [[t, a, b] for t, a, b in model.layout.segments],
        },
        "base": model.base.tolist(),
        "blocks": {
            t: {"up": blk.up.tolist(), "down": blk.down.tolist()}
            for t, blk in model.blocks.items()
        },
    }


def model_from_dict(doc: dict) -> ToyModel:
    lay = doc["layout"]
    layout = BlockLayout(
        lay["d_out"], lay["d_in"], lay["rank"], tuple((t, a, b) for t, a, b in lay["segments"])
    )
    base = np.asarray(doc["base"], dtype=float)
    base.setflags(write=False)
    blocks = {
        t: AdapterBlock(np.asarray(v["up"], dtype=float), np.asarray(v["down"], dtype=float))
        for t, v in doc["blocks"].items()
    }
    return ToyModel(layout, base, blocks)


def save_checkpoint(model: ToyModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> ToyModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
