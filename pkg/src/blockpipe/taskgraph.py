"""Directed multi-task dependency graphs and source-node layer extraction.

A graph is an ordered list of named tasks plus directed edges ``(u, w)``
meaning task ``u`` must complete before task ``w``.  Layers are produced by
repeatedly collecting the zero-in-degree tasks of the residual graph and
deleting them; the resulting ordered list of layers drives the stage order
of the planner.

All values here are immutable and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import CycleError, DuplicateEdgeError, UnknownTaskError

__all__ = [
    "TaskGraph",
    "AdjacencyMatrix",
    "LayerList",
    "build_graph",
    "adjacency",
    "extract_layers",
    "prerequisites",
    "ancestors",
    "graph_from_dict",
]


@dataclass(frozen=True)
class TaskGraph:
    """Validated DAG over named tasks; indices follow declaration order."""

    tasks: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if len(tasks) == 0:
            raise ValueError("a task graph needs at least one task")
        if any(not isinstance(t, str) or not t for t in tasks):
            raise ValueError("task names must be nonempty strings")
        if len(set(tasks)) != len(tasks):
            raise ValueError("task names must be unique")
        index = {t: i for i, t in enumerate(tasks)}

        seen = set()
        for u, w in self.edges:
            if u not in index:
                raise UnknownTaskError(f"edge endpoint {u!r} is not a declared task")
            if w not in index:
                raise UnknownTaskError(f"edge endpoint {w!r} is not a declared task")
            if u == w:
                raise CycleError(f"self-edge on task {u!r}")
            if (u, w) in seen:
                raise DuplicateEdgeError(f"duplicate edge {u!r} -> {w!r}")
            seen.add((u, w))

        # normalize to a canonical order so equal graphs compare equal
        ordered = tuple(sorted(seen, key=lambda e: (index[e[0]], index[e[1]])))
        object.__setattr__(self, "tasks", tasks)
        object.__setattr__(self, "edges", ordered)
        self._check_acyclic()

    def _check_acyclic(self):
        preds = {t: set() for t in self.tasks}
        for u, w in self.edges:
            preds[w].add(u)
        remaining = set(self.tasks)
        while remaining:
            sources = [t for t in remaining if not (preds[t] & remaining)]
            if not sources:
                cyclic = ", ".join(sorted(remaining))
                raise CycleError(f"graph contains a directed cycle among: {cyclic}")
            remaining.difference_update(sources)

    @property
    def n(self) -> int:
        return len(self.tasks)

    def index(self, task: str) -> int:
        try:
            return self.tasks.index(task)
        except ValueError:
            raise UnknownTaskError(f"unknown task {task!r}") from None

    def predecessors(self, task: str) -> frozenset[str]:
        self.index(task)
        return frozenset(u for u, w in self.edges if w == task)

    def successors(self, task: str) -> frozenset[str]:
        self.index(task)
        return frozenset(w for u, w in self.edges if u == task)


@dataclass(frozen=True)
class AdjacencyMatrix:
    """n x n binary matrix; cells[i][j] == 1 iff edge (task_i, task_j) exists."""

    n: int
    cells: tuple[tuple[int, ...], ...]

    def as_lists(self) -> list[list[int]]:
        return [list(row) for row in self.cells]


@dataclass(frozen=True)
class LayerList:
    """Ordered disjoint task layers; every edge crosses to a later layer."""

    layers: tuple[tuple[str, ...], ...]

    @property
    def depth(self) -> int:
        return len(self.layers)

    def layer_of(self, task: str) -> int:
        for i, layer in enumerate(self.layers):
            if task in layer:
                return i
        raise UnknownTaskError(f"unknown task {task!r}")

    def as_dict(self) -> dict:
        return {"layers": [list(layer) for layer in self.layers]}


def build_graph(task_names, edges) -> TaskGraph:
    """Construct a validated graph; raises on cycles, dups, unknown tasks."""
    return TaskGraph(tuple(task_names), tuple((u, w) for u, w in edges))


def graph_from_dict(doc: dict) -> TaskGraph:
    """Ingest ``{"tasks": [...], "edges": [["A", "C"], ...]}``."""
    if not isinstance(doc, dict) or "tasks" not in doc:
        raise ValueError('graph document must be an object with a "tasks" list')
    return build_graph(doc["tasks"], doc.get("edges", ()))


def adjacency(g: TaskGraph) -> AdjacencyMatrix:
    index = {t: i for i, t in enumerate(g.tasks)}
    rows = [[0] * g.n for _ in range(g.n)]
    for u, w in g.edges:
        rows[index[u]][index[w]] = 1
    return AdjacencyMatrix(g.n, tuple(tuple(r) for r in rows))


def extract_layers(g: TaskGraph) -> LayerList:
    """Peel zero-in-degree tasks layer by layer (declaration order within one)."""
    preds = {t: g.predecessors(t) for t in g.tasks}
    remaining = set(g.tasks)
    layers = []
    while remaining:
        layer = tuple(t for t in g.tasks if t in remaining and not (preds[t] & remaining))
        if not layer:  # unreachable: construction already rejected cycles
            raise CycleError("residual graph has no source nodes")
        layers.append(layer)
        remaining.difference_update(layer)
    return LayerList(tuple(layers))


def prerequisites(g: TaskGraph, task: str) -> frozenset[str]:
    """Direct predecessors of ``task`` (the tasks it depends on)."""
    return g.predecessors(task)


def ancestors(g: TaskGraph, task: str) -> frozenset[str]:
    """Transitive closure of prerequisites."""
    closure: set[str] = set()
    frontier = list(g.predecessors(task))
    while frontier:
        p = frontier.pop()
        if p not in closure:
            closure.add(p)
            frontier.extend(g.predecessors(p))
    return frozenset(closure)
