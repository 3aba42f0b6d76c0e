"""Device capacities, per-layer compute work, task requirements, link costs.

Compute time is linear in batch size: ``k * work / capacity``.  A frozen
execution has no backward pass, so its backward time is zero by definition.
Communication is point-to-point and contention-free:
``latency + bytes / bandwidth``, zero between a device and itself.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import UnknownLayerError, UnknownLinkError, UnknownTaskError

__all__ = [
    "Link",
    "DeviceProfile",
    "LayerCost",
    "TaskLoad",
    "CostModel",
    "t_fwd",
    "t_bwd",
    "t_comm",
    "group_metrics",
    "load_profile",
    "scaled",
    "DEFAULT_BWD_FWD_RATIO",
]

# two-matmul backward heuristic used when a profile omits bwd work
DEFAULT_BWD_FWD_RATIO = 2.0


@dataclass(frozen=True)
class Link:
    bandwidth: float  # bytes per second
    latency: float    # seconds

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("link bandwidth must be positive")
        if self.latency < 0:
            raise ValueError("link latency must be nonnegative")


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    capacity: float  # work-units per second
    links: tuple[tuple[str, Link], ...] = ()

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValueError(f"device {self.device_id!r} capacity must be positive")

    def link_to(self, peer: str) -> Link:
        for name, link in self.links:
            if name == peer:
                return link
        raise UnknownLinkError(f"no link {self.device_id!r} -> {peer!r}")


@dataclass(frozen=True)
class LayerCost:
    index: int
    fwd_work: float         # work-units per sample
    bwd_work: float         # work-units per sample
    activation_bytes: float  # bytes per sample

    def __post_init__(self):
        if min(self.fwd_work, self.bwd_work, self.activation_bytes) < 0:
            raise ValueError(f"layer {self.index} costs must be nonnegative")


@dataclass(frozen=True)
class TaskLoad:
    task_id: str
    train_work: float   # forward+backward requirement when training
    frozen_work: float  # forward-only requirement when frozen

    def __post_init__(self):
        if self.train_work < 0 or self.frozen_work < 0:
            raise ValueError(f"task {self.task_id!r} requirements must be nonnegative")


@dataclass(frozen=True)
class CostModel:
    devices: tuple[DeviceProfile, ...]
    layers: tuple[LayerCost, ...]
    tasks: tuple[TaskLoad, ...]

    def device(self, device_id: str) -> DeviceProfile:
        for d in self.devices:
            if d.device_id == device_id:
                return d
        raise UnknownLinkError(f"device {device_id!r} is not in the cost model")

    def layer(self, index: int) -> LayerCost:
        if not 0 <= index < len(self.layers):
            raise UnknownLayerError(f"layer {index} outside [0, {len(self.layers)})")
        return self.layers[index]

    def task(self, task_id: str) -> TaskLoad:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise UnknownTaskError(f"task {task_id!r} is not in the cost model")

    @property
    def device_ids(self) -> tuple[str, ...]:
        return tuple(d.device_id for d in self.devices)

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def t_fwd(lc: LayerCost, d: DeviceProfile, k: int) -> float:
    """Forward time of one layer for a micro-batch of ``k`` samples."""
    if k < 1:
        raise ValueError("batch size must be >= 1")
    return k * lc.fwd_work / d.capacity


def t_bwd(lc: LayerCost, d: DeviceProfile, k: int, frozen: bool = False) -> float:
    """Backward time; zero for a frozen execution (no backward pass)."""
    if k < 1:
        raise ValueError("batch size must be >= 1")
    if frozen:
        return 0.0
    return k * lc.bwd_work / d.capacity


def t_comm(src: DeviceProfile, dst: DeviceProfile, nbytes: float) -> float:
    """``latency + bytes / bandwidth``; zero from a device to itself."""
    if nbytes < 0:
        raise ValueError("byte count must be nonnegative")
    if src.device_id == dst.device_id:
        return 0.0
    link = src.link_to(dst.device_id)
    return link.latency + nbytes / link.bandwidth


def group_metrics(cm: CostModel, devices, tasks, training=()) -> tuple[float, float]:
    """Summed capacity and summed requirement for one group.

    Tasks listed in ``training`` contribute their train requirement,
    everything else its frozen (forward-only) requirement.
    """
    training = set(training)
    capacity = sum(cm.device(d).capacity for d in devices)
    requirement = sum(
        cm.task(t).train_work if t in training else cm.task(t).frozen_work for t in tasks
    )
    return (capacity, requirement)


def load_profile(doc: dict) -> CostModel:
    """Parse the JSON profile schema.

    ``{"devices": [{"id", "capacity", "links": {peer: {"bw", "lat"}}}],
    "layers": [{"fwd", "bwd"?, "act_bytes"}],
    "tasks": [{"id", "req_train", "req_frozen"}]}``; a missing ``bwd``
    defaults to twice ``fwd``.
    """
    try:
        devices = []
        for d in doc["devices"]:
            links = tuple(
                (peer, Link(float(spec["bw"]), float(spec.get("lat", 0.0))))
                for peer, spec in sorted(d.get("links", {}).items())
            )
            devices.append(DeviceProfile(str(d["id"]), float(d["capacity"]), links))
        layers = []
        for i, spec in enumerate(doc["layers"]):
            fwd = float(spec["fwd"])
            bwd = float(spec["bwd"]) if "bwd" in spec else DEFAULT_BWD_FWD_RATIO * fwd
            layers.append(LayerCost(i, fwd, bwd, float(spec["act_bytes"])))
        tasks = [
            TaskLoad(str(t["id"]), float(t["req_train"]), float(t["req_frozen"]))
            for t in doc.get("tasks", [])
        ]
    except KeyError as exc:
        raise ValueError(f"cost profile is missing required key {exc}") from exc
    if not devices:
        raise ValueError("cost profile declares no devices")
    if not layers:
        raise ValueError("cost profile declares no layers")
    ids = [d.device_id for d in devices]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate device id in cost profile")
    return CostModel(tuple(devices), tuple(layers), tuple(tasks))


def scaled(cm: CostModel, factor: float) -> CostModel:
    """Speed everything up by ``factor``: every time shrinks by 1/factor.

    Capacities and bandwidths multiply by the factor, latencies divide.
    """
    if factor <= 0:
        raise ValueError("scale factor must be positive")
    devices = tuple(
        replace(
            d,
            capacity=d.capacity * factor,
            links=tuple(
                (peer, Link(link.bandwidth * factor, link.latency / factor))
                for peer, link in d.links
            ),
        )
        for d in cm.devices
    )
    return CostModel(devices, cm.layers, cm.tasks)
