"""Staged train/freeze/mask adapter planning over task graphs, plus a
two-group pipeline simulator and strategy optimizer with a desk-scale
numeric reference trainer."""

from .costs import CostModel, DeviceProfile, LayerCost, TaskLoad, load_profile
from .errors import (
    BlockPipeError,
    CycleError,
    DimensionError,
    DuplicateEdgeError,
    InfeasibleError,
    InvalidGroupingError,
    UnknownLayerError,
    UnknownLinkError,
    UnknownTaskError,
)
from .optimize import GapResult, OptResult, StageTasks, minimize_gap, optimize, search_partition_batch
from .plan import BlockLayout, StagePlan, TrainingPlan, build_plan, partition_blocks, validate_plan
from .schedule import (
    Grouping,
    Partition,
    PipelineSchedule,
    Trace,
    build_schedule,
    build_task_schedule,
    group_completion,
    simulate,
)
from .taskgraph import TaskGraph, adjacency, build_graph, extract_layers, prerequisites
from .trainer import ToyModel, compose, forward, init_model, run_plan, stage_step, synthetic_dataset

__version__ = "0.1.0"
