"""Sequential multi-task training in one fixed-size network.

Each task gets its own pruned, disjoint slice of the feature weights and a
learned binary mask choosing which earlier-task weights it reuses.
"""
from .netcore import NetworkSpec
from .partition import PartitionLedger, TaskSlice, verify_invariants
from .trainer import Engine, PhasePlan, evaluate, run_sequence, train_task

__all__ = ["Engine", "NetworkSpec", "PartitionLedger", "PhasePlan", "TaskSlice", "evaluate",
           "run_sequence", "train_task", "verify_invariants"]
