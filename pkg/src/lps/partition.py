"""Disjoint per-task weight partition of the feature layers.

The ledger is append-only: a committed :class:`TaskSlice` is frozen (its
arrays are made read-only), and a task's inference weights depend only on
that slice and the slices committed before it. Later tasks can therefore
never change what an earlier task computes.

Supports are stored as explicit boolean allocations, not inferred from
nonzero values, so a weight that trains to exactly 0.0 keeps its slot.
"""
from dataclasses import dataclass, field

import numpy as np

from .netcore import DTYPE, Head


class PartitionError(ValueError):
    """A commit would break disjointness or mask containment."""


@dataclass
class TaskSlice:
    task_id: int
    weights: list
    mask: list
    head: Head
    weight_support: list
    mask_support: list

    def freeze(self):
        arrays = [*self.weights, *self.mask, *self.weight_support, *self.mask_support,
                  self.head.weight, self.head.bias]
        for a in arrays:
            a.flags.writeable = False
        return self


def compose(weights, mask, past):
    """Layerwise ``W + M * past``."""
    out = []
    for w, m, p in zip(weights, mask, past):
        if not (w.shape == m.shape == p.shape):
            raise ValueError(f"layer shape mismatch: {w.shape}, {m.shape}, {p.shape}")
        out.append(w + m * p)
    return out


@dataclass
class PartitionLedger:
    shapes: list
    accumulated: list = field(default=None)
    used_support: list = field(default=None)
    slices: list = field(default_factory=list)

    def __post_init__(self):
        self.shapes = [tuple(s) for s in self.shapes]
        if self.accumulated is None:
            self.accumulated = [np.zeros(s, dtype=DTYPE) for s in self.shapes]
        if self.used_support is None:
            self.used_support = [np.zeros(s, dtype=bool) for s in self.shapes]

    @property
    def total_capacity(self):
        return sum(p * q for p, q in self.shapes)

    @property
    def task_count(self):
        return len(self.slices)

    def slice(self, task_id):
        if not 1 <= task_id <= len(self.slices):
            raise KeyError(f"task {task_id} is not committed (have {len(self.slices)})")
        return self.slices[task_id - 1]

    def accumulated_before(self, task_id):
        """Sum of the weights of tasks ``1 .. task_id - 1``, recomputed from the slices."""
        out = [np.zeros(s, dtype=DTYPE) for s in self.shapes]
        for sl in self.slices[: task_id - 1]:
            for acc, w in zip(out, sl.weights):
                acc += w
        return out

    def support_before(self, task_id):
        out = [np.zeros(s, dtype=bool) for s in self.shapes]
        for sl in self.slices[: task_id - 1]:
            for acc, s in zip(out, sl.weight_support):
                acc |= s
        return out

    def free_support(self):
        """Complement of the union of committed supports."""
        return [~u for u in self.used_support]

    def used_fraction(self):
        return sum(int(u.sum()) for u in self.used_support) / self.total_capacity

    def effective_weights(self, sl):
        """Inference weights of ``sl`` given the slices committed before it."""
        if len(sl.weights) != len(self.shapes):
            raise ValueError(f"slice has {len(sl.weights)} layers, ledger {len(self.shapes)}")
        for w, s in zip(sl.weights, self.shapes):
            if w.shape != s:
                raise ValueError(f"layer shape {w.shape} does not match ledger {s}")
        if sl.task_id == 1:
            return [w.copy() for w in sl.weights]
        return compose(sl.weights, sl.mask, self.accumulated_before(sl.task_id))

    def commit_task(self, sl):
        """Append ``sl`` after checking disjointness and mask containment."""
        if sl.task_id != len(self.slices) + 1:
            raise PartitionError(f"expected task {len(self.slices) + 1}, got {sl.task_id}")
        for layer, (ws, ms, used) in enumerate(zip(sl.weight_support, sl.mask_support, self.used_support)):
            overlap = ws & used
            if overlap.any():
                coord = tuple(int(i) for i in np.argwhere(overlap)[0])
                raise PartitionError(f"layer {layer}: weight support overlaps a past task at {coord}")
            stray = ms & ~used
            if stray.any():
                coord = tuple(int(i) for i in np.argwhere(stray)[0])
                raise PartitionError(f"layer {layer}: mask selects {coord} outside past support")
        sl.freeze()
        for acc, used, w, ws in zip(self.accumulated, self.used_support, sl.weights, sl.weight_support):
            acc += w
            used |= ws
        self.slices.append(sl)
        return self


@dataclass
class InvariantCheck:
    name: str
    passed: bool
    detail: str = ""


def _first(mask):
    return tuple(int(i) for i in np.argwhere(mask)[0])


def verify_invariants(ledger):
    """Recompute every ledger invariant from the raw slice matrices."""
    checks = []

    bad = ""
    recomputed = ledger.accumulated_before(len(ledger.slices) + 1)
    for layer, (acc, ref) in enumerate(zip(ledger.accumulated, recomputed)):
        diff = acc != ref
        if diff.any():
            bad = f"layer {layer} at {_first(diff)}"
            break
    checks.append(InvariantCheck("accumulation", not bad, bad))

    bad = ""
    for layer in range(len(ledger.shapes)):
        seen = np.zeros(ledger.shapes[layer], dtype=bool)
        for sl in ledger.slices:
            clash = seen & sl.weight_support[layer]
            if clash.any():
                bad = f"task {sl.task_id} layer {layer} at {_first(clash)}"
                break
            seen |= sl.weight_support[layer]
        if bad:
            break
    checks.append(InvariantCheck("disjointness", not bad, bad))

    bad = ""
    union = ledger.support_before(len(ledger.slices) + 1)
    for layer, (u, ref) in enumerate(zip(ledger.used_support, union)):
        diff = u != ref
        if diff.any():
            bad = f"layer {layer} at {_first(diff)}"
            break
    checks.append(InvariantCheck("used_support_union", not bad, bad))

    used = sum(int(u.sum()) for u in union)
    checks.append(InvariantCheck("capacity", used <= ledger.total_capacity,
                                 f"{used} of {ledger.total_capacity} used"))

    bad = ""
    for sl in ledger.slices:
        past = ledger.support_before(sl.task_id)
        for layer in range(len(ledger.shapes)):
            w, m = sl.weights[layer], sl.mask[layer]
            ws, ms = sl.weight_support[layer], sl.mask_support[layer]
            if (w[~ws] != 0).any():
                bad = f"task {sl.task_id} layer {layer}: weight outside support at {_first((w != 0) & ~ws)}"
            elif not np.isin(m, (0.0, 1.0)).all():
                bad = f"task {sl.task_id} layer {layer}: non-binary mask at {_first(~np.isin(m, (0.0, 1.0)))}"
            elif (m[~ms] != 0).any():
                bad = f"task {sl.task_id} layer {layer}: mask outside support at {_first((m != 0) & ~ms)}"
            elif (ms & ~past[layer]).any():
                bad = f"task {sl.task_id} layer {layer}: mask beyond past support at {_first(ms & ~past[layer])}"
            elif (ws & ms).any():
                bad = f"task {sl.task_id} layer {layer}: weight/mask overlap at {_first(ws & ms)}"
            if bad:
                break
        if bad:
            break
    checks.append(InvariantCheck("slice_supports", not bad, bad))
    return checks
