"""Euclidean projections onto the pruning and sharing constraint sets.

Three weight sets (at most ``alpha`` nonzero entries / columns / rows) and
one mask set (binary, exactly ``beta`` ones). Each projection takes an
eligibility mask so that coordinates reserved by other tasks are forced to
zero inside the projection itself.

Ties are broken toward the lower flat index (or lower group index), which
makes every projection deterministic.
"""
import math
from dataclasses import dataclass

import numpy as np

KINDS = ("irregular", "column", "filter")


def _eligible_mask(shape, eligible):
    if eligible is None:
        return np.ones(shape, dtype=bool)
    eligible = np.asarray(eligible, dtype=bool)
    if eligible.shape != shape:
        raise ValueError(f"eligible mask shape {eligible.shape} does not match {shape}")
    return eligible


def _top_k(keys, k, candidates):
    """Boolean selection of the ``k`` largest ``keys`` among ``candidates`` (flat)."""
    idx = np.flatnonzero(candidates)
    if k > idx.size:
        raise ValueError(f"budget {k} exceeds the {idx.size} eligible entries")
    chosen = np.zeros(candidates.size, dtype=bool)
    if k > 0:
        # stable sort on negated keys keeps lower indices first among ties
        order = np.argsort(-keys.ravel()[idx], kind="stable")
        chosen[idx[order[:k]]] = True
    return chosen.reshape(candidates.shape)


def _check_budget(budget, name):
    if int(budget) != budget or budget < 0:
        raise ValueError(f"{name} must be a non-negative integer, got {budget}")
    return int(budget)


def irregular_support(Z, alpha, eligible=None):
    """Coordinates kept by :func:`project_irregular` (exactly ``alpha`` of them)."""
    alpha = _check_budget(alpha, "alpha")
    eligible = _eligible_mask(Z.shape, eligible)
    return _top_k(np.abs(Z), alpha, eligible)


def project_irregular(Z, alpha, eligible=None):
    """Keep the ``alpha`` largest-magnitude eligible entries of ``Z``; zero the rest."""
    return np.where(irregular_support(Z, alpha, eligible), Z, 0.0)


def _group_axis(axis):
    if axis == "column":
        return 0  # reduce over rows -> one norm per column
    if axis == "filter":
        return 1
    raise ValueError(f"axis must be 'column' or 'filter', got {axis!r}")


def groups_fully_inside(axis, eligible):
    """Indices of columns/rows whose every entry is eligible."""
    return np.flatnonzero(np.all(eligible, axis=_group_axis(axis)))


def structured_support(Z, alpha, axis, eligible_groups=None):
    """Boolean entry mask of the ``alpha`` kept groups."""
    alpha = _check_budget(alpha, "alpha")
    reduce_axis = _group_axis(axis)
    norms = np.sqrt((Z * Z).sum(axis=reduce_axis))
    candidates = np.zeros(norms.shape, dtype=bool)
    if eligible_groups is None:
        candidates[:] = True
    else:
        candidates[np.asarray(eligible_groups, dtype=int)] = True
    kept = _top_k(norms, alpha, candidates)
    if reduce_axis == 0:
        return np.broadcast_to(kept[None, :], Z.shape).copy()
    return np.broadcast_to(kept[:, None], Z.shape).copy()


def project_structured(Z, alpha, axis, eligible_groups=None):
    """Keep the ``alpha`` eligible columns (or rows) of largest l2 norm."""
    return np.where(structured_support(Z, alpha, axis, eligible_groups), Z, 0.0)


def project_mask_binary(Z, beta, eligible=None):
    """Nearest binary matrix with exactly ``beta`` ones, all on eligible entries.

    The ones go to the ``beta`` largest eligible entries of ``Z``.
    """
    beta = _check_budget(beta, "beta")
    eligible = _eligible_mask(Z.shape, eligible)
    if beta > int(eligible.sum()):
        raise ValueError(f"beta={beta} exceeds the {int(eligible.sum())} eligible entries")
    return _top_k(Z, beta, eligible).astype(Z.dtype if Z.dtype.kind == "f" else np.float64)


def weight_support(Z, alpha, kind, eligible):
    """Allocated support for a weight projection of ``kind`` under ``eligible``."""
    if kind == "irregular":
        return irregular_support(Z, alpha, eligible)
    if kind in ("column", "filter"):
        return structured_support(Z, alpha, kind, groups_fully_inside(kind, eligible))
    raise ValueError(f"unknown pruning kind {kind!r}")


def project_weights(Z, alpha, kind, eligible):
    return np.where(weight_support(Z, alpha, kind, eligible), Z, 0.0)


# -- exhaustive oracle ------------------------------------------------------

ORACLE_LIMIT = 20


def _all_subsets(n, size=None):
    """Every subset of ``range(n)`` as rows of a boolean table, in binary-count order."""
    codes = np.arange(2 ** n, dtype=np.int64)
    table = ((codes[:, None] >> np.arange(n)) & 1).astype(bool)
    if size is not None:
        table = table[table.sum(axis=1) == size]
    return table


def oracle_project(Z, budget, kind, eligible=None):
    """Brute-force minimiser of ``||X - Z||`` over the constraint set of ``kind``.

    ``kind`` is one of ``irregular``, ``column``, ``filter``, ``mask``. For the
    structured kinds the eligible groups are those fully inside ``eligible``.
    Enumerates every feasible support, so only tiny instances are accepted.
    """
    Z = np.asarray(Z, dtype=np.float64)
    eligible = _eligible_mask(Z.shape, eligible)
    if int(eligible.sum()) > ORACLE_LIMIT:
        raise ValueError(f"oracle limited to {ORACLE_LIMIT} eligible coordinates")
    if kind in ("irregular", "mask"):
        units = []
        for flat in np.flatnonzero(eligible):
            m = np.zeros(Z.shape, dtype=bool)
            m[np.unravel_index(flat, Z.shape)] = True
            units.append(m)
    elif kind in ("column", "filter"):
        units = []
        for g in groups_fully_inside(kind, eligible):
            m = np.zeros(Z.shape, dtype=bool)
            if kind == "column":
                m[:, g] = True
            else:
                m[g, :] = True
            units.append(m)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    n = len(units)
    if kind == "mask" and budget > n:
        raise ValueError("budget exceeds eligible count")

    unit_idx = np.array([m.ravel() for m in units], dtype=bool).reshape(n, Z.size)
    subsets = _all_subsets(n, budget if kind == "mask" else None)
    if kind != "mask":
        subsets = subsets[subsets.sum(axis=1) <= budget]
    # entry-level selection for every candidate support
    selected = (subsets.astype(np.int64) @ unit_idx.astype(np.int64)) > 0
    z = Z.ravel()
    if kind == "mask":
        cand = selected.astype(np.float64)
    else:
        cand = np.where(selected, z, 0.0)
    dist = np.sqrt(((cand - z) ** 2).sum(axis=1))
    return cand[int(np.argmin(dist))].reshape(Z.shape)


# -- budgets ----------------------------------------------------------------


def resolve_budget(fraction, total, eligible_count):
    """Integer budget ``round(fraction * total)`` clamped to ``[0, eligible_count]``.

    A positive fraction never rounds down to zero while something is eligible.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    budget = int(math.floor(fraction * total + 0.5))
    if fraction > 0 and eligible_count >= 1:
        budget = max(budget, 1)
    return max(0, min(budget, eligible_count))


@dataclass(frozen=True)
class SparsityBudget:
    """Per-layer integer budgets: ``alpha`` for weights, ``beta`` for masks.

    ``alpha`` counts entries for irregular pruning, columns for column pruning
    and rows for filter pruning.
    """

    alpha: tuple
    beta: tuple

    @classmethod
    def resolve(cls, alpha_fraction, beta_fraction, kind, free_support, past_support):
        alphas, betas = [], []
        for free, past in zip(free_support, past_support):
            p, q = free.shape
            if kind == "irregular":
                total, eligible = p * q, int(free.sum())
            elif kind in ("column", "filter"):
                total = q if kind == "column" else p
                eligible = len(groups_fully_inside(kind, free))
            else:
                raise ValueError(f"unknown pruning kind {kind!r}")
            alphas.append(resolve_budget(alpha_fraction, total, eligible))
            n_past = int(past.sum())
            betas.append(resolve_budget(beta_fraction, n_past, n_past))
        return cls(tuple(alphas), tuple(betas))
