"""ADMM over task weights ``W`` and relaxed sharing masks ``M``.

Each outer iteration runs one epoch of Adam on the proximal objective

    loss(W + M * past) + sum_l rho_l/2 ||W_l - Z_l + U_l||^2
                       + sum_l tau_l/2 ||M_l - Y_l + K_l||^2

then projects ``W + U`` and ``M + K`` onto their constraint sets to get the
auxiliary ``Z`` and ``Y``, and finally advances the scaled duals ``U`` and
``K``. ``tau`` follows the same schedule as ``rho``.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import netcore
from .netcore import AdamState, GradientSet
from .partition import compose
from .projection import project_mask_binary, project_weights
from .tasks import batches

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """The augmented objective became non-finite."""


@dataclass
class DraftSlice:
    """Task weights under training: ``W`` on free coordinates, relaxed ``M`` on past ones."""

    task_id: int
    weights: list
    mask: list
    head: netcore.Head

    def params(self, biases=None):
        out = {f"w{i}": w for i, w in enumerate(self.weights)}
        out.update({f"m{i}": m for i, m in enumerate(self.mask)})
        out["head_w"] = self.head.weight
        out["head_b"] = self.head.bias
        if biases is not None:
            out.update({f"b{i}": b for i, b in enumerate(biases.layers)})
        return out


@dataclass
class AdmmState:
    Z: list
    Y: list
    U: list
    K: list
    rho: list
    tau: list
    outer_iteration: int = 0


@dataclass
class ResidualRecord:
    task_id: int
    iteration: int
    layer: int
    rho: float
    w_residual: float
    m_residual: float
    w_norm: float


@dataclass
class AdmmResult:
    state: AdmmState
    residuals: list = field(default_factory=list)
    losses: list = field(default_factory=list)


def penalty_schedule(outer_iteration, total_outer, initial=1e-3, factor=10.0, intervals=3):
    """Piecewise-constant penalty: ``initial * factor**k`` on the k-th of ``intervals`` equal blocks."""
    if intervals < 1 or total_outer < intervals:
        raise ValueError(f"need total_outer >= intervals >= 1, got {total_outer}, {intervals}")
    k = min((outer_iteration * intervals) // total_outer, intervals)
    return initial * factor ** k


def init_state(draft, budgets, kind, free, past, rho=1e-3):
    """Auxiliaries start at the projections of the warm-started iterates; duals at zero."""
    L = len(draft.weights)
    state = AdmmState(
        Z=[None] * L, Y=[None] * L,
        U=[np.zeros_like(w) for w in draft.weights],
        K=[np.zeros_like(m) for m in draft.mask],
        rho=[rho] * L, tau=[rho] * L,
    )
    update_auxiliary(state, draft.weights, draft.mask, budgets, kind, free, past, use_duals=False)
    return state


def proximal_loss_and_grads(draft, past, biases, state, batch, labels, free, past_support,
                            train_biases=False):
    """Augmented loss and gradients for ``W``, ``M``, the head and (optionally) biases.

    ``W`` gradients live on ``free``; ``M`` gradients on ``past_support`` and
    follow the chain rule through ``W + M * past``.
    """
    effective = compose(draft.weights, draft.mask, past)
    loss, g = netcore.backprop(effective, draft.head, biases, batch, labels)
    grads = {}
    total = loss
    for i, (w, m) in enumerate(zip(draft.weights, draft.mask)):
        rho, tau = state.rho[i], state.tau[i]
        dw = w - state.Z[i] + state.U[i]
        dm = m - state.Y[i] + state.K[i]
        total += 0.5 * rho * float(np.sum(dw * dw)) + 0.5 * tau * float(np.sum(dm * dm))
        grads[f"w{i}"] = np.where(free[i], g.weights[i] + rho * dw, 0.0)
        grads[f"m{i}"] = np.where(past_support[i], g.weights[i] * past[i] + tau * dm, 0.0)
    grads["head_w"] = g.head_w
    grads["head_b"] = g.head_b
    if train_biases and not biases.frozen:
        grads.update({f"b{i}": gb for i, gb in enumerate(g.biases)})
    return total, grads


def update_auxiliary(state, weights, mask, budgets, kind, free, past, use_duals=True):
    """``Z <- proj(W + U)``, ``Y <- proj(M + K)`` layer by layer."""
    for i in range(len(weights)):
        zw = weights[i] + state.U[i] if use_duals else weights[i]
        ym = mask[i] + state.K[i] if use_duals else mask[i]
        state.Z[i] = project_weights(zw, budgets.alpha[i], kind, free[i])
        state.Y[i] = project_mask_binary(ym, budgets.beta[i], past[i])
    return state


def update_duals(state, weights, mask):
    for i in range(len(weights)):
        state.U[i] += weights[i] - state.Z[i]
        state.K[i] += mask[i] - state.Y[i]
    return state


def run_admm_phase(draft, past, biases, dataset, budgets, plan, free, past_support, seed,
                   train_biases=False, sink=None):
    """Run ``plan.admm_epochs`` outer ADMM iterations on ``draft`` (updated in place)."""
    if any(int(f.sum()) == 0 for f in free) or any(a == 0 for a in budgets.alpha):
        raise ValueError("ADMM needs free capacity and a positive weight budget in every layer")
    epochs = plan.admm_epochs
    rho0 = penalty_schedule(0, epochs, plan.rho_initial, plan.rho_factor, plan.rho_intervals)
    state = init_state(draft, budgets, plan.pruning_kind, free, past_support, rho0)
    params = draft.params(biases if train_biases else None)
    adam = AdamState(lr=plan.learning_rate)
    result = AdmmResult(state)
    for it in range(epochs):
        rho = penalty_schedule(it, epochs, plan.rho_initial, plan.rho_factor, plan.rho_intervals)
        state.rho = [rho] * len(draft.weights)
        state.tau = [rho] * len(draft.weights)
        state.outer_iteration = it
        epoch_loss, seen = 0.0, 0
        for xb, yb in batches(dataset.x_train, dataset.y_train, plan.batch_size, seed, ("admm", it)):
            loss, grads = proximal_loss_and_grads(draft, past, biases, state, xb, yb, free,
                                                  past_support, train_biases)
            if not math.isfinite(loss):
                raise DivergenceError(f"task {draft.task_id}: augmented loss {loss} at ADMM iteration {it}")
            netcore.adam_step(params, grads, adam)
            epoch_loss += loss * len(yb)
            seen += len(yb)
        update_auxiliary(state, draft.weights, draft.mask, budgets, plan.pruning_kind, free, past_support)
        update_duals(state, draft.weights, draft.mask)
        result.losses.append(epoch_loss / seen)
        for i, (w, m) in enumerate(zip(draft.weights, draft.mask)):
            rec = ResidualRecord(draft.task_id, it, i, rho,
                                 float(np.linalg.norm(w - state.Z[i])),
                                 float(np.linalg.norm(m - state.Y[i])),
                                 float(np.linalg.norm(w)))
            result.residuals.append(rec)
        if sink is not None:
            sink({"task": draft.task_id, "phase": "admm", "epoch": it, "loss": epoch_loss / seen,
                  "rho": rho})
        log.debug("task %d admm it %d loss %.5f", draft.task_id, it, epoch_loss / seen)
    return result


def augmented_fd_check(draft, past, biases, state, batch, labels, free, past_support, coords,
                       step=1e-5):
    """Max relative error of :func:`proximal_loss_and_grads` against central differences.

    ``coords`` are ``(name, index)`` pairs over ``w*``, ``m*``, ``head_w``, ``head_b``.
    """
    _, grads = proximal_loss_and_grads(draft, past, biases, state, batch, labels, free, past_support)
    params = draft.params()

    def objective():
        return proximal_loss_and_grads(draft, past, biases, state, batch, labels, free,
                                       past_support)[0]

    worst = 0.0
    for name, index in coords:
        numeric = netcore.central_difference(objective, params[name], index, step)
        worst = max(worst, netcore.relative_error(float(grads[name][index]), numeric))
    return worst
