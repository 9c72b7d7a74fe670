"""Per-task protocol (warm-up, ADMM, projection + retrain) and task sequencing."""
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import netcore
from .admm import DraftSlice, run_admm_phase
from .netcore import AdamState, NetworkSpec
from .partition import PartitionLedger, TaskSlice, compose
from .projection import KINDS, SparsityBudget, project_mask_binary, weight_support
from .seeding import rng_for
from .tasks import batches

log = logging.getLogger(__name__)

EVAL_CHUNK = 1000


@dataclass
class PhasePlan:
    warmup_epochs: int = 30
    admm_epochs: int = 90
    final_epochs: int = 30
    pruning_kind: str = "irregular"
    alpha_fraction: float = 0.10
    beta_fraction: float = 0.90
    learning_rate: float = 1e-3
    batch_size: int = 128
    rho_initial: float = 1e-3
    rho_factor: float = 10.0
    rho_intervals: int = 3
    prune_last_task: bool = True

    def __post_init__(self):
        for name in ("warmup_epochs", "admm_epochs", "final_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.admm_epochs and self.admm_epochs < self.rho_intervals:
            raise ValueError("admm_epochs must be at least rho_intervals")
        if self.pruning_kind not in KINDS:
            raise ValueError(f"pruning_kind must be one of {KINDS}")
        for name in ("alpha_fraction", "beta_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size and learning_rate must be positive")


@dataclass
class EvalRecord:
    task_id: int
    top1_accuracy: float
    sample_count: int
    correct: int
    logits_digest: str


@dataclass
class Engine:
    """Everything that persists between tasks."""

    spec: NetworkSpec
    biases: netcore.BiasSet
    ledger: PartitionLedger
    seed: int = 0

    @classmethod
    def create(cls, spec, seed=0):
        return cls(spec, netcore.init_biases(spec), PartitionLedger(spec.feature_shapes), seed)


def logits_digest(logits):
    return hashlib.sha256(np.ascontiguousarray(logits, dtype=np.float64).tobytes()).hexdigest()


def predict_logits(weights, head, biases, x):
    out = [netcore.forward(weights, head, biases, x[s:s + EVAL_CHUNK]) for s in range(0, len(x), EVAL_CHUNK)]
    return np.concatenate(out, axis=0)


def _accuracy(logits, y):
    return int(np.sum(np.argmax(logits, axis=1) == y))


def _epoch(params, adam, weights_fn, head, biases, x, y, plan, seed, tag, trainable, sink, meta):
    total, correct, seen = 0.0, 0, 0
    for xb, yb in batches(x, y, plan.batch_size, seed, tag):
        weights = weights_fn()
        acts_loss, grads = netcore.loss_and_grads(weights, head, biases, xb, yb, trainable)
        if not np.isfinite(acts_loss):
            raise FloatingPointError(f"non-finite loss during {tag}")
        netcore.adam_step(params, _grad_names(grads, trainable), adam)
        total += acts_loss * len(yb)
        seen += len(yb)
    if sink is not None:
        sink({**meta, "loss": total / seen})
    return total / seen


def _grad_names(grads, trainable):
    return {k: v for k, v in grads.as_dict().items() if k in trainable}


def _train_dense_phase(draft, past, biases, dataset, plan, seed, w_trainable, train_biases, epochs,
                       phase, sink):
    """Plain Adam on ``loss(W + M * past)`` with ``M`` held fixed."""
    params = {f"w{i}": w for i, w in enumerate(draft.weights)}
    params["head_w"] = draft.head.weight
    params["head_b"] = draft.head.bias
    trainable = {f"w{i}": m for i, m in enumerate(w_trainable)}
    trainable["head_w"] = True
    trainable["head_b"] = True
    if train_biases and not biases.frozen:
        params.update({f"b{i}": b for i, b in enumerate(biases.layers)})
        trainable.update({f"b{i}": True for i in range(len(biases.layers))})
    adam = AdamState(lr=plan.learning_rate)
    losses = []
    for epoch in range(epochs):
        losses.append(_epoch(
            params, adam, lambda: compose(draft.weights, draft.mask, past), draft.head, biases,
            dataset.x_train, dataset.y_train, plan, seed, (phase, epoch), trainable, sink,
            {"task": draft.task_id, "phase": phase, "epoch": epoch},
        ))
    return losses


def new_draft(engine, task_id):
    spec = engine.spec
    rng = rng_for(engine.seed, "init", task_id)
    free = engine.ledger.free_support()
    weights = [netcore.glorot_uniform(rng, s) * f for s, f in zip(spec.feature_shapes, free)]
    mask = [u.astype(np.float64) for u in engine.ledger.used_support]
    return DraftSlice(task_id, weights, mask, netcore.init_head(rng, spec))


def warmup(engine, draft, dataset, plan, sink=None):
    """Train ``W`` on all free coordinates with ``M = 1`` fixed; the head trains too."""
    free = engine.ledger.free_support()
    if any(int(f.sum()) == 0 for f in free):
        raise ValueError(f"task {draft.task_id}: no free capacity left")
    return _train_dense_phase(draft, engine.ledger.accumulated, engine.biases, dataset, plan,
                              rng_seed(engine, draft.task_id), free, draft.task_id == 1,
                              plan.warmup_epochs, "warmup", sink)


def rng_seed(engine, task_id):
    return int(rng_for(engine.seed, "batches", task_id).integers(2**63))


def finalize(engine, draft, dataset, plan, budgets, sink=None):
    """Hard-project ``W`` and ``M``, then retrain ``W`` on its kept support and the head."""
    ledger = engine.ledger
    free = ledger.free_support()
    past = ledger.used_support
    supports = [weight_support(w, a, plan.pruning_kind, f)
                for w, a, f in zip(draft.weights, budgets.alpha, free)]
    for w, s in zip(draft.weights, supports):
        w[~s] = 0.0
    for i, (m, b, p) in enumerate(zip(draft.mask, budgets.beta, past)):
        draft.mask[i] = project_mask_binary(m, b, p)
    losses = _train_dense_phase(draft, ledger.accumulated, engine.biases, dataset, plan,
                                rng_seed(engine, draft.task_id), supports, draft.task_id == 1,
                                plan.final_epochs, "final", sink)
    mask_support = [m == 1.0 for m in draft.mask]
    sl = TaskSlice(draft.task_id, draft.weights, draft.mask, draft.head, supports, mask_support)
    return sl, losses


@dataclass
class TaskOutcome:
    slice: TaskSlice
    budgets: SparsityBudget
    warmup_losses: list
    admm: object
    final_losses: list
    pre_projection_train_accuracy: float = float("nan")


def resolve_budgets(engine, plan, last_task=False):
    ledger = engine.ledger
    alpha = plan.alpha_fraction
    if last_task and not plan.prune_last_task:
        alpha = 1.0
    return SparsityBudget.resolve(alpha, plan.beta_fraction, plan.pruning_kind,
                                  ledger.free_support(), ledger.used_support)


def train_task(engine, dataset, plan, last_task=False, sink=None, residual_sink=None):
    """Warm-up, ADMM, finalize, commit. Nothing is committed if a phase fails."""
    task_id = engine.ledger.task_count + 1
    if dataset.task_id != task_id:
        raise ValueError(f"engine expects task {task_id}, got dataset for task {dataset.task_id}")
    if dataset.input_dim != engine.spec.input_dim or dataset.class_count > engine.spec.class_count:
        raise ValueError("dataset does not fit the network's input or head width")
    budgets = resolve_budgets(engine, plan, last_task)
    draft = new_draft(engine, task_id)
    # biases train only on task 1; work on a copy so a failed task leaves them untouched
    biases_backup = engine.biases.copy()
    try:
        warm = warmup(engine, draft, dataset, plan, sink)
        free = engine.ledger.free_support()
        past = engine.ledger.used_support
        admm_result = None
        pre_acc = float("nan")
        if plan.admm_epochs > 0:
            admm_result = run_admm_phase(
                draft, engine.ledger.accumulated, engine.biases, dataset, budgets, plan, free, past,
                rng_seed(engine, task_id), train_biases=task_id == 1, sink=sink,
            )
            if residual_sink is not None:
                for rec in admm_result.residuals:
                    residual_sink(rec)
        logits = predict_logits(compose(draft.weights, draft.mask, engine.ledger.accumulated),
                                draft.head, engine.biases, dataset.x_train)
        pre_acc = _accuracy(logits, dataset.y_train) / len(dataset.y_train)
        sl, final_losses = finalize(engine, draft, dataset, plan, budgets, sink)
        engine.ledger.commit_task(sl)
    except Exception:
        engine.biases = biases_backup
        raise
    if task_id == 1:
        engine.biases.frozen = True
        for b in engine.biases.layers:
            b.flags.writeable = False
    return TaskOutcome(sl, budgets, warm, admm_result, final_losses, pre_acc)


def evaluate(engine, task_id, x, y):
    """Top-1 accuracy of committed task ``task_id`` through its own head."""
    sl = engine.ledger.slice(task_id)
    logits = predict_logits(engine.ledger.effective_weights(sl), sl.head, engine.biases, x)
    correct = _accuracy(logits, y)
    return EvalRecord(task_id, correct / len(y), len(y), correct, logits_digest(logits))


def train_accuracy(engine, task_id, dataset):
    return evaluate(engine, task_id, dataset.x_train, dataset.y_train).top1_accuracy


@dataclass
class SequenceResult:
    """``matrix[k, i]`` is task ``i+1`` test accuracy after training task ``k+1`` (NaN above the diagonal)."""

    matrix: np.ndarray
    digests: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)

    @property
    def final_accuracies(self):
        return self.matrix[-1].copy()

    @property
    def average(self):
        return float(np.mean(self.matrix[-1]))


def run_sequence(engine, datasets, plan, sink=None, residual_sink=None, on_task_done=None,
                 prior_rows=None):
    """Train every task not yet committed, evaluating all committed tasks after each.

    ``prior_rows`` carries the accuracy rows of tasks already in ``engine``
    (when resuming from a checkpoint).
    """
    n = len(datasets)
    matrix = np.full((n, n), np.nan)
    digests = [[None] * n for _ in range(n)]
    done = engine.ledger.task_count
    if done:
        if prior_rows is None or len(prior_rows) != done:
            raise ValueError(f"resuming after task {done} needs {done} prior accuracy rows")
        for k, row in enumerate(prior_rows):
            matrix[k, : k + 1] = row[: k + 1]
    result = SequenceResult(matrix, digests)
    for ds in datasets[done:]:
        t = ds.task_id
        outcome = train_task(engine, ds, plan, last_task=(t == n), sink=sink, residual_sink=residual_sink)
        result.outcomes.append(outcome)
        for i in range(1, t + 1):
            rec = evaluate(engine, i, datasets[i - 1].x_test, datasets[i - 1].y_test)
            matrix[t - 1, i - 1] = rec.top1_accuracy
            digests[t - 1][i - 1] = rec.logits_digest
            if sink is not None:
                sink({"event": "eval", "after_task": t, "task": i, "accuracy": rec.top1_accuracy,
                      "digest": rec.logits_digest})
        log.info("after task %d: %s", t, np.round(matrix[t - 1, :t], 4).tolist())
        if on_task_done is not None:
            on_task_done(engine, matrix[:t].copy())
    return result
