"""Dense ReLU feedforward network with hand-written backprop and masked Adam.

Weights are stored in GEMM layout: layer ``l`` maps ``P_l`` inputs to ``Q_l``
outputs through a ``(P_l, Q_l)`` matrix, so a batch ``X`` of shape ``(N, P_l)``
becomes ``relu(X @ W_l + b_l)``. The last (head) layer is affine with no
activation. Everything is float64.

Parameter arrays are addressed by name in flat dictionaries (``w0``, ``w1``,
..., ``b0``, ..., ``head_w``, ``head_b``) so optimizers and gradient masks can
treat them uniformly.
"""
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when arrays handed to the network do not chain correctly."""


@dataclass(frozen=True)
class NetworkSpec:
    """Layer widths ``[d, h_1, ..., h_L, d']``; the last entry is the head width."""

    layer_dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 3:
            raise ValueError("need at least input, one hidden layer and output widths")
        if any(d <= 0 for d in dims):
            raise ValueError(f"layer widths must be positive, got {dims}")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def layer_count(self):
        """Number of feature (prunable) layers ``L``; the head is extra."""
        return len(self.layer_dims) - 2

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def class_count(self):
        return self.layer_dims[-1]

    @property
    def feature_shapes(self):
        dims = self.layer_dims
        return [(dims[i], dims[i + 1]) for i in range(self.layer_count)]

    @property
    def head_shape(self):
        return (self.layer_dims[-2], self.layer_dims[-1])

    @property
    def parameter_count(self):
        """Feature-extractor weight count ``m`` (biases and head excluded)."""
        return sum(p * q for p, q in self.feature_shapes)


@dataclass
class Head:
    """Per-task output layer; trained freely in every phase."""

    weight: np.ndarray
    bias: np.ndarray


@dataclass
class BiasSet:
    """Feature-layer biases. Learned on the first task, then frozen."""

    layers: list
    frozen: bool = False

    def copy(self):
        return BiasSet([b.copy() for b in self.layers], self.frozen)


@dataclass
class GradientSet:
    weights: list
    biases: list
    head_w: np.ndarray
    head_b: np.ndarray

    def as_dict(self):
        out = {f"w{i}": g for i, g in enumerate(self.weights)}
        out.update({f"b{i}": g for i, g in enumerate(self.biases)})
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def glorot_uniform(rng, shape):
    p, q = shape
    limit = np.sqrt(6.0 / (p + q))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


def init_head(rng, spec):
    return Head(glorot_uniform(rng, spec.head_shape), np.zeros(spec.class_count, dtype=DTYPE))


def init_biases(spec):
    return BiasSet([np.zeros(q, dtype=DTYPE) for _, q in spec.feature_shapes])


def param_dict(weights, head, biases):
    """Name -> array view of the live parameters (for in-place optimizer updates)."""
    out = {f"w{i}": w for i, w in enumerate(weights)}
    out.update({f"b{i}": b for i, b in enumerate(biases.layers)})
    out["head_w"] = head.weight
    out["head_b"] = head.bias
    return out


def _check_shapes(weights, head, biases, batch):
    if batch.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {batch.shape}")
    if len(biases.layers) != len(weights):
        raise ShapeError(f"{len(weights)} weight layers but {len(biases.layers)} bias vectors")
    width = batch.shape[1]
    for i, (w, b) in enumerate(zip(weights, biases.layers)):
        if w.ndim != 2 or w.shape[0] != width:
            raise ShapeError(f"layer {i}: weight shape {w.shape} does not accept width {width}")
        if b.shape != (w.shape[1],):
            raise ShapeError(f"layer {i}: bias shape {b.shape}, expected ({w.shape[1]},)")
        width = w.shape[1]
    if head.weight.ndim != 2 or head.weight.shape[0] != width:
        raise ShapeError(f"head shape {head.weight.shape} does not accept width {width}")
    if head.bias.shape != (head.weight.shape[1],):
        raise ShapeError(f"head bias shape {head.bias.shape}, expected ({head.weight.shape[1]},)")


def _forward_cache(weights, head, biases, batch):
    _check_shapes(weights, head, biases, batch)
    acts = [np.asarray(batch, dtype=DTYPE)]
    for w, b in zip(weights, biases.layers):
        pre = acts[-1] @ w + b
        acts.append(np.maximum(pre, 0.0))
    logits = acts[-1] @ head.weight + head.bias
    return acts, logits


def forward(weights, head, biases, batch):
    """Logits of shape ``(N, classes)`` for a batch of shape ``(N, d)``."""
    _, logits = _forward_cache(weights, head, biases, batch)
    return logits


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    n, c = logits.shape
    if n == 0:
        raise ValueError("empty batch")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape}, expected ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return float(loss), dlogits


def backprop(weights, head, biases, batch, labels):
    """Loss and dense gradients for every parameter, ignoring freezing."""
    acts, logits = _forward_cache(weights, head, biases, batch)
    loss, delta = softmax_cross_entropy(logits, labels)
    head_w = acts[-1].T @ delta
    head_b = delta.sum(axis=0)
    delta = delta @ head.weight.T
    gw = [None] * len(weights)
    gb = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        # relu'(0) := 0
        delta = delta * (acts[i + 1] > 0.0)
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ weights[i].T
    return loss, GradientSet(gw, gb, head_w, head_b)


def mask_gradients(grads, trainable):
    """Zero every gradient entry outside ``trainable``.

    ``trainable`` maps parameter names to a boolean array or ``True``; names
    that are absent are fully frozen. ``None`` means everything trains.
    """
    if trainable is None:
        return grads
    for name, g in grads.as_dict().items():
        sel = trainable.get(name, False)
        if sel is True:
            continue
        if sel is False:
            g[...] = 0.0
        else:
            g[~np.asarray(sel, dtype=bool)] = 0.0
    return grads


def loss_and_grads(weights, head, biases, batch, labels, trainable=None):
    """Mean softmax cross-entropy and gradients restricted to ``trainable``.

    Bias gradients are always zero once ``biases.frozen`` is set.
    """
    loss, grads = backprop(weights, head, biases, batch, labels)
    mask_gradients(grads, trainable)
    if biases.frozen:
        for g in grads.biases:
            g[...] = 0.0
    return loss, grads


def adam_step(params, grads, state):
    """One Adam update, in place, touching only coordinates with nonzero gradient.

    Moments are kept per parameter name and advanced lazily, so coordinates
    that never receive a gradient keep zero accumulators and never move.
    """
    if isinstance(grads, GradientSet):
        grads = grads.as_dict()
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        live = g != 0.0
        if not live.any():
            continue
        m, v = state.m[name], state.v[name]
        gl = g[live]
        m[live] = state.beta1 * m[live] + (1.0 - state.beta1) * gl
        v[live] = state.beta2 * v[live] + (1.0 - state.beta2) * gl * gl
        p[live] -= state.lr * (m[live] / bc1) / (np.sqrt(v[live] / bc2) + state.eps)
    return params


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(1e-12, abs(analytic) + abs(numeric))


def central_difference(objective, array, index, step=1e-5):
    """Central difference of ``objective()`` w.r.t. ``array[index]`` (restored afterwards)."""
    saved = array[index]
    array[index] = saved + step
    up = objective()
    array[index] = saved - step
    down = objective()
    array[index] = saved
    return (up - down) / (2.0 * step)


def finite_difference_check(weights, head, biases, batch, labels, sample_coords, step=1e-5):
    """Max relative error between backprop and central differences.

    ``sample_coords`` is a sequence of ``(name, index)`` pairs with names as in
    :func:`param_dict`.
    """
    if len(sample_coords) == 0:
        raise ValueError("sample_coords must be nonempty")
    _, grads = backprop(weights, head, biases, batch, labels)
    analytic = grads.as_dict()
    params = param_dict(weights, head, biases)

    def objective():
        return softmax_cross_entropy(forward(weights, head, biases, batch), labels)[0]

    worst = 0.0
    for name, index in sample_coords:
        numeric = central_difference(objective, params[name], index, step)
        worst = max(worst, relative_error(float(analytic[name][index]), numeric))
    return worst


def sample_coordinates(rng, arrays, count):
    """Draw ``count`` random ``(name, index)`` pairs spread over ``arrays``."""
    names = sorted(arrays)
    sizes = np.array([arrays[n].size for n in names], dtype=float)
    picks = rng.choice(len(names), size=count, p=sizes / sizes.sum())
    coords = []
    for k in picks:
        arr = arrays[names[k]]
        flat = int(rng.integers(arr.size))
        coords.append((names[k], np.unravel_index(flat, arr.shape)))
    return coords
