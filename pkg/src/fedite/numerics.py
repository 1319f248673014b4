"""Dense float64 tensors, a reverse-mode differentiation tape, and Adam.

All values are C-contiguous float64 numpy arrays ("tensors"). Differentiable
operations append nodes to a :class:`Tape` in execution order, which is a
valid topological order, so :func:`backward` replays the tape once in
reverse and accumulates gradients into every named parameter. Parameters
that do not reach the loss keep an exact-zero gradient.

Everything here is pure with respect to its inputs: ops never mutate their
operands and :func:`adam_step` returns fresh arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

Tensor = np.ndarray


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class ConfigurationError(ValueError):
    """Structurally invalid configuration (head counts, widths, pathways)."""


class EmptyBatchError(ValueError):
    """An operation received zero rows."""


class ContractError(ValueError):
    """An autodiff contract was violated (non-scalar loss, reused tape, ...)."""


def as_tensor(values) -> Tensor:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(values, dtype=np.float64)


def rng_from(seed: int, *path: int) -> np.random.Generator:
    """Deterministic generator for ``seed`` at a spawn path.

    Distinct paths yield independent streams, so initialization, shuffling
    and data generation can each consume their own reproducible stream.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(path)))


def derive_seed(seed: int, *path: int) -> int:
    """Stable integer sub-seed for ``seed`` at a spawn path."""
    return int(np.random.SeedSequence(seed, spawn_key=tuple(path)).generate_state(1)[0])


class Node:
    """One value in the computation graph."""

    __slots__ = ("tape", "value", "grad", "param_id", "requires_grad", "_backward")

    def __init__(self, tape: "Tape", value: Tensor, backward=None,
                 requires_grad: bool = False, param_id: str | None = None):
        self.tape = tape
        self.value = value
        self.grad: Tensor | None = None
        self.param_id = param_id
        self.requires_grad = requires_grad
        self._backward: Callable[[Tensor], None] | None = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other: "Node") -> "Node":
        return mul(self, other)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)

    def __neg__(self) -> "Node":
        return scale(self, -1.0)


class Tape:
    """Execution-ordered record of graph nodes, replayed once in reverse.

    A tape is confined to one training step: build the forward pass, call
    :func:`backward`, then discard it.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self._replayed = False

    def param(self, name: str, value) -> Node:
        """Register a tracked, named parameter leaf."""
        if name in self.params:
            raise ContractError(f"parameter {name!r} already on tape")
        node = Node(self, as_tensor(value), requires_grad=True, param_id=name)
        self.params[name] = node
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        """Register an untracked leaf (inputs, frozen parameters)."""
        node = Node(self, as_tensor(value))
        self.nodes.append(node)
        return node

    def record(self, value: Tensor, parents: Sequence[Node], backward) -> Node:
        requires = any(p.requires_grad for p in parents)
        node = Node(self, value, backward if requires else None, requires)
        self.nodes.append(node)
        return node


def _accumulate(node: Node, contribution: Tensor) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        # Copy: the contribution may be a view into another node's gradient.
        node.grad = np.array(contribution, dtype=np.float64)
    else:
        node.grad += contribution


def backward(tape: Tape, loss: Node) -> dict[str, Tensor]:
    """Gradients of the scalar ``loss`` for every parameter on the tape.

    Parameters on no path to the loss get an exact-zero gradient. A tape
    may be replayed only once.
    """
    if loss.tape is not tape:
        raise ContractError("loss node does not belong to this tape")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    if tape._replayed:
        raise ContractError("tape already replayed")
    tape._replayed = True
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.value)
        for node in reversed(tape.nodes):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.value))
        for name, p in tape.params.items()
    }


def _unbroadcast(grad: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcasted gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Node, b: Node) -> Node:
    value = a.value + b.value

    def bw(g: Tensor) -> None:
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(g, b.value.shape))

    return a.tape.record(value, (a, b), bw)


def sub(a: Node, b: Node) -> Node:
    value = a.value - b.value

    def bw(g: Tensor) -> None:
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(-g, b.value.shape))

    return a.tape.record(value, (a, b), bw)


def mul(a: Node, b: Node) -> Node:
    """Elementwise product with numpy broadcasting."""
    value = a.value * b.value

    def bw(g: Tensor) -> None:
        _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

    return a.tape.record(value, (a, b), bw)


def scale(a: Node, factor: float) -> Node:
    value = a.value * factor

    def bw(g: Tensor) -> None:
        _accumulate(a, g * factor)

    return a.tape.record(value, (a,), bw)


def matmul(a: Node, b: Node) -> Node:
    """Stacked matrix product; both operands must be at least 2-d."""
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.value.shape} @ {b.value.shape}")
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.value.shape} @ {b.value.shape}")
    value = a.value @ b.value

    def bw(g: Tensor) -> None:
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape))

    return a.tape.record(value, (a, b), bw)


def relu(a: Node) -> Node:
    value = np.maximum(a.value, 0.0)

    def bw(g: Tensor) -> None:
        _accumulate(a, g * (a.value > 0.0))

    return a.tape.record(value, (a,), bw)


def reshape(a: Node, shape: tuple[int, ...]) -> Node:
    value = a.value.reshape(shape)

    def bw(g: Tensor) -> None:
        _accumulate(a, g.reshape(a.value.shape))

    return a.tape.record(value, (a,), bw)


def swapaxes(a: Node, axis1: int, axis2: int) -> Node:
    value = np.swapaxes(a.value, axis1, axis2)

    def bw(g: Tensor) -> None:
        _accumulate(a, np.swapaxes(g, axis1, axis2))

    return a.tape.record(value, (a,), bw)


def concat(parts: Sequence[Node], axis: int) -> Node:
    if not parts:
        raise EmptyBatchError("concat of zero parts")
    value = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g: Tensor) -> None:
        for part, piece in zip(parts, np.split(g, offsets, axis=axis)):
            _accumulate(part, piece)

    return parts[0].tape.record(value, tuple(parts), bw)


def sum_axis(a: Node, axis: int) -> Node:
    value = a.value.sum(axis=axis)

    def bw(g: Tensor) -> None:
        _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.value.shape))

    return a.tape.record(value, (a,), bw)


def mean_all(a: Node) -> Node:
    if a.value.size == 0:
        raise EmptyBatchError("mean of an empty tensor")
    value = np.asarray(a.value.mean())
    n = a.value.size

    def bw(g: Tensor) -> None:
        _accumulate(a, np.broadcast_to(g / n, a.value.shape))

    return a.tape.record(value, (a,), bw)


def gather_rows(table: Node, indices: np.ndarray) -> Node:
    """Row lookup ``table[indices]``; duplicate indices accumulate gradient."""
    idx = np.asarray(indices)
    value = table.value[idx]

    def bw(g: Tensor) -> None:
        if not table.requires_grad:
            return
        buf = np.zeros_like(table.value)
        np.add.at(buf, idx.reshape(-1), g.reshape(-1, table.value.shape[-1]))
        _accumulate(table, buf)

    return table.tape.record(value, (table,), bw)


def linear_forward(inputs: Node, weight: Node, bias: Node) -> Node:
    """Affine map ``inputs @ weight + bias`` over the last axis."""
    if weight.value.ndim != 2:
        raise ShapeError(f"weight must be 2-d, got {weight.value.shape}")
    p, q = weight.value.shape
    if inputs.value.ndim < 2 or inputs.value.shape[-1] != p:
        raise ShapeError(f"linear input {inputs.value.shape} does not conform to weight {weight.value.shape}")
    if bias.value.shape != (q,):
        raise ShapeError(f"bias {bias.value.shape} does not conform to weight {weight.value.shape}")
    return add(matmul(inputs, weight), bias)


def layer_norm(inputs: Node, gain: Node, shift: Node, eps: float = 1e-5) -> Node:
    """Normalize each last-axis slice to zero mean and unit population variance."""
    d = inputs.value.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over an empty last axis")
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    if gain.value.shape != (d,) or shift.value.shape != (d,):
        raise ShapeError(
            f"gain {gain.value.shape} / shift {shift.value.shape} do not match width {d}")
    mean = inputs.value.mean(axis=-1, keepdims=True)
    var = inputs.value.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = (inputs.value - mean) * inv
    value = normed * gain.value + shift.value

    def bw(g: Tensor) -> None:
        _accumulate(shift, _unbroadcast(g, shift.value.shape))
        _accumulate(gain, _unbroadcast(g * normed, gain.value.shape))
        gx = g * gain.value
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * normed).mean(axis=-1, keepdims=True)
        _accumulate(inputs, inv * (gx - m1 - normed * m2))

    return inputs.tape.record(value, (inputs, gain, shift), bw)


def softmax_rows(scores: Node, mask: np.ndarray | None = None) -> Node:
    """Row-stochastic softmax over the last axis, max-subtracted for stability.

    ``mask`` (broadcastable boolean, true = attend) excludes positions before
    normalization; masked entries come out exactly zero. A fully masked row
    is an error: something must be attended to.
    """
    x = scores.value
    if x.shape[-1] == 0:
        raise ShapeError("softmax over an empty last axis")
    if mask is None:
        e = np.exp(x - x.max(axis=-1, keepdims=True))
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not m.any(axis=-1).all():
            raise ContractError("softmax row is fully masked")
        neg = np.where(m, x, -np.inf)
        e = np.exp(neg - neg.max(axis=-1, keepdims=True))
        e = np.where(m, e, 0.0)
    probs = e / e.sum(axis=-1, keepdims=True)

    def bw(g: Tensor) -> None:
        inner = (g * probs).sum(axis=-1, keepdims=True)
        _accumulate(scores, probs * (g - inner))

    return scores.tape.record(probs, (scores,), bw)


def mse_loss(pred: Node, target: Node) -> Node:
    """Mean squared error between two equal-shape tensors."""
    if pred.value.shape != target.value.shape:
        raise ShapeError(f"mse shapes differ: {pred.value.shape} vs {target.value.shape}")
    if pred.value.size == 0:
        raise EmptyBatchError("mse over an empty batch")
    diff = sub(pred, target)
    return mean_all(mul(diff, diff))


ATTENTION_PARAM_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def multi_head_attention(query: Node, key: Node, value: Node, heads: int,
                         params: Mapping[str, Node],
                         mask: np.ndarray | None = None) -> tuple[Node, Node]:
    """Scaled dot-product attention with ``heads`` parallel heads.

    ``query``/``key``/``value`` are ``[..., n, d]`` stacks sharing leading
    dims; ``params`` maps the names in :data:`ATTENTION_PARAM_NAMES` to the
    four d-by-d projections and their biases. Per head, scores are scaled by
    1/sqrt(d/heads) and softmaxed; head outputs are concatenated and passed
    through the output projection. Returns (output, attention) where the
    attention stack has shape ``[..., heads, n_q, n_k]`` and is kept on the
    tape so it can both carry gradient and be exported for inspection.

    ``mask`` is boolean, true = attend, broadcastable to ``[..., n_q, n_k]``;
    masked positions are excluded before the softmax.
    """
    d = query.value.shape[-1]
    if d % heads != 0:
        raise ConfigurationError(f"width {d} is not divisible by {heads} heads")
    if key.value.shape[-1] != d or value.value.shape[-1] != d:
        raise ShapeError(
            f"query width {d} differs from key/value widths "
            f"{key.value.shape[-1]}/{value.value.shape[-1]}")
    if key.value.shape[:-1] != value.value.shape[:-1]:
        raise ShapeError(f"key {key.value.shape} / value {value.value.shape} row mismatch")
    head_dim = d // heads

    def split_heads(x: Node) -> Node:
        stacked = reshape(x, x.value.shape[:-1] + (heads, head_dim))
        return swapaxes(stacked, -3, -2)  # [..., heads, n, head_dim]

    q = split_heads(linear_forward(query, params["wq"], params["bq"]))
    k = split_heads(linear_forward(key, params["wk"], params["bk"]))
    v = split_heads(linear_forward(value, params["wv"], params["bv"]))

    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(head_dim))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)[..., None, :, :]  # broadcast over heads
    attention = softmax_rows(scores, mask)
    context = matmul(attention, v)  # [..., heads, n_q, head_dim]
    merged = reshape(swapaxes(context, -3, -2), query.value.shape)
    output = linear_forward(merged, params["wo"], params["bo"])
    return output, attention


@dataclass(frozen=True)
class AdamState:
    """Moment estimates and step counter for one parameter set."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, Tensor] = field(default_factory=dict)
    second_moment: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], lr: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
            first_moment={k: np.zeros_like(v) for k, v in params.items()},
            second_moment={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor],
              state: AdamState) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; pure in (params, grads, state)."""
    missing = set(params) - set(grads)
    if missing:
        raise ShapeError(f"gradients missing for parameters {sorted(missing)}")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_params: dict[str, Tensor] = {}
    new_m: dict[str, Tensor] = {}
    new_v: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.first_moment[name].shape != p.shape:
            raise ShapeError(
                f"shape mismatch for {name!r}: param {p.shape}, grad {g.shape}, "
                f"moment {state.first_moment[name].shape}")
        m = state.beta1 * state.first_moment[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.second_moment[name] + (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = p - update
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, step=t, first_moment=new_m, second_moment=new_v)
