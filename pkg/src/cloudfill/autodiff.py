"""Minimal reverse-mode autodiff over dense numpy tensors.

Graphs are define-by-run: every forward call builds fresh nodes and the
graph is discarded after backward. Values keep the dtype they were created
with (float32 for network weights, float64 in numerical checks).
"""

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


def _as_array(x, dtype=None):
    arr = np.asarray(x)
    if dtype is not None:
        return arr.astype(dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        return arr.astype(np.float32)
    return arr


class Node:
    """One value in the computation graph, with an accumulating gradient."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = _as_array(value)
        self.grad = np.zeros_like(self.value)
        self._parents = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, dtype={self.value.dtype})"


def constant(x, dtype=None):
    """Leaf node; gradient is tracked but typically ignored."""
    return Node(_as_array(x, dtype))


# leaves and constants are the same thing; parameters just keep the reference
leaf = constant


def _affine(x, w, b, opname):
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 2 or wv.ndim != 2 or bv.ndim != 1:
        raise ShapeError(
            f"{opname}: expected 2-d input/weight and 1-d bias, got "
            f"{xv.shape}, {wv.shape}, {bv.shape}"
        )
    if xv.shape[1] != wv.shape[0] or wv.shape[1] != bv.shape[0]:
        raise ShapeError(
            f"{opname}: input {xv.shape} incompatible with weight {wv.shape} "
            f"and bias {bv.shape}"
        )

    def vjp(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return Node(xv @ wv + bv, (x, w, b), vjp)


def linear(x: Node, w: Node, b: Node) -> Node:
    """Dense layer on a B x I batch: out[b,o] = sum_i x[b,i] w[i,o] + bias[o]."""
    return _affine(x, w, b, "linear")


def pointwise_linear(x: Node, w: Node, b: Node) -> Node:
    """Shared linear map applied independently to each of N points (1x1 conv)."""
    return _affine(x, w, b, "pointwise_linear")


def relu(x: Node) -> Node:
    mask = x.value > 0  # subgradient at exactly 0 is 0
    return Node(np.where(mask, x.value, 0), (x,), lambda g: (g * mask,))


def sigmoid(x: Node) -> Node:
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return Node(out, (x,), lambda g: (g * out * (1.0 - out),))


def max_pool_points(x: Node) -> Node:
    """Channel-wise max over the point axis of an N x C input."""
    v = x.value
    if v.ndim != 2 or v.shape[0] < 1:
        raise ShapeError(f"max_pool_points: need nonempty N x C input, got {v.shape}")
    winners = np.argmax(v, axis=0)  # ties: lowest index

    def vjp(g):
        gx = np.zeros_like(v)
        gx[winners, np.arange(v.shape[1])] = g
        return (gx,)

    return Node(v.max(axis=0), (x,), vjp)


def segment_max_pool(x: Node, n_points: int) -> Node:
    """max_pool_points over B stacked clouds: (B*N) x C -> B x C."""
    v = x.value
    if v.ndim != 2 or n_points < 1 or v.shape[0] % n_points != 0:
        raise ShapeError(
            f"segment_max_pool: rows {v.shape} not divisible into chunks of {n_points}"
        )
    b = v.shape[0] // n_points
    v3 = v.reshape(b, n_points, -1)
    winners = np.argmax(v3, axis=1)  # B x C, ties: lowest index

    def vjp(g):
        gx = np.zeros_like(v3)
        gx[np.arange(b)[:, None], winners, np.arange(v.shape[1])[None, :]] = g
        return (gx.reshape(v.shape),)

    return Node(v3.max(axis=1), (x,), vjp)


def l2_distance_sq(a: Node, b: Node) -> Node:
    """Squared euclidean distance between two same-shape tensors, as a scalar."""
    if a.value.shape != b.value.shape:
        raise ShapeError(
            f"l2_distance_sq: shapes {a.value.shape} and {b.value.shape} differ"
        )
    diff = a.value - b.value
    return Node((diff * diff).sum(), (a, b), lambda g: (2.0 * g * diff, -2.0 * g * diff))


def l2_norm_rows(x: Node) -> Node:
    """Euclidean norm of each row of a B x D input; subgradient 0 at zero rows."""
    v = x.value
    if v.ndim != 2:
        raise ShapeError(f"l2_norm_rows: need 2-d input, got {v.shape}")
    norms = np.sqrt((v * v).sum(axis=1))

    def vjp(g):
        safe = np.where(norms > 0, norms, 1.0)
        return ((g / safe)[:, None] * v * (norms > 0)[:, None],)

    return Node(norms, (x,), vjp)


def matched_l2_sum(pred: Node, target: np.ndarray) -> Node:
    """Sum of euclidean distances between pred rows and fixed matched targets.

    Target rows must already be permuted into correspondence with pred rows;
    the gradient on a pred row is the unit vector away from its target
    (zero when they coincide).
    """
    t = np.asarray(target, dtype=pred.value.dtype)
    if pred.value.shape != t.shape or pred.value.ndim != 2:
        raise ShapeError(
            f"matched_l2_sum: pred {pred.value.shape} vs target {t.shape}"
        )
    diff = pred.value - t
    norms = np.sqrt((diff * diff).sum(axis=1))

    def vjp(g):
        safe = np.where(norms > 0, norms, 1.0)
        return (g * diff / safe[:, None] * (norms > 0)[:, None],)

    return Node(norms.sum(), (pred,), vjp)


def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes {a.value.shape} and {b.value.shape} differ")
    return Node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"sub: shapes {a.value.shape} and {b.value.shape} differ")
    return Node(a.value - b.value, (a, b), lambda g: (g, -g))


def neg(a: Node) -> Node:
    return Node(-a.value, (a,), lambda g: (-g,))


def scale(a: Node, c: float) -> Node:
    return Node(a.value * c, (a,), lambda g: (g * c,))


def sum_all(a: Node) -> Node:
    return Node(a.value.sum(), (a,), lambda g: (np.full_like(a.value, 1) * g,))


def mean_all(a: Node) -> Node:
    n = a.value.size
    return Node(a.value.mean(), (a,), lambda g: (np.full_like(a.value, 1.0 / n) * g,))


def reshape(a: Node, shape) -> Node:
    return Node(
        a.value.reshape(shape), (a,), lambda g: (g.reshape(a.value.shape),)
    )


def _topo_order(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into every reachable node's gradient.

    Repeated calls keep adding; callers reset gradients themselves when
    they want fresh values. root must be a scalar.
    """
    if root.value.shape != ():
        raise ShapeError(f"backward: root must be scalar, got shape {root.value.shape}")
    order = _topo_order(root)
    flow = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = flow.get(id(node))
        if g is None:
            continue
        node.grad += g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            pid = id(parent)
            if pid in flow:
                flow[pid] = flow[pid] + pg
            else:
                flow[pid] = pg


@dataclass
class AdamState:
    """Per-parameter optimizer state for the ADAM update rule."""

    learning_rate: float
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_shape(cls, shape, learning_rate, dtype=np.float32, **kw):
        return cls(
            learning_rate=learning_rate,
            first_moment=np.zeros(shape, dtype=dtype),
            second_moment=np.zeros(shape, dtype=dtype),
            **kw,
        )


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected ADAM update; mutates state, returns the new parameter."""
    if param.shape != grad.shape or param.shape != state.first_moment.shape:
        raise ShapeError(
            f"adam_step: param {param.shape}, grad {grad.shape}, "
            f"state {state.first_moment.shape} disagree"
        )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.first_moment = b1 * state.first_moment + (1.0 - b1) * grad
    state.second_moment = b2 * state.second_moment + (1.0 - b2) * grad * grad
    m_hat = state.first_moment / (1.0 - b1 ** state.step)
    v_hat = state.second_moment / (1.0 - b2 ** state.step)
    out = param - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return out.astype(param.dtype, copy=False)
