"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

The graph is built eagerly (define-by-run): each operation computes its
forward value immediately and records vector-Jacobian rules that pull the
incoming gradient back to its operands.  A graph lives for one minibatch;
`Parameter` leaves persist across graphs and are updated by `Adam`.

Everything is a 2-D row-major float64 array.  Batches are rows.  There is
no broadcasting in the binary elementwise ops; explicit `broadcast_rows` /
`broadcast_cols` ops cover the bias-add and pairwise-distance patterns.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(ValueError):
    """A graph-level contract was violated (non-scalar loss, bad permutation)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the computation needs finite ones."""


def as_matrix(value) -> np.ndarray:
    """Coerce to a 2-D C-order float64 array.

    Scalars become 1x1, 1-D arrays become a single row.
    """
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


class Node:
    """One vertex of the computation graph.

    `value` is fixed at construction.  `grad` is lazily allocated by
    `backward`; for non-leaf nodes it is cleared at the start of every
    backward pass so that a graph can be differentiated more than once
    (the training loop backpropagates two losses through one forward pass).
    """

    __slots__ = ("value", "grad", "parents")

    def __init__(self, value, parents=()):
        self.value = as_matrix(value)
        self.grad = None
        self.parents = parents

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        kind = "Parameter" if isinstance(self, Parameter) else "Node"
        return f"{kind}(shape={self.value.shape})"

    # operator sugar; the named functions below do the work
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return negate(self)


class Parameter(Node):
    """A trainable leaf.  Persists across per-batch graphs."""

    def __init__(self, value):
        super().__init__(value)


def constant(value) -> Node:
    """A non-trainable leaf (inputs, noise draws, masks)."""
    return Node(value)


def _binary_shapes(name, a, b):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{name}: operand shapes {a.value.shape} and {b.value.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and matrix ops
# ---------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dimensions of {av.shape} and {bv.shape} do not match")
    return Node(av @ bv, parents=(
        (a, lambda g: g @ bv.T),
        (b, lambda g: av.T @ g),
    ))


def affine(x: Node, w: Node, b: Node) -> Node:
    """x @ w + b with b a single row broadcast across the batch."""
    xv, wv, bv = x.value, w.value, b.value
    if xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"affine: inner dimensions of {xv.shape} and {wv.shape} do not match")
    if bv.shape != (1, wv.shape[1]):
        raise ShapeError(f"affine: bias shape {bv.shape} does not match output width {wv.shape[1]}")
    return Node(xv @ wv + bv, parents=(
        (x, lambda g: g @ wv.T),
        (w, lambda g: xv.T @ g),
        (b, lambda g: g.sum(axis=0, keepdims=True)),
    ))


def transpose(a: Node) -> Node:
    return Node(a.value.T, parents=((a, lambda g: g.T),))


def add(a: Node, b: Node) -> Node:
    _binary_shapes("add", a, b)
    return Node(a.value + b.value, parents=((a, lambda g: g), (b, lambda g: g)))


def sub(a: Node, b: Node) -> Node:
    _binary_shapes("sub", a, b)
    return Node(a.value - b.value, parents=((a, lambda g: g), (b, lambda g: -g)))


def mul(a: Node, b: Node) -> Node:
    _binary_shapes("mul", a, b)
    av, bv = a.value, b.value
    return Node(av * bv, parents=((a, lambda g: g * bv), (b, lambda g: g * av)))


def negate(a: Node) -> Node:
    return Node(-a.value, parents=((a, lambda g: -g),))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.value * c, parents=((a, lambda g: g * c),))


def add_scalar(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.value + c, parents=((a, lambda g: g),))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node(out, parents=((a, lambda g: g * out),))


def log(a: Node) -> Node:
    av = a.value
    if np.any(av <= 0.0):
        raise ValueError(f"log: non-positive input (min={av.min()!r})")
    return Node(np.log(av), parents=((a, lambda g: g / av),))


def square(a: Node) -> Node:
    av = a.value
    return Node(av * av, parents=((a, lambda g: 2.0 * av * g),))


def sigmoid(a: Node) -> Node:
    av = a.value
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ez = np.exp(av[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Node(out, parents=((a, lambda g: g * out * (1.0 - out)),))


def relu(a: Node) -> Node:
    av = a.value
    mask = av > 0
    return Node(np.where(mask, av, 0.0), parents=((a, lambda g: g * mask),))


def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    av = a.value
    factor = np.where(av > 0, 1.0, slope)
    return Node(av * factor, parents=((a, lambda g: g * factor),))


def clip(a: Node, lo: float, hi: float) -> Node:
    av = a.value
    inside = (av > lo) & (av < hi)
    return Node(np.clip(av, lo, hi), parents=((a, lambda g: g * inside),))


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def concat_cols(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.shape[0] != bv.shape[0]:
        raise ShapeError(f"concat_cols: row counts {av.shape[0]} and {bv.shape[0]} differ")
    k = av.shape[1]
    return Node(np.concatenate([av, bv], axis=1), parents=(
        (a, lambda g: g[:, :k]),
        (b, lambda g: g[:, k:]),
    ))


def slice_cols(a: Node, start: int, stop: int) -> Node:
    av = a.value
    if not (0 <= start < stop <= av.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for shape {av.shape}")

    def pull(g):
        out = np.zeros_like(av)
        out[:, start:stop] = g
        return out

    return Node(av[:, start:stop].copy(), parents=((a, pull),))


def permute_rows(a: Node, permutation) -> Node:
    perm = np.asarray(permutation, dtype=np.intp)
    n = a.value.shape[0]
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise GraphError(f"permute_rows: not a bijection on 0..{n - 1}")

    def pull(g):
        out = np.empty_like(a.value)
        out[perm] = g
        return out

    return Node(a.value[perm], parents=((a, pull),))


def broadcast_rows(a: Node, n: int) -> Node:
    """Tile a 1xd row vector to n rows; gradient sums back over rows."""
    av = a.value
    if av.shape[0] != 1:
        raise ShapeError(f"broadcast_rows: expected a single row, got {av.shape}")
    return Node(np.repeat(av, n, axis=0),
                parents=((a, lambda g: g.sum(axis=0, keepdims=True)),))


def broadcast_cols(a: Node, m: int) -> Node:
    """Tile an nx1 column vector to m columns; gradient sums back over columns."""
    av = a.value
    if av.shape[1] != 1:
        raise ShapeError(f"broadcast_cols: expected a single column, got {av.shape}")
    return Node(np.repeat(av, m, axis=1),
                parents=((a, lambda g: g.sum(axis=1, keepdims=True)),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(a: Node) -> Node:
    av = a.value
    return Node([[av.sum()]], parents=((a, lambda g: np.full_like(av, g[0, 0])),))


def mean_all(a: Node) -> Node:
    av = a.value
    inv = 1.0 / av.size
    return Node([[av.mean()]], parents=((a, lambda g: np.full_like(av, g[0, 0] * inv)),))


def sum_rows(a: Node) -> Node:
    av = a.value
    return Node(av.sum(axis=1, keepdims=True),
                parents=((a, lambda g: np.broadcast_to(g, av.shape)),))


def logsumexp_all(a: Node) -> Node:
    """log sum exp over every element, computed as m + log sum exp(v - m)."""
    av = a.value
    m = av.max()
    shifted = np.exp(av - m)
    total = shifted.sum()
    softmax = shifted / total
    return Node([[m + np.log(total)]], parents=((a, lambda g: g[0, 0] * softmax),))


def logsumexp_rows(a: Node) -> Node:
    av = a.value
    m = av.max(axis=1, keepdims=True)
    shifted = np.exp(av - m)
    total = shifted.sum(axis=1, keepdims=True)
    softmax = shifted / total
    return Node(m + np.log(total), parents=((a, lambda g: g * softmax),))


def logmeanexp_all(a: Node) -> Node:
    return add_scalar(logsumexp_all(a), -np.log(a.value.size))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Node):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Populate `grad` on every node reachable from `loss`.

    Interior-node gradients are reset first, so one graph can back two
    different losses; leaf (`Parameter`/`constant`) gradients accumulate
    until explicitly zeroed by the optimizer.
    """
    if loss.value.shape != (1, 1):
        raise GraphError(f"backward: loss must be 1x1, got {loss.value.shape}")
    order = _topological_order(loss)
    for node in order:
        if node.parents:
            node.grad = None
    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, pull in node.parents:
            contribution = pull(g)
            if parent.grad is None:
                # bind without copying; accumulation below never mutates,
                # so aliasing a child's grad array is safe
                parent.grad = contribution
            else:
                parent.grad = parent.grad + contribution


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a fixed list of `Parameter`s.

    Parameter values are replaced (not mutated) on each step, so graph
    closures that captured the previous arrays keep seeing them.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self._scratch = [np.empty_like(p.value) for p in self.params]

    def zero_grad(self):
        zero_grad(self.params)

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.value)
            elif g.shape != p.value.shape:
                raise ShapeError(f"adam: gradient shape {g.shape} != parameter shape {p.value.shape}")
            m, v = self.m[i], self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v / bc2)
            denom += self.eps
            # replace rather than mutate: live graphs hold the old array
            p.value = p.value - (self.lr / bc1) * m / denom
