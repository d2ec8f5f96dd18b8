"""Reverse-mode autodiff over dense float64 matrices.

Everything is a 2-D float64 array. A Tape records operations as they run
(define-by-run); calling ``Tape.backward`` on a 1x1 loss node fills every
node's ``grad`` with the derivative of the loss w.r.t. that node's value.
``constant`` leaves are stop-gradients: their derivative is defined as zero
and nothing is propagated into them (this is also what implements the
tolerance-masking branches, which must not carry gradient). ``input`` and
``param`` leaves receive true gradients. The operation set is exactly what
the pooling/model code needs: elementwise arithmetic with restricted
broadcasting, matmul, a few activations, row reductions, and segment
reductions over presorted contiguous runs.
"""

from __future__ import annotations

import numpy as np

# Parameter group tags. Exponent preimages get their own learning rate.
P_EXPONENTS = "p_exponents"
OTHER = "other"


class ShapeError(ValueError):
    """Operand shapes violate an operation's arity or broadcast rules."""


class NumericalDomainError(ValueError):
    """An input left an operation's numerical domain (e.g. log of x <= 0)."""


def as_matrix(x) -> np.ndarray:
    """Coerce scalars / lists / arrays to a C-contiguous 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {a.shape}")
    return np.ascontiguousarray(a)


class Param:
    """A persistent learnable matrix, re-attached to a fresh tape each pass."""

    __slots__ = ("value", "group", "name")

    def __init__(self, value, group: str = OTHER, name: str = ""):
        self.value = as_matrix(value)
        self.group = group
        self.name = name

    def __repr__(self):
        return f"Param({self.name or '?'}, shape={self.value.shape}, group={self.group})"


class Node:
    """One tape entry: an op tag, parent indices, a value, and its gradient."""

    __slots__ = ("tape", "idx", "op", "parents", "value", "grad", "stop", "_bwd", "_gown")

    def __init__(self, tape, idx, op, parents, value, bwd, stop=False):
        self.tape = tape
        self.idx = idx
        self.op = op
        self.parents = parents
        self.value = value
        self.grad = None
        self.stop = stop
        self._bwd = bwd
        self._gown = False

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other):
        return other if isinstance(other, Node) else self.tape.constant(other)

    def __add__(self, other):
        return self.tape.add(self, self._lift(other))

    def __radd__(self, other):
        return self.tape.add(self._lift(other), self)

    def __sub__(self, other):
        return self.tape.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.sub(self._lift(other), self)

    def __mul__(self, other):
        return self.tape.mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.tape.mul(self._lift(other), self)

    def __truediv__(self, other):
        return self.tape.div(self, self._lift(other))

    def __rtruediv__(self, other):
        return self.tape.div(self._lift(other), self)

    def __neg__(self):
        return self.tape.neg(self)

    def __matmul__(self, other):
        return self.tape.matmul(self, self._lift(other))


def _broadcast_ok(sa, sb):
    """Restricted broadcast: equal shapes, (n,d) with (1,d) or (n,1), or 1x1."""
    if sa == sb:
        return True
    if sa == (1, 1) or sb == (1, 1):
        return True
    if sa[0] == sb[0] and (sa[1] == 1 or sb[1] == 1):
        return True
    if sa[1] == sb[1] and (sa[0] == 1 or sb[0] == 1):
        return True
    return False


def _sigmoid(x):
    t = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))


def _push(node, contribution, own):
    """Accumulate a gradient contribution into ``node``.

    ``own=True`` promises the array is freshly allocated and may be adopted
    and mutated; otherwise it may alias another node's gradient or value, so
    a second contribution reallocates instead of adding in place
    (copy-on-write). Aliased buffers are never mutated afterwards because a
    node only receives contributions before its own backward step runs.
    """
    if node.stop:
        return
    if node.grad is None:
        node.grad = contribution
        node._gown = own
    elif node._gown:
        node.grad += contribution
    else:
        node.grad = node.grad + contribution
        node._gown = True


def _push_reduced(node, g):
    """Accumulate g summed down to node's (possibly broadcast) shape."""
    if node.stop:
        return
    shape = node.value.shape
    if g.shape == shape:
        _push(node, g, own=False)
    elif shape == (1, 1):
        _push(node, g.sum().reshape(1, 1), own=True)
    elif shape[0] == 1:
        _push(node, g.sum(axis=0, keepdims=True), own=True)
    else:
        _push(node, g.sum(axis=1, keepdims=True), own=True)


class Tape:
    """Topologically ordered operation record for one forward pass.

    Not thread-safe while being built; values are immutable once recorded.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: list[tuple[Node, Param]] = []
        self._watched: set[int] = set()

    # -- leaves ---------------------------------------------------------

    def _append(self, op, parents, value, bwd, stop=False) -> Node:
        node = Node(self, len(self.nodes), op, parents, value, bwd, stop)
        self.nodes.append(node)
        return node

    def constant(self, x) -> Node:
        """Stop-gradient leaf; backward never writes into it."""
        return self._append("const", (), as_matrix(x), None, stop=True)

    def input(self, x) -> Node:
        """Differentiable leaf (receives a true gradient)."""
        return self._append("input", (), as_matrix(x), None)

    def watch(self, param: Param) -> Node:
        """Attach a Param's current value as a differentiable leaf."""
        if id(param) in self._watched:
            raise ValueError(f"parameter {param.name!r} watched twice on one tape")
        self._watched.add(id(param))
        node = self._append("param", (), param.value, None)
        self.params.append((node, param))
        return node

    # -- elementwise binary ops ------------------------------------------

    def _check_binary(self, op, a, b):
        if not _broadcast_ok(a.shape, b.shape):
            raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")

    def add(self, a: Node, b: Node) -> Node:
        self._check_binary("add", a, b)

        def bwd(g, out):
            _push_reduced(a, g)
            _push_reduced(b, g)

        return self._append("add", (a, b), a.value + b.value, bwd)

    def sub(self, a: Node, b: Node) -> Node:
        self._check_binary("sub", a, b)

        def bwd(g, out):
            _push_reduced(a, g)
            if not b.stop:
                _push_reduced(b, -g)

        return self._append("sub", (a, b), a.value - b.value, bwd)

    def mul(self, a: Node, b: Node) -> Node:
        self._check_binary("mul", a, b)

        def bwd(g, out):
            if not a.stop:
                _push_reduced(a, g * b.value)
            if not b.stop:
                _push_reduced(b, g * a.value)

        return self._append("mul", (a, b), a.value * b.value, bwd)

    def div(self, a: Node, b: Node) -> Node:
        self._check_binary("div", a, b)

        def bwd(g, out):
            if not a.stop:
                _push_reduced(a, g / b.value)
            if not b.stop:
                _push_reduced(b, -g * out.value / b.value)

        return self._append("div", (a, b), a.value / b.value, bwd)

    def neg(self, a: Node) -> Node:
        def bwd(g, out):
            _push(a, -g, own=True)

        return self._append("neg", (a,), -a.value, bwd)

    def matmul(self, a: Node, b: Node) -> Node:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape}")

        def bwd(g, out):
            if not a.stop:
                _push(a, g @ b.value.T, own=True)
            if not b.stop:
                _push(b, a.value.T @ g, own=True)

        return self._append("matmul", (a, b), a.value @ b.value, bwd)

    # -- elementwise unary ops --------------------------------------------

    def relu(self, a: Node) -> Node:
        def bwd(g, out):
            _push(a, g * (a.value > 0.0), own=True)

        return self._append("relu", (a,), np.maximum(a.value, 0.0), bwd)

    def abs(self, a: Node) -> Node:
        def bwd(g, out):
            _push(a, g * np.sign(a.value), own=True)

        return self._append("abs", (a,), np.abs(a.value), bwd)

    def exp(self, a: Node) -> Node:
        def bwd(g, out):
            _push(a, g * out.value, own=True)

        return self._append("exp", (a,), np.exp(a.value), bwd)

    def log(self, a: Node, checked: bool = True) -> Node:
        """Natural log; ``checked=False`` skips the domain scan when the
        caller can prove positivity (e.g. sums of exponentials >= 1)."""
        if checked and np.any(a.value <= 0.0):
            raise NumericalDomainError(
                f"log: non-positive input (min {a.value.min()!r})"
            )

        def bwd(g, out):
            _push(a, g / a.value, own=True)

        return self._append("log", (a,), np.log(a.value), bwd)

    def softplus(self, a: Node) -> Node:
        def bwd(g, out):
            _push(a, g * _sigmoid(a.value), own=True)

        return self._append("softplus", (a,), np.logaddexp(0.0, a.value), bwd)

    def leaky_relu(self, a: Node, slope: float = 0.01) -> Node:
        def bwd(g, out):
            _push(a, g * np.where(a.value > 0.0, 1.0, slope), own=True)

        value = np.where(a.value > 0.0, a.value, slope * a.value)
        return self._append("leaky_relu", (a,), value, bwd)

    def elu(self, a: Node, alpha: float = 1.0) -> Node:
        value = np.where(a.value > 0.0, a.value, alpha * np.expm1(a.value))

        def bwd(g, out):
            _push(a, g * np.where(a.value > 0.0, 1.0, out.value + alpha), own=True)

        return self._append("elu", (a,), value, bwd)

    def clamp(self, a: Node, lo: float, hi: float) -> Node:
        def bwd(g, out):
            inside = (a.value >= lo) & (a.value <= hi)
            _push(a, g * inside, own=True)

        return self._append("clamp", (a,), np.clip(a.value, lo, hi), bwd)

    # -- reductions over rows ---------------------------------------------

    def sum_rows(self, a: Node) -> Node:
        def bwd(g, out):
            _push(a, np.broadcast_to(g, a.shape), own=False)

        # reduceat, not .sum: keeps single-segment segment_sum bit-identical
        value = np.add.reduceat(a.value, np.array([0]), axis=0)
        return self._append("sum_rows", (a,), value, bwd)

    def sum_cols(self, a: Node) -> Node:
        def bwd(g, out):
            _push(a, np.broadcast_to(g, a.shape), own=False)

        return self._append("sum_cols", (a,), a.value.sum(axis=1, keepdims=True), bwd)

    def mean_rows(self, a: Node) -> Node:
        n = a.shape[0]

        def bwd(g, out):
            _push(a, np.broadcast_to(g / n, a.shape), own=False)

        return self._append("mean_rows", (a,), a.value.mean(axis=0, keepdims=True), bwd)

    def max_rows(self, a: Node) -> Node:
        return self.segment_max(a, np.array([0, a.shape[0]]), op="max_rows")

    def min_rows(self, a: Node) -> Node:
        return self.segment_min(a, np.array([0, a.shape[0]]), op="min_rows")

    # -- segment reductions -------------------------------------------------
    # Rows must be presorted so segment s occupies rows [starts[s], starts[s+1]);
    # every segment must be nonempty.

    def segment_sum(self, a: Node, starts) -> Node:
        starts = np.asarray(starts, dtype=np.intp)
        counts = np.diff(starts)
        if np.any(counts <= 0):
            raise ShapeError("segment_sum: empty segment")
        value = np.add.reduceat(a.value, starts[:-1], axis=0)

        def bwd(g, out):
            _push(a, np.repeat(g, counts, axis=0), own=True)

        return self._append("segment_sum", (a,), value, bwd)

    def _segment_extreme(self, a, starts, ufunc, op):
        starts = np.asarray(starts, dtype=np.intp)
        counts = np.diff(starts)
        if np.any(counts <= 0):
            raise ShapeError(f"{op}: empty segment")
        value = ufunc.reduceat(a.value, starts[:-1], axis=0)
        n, d = a.shape

        def bwd(g, out):
            # Route gradient to the first row attaining the extreme, per
            # (segment, column). Within a column the chosen rows are distinct
            # across segments, so plain fancy-index += is collision-free.
            hit = a.value == np.repeat(value, counts, axis=0)
            rows = np.where(hit, np.arange(n)[:, None], n)
            first = np.minimum.reduceat(rows, starts[:-1], axis=0)
            ga = np.zeros_like(a.value)
            ga[first, np.arange(d)[None, :]] += g
            _push(a, ga, own=True)

        return self._append(op, (a,), value, bwd)

    def segment_max(self, a: Node, starts, op="segment_max") -> Node:
        return self._segment_extreme(a, starts, np.maximum, op)

    def segment_min(self, a: Node, starts, op="segment_min") -> Node:
        return self._segment_extreme(a, starts, np.minimum, op)

    # -- structural ops -----------------------------------------------------

    def gather_rows(self, a: Node, idx, scatter=None) -> Node:
        """Select rows ``a[idx]``.

        ``scatter`` optionally provides ``(perm, starts)`` where ``idx[perm]``
        is sorted ascending and covers every row of ``a`` in contiguous runs
        bounded by ``starts``; backward then uses a reduceat instead of the
        (much slower) fancy-index accumulate.
        """
        idx = np.asarray(idx, dtype=np.intp)

        def bwd(g, out):
            if a.stop:
                return
            if scatter is not None:
                perm, starts = scatter
                gs = g if perm is None else g[perm]
                _push(a, np.add.reduceat(gs, starts[:-1], axis=0), own=True)
            else:
                ga = np.zeros_like(a.value)
                np.add.at(ga, idx, g)
                _push(a, ga, own=True)

        return self._append("gather_rows", (a,), a.value[idx], bwd)

    def scalar_broadcast(self, a: Node, rows: int, cols: int) -> Node:
        if a.shape != (1, 1):
            raise ShapeError(f"scalar_broadcast: expected 1x1, got {a.shape}")

        def bwd(g, out):
            _push(a, g.sum().reshape(1, 1), own=True)

        value = np.full((rows, cols), a.value[0, 0])
        return self._append("scalar_broadcast", (a,), value, bwd)

    def concat_cols(self, *parts: Node) -> Node:
        rows = parts[0].shape[0]
        if any(p.shape[0] != rows for p in parts):
            raise ShapeError("concat_cols: row counts differ")
        bounds = np.cumsum([0] + [p.shape[1] for p in parts])

        def bwd(g, out):
            for p, j0, j1 in zip(parts, bounds[:-1], bounds[1:]):
                _push(p, g[:, j0:j1], own=False)

        value = np.concatenate([p.value for p in parts], axis=1)
        return self._append("concat_cols", parts, value, bwd)

    def slice_cols(self, a: Node, j0: int, j1: int) -> Node:
        if not (0 <= j0 < j1 <= a.shape[1]):
            raise ShapeError(f"slice_cols: [{j0}:{j1}] out of {a.shape}")

        def bwd(g, out):
            ga = np.zeros_like(a.value)
            ga[:, j0:j1] = g
            _push(a, ga, own=True)

        return self._append("slice_cols", (a,), a.value[:, j0:j1].copy(), bwd)

    # -- driver ---------------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Fill every node's grad with d(loss)/d(value); stop-gradient
        leaves (constants) keep the zero that defines them."""
        if loss.shape != (1, 1):
            raise ShapeError(f"backward: loss must be 1x1, got {loss.shape}")
        for node in self.nodes:
            node.grad = None
            node._gown = False
        loss.grad = np.ones((1, 1))
        loss._gown = True
        for node in reversed(self.nodes):
            if node.grad is not None and node._bwd is not None:
                node._bwd(node.grad, node)
        zero = np.zeros((1, 1))
        for node in self.nodes:
            if node.grad is None:
                # allocation-free exact zeros (read-only broadcast view)
                node.grad = np.broadcast_to(zero, node.value.shape)

    def grad(self, param: Param) -> np.ndarray:
        """Gradient of the last backward pass w.r.t. a watched Param."""
        for node, p in self.params:
            if p is param:
                return node.grad
        raise KeyError(f"parameter {param.name!r} not watched on this tape")


# Spec-facing dispatcher; aux carries op-specific non-differentiable data.
_TAGS = {
    "add": Tape.add,
    "sub": Tape.sub,
    "mul": Tape.mul,
    "div": Tape.div,
    "neg": Tape.neg,
    "matmul": Tape.matmul,
    "relu": Tape.relu,
    "abs": Tape.abs,
    "exp": Tape.exp,
    "log": Tape.log,
    "softplus": Tape.softplus,
    "leaky_relu": Tape.leaky_relu,
    "elu": Tape.elu,
    "clamp": Tape.clamp,
    "sum_rows": Tape.sum_rows,
    "sum_cols": Tape.sum_cols,
    "mean_rows": Tape.mean_rows,
    "max_rows": Tape.max_rows,
    "min_rows": Tape.min_rows,
    "segment_sum": Tape.segment_sum,
    "segment_max": Tape.segment_max,
    "segment_min": Tape.segment_min,
    "scalar_broadcast": Tape.scalar_broadcast,
    "concat_cols": Tape.concat_cols,
    "slice_cols": Tape.slice_cols,
    "gather_rows": Tape.gather_rows,
}


def op_forward(tape: Tape, tag: str, inputs, **aux) -> Node:
    """Apply one named operation to input nodes, appending the result."""
    try:
        fn = _TAGS[tag]
    except KeyError:
        raise ShapeError(f"unknown operation tag {tag!r}") from None
    return fn(tape, *inputs, **aux)


def grad_check(builder, inputs, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``builder(tape, nodes) -> loss`` must construct a 1x1 loss from input
    nodes; inputs should sit at least ~10*step away from relu/abs/clamp kinks.
    """
    mats = [as_matrix(m) for m in inputs]
    tape = Tape()
    nodes = [tape.input(m) for m in mats]
    loss = builder(tape, nodes)
    tape.backward(loss)
    analytic = [n.grad.copy() for n in nodes]

    def eval_loss(replacements):
        t = Tape()
        ns = [t.input(m) for m in replacements]
        return builder(t, ns).value[0, 0]

    worst = 0.0
    for k, m in enumerate(mats):
        for i in range(m.shape[0]):
            for j in range(m.shape[1]):
                bumped = [x.copy() for x in mats]
                bumped[k][i, j] = m[i, j] + step
                hi = eval_loss(bumped)
                bumped[k][i, j] = m[i, j] - step
                lo = eval_loss(bumped)
                central = (hi - lo) / (2.0 * step)
                err = abs(analytic[k][i, j] - central) / (abs(central) + 1e-8)
                worst = max(worst, err)
    return worst
