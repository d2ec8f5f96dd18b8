"""Learnable norm-based pooling and the four baseline pooling functions.

The learnable operator maps a set of non-negative feature rows to one row
per segment: column j of the positive half computes

    n^(-q+) * (sum_i (v_ij + eps)^(p+))^(1/p+)

and the negative half the mirrored negative-exponent form, both evaluated
through max-shifted log-sum-exp so nothing overflows for exponents up to 50.
Exponents are reparameterized as p = clamp(1 + softplus(t), 1, p_max), the
two halves see complementary column slices, and a learned linear layer mixes
the concatenated result. Near-zero inputs in the negative half are replaced
by 1/eps behind a stop-gradient mask; an all-masked column outputs exactly 0.

Everything pools over contiguous row segments so a disjoint union of graphs
(or a batch of sets) is processed in one call.
"""

from __future__ import annotations

import numpy as np

from .autodiff import OTHER, P_EXPONENTS, Node, Param, ShapeError, Tape

SUM = "sum"
MAX = "max"
MEAN = "mean"
MIN = "min"
GNP = "gnp"
BASELINES = (SUM, MAX, MEAN, MIN)
POOL_KINDS = BASELINES + (GNP,)

FULL = "full"
PLUS_ONLY = "plus_only"
MINUS_ONLY = "minus_only"
BOTH = "both"
MODES = (FULL, PLUS_ONLY, MINUS_ONLY, BOTH)

DEFAULT_EPSILON = 1e-4
P_MAX = 50.0
_P_INIT = 2.0
_Q_INIT = 0.0


def softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


class Segments:
    """Contiguous row runs: segment s owns rows [starts[s], starts[s+1])."""

    def __init__(self, starts):
        self.starts = np.asarray(starts, dtype=np.intp)
        self.counts = np.diff(self.starts)
        if np.any(self.counts <= 0):
            raise ShapeError("empty pooling segment")
        self.ids = np.repeat(np.arange(len(self.counts)), self.counts)
        self.log_counts = np.log(self.counts.astype(np.float64)).reshape(-1, 1)

    def __len__(self):
        return len(self.counts)


def whole(n: int) -> Segments:
    return Segments(np.array([0, n]))


class GnpParams:
    """Learnable state of one pooling instance.

    ``w`` is applied as ``out = y @ w + b`` on row-vector outputs; it is the
    transpose of the column-vector mixing matrix but is learned directly in
    this orientation. In ``both`` mode (used for 1-dimensional inputs, where
    the half split would leave the positive side empty) every column goes
    through both halves and ``w`` mixes the concatenation, shape (2*dim, dim).
    """

    def __init__(self, dim, epsilon=DEFAULT_EPSILON, mode=FULL, p_max=P_MAX,
                 rng=None, name="gnp"):
        if mode not in MODES:
            raise ShapeError(f"unknown mode {mode!r}")
        if mode == FULL and dim < 2:
            raise ShapeError("full mode needs feature dimension >= 2")
        if epsilon < 0:
            # 0 is tolerated for exact-math tests; trained instances use > 0
            raise ValueError("epsilon must be non-negative")
        self.dim = dim
        self.epsilon = float(epsilon)
        self.mode = mode
        self.p_max = float(p_max)
        self.name = name
        t0 = softplus_inv(_P_INIT - 1.0)
        self.t_plus = Param([[t0]], group=P_EXPONENTS, name=f"{name}.t_plus")
        self.t_minus = Param([[t0]], group=P_EXPONENTS, name=f"{name}.t_minus")
        self.q_plus = Param([[_Q_INIT]], name=f"{name}.q_plus")
        self.q_minus = Param([[_Q_INIT]], name=f"{name}.q_minus")
        if mode == BOTH:
            w0 = np.vstack([np.eye(dim), np.eye(dim)]) * 0.5
        else:
            w0 = np.eye(dim)
        if rng is not None:
            w0 = w0 + 0.01 * rng.standard_normal(w0.shape)
        self.w = Param(w0, name=f"{name}.w")
        self.b = Param(np.zeros((1, dim)), name=f"{name}.b")

    def params(self) -> list[Param]:
        return [self.t_plus, self.t_minus, self.q_plus, self.q_minus, self.w, self.b]

    def split(self) -> int:
        return self.dim // 2

    def exponent_values(self) -> dict:
        """Current effective (p+, p-, q+, q-) as plain floats (for logging)."""

        def eff(t):
            return float(np.clip(1.0 + np.logaddexp(0.0, t), 1.0, self.p_max))

        return {
            "p_plus": eff(self.t_plus.value[0, 0]),
            "p_minus": eff(self.t_minus.value[0, 0]),
            "q_plus": float(self.q_plus.value[0, 0]),
            "q_minus": float(self.q_minus.value[0, 0]),
        }


def _effective_p(tape: Tape, t_node: Node, p_max: float) -> Node:
    return tape.clamp(tape.softplus(t_node) + tape.constant(1.0), 1.0, p_max)


def _check_nonnegative(V: Node):
    if V.value.size and V.value.min() < 0:
        raise ValueError("pooling input must be non-negative (apply an activation first)")


def _segment_lse(tape: Tape, z: Node, seg: Segments) -> Node:
    """log sum exp(z) per (segment, column), max-shifted.

    The shift is a detached constant: any constant shift leaves both the
    value and the gradient of the log-sum-exp unchanged, and detaching it
    skips a useless (exactly cancelling) backward pass through the max.
    """
    m = np.maximum.reduceat(z.value, seg.starts[:-1], axis=0)
    shifted = z - tape.constant(m[seg.ids])
    s = tape.segment_sum(tape.exp(shifted), seg.starts)
    return tape.constant(m) + tape.log(s, checked=False)


def gnp_plus_segments(tape, V, p, q, epsilon, seg: Segments) -> Node:
    """Positive half over segments; p and q are 1x1 nodes."""
    _check_nonnegative(V)
    x = V + tape.constant(epsilon) if epsilon else V
    z = tape.log(x, checked=(epsilon == 0.0)) * p
    lse = _segment_lse(tape, z, seg)
    logn = tape.constant(seg.log_counts)
    return tape.exp(lse / p - logn * q)


def gnp_minus_segments(tape, V, p, q, epsilon, seg: Segments) -> Node:
    """Negative half: 1/eps masking below the tolerance, zero when all masked."""
    _check_nonnegative(V)
    if epsilon:
        keep = (V.value > epsilon).astype(np.float64)
        vtil = (V + tape.constant(epsilon)) * tape.constant(keep) + tape.constant(
            (1.0 - keep) / epsilon
        )
        alive = np.maximum.reduceat(keep, seg.starts[:-1], axis=0)
    else:
        vtil = V
        alive = None
    z = tape.log(vtil, checked=(epsilon == 0.0)) * (-p)
    lse = _segment_lse(tape, z, seg)
    logn = tape.constant(seg.log_counts)
    out = tape.exp(-(lse / p) - logn * q)
    if alive is not None and not alive.all():
        out = out * tape.constant(alive)
    return out


def gnp_apply(tape: Tape, gp: GnpParams, V: Node, seg: Segments) -> Node:
    """Full operator over segments: halves, tolerance machinery, mixing."""
    if V.shape[1] != gp.dim:
        raise ShapeError(f"pooling dim {gp.dim} vs input {V.shape}")
    tp = _effective_p(tape, tape.watch(gp.t_plus), gp.p_max)
    tm = _effective_p(tape, tape.watch(gp.t_minus), gp.p_max)
    qp = tape.watch(gp.q_plus)
    qm = tape.watch(gp.q_minus)
    if gp.mode == PLUS_ONLY:
        y = gnp_plus_segments(tape, V, tp, qp, gp.epsilon, seg)
    elif gp.mode == MINUS_ONLY:
        y = gnp_minus_segments(tape, V, tm, qm, gp.epsilon, seg)
    elif gp.mode == BOTH:
        plus = gnp_plus_segments(tape, V, tp, qp, gp.epsilon, seg)
        minus = gnp_minus_segments(tape, V, tm, qm, gp.epsilon, seg)
        y = tape.concat_cols(plus, minus)
    else:
        k = gp.split()
        plus = gnp_plus_segments(tape, tape.slice_cols(V, 0, k), tp, qp, gp.epsilon, seg)
        minus = gnp_minus_segments(
            tape, tape.slice_cols(V, k, gp.dim), tm, qm, gp.epsilon, seg
        )
        y = tape.concat_cols(plus, minus)
    return y @ tape.watch(gp.w) + tape.watch(gp.b)


def pool_segments(tape: Tape, kind: str, V: Node, seg: Segments) -> Node:
    """Column-wise baseline pooling over segments."""
    if kind == SUM:
        return tape.segment_sum(V, seg.starts)
    if kind == MAX:
        return tape.segment_max(V, seg.starts)
    if kind == MIN:
        return tape.segment_min(V, seg.starts)
    if kind == MEAN:
        s = tape.segment_sum(V, seg.starts)
        return s / tape.constant(seg.counts.astype(np.float64).reshape(-1, 1))
    raise ShapeError(f"unknown baseline pooling {kind!r}")


# -- single-segment conveniences (one graph / one set) -------------------------


def _as_node(tape, x):
    return x if isinstance(x, Node) else tape.constant(x)


def gnp_plus(tape: Tape, V: Node, p_plus, q_plus, epsilon=DEFAULT_EPSILON) -> Node:
    return gnp_plus_segments(
        tape, V, _as_node(tape, p_plus), _as_node(tape, q_plus), epsilon, whole(V.shape[0])
    )


def gnp_minus(tape: Tape, V: Node, p_minus, q_minus, epsilon=DEFAULT_EPSILON) -> Node:
    return gnp_minus_segments(
        tape, V, _as_node(tape, p_minus), _as_node(tape, q_minus), epsilon, whole(V.shape[0])
    )


def gnp_forward(tape: Tape, V: Node, gp: GnpParams) -> Node:
    return gnp_apply(tape, gp, V, whole(V.shape[0]))


def pool_baseline(tape: Tape, kind: str, V: Node) -> Node:
    return pool_segments(tape, kind, V, whole(V.shape[0]))
