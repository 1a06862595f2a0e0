"""Minimal tape-based reverse-mode differentiation over flat float64 vectors.

The primitive set is fixed to what the analytic noise predictor, the
deterministic sampler recurrences, and the perturbation-attack losses need:
linear combinations, a constant affine map, elementwise exp, log-sum-exp,
summation, squared norm, scalar sqrt, and scalar stacking.  Every primitive
accepts either a :class:`Var` (recorded on a tape) or a plain ndarray/float
(evaluated directly), so the same model code serves both the fast forward
path and the differentiated path, and the two agree bit for bit.

Each op computes with double precision numpy; a Tape is confined to a single
thread of execution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "TensorGradError",
    "UnregisteredPrimitiveError",
    "forward_record",
    "backward",
    "add",
    "sub",
    "scale",
    "shift",
    "matvec",
    "sub_scalar",
    "vexp",
    "vsum",
    "logsumexp",
    "sqnorm",
    "sqrt",
    "stack",
]


class TensorGradError(Exception):
    """Malformed use of the differentiation engine."""


class UnregisteredPrimitiveError(TensorGradError):
    """A tape node names an op with no registered backward rule."""


@dataclass
class _Node:
    op: str
    parents: tuple[int, ...]  # tape indices; -1 marks a constant argument
    value: np.ndarray | float
    ctx: tuple = ()


@dataclass
class Tape:
    """Ordered record of primitive applications, replayable in reverse."""

    nodes: list[_Node] = field(default_factory=list)
    input_index: int = -1
    output_index: int = -1

    def _append(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1


class Var:
    """Handle to a tape node; carries the forward value."""

    __slots__ = ("data", "tape", "index")

    def __init__(self, data, tape: Tape, index: int):
        self.data = data
        self.tape = tape
        self.index = index

    def __repr__(self):
        return f"Var(op_index={self.index}, data={self.data!r})"


def _raw(x):
    return x.data if isinstance(x, Var) else x


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise TensorGradError("cannot mix variables from different tapes")
    return tape


def _record(tape: Tape, op: str, args, value, ctx=()) -> Var:
    parents = tuple(a.index if isinstance(a, Var) else -1 for a in args)
    idx = tape._append(_Node(op=op, parents=parents, value=value, ctx=ctx))
    return Var(value, tape, idx)


def _dispatch(op: str, args, compute: Callable, ctx=()):
    tape = _tape_of(*args)
    value = compute(*[_raw(a) for a in args])
    if tape is None:
        return value
    return _record(tape, op, args, value, ctx)


# ---------------------------------------------------------------------------
# primitives


def add(x, y):
    """Elementwise x + y (same shape, or both scalars)."""
    return _dispatch("add", (x, y), lambda a, b: a + b)


def sub(x, y):
    """Elementwise x - y."""
    return _dispatch("sub", (x, y), lambda a, b: a - b)


def scale(x, c: float):
    """x * c with a constant scalar c."""
    return _dispatch("scale", (x,), lambda a: a * c, ctx=(float(c),))


def shift(x, b):
    """x + b with a constant vector or scalar b."""
    b = _raw(b)
    if isinstance(b, Var):  # pragma: no cover - guarded by _raw above
        raise TensorGradError("shift offset must be constant")
    return _dispatch("shift", (x,), lambda a: a + b)


def matvec(matrix: np.ndarray, x):
    """matrix @ x with a constant matrix."""
    m = np.asarray(matrix, dtype=np.float64)
    return _dispatch("matvec", (x,), lambda a: m @ a, ctx=(m,))


def sub_scalar(x, s):
    """Vector x minus a broadcast scalar s (s may be a Var)."""
    return _dispatch("sub_scalar", (x, s), lambda a, b: a - b)


def vexp(x):
    """Elementwise exp."""
    return _dispatch("vexp", (x,), np.exp)


def vsum(x):
    """Sum of all entries, as a float."""
    return _dispatch("vsum", (x,), lambda a: float(np.sum(a)))


def logsumexp(x):
    """log(sum(exp(x))) with max-shift stabilization."""

    def compute(a):
        m = float(np.max(a))
        return m + float(np.log(np.sum(np.exp(a - m))))

    return _dispatch("logsumexp", (x,), compute)


def sqnorm(x):
    """Sum of squared entries, as a float."""
    return _dispatch("sqnorm", (x,), lambda a: float(np.dot(a, a)))


def sqrt(x):
    """Scalar square root; backward uses the zero subgradient at 0."""
    return _dispatch("sqrt", (x,), lambda a: float(np.sqrt(a)))


def stack(xs):
    """Stack scalars into a 1-D vector."""
    xs = tuple(xs)
    tape = _tape_of(*xs)
    value = np.array([_raw(x) for x in xs], dtype=np.float64)
    if tape is None:
        return value
    return _record(tape, "stack", xs, value)


# ---------------------------------------------------------------------------
# backward rules: fn(node, grad_of_output) -> list of (parent_slot, grad)


def _bw_add(node, g):
    return [(0, g), (1, g)]


def _bw_sub(node, g):
    return [(0, g), (1, -g)]


def _bw_scale(node, g):
    (c,) = node.ctx
    return [(0, g * c)]


def _bw_shift(node, g):
    return [(0, g)]


def _bw_matvec(node, g):
    (m,) = node.ctx
    return [(0, m.T @ g)]


def _bw_sub_scalar(node, g):
    return [(0, g), (1, -float(np.sum(g)))]


def _bw_vexp(node, g):
    return [(0, g * node.value)]


def _bw_vsum(node, g, _inputs=None):
    return [(0, g)]  # broadcasts over the parent's shape during accumulation


def _bw_logsumexp(node, g, parent_value=None):
    soft = np.exp(parent_value - node.value)
    return [(0, g * soft)]


def _bw_sqnorm(node, g, parent_value=None):
    return [(0, (2.0 * g) * parent_value)]


def _bw_sqrt(node, g, parent_value=None):
    if node.value == 0.0:
        return [(0, 0.0)]
    return [(0, g / (2.0 * node.value))]


def _bw_stack(node, g):
    return [(i, float(g[i])) for i in range(len(node.parents))]


_NEEDS_PARENT_VALUE = {"logsumexp", "sqnorm", "sqrt"}

_BACKWARD: dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "scale": _bw_scale,
    "shift": _bw_shift,
    "matvec": _bw_matvec,
    "sub_scalar": _bw_sub_scalar,
    "vexp": _bw_vexp,
    "vsum": _bw_vsum,
    "logsumexp": _bw_logsumexp,
    "sqnorm": _bw_sqnorm,
    "sqrt": _bw_sqrt,
    "stack": _bw_stack,
    "leaf": None,
}


# ---------------------------------------------------------------------------
# recording and adjoint propagation


def forward_record(f: Callable, x: np.ndarray):
    """Evaluate ``f`` on ``x`` while recording primitives to a fresh tape.

    Returns ``(value, tape)`` where ``value`` is the plain forward result
    (identical, bit for bit, to calling ``f`` on the raw array).
    """
    x = np.asarray(x, dtype=np.float64)
    tape = Tape()
    leaf = _record(tape, "leaf", (), x)
    tape.input_index = leaf.index
    out = f(leaf)
    if not isinstance(out, Var):
        raise TensorGradError("function output was not built from registered primitives")
    if out.tape is not tape:
        raise TensorGradError("function output belongs to a different tape")
    tape.output_index = out.index
    return out.data, tape


def backward(tape: Tape, seed: float = 1.0) -> np.ndarray:
    """Propagate adjoints from the scalar output back to the input leaf.

    Returns d(output)/d(input) scaled by ``seed``.  Nodes are visited exactly
    once, in reverse recording order.
    """
    if tape.output_index < 0 or tape.input_index < 0:
        raise TensorGradError("tape was not produced by forward_record")
    root = tape.nodes[tape.output_index]
    if isinstance(root.value, np.ndarray) and root.value.ndim > 0:
        raise TensorGradError("backward requires a scalar-valued output")

    grads: list = [None] * len(tape.nodes)
    grads[tape.output_index] = float(seed)

    for idx in range(tape.output_index, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.op == "leaf":
            continue
        try:
            rule = _BACKWARD[node.op]
        except KeyError:
            raise UnregisteredPrimitiveError(f"no backward rule for op {node.op!r}")
        if node.op in _NEEDS_PARENT_VALUE:
            parent = tape.nodes[node.parents[0]]
            contribs = rule(node, g, parent_value=parent.value)
        else:
            contribs = rule(node, g)
        for slot, contrib in contribs:
            p = node.parents[slot]
            if p < 0:
                continue  # constant argument
            if node.op == "vsum":
                pv = tape.nodes[p].value
                contrib = np.full_like(pv, contrib)
            if grads[p] is None:
                grads[p] = contrib.copy() if isinstance(contrib, np.ndarray) else contrib
            else:
                grads[p] = grads[p] + contrib

    g_in = grads[tape.input_index]
    leaf_value = tape.nodes[tape.input_index].value
    if g_in is None:
        g_in = np.zeros_like(leaf_value)
    elif not isinstance(g_in, np.ndarray):
        g_in = np.full_like(leaf_value, g_in)
    return g_in
