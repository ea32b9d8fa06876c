"""Eager reverse-mode differentiation over the tensor_core op set.

Every op is computed immediately when it is recorded; the tape keeps the
operands and cached outputs so :func:`backward` can sweep it in reverse.
A tape built with ``grad=False`` keeps nothing and is used for inference
and for the perturbed evaluations inside :func:`finite_diff_check`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class OpDef:
    """Forward, backward and (optionally) distance-to-kink for one op kind.

    ``backward(gout, operand_values, out_value, attrs)`` returns one adjoint
    (or ``None``) per operand.
    """

    forward: Callable
    backward: Callable
    kink_margin: Callable | None = None


class Node:
    __slots__ = ("tape", "index", "kind", "operands", "value", "attrs", "trainable", "name")

    def __init__(self, tape, index, kind, operands, value, attrs, trainable=False, name=None):
        self.tape = tape
        self.index = index
        self.kind = kind
        self.operands = operands
        self.value = value
        self.attrs = attrs
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.record("add", self, other)

    def __sub__(self, other):
        return self.tape.record("sub", self, other)

    def __mul__(self, other):
        return self.tape.record("mul", self, other)

    def __repr__(self):
        label = self.name or self.kind
        return f"Node({label}, shape={self.value.shape})"


# ---------------------------------------------------------------- op table


def _shape_checked(fn, name):
    def forward(a, b):
        if a.shape != b.shape:
            raise ConfigError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
        return fn(a, b)
    return forward


def _conv_forward(x, w, b):
    return tc.conv_same_arrays(x, w, b)


def _conv_backward(gout, vals, out, attrs):
    x, w, _ = vals
    m, _, cin, cout = w.shape
    cols = tc.im2col(x, m)
    g2 = gout.reshape(-1, cout)
    gw = (cols.reshape(-1, m * m * cin).T @ g2).reshape(w.shape)
    gb = g2.sum(axis=0)
    gx = tc.col2im(gout @ w.reshape(m * m * cin, cout).T, m, cin)
    return gx, gw, gb


def _stack_backward(gout, vals, out, attrs):
    offs = tc.channel_offsets(vals)
    return tuple(gout[..., offs[i]:offs[i + 1]] for i in range(len(vals)))


def _activation_op(kind):
    def forward(x):
        return tc.activation(x, kind)

    def backward(gout, vals, out, attrs):
        return (gout * tc.activation_grad(vals[0], out, kind),)

    return forward, backward


def _margin_points(*points):
    def margin(vals, out, attrs):
        x = vals[0]
        return min(float(np.min(np.abs(x - p))) for p in points)
    return margin


def _maxpool_margin(vals, out, attrs):
    blocks = tc._blocks(vals[0])
    top2 = np.sort(blocks, axis=-1)[..., -2:]
    gap = top2[..., 1] - top2[..., 0]
    # Tied zeros come from rectified inputs already held below their kink;
    # the max cannot switch there, so such blocks are not counted.
    gap = gap[~((top2[..., 1] == 0.0) & (top2[..., 0] == 0.0))]
    return float(gap.min()) if gap.size else np.inf


def _sum_forward(x):
    return np.full((1, 1, 1), x.sum())


def _mean_forward(x):
    return np.full((1, 1, 1), x.mean())


OPS: dict[str, OpDef] = {
    "add": OpDef(_shape_checked(np.add, "ew_add"), lambda g, v, o, a: (g, g)),
    "sub": OpDef(_shape_checked(np.subtract, "ew_sub"), lambda g, v, o, a: (g, -g)),
    "mul": OpDef(_shape_checked(np.multiply, "ew_mul"), lambda g, v, o, a: (g * v[1], g * v[0])),
    "scale": OpDef(lambda x, factor: x * factor, lambda g, v, o, a: (g * a["factor"],)),
    "square": OpDef(lambda x: x * x, lambda g, v, o, a: (2.0 * v[0] * g,)),
    "conv_same": OpDef(_conv_forward, _conv_backward),
    "stack": OpDef(lambda *parts: tc.stack_channels(parts), _stack_backward),
    "maxpool2": OpDef(tc.maxpool2, lambda g, v, o, a: (tc.maxpool2_backward(v[0], g),),
                      _maxpool_margin),
    "upsample2": OpDef(tc.upsample2, lambda g, v, o, a: (tc.upsample2_backward(g),)),
    "sum": OpDef(_sum_forward, lambda g, v, o, a: (np.broadcast_to(g.reshape(()), v[0].shape),)),
    "mean": OpDef(_mean_forward,
                  lambda g, v, o, a: (np.broadcast_to(g.reshape(()) / v[0].size, v[0].shape),)),
}

_KINKS = {"hard_sig": (-2.0, 2.0), "relu": (0.0,), "sat01": (0.0, 1.0)}
for _kind in tc.ACTIVATIONS:
    _fwd, _bwd = _activation_op(_kind)
    OPS[_kind] = OpDef(_fwd, _bwd, _margin_points(*_KINKS[_kind]) if _kind in _KINKS else None)


# ---------------------------------------------------------------- tape


class Tape:
    """Append-only record of evaluated ops.

    With ``track_kinks`` set, every op with a non-differentiable point
    updates :attr:`kink_margin`, the smallest distance seen between an
    operand and a kink. Gradient checkers use it to reject samples.
    """

    def __init__(self, grad: bool = True, track_kinks: bool = False):
        self.grad = grad
        self.track_kinks = track_kinks
        self.kink_margin = np.inf
        self.nodes: list[Node] = []
        self._count = 0

    def _append(self, node: Node) -> Node:
        if self.grad:
            self.nodes.append(node)
        return node

    def _next_index(self) -> int:
        i = self._count
        self._count += 1
        return i

    def leaf(self, value, *, trainable: bool = False, name: str | None = None) -> Node:
        arr = np.asarray(value, dtype=np.float64)
        node = Node(self, self._next_index(), "leaf", (), arr, {}, trainable, name)
        return self._append(node)

    def record(self, kind: str, *operands: Node, **attrs) -> Node:
        try:
            op = OPS[kind]
        except KeyError:
            raise ConfigError(f"unknown op kind {kind!r}") from None
        for o in operands:
            if o.tape is not self:
                raise UsageError(f"operand {o!r} belongs to a different tape")
        vals = [o.value for o in operands]
        out = op.forward(*vals, **attrs)
        if self.track_kinks and op.kink_margin is not None:
            self.kink_margin = min(self.kink_margin, op.kink_margin(vals, out, attrs))
        node = Node(self, self._next_index(), kind, operands if self.grad else (), out, attrs)
        return self._append(node)

    # Thin wrappers so model code reads like the math.
    def conv(self, x: Node, w: Node, b: Node) -> Node:
        return self.record("conv_same", x, w, b)

    def stack(self, *parts: Node) -> Node:
        if len(parts) == 1:
            return parts[0]
        return self.record("stack", *parts)

    def act(self, x: Node, kind: str) -> Node:
        return self.record(kind, x)

    def maxpool2(self, x: Node) -> Node:
        return self.record("maxpool2", x)

    def upsample2(self, x: Node) -> Node:
        return self.record("upsample2", x)

    def sum(self, x: Node) -> Node:
        return self.record("sum", x)

    def mean(self, x: Node) -> Node:
        return self.record("mean", x)

    def scale(self, x: Node, factor: float) -> Node:
        return self.record("scale", x, factor=float(factor))

    @property
    def parameters(self) -> list[Node]:
        return [n for n in self.nodes if n.kind == "leaf" and n.trainable]


GradientSet = dict  # Node -> ndarray adjoint, one entry per trainable leaf


def backward(tape: Tape, loss: Node) -> GradientSet:
    """Adjoints of ``loss`` with respect to every trainable leaf of ``tape``."""
    if not tape.grad:
        raise UsageError("backward needs a tape recorded with grad=True")
    if loss.value.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if loss.tape is not tape:
        raise UsageError("loss node does not belong to this tape")

    adjoint: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        if node.index > loss.index:
            continue
        g = adjoint.pop(node.index, None) if node.kind != "leaf" else adjoint.get(node.index)
        if g is None or node.kind == "leaf":
            continue
        vals = [o.value for o in node.operands]
        grads = OPS[node.kind].backward(g, vals, node.value, node.attrs)
        for operand, og in zip(node.operands, grads):
            if og is None:
                continue
            prev = adjoint.get(operand.index)
            adjoint[operand.index] = og + prev if prev is not None else np.array(og, dtype=np.float64)

    out: GradientSet = {}
    for p in tape.parameters:
        g = adjoint.get(p.index)
        out[p] = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64)
    return out


# ---------------------------------------------------------------- verifier


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    worst: tuple[str, tuple] | None = None
    kink_margin: float = np.inf
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tol)


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_diff_check(
    f: Callable[[Tape, Mapping[str, Node]], Node],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-6,
    max_components: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare taped adjoints to central differences ``(f(p+h) - f(p-h)) / 2h``.

    ``f`` builds the computation on the tape it is handed, reading inputs
    from the mapping of leaf nodes, and returns the scalar loss node. When
    ``max_components`` is set and the parameters hold more scalars than
    that, a seeded random subsample of that size (at least 200) is checked.
    """
    if h <= 0:
        raise ConfigError("finite difference step must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape(grad=True, track_kinks=True)
    leaves = {k: tape.leaf(v, trainable=True, name=k) for k, v in params.items()}
    loss = f(tape, leaves)
    grads = backward(tape, loss)
    analytic = {k: grads[leaves[k]] for k in params}

    def evaluate(name, flat_index, delta):
        t = Tape(grad=False)
        vals = dict(params)
        v = params[name].copy()
        v.reshape(-1)[flat_index] += delta
        vals[name] = v
        return float(f(t, {k: t.leaf(x, name=k) for k, x in vals.items()}).value.reshape(()))

    components = [(k, i) for k, v in params.items() for i in range(v.size)]
    if max_components is not None and len(components) > max_components:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(components), size=max(200, max_components), replace=False)
        components = [components[i] for i in sorted(pick)]

    worst_err, worst = 0.0, None
    per_param: dict[str, float] = {}
    for name, i in components:
        numeric = (evaluate(name, i, h) - evaluate(name, i, -h)) / (2.0 * h)
        a = analytic[name].reshape(-1)[i]
        err = float(relative_error(a, numeric))
        if not np.isfinite(err):
            err = np.inf
        per_param[name] = max(per_param.get(name, 0.0), err)
        if worst is None or err > worst_err:
            worst_err = err
            worst = (name, tuple(int(j) for j in np.unravel_index(i, params[name].shape)))
    return GradCheckReport(worst_err, tol, len(components), worst, tape.kink_margin, per_param)
