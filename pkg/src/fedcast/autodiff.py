"""Dense 2-D tensor engine with reverse-mode differentiation.

Every tensor is a float64 matrix (scalars are 1x1). A :class:`Tape` records
the forward graph; :meth:`Tape.backward` runs one reverse sweep and returns
gradients per node, accumulating additively across fan-out. Leaves carry a
provenance label so downstream code can check which raw inputs / parameters
flow into a value.

Broadcasting is deliberately restricted: ``add`` accepts a row-vector bias,
everything else requires exactly matching shapes. That keeps payload sizes
auditable at the protocol layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's algebra."""


def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"engine tensors are 2-D, got shape {arr.shape}")
    return arr


class Node:
    """One recorded operation (or leaf) on a tape."""

    __slots__ = ("op", "inputs", "meta", "values", "requires_grad", "label")

    def __init__(self, op, inputs, meta, values, requires_grad, label=None):
        self.op = op                  # op kind, "leaf" for leaves
        self.inputs = inputs          # input node ids
        self.meta = meta              # static op parameters (slice bounds, scalars, ...)
        self.values = values          # forward result, read-only float64 matrix
        self.requires_grad = requires_grad
        self.label = label


class Tensor:
    """Handle to a value, optionally attached to a tape node.

    Detached tensors (``tape is None``) are plain immutable values and may be
    shared freely; tensors on a tape belong to that tape's single owner.
    """

    __slots__ = ("values", "tape", "nid")

    def __init__(self, values: np.ndarray, tape: Optional["Tape"] = None, nid: Optional[int] = None):
        self.values = values
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.values.shape

    def detach(self) -> np.ndarray:
        """Copy of the value with no tape attachment; marked read-only."""
        out = self.values.copy()
        out.flags.writeable = False
        return out

    @property
    def provenance(self) -> frozenset:
        """Labels of every labelled leaf this value derives from (graph walk)."""
        if self.tape is None or self.nid is None:
            return frozenset()
        labels = set()
        seen = set()
        stack = [self.nid]
        nodes = self.tape.nodes
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            node = nodes[nid]
            if node.op == "leaf":
                if node.label:
                    labels.add(node.label)
            else:
                stack.extend(node.inputs)
        return frozenset(labels)

    def __repr__(self):
        tag = "detached" if self.tape is None else f"node {self.nid}"
        return f"Tensor(shape={self.values.shape}, {tag})"


class Tape:
    """Single-owner record of a forward computation.

    Node order is topological by construction (an op can only consume ids
    that already exist), so backward is a single reverse pass.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, values, label: Optional[str] = None, requires_grad: bool = True) -> Tensor:
        arr = _as_matrix(values).copy()
        arr.flags.writeable = False
        node = Node("leaf", (), None, arr, requires_grad, label=label)
        self.nodes.append(node)
        return Tensor(arr, self, len(self.nodes) - 1)

    def constant(self, values) -> Tensor:
        return self.leaf(values, label=None, requires_grad=False)

    def _record(self, op: str, values: np.ndarray, inputs: Sequence[int], meta=None) -> Tensor:
        if values.dtype != np.float64 or not values.flags.c_contiguous:
            values = np.ascontiguousarray(values, dtype=np.float64)
        values.flags.writeable = False
        rg = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(Node(op, tuple(inputs), meta, values, rg))
        return Tensor(values, self, len(self.nodes) - 1)

    # -- reverse sweep ----------------------------------------------------

    def backward(self, seeds) -> dict[int, np.ndarray]:
        """Reverse sweep from one or more seed nodes.

        ``seeds`` is either a scalar Tensor (cotangent 1) or a list of
        ``(tensor_or_nid, cotangent)`` pairs. Returns a map node-id ->
        gradient for every node that received one; leaf gradients have the
        leaf's shape.
        """
        if isinstance(seeds, Tensor):
            if seeds.values.shape != (1, 1):
                raise ShapeError(f"backward: loss must be scalar, got shape {seeds.values.shape}")
            seeds = [(seeds, np.ones((1, 1)))]
        grads: dict[int, np.ndarray] = {}
        for tgt, cot in seeds:
            nid = tgt.nid if isinstance(tgt, Tensor) else int(tgt)
            cot = np.asarray(cot, dtype=np.float64)
            if cot.shape != self.nodes[nid].values.shape:
                raise ShapeError(
                    f"backward: cotangent shape {cot.shape} does not match node shape "
                    f"{self.nodes[nid].values.shape}"
                )
            grads[nid] = grads.get(nid, 0.0) + cot
        for nid in range(len(self.nodes) - 1, -1, -1):
            if nid not in grads:
                continue
            node = self.nodes[nid]
            if node.op == "leaf":
                continue
            g = grads[nid]
            for in_id, gi in zip(node.inputs, _VJP[node.op](node, g, self)):
                if gi is None or not self.nodes[in_id].requires_grad:
                    continue
                if in_id in grads:
                    grads[in_id] = grads[in_id] + gi
                else:
                    grads[in_id] = gi
        return grads

    def grad(self, grads: dict[int, np.ndarray], t: Tensor) -> np.ndarray:
        """Gradient of a tensor from a backward result, zeros if unreached."""
        if t.nid in grads:
            return np.asarray(grads[t.nid])
        return np.zeros_like(t.values)

    def replay(self) -> list[np.ndarray]:
        """Re-execute every recorded op; leaves keep their stored values.

        Deterministic: replaying yields bitwise-identical values.
        """
        out: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "leaf":
                out.append(node.values)
            else:
                args = [out[i] for i in node.inputs]
                out.append(_FORWARD[node.op](node.meta, *args))
        return out


# ---------------------------------------------------------------------------
# op kernels: forward functions on raw arrays + VJP rules on nodes
# ---------------------------------------------------------------------------

def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _clip_rows(x, bound):
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    scale = np.ones_like(norms)
    over = norms[:, 0] > bound
    scale[over, 0] = bound / norms[over, 0]
    return x * scale


_FORWARD: dict[str, Callable] = {
    "matmul": lambda m, a, b: a @ b,
    "add": lambda m, a, b: a + b,
    "sub": lambda m, a, b: a - b,
    "mul": lambda m, a, b: a * b,
    "smul": lambda m, a: a * m,
    "sadd": lambda m, a: a + m,
    "neg": lambda m, a: -a,
    "relu": lambda m, a: np.maximum(a, 0.0),
    "sigmoid": lambda m, a: _stable_sigmoid(a),
    "tanh": lambda m, a: np.tanh(a),
    "abs": lambda m, a: np.abs(a),
    "square": lambda m, a: a * a,
    "powc": lambda m, a: np.power(a, m),
    "softmax-rows": lambda m, a: _softmax_rows(a),
    "l2norm-rows": lambda m, a: np.sqrt((a * a).sum(axis=1, keepdims=True)),
    "clip-rows": lambda m, a: _clip_rows(a, m),
    "concat-rows": lambda m, *parts: np.concatenate(parts, axis=0),
    "concat-cols": lambda m, *parts: np.concatenate(parts, axis=1),
    "transpose": lambda m, a: a.T,
    "slice": lambda m, a: a[m[0]:m[1], m[2]:m[3]],
    "take-rows": lambda m, a: a[list(m), :],
    "sum": lambda m, a: np.array([[a.sum()]]),
}


def _vjp_matmul(node, g, tape):
    a = tape.nodes[node.inputs[0]].values
    b = tape.nodes[node.inputs[1]].values
    return g @ b.T, a.T @ g


def _vjp_add(node, g, tape):
    b = tape.nodes[node.inputs[1]].values
    gb = g.sum(axis=0, keepdims=True) if b.shape[0] == 1 and g.shape[0] != 1 else g
    return g, gb


def _vjp_mul(node, g, tape):
    a = tape.nodes[node.inputs[0]].values
    b = tape.nodes[node.inputs[1]].values
    return g * b, g * a


def _vjp_softmax(node, g, tape):
    y = node.values
    return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


def _vjp_l2norm(node, g, tape):
    x = tape.nodes[node.inputs[0]].values
    norms = node.values
    safe = np.where(norms > 0.0, norms, 1.0)
    return (g * np.where(norms > 0.0, x / safe, 0.0),)


def _vjp_clip(node, g, tape):
    # exact Jacobian of r -> r * min(1, C/||r||): identity inside the ball,
    # (C/||r||)(I - r r^T / ||r||^2) outside
    x = tape.nodes[node.inputs[0]].values
    bound = node.meta
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    over = norms[:, 0] > bound
    out = g.copy()
    if over.any():
        xo, go, no = x[over], g[over], norms[over]
        proj = go - xo * ((xo * go).sum(axis=1, keepdims=True) / (no * no))
        out[over] = (bound / no) * proj
    return (out,)


def _vjp_concat_rows(node, g, tape):
    sizes = [tape.nodes[i].values.shape[0] for i in node.inputs]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=0))


def _vjp_concat_cols(node, g, tape):
    sizes = [tape.nodes[i].values.shape[1] for i in node.inputs]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=1))


def _vjp_slice(node, g, tape):
    out = np.zeros_like(tape.nodes[node.inputs[0]].values)
    r0, r1, c0, c1 = node.meta
    out[r0:r1, c0:c1] = g
    return (out,)


def _vjp_take_rows(node, g, tape):
    out = np.zeros_like(tape.nodes[node.inputs[0]].values)
    np.add.at(out, list(node.meta), g)
    return (out,)


def _vjp_powc(node, g, tape):
    x = tape.nodes[node.inputs[0]].values
    p = node.meta
    if p == 1.0:
        return (g,)
    grad = np.where(x > 0.0, p * np.power(np.where(x > 0.0, x, 1.0), p - 1.0), 0.0)
    return (g * grad,)


_VJP: dict[str, Callable] = {
    "matmul": _vjp_matmul,
    "add": _vjp_add,
    "sub": lambda n, g, t: (g, -g),
    "mul": _vjp_mul,
    "smul": lambda n, g, t: (g * n.meta,),
    "sadd": lambda n, g, t: (g,),
    "neg": lambda n, g, t: (-g,),
    "relu": lambda n, g, t: (g * (t.nodes[n.inputs[0]].values > 0.0),),
    "sigmoid": lambda n, g, t: (g * n.values * (1.0 - n.values),),
    "tanh": lambda n, g, t: (g * (1.0 - n.values * n.values),),
    "abs": lambda n, g, t: (g * np.sign(t.nodes[n.inputs[0]].values),),
    "square": lambda n, g, t: (g * 2.0 * t.nodes[n.inputs[0]].values,),
    "powc": _vjp_powc,
    "softmax-rows": _vjp_softmax,
    "l2norm-rows": _vjp_l2norm,
    "clip-rows": _vjp_clip,
    "concat-rows": _vjp_concat_rows,
    "concat-cols": _vjp_concat_cols,
    "transpose": lambda n, g, t: (g.T,),
    "slice": _vjp_slice,
    "take-rows": _vjp_take_rows,
    "sum": lambda n, g, t: (np.full_like(t.nodes[n.inputs[0]].values, g[0, 0]),),
}


# ---------------------------------------------------------------------------
# public op API: functions taking Tensors (arrays are lifted as constants)
# ---------------------------------------------------------------------------

def _tape_of(args) -> Optional[Tape]:
    tape = None
    for a in args:
        if isinstance(a, Tensor) and a.tape is not None:
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise ValueError("operands belong to different tapes; a tape is single-owner")
    return tape


def _lift(tape: Optional[Tape], x) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is None and tape is not None:
            return tape.constant(x.values)
        return x
    if tape is not None:
        return tape.constant(_as_matrix(x))
    return Tensor(_as_matrix(x))


def _apply(op: str, args, meta=None) -> Tensor:
    tape = _tape_of(args)
    lifted = [_lift(tape, a) for a in args]
    vals = [t.values for t in lifted]
    out = _FORWARD[op](meta, *vals)
    if tape is None:
        out = np.ascontiguousarray(out, dtype=np.float64)
        out.flags.writeable = False
        return Tensor(out)
    return tape._record(op, out, [t.nid for t in lifted], meta)


def matmul(a, b) -> Tensor:
    sa = _as_matrix(a.values if isinstance(a, Tensor) else a).shape
    sb = _as_matrix(b.values if isinstance(b, Tensor) else b).shape
    if sa[1] != sb[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {sa} x {sb}")
    return _apply("matmul", (a, b))


def _binary_same_shape(op, a, b):
    sa = _as_matrix(a.values if isinstance(a, Tensor) else a).shape
    sb = _as_matrix(b.values if isinstance(b, Tensor) else b).shape
    if op == "add" and sb == (1, sa[1]):
        pass  # row-vector bias broadcast, the one allowed coercion
    elif sa != sb:
        raise ShapeError(f"{op}: shapes differ: {sa} vs {sb}")
    return _apply(op, (a, b))


def add(a, b) -> Tensor:
    return _binary_same_shape("add", a, b)


def sub(a, b) -> Tensor:
    return _binary_same_shape("sub", a, b)


def mul(a, b) -> Tensor:
    return _binary_same_shape("mul", a, b)


def smul(a, c: float) -> Tensor:
    return _apply("smul", (a,), float(c))


def sadd(a, c: float) -> Tensor:
    return _apply("sadd", (a,), float(c))


def neg(a) -> Tensor:
    return _apply("neg", (a,))


def relu(a) -> Tensor:
    return _apply("relu", (a,))


def sigmoid(a) -> Tensor:
    return _apply("sigmoid", (a,))


def tanh(a) -> Tensor:
    return _apply("tanh", (a,))


def absval(a) -> Tensor:
    return _apply("abs", (a,))


def square(a) -> Tensor:
    return _apply("square", (a,))


def powc(a, p: float) -> Tensor:
    """Elementwise a**p for nonnegative a; gradient pinned to 0 at a == 0."""
    vals = a.values if isinstance(a, Tensor) else _as_matrix(a)
    if (vals < 0.0).any():
        raise ValueError("powc: operand must be nonnegative")
    return _apply("powc", (a,), float(p))


def softmax_rows(a) -> Tensor:
    return _apply("softmax-rows", (a,))


def l2norm_rows(a) -> Tensor:
    return _apply("l2norm-rows", (a,))


def clip_rows(a, bound: float) -> Tensor:
    """Scale each row by min(1, bound/||row||): every output row has L2 norm <= bound."""
    if bound <= 0.0:
        raise ValueError(f"clip-rows: bound must be positive, got {bound}")
    return _apply("clip-rows", (a,), float(bound))


def concat_rows(parts: Sequence) -> Tensor:
    widths = {(_as_matrix(p.values if isinstance(p, Tensor) else p)).shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat-rows: column counts differ: {sorted(widths)}")
    return _apply("concat-rows", tuple(parts))


def concat_cols(parts: Sequence) -> Tensor:
    heights = {(_as_matrix(p.values if isinstance(p, Tensor) else p)).shape[0] for p in parts}
    if len(heights) != 1:
        raise ShapeError(f"concat-cols: row counts differ: {sorted(heights)}")
    return _apply("concat-cols", tuple(parts))


def transpose(a) -> Tensor:
    return _apply("transpose", (a,))


def slice2d(a, rows: tuple[int, int], cols: Optional[tuple[int, int]] = None) -> Tensor:
    shape = (a.values if isinstance(a, Tensor) else _as_matrix(a)).shape
    if cols is None:
        cols = (0, shape[1])
    r0, r1 = rows
    c0, c1 = cols
    if not (0 <= r0 <= r1 <= shape[0] and 0 <= c0 <= c1 <= shape[1]):
        raise ShapeError(f"slice: bounds rows={rows} cols={cols} outside shape {shape}")
    return _apply("slice", (a,), (r0, r1, c0, c1))


def take_rows(a, indices: Sequence[int]) -> Tensor:
    n = (a.values if isinstance(a, Tensor) else _as_matrix(a)).shape[0]
    idx = tuple(int(i) for i in indices)
    if any(i < 0 or i >= n for i in idx):
        raise ShapeError(f"take-rows: index out of range for {n} rows")
    return _apply("take-rows", (a,), idx)


def sum_all(a) -> Tensor:
    return _apply("sum", (a,))


def mean_all(a) -> Tensor:
    size = (a.values if isinstance(a, Tensor) else _as_matrix(a)).size
    return smul(sum_all(a), 1.0 / size)


def mean_abs_error(pred, target) -> Tensor:
    return mean_all(absval(sub(pred, target)))


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    passed: bool
    max_rel_err: float
    excluded: list = field(default_factory=list)   # (input_index, coord) at kinks
    failures: list = field(default_factory=list)   # (input_index, coord, rel_err)

    def __bool__(self):
        return self.passed


def gradient_check(fn, points, step: float = 1e-4, tol: float = 1e-4) -> GradCheckResult:
    """Compare tape gradients of ``fn`` against central finite differences.

    ``fn(tape, *tensors) -> scalar Tensor`` builds the graph; ``points`` is a
    list of input arrays. Each coordinate is perturbed by ``step``; coordinates
    where one-sided slopes disagree (nondifferentiable points, e.g. relu at 0)
    are excluded and reported.
    """
    if not (1e-6 <= step <= 1e-2):
        raise ValueError(f"gradient_check: step {step} outside [1e-6, 1e-2]")
    points = [_as_matrix(p) for p in points]

    def evaluate(arrs):
        tape = Tape()
        tensors = [tape.leaf(a) for a in arrs]
        out = fn(tape, *tensors)
        if out.values.shape != (1, 1):
            raise ShapeError(f"gradient_check: fn must return a scalar, got {out.values.shape}")
        return out.values[0, 0], tape, tensors, out

    base, tape, tensors, out = evaluate(points)
    if not math.isfinite(base):
        return GradCheckResult(False, math.inf, failures=[("output", (), math.inf)])
    grads = tape.backward(out)
    analytic = [tape.grad(grads, t) for t in tensors]

    result = GradCheckResult(True, 0.0)
    for idx, point in enumerate(points):
        for coord in np.ndindex(point.shape):
            bumped = [p.copy() for p in points]
            bumped[idx][coord] += step
            f_plus = evaluate(bumped)[0]
            bumped[idx][coord] -= 2 * step
            f_minus = evaluate(bumped)[0]
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                result.passed = False
                result.failures.append((idx, coord, math.inf))
                continue
            right = (f_plus - base) / step
            left = (base - f_minus) / step
            # a derivative jump shows up as disagreeing one-sided slopes; smooth
            # curvature only contributes O(step), far below 5% of the slope scale
            if abs(right - left) > 0.05 * max(abs(right), abs(left), 1e-3):
                result.excluded.append((idx, coord))
                continue
            fd = (f_plus - f_minus) / (2 * step)
            an = analytic[idx][coord]
            # floor keeps finite-difference noise from dominating near-zero gradients
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-3)
            result.max_rel_err = max(result.max_rel_err, rel)
            if rel > tol:
                result.passed = False
                result.failures.append((idx, coord, rel))
    return result
