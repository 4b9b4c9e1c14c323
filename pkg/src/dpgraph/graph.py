"""Tensor expression graphs: shapes, nodes, construction, validation, optimization.

Graphs are append-only while being built and immutable afterwards, so they can
be shared freely between threads. Node handles are plain integers; a node only
ever references earlier handles, which makes every graph acyclic by
construction and makes the node table a valid topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import (
    ArityError,
    ShapeMismatch,
    UnknownNode,
    ValidationFailed,
)

# Probability clamp applied inside the fused cross-entropy primitive. Keeps
# log gradients finite at 0/1 for both execution and interval propagation.
BCE_CLAMP = 1e-7


class OpKind(str, Enum):
    INPUT = "Input"
    PARAMETER = "Parameter"
    CONSTANT = "Constant"
    ADD = "Add"
    SUB = "Sub"
    MUL = "Mul"
    DIV = "Div"
    NEG = "Neg"
    MATMUL = "MatMul"
    POW = "Pow"
    EXP = "Exp"
    LOG = "Log"
    SIGMOID = "Sigmoid"
    SUM = "Sum"
    MEAN = "Mean"
    CLIP = "Clip"
    BCE = "BinaryCrossEntropy"
    # Elementwise 0/1 indicator of membership in [lo, hi]. Needed so the
    # almost-everywhere derivative of Clip (and of the cross-entropy clamp) is
    # expressible as a graph; never required in hand-written models.
    IN_INTERVAL = "InInterval"


LEAF_KINDS = frozenset({OpKind.INPUT, OpKind.PARAMETER, OpKind.CONSTANT})

ARITY: dict[OpKind, int] = {
    OpKind.INPUT: 0,
    OpKind.PARAMETER: 0,
    OpKind.CONSTANT: 0,
    OpKind.ADD: 2,
    OpKind.SUB: 2,
    OpKind.MUL: 2,
    OpKind.DIV: 2,
    OpKind.NEG: 1,
    OpKind.MATMUL: 2,
    OpKind.POW: 1,
    OpKind.EXP: 1,
    OpKind.LOG: 1,
    OpKind.SIGMOID: 1,
    OpKind.SUM: 1,
    OpKind.MEAN: 1,
    OpKind.CLIP: 1,
    OpKind.BCE: 2,
    OpKind.IN_INTERVAL: 1,
}


@dataclass(frozen=True)
class TensorShape:
    """Ordered tuple of positive extents; () is the scalar shape."""

    dims: tuple[int, ...]

    def __post_init__(self):
        for d in self.dims:
            if not isinstance(d, int) or d < 1:
                raise ShapeMismatch(f"invalid extent {d!r} in shape {self.dims}")

    @classmethod
    def coerce(cls, value) -> "TensorShape":
        if isinstance(value, TensorShape):
            return value
        if isinstance(value, int):
            return cls((value,))
        return cls(tuple(int(d) for d in value))

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def num_elements(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n

    def __str__(self) -> str:
        return "(" + ",".join(str(d) for d in self.dims) + ")"


SCALAR = TensorShape(())


def _as_f64(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


@dataclass(frozen=True)
class Bounds:
    """Elementwise closed interval attached to one tensor.

    lo/hi are float64 arrays, either matching the tensor shape or scalar
    (0-d), in which case they broadcast to every element.
    """

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def make(cls, lo, hi) -> "Bounds":
        lo_a = np.array(lo, dtype=np.float64)
        hi_a = np.array(hi, dtype=np.float64)
        if lo_a.shape != hi_a.shape:
            raise ShapeMismatch(
                f"bound halves have different shapes {lo_a.shape} vs {hi_a.shape}"
            )
        if not (np.all(np.isfinite(lo_a)) and np.all(np.isfinite(hi_a))):
            raise ValueError("bounds must be finite")
        if np.any(lo_a > hi_a):
            raise ValueError("bounds require lo <= hi elementwise")
        lo_a.setflags(write=False)
        hi_a.setflags(write=False)
        return cls(lo_a, hi_a)

    def matches(self, shape: TensorShape) -> bool:
        return self.lo.shape == () or self.lo.shape == shape.dims

    def broadcast_to(self, shape: TensorShape) -> tuple[np.ndarray, np.ndarray]:
        dims = shape.dims
        return (
            np.broadcast_to(self.lo, dims).astype(np.float64),
            np.broadcast_to(self.hi, dims).astype(np.float64),
        )


class BoundsSpec:
    """Per-node interval bounds for Input and Parameter tensors."""

    def __init__(self, entries: Mapping[int, Bounds] | None = None):
        self._entries: dict[int, Bounds] = dict(entries or {})

    def set(self, handle: int, lo, hi) -> None:
        self._entries[handle] = Bounds.make(lo, hi)

    def get(self, handle: int) -> Bounds | None:
        return self._entries.get(handle)

    def __contains__(self, handle: int) -> bool:
        return handle in self._entries

    def items(self):
        return self._entries.items()

    def copy(self) -> "BoundsSpec":
        return BoundsSpec(self._entries)


@dataclass(frozen=True, eq=False)
class Node:
    id: int
    kind: OpKind
    inputs: tuple[int, ...]
    shape: TensorShape
    attrs: Mapping[str, Any]
    name: str

    def __repr__(self) -> str:
        return f"%{self.id}:{self.kind.value}{self.shape}('{self.name}')"


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    node: int | None = None


# ---------------------------------------------------------------------------
# shape inference


def _elementwise_pair(a: TensorShape, b: TensorShape, kind: OpKind) -> TensorShape:
    if a == b:
        return a
    if a.rank == 0:
        return b
    if b.rank == 0:
        return a
    raise ShapeMismatch(
        f"{kind.value} operands must have equal shapes or a scalar operand, "
        f"got {a} and {b}"
    )


def _matmul_shape(a: TensorShape, b: TensorShape, attrs: Mapping) -> TensorShape:
    if a.rank != 2 or b.rank != 2:
        raise ShapeMismatch(f"MatMul requires 2-D operands, got {a} and {b}")
    am, ak = a.dims
    bk, bn = b.dims
    if attrs.get("transpose_a", False):
        am, ak = ak, am
    if attrs.get("transpose_b", False):
        bk, bn = bn, bk
    if ak != bk:
        raise ShapeMismatch(f"MatMul inner dimensions differ: {ak} vs {bk}")
    return TensorShape((am, bn))


def _reduce_shape(a: TensorShape, attrs: Mapping, kind: OpKind) -> TensorShape:
    axis = attrs.get("axis")
    if axis is None:
        return SCALAR
    if a.rank != 2:
        raise ShapeMismatch(
            f"{kind.value} with an integer axis requires a 2-D operand, got {a}"
        )
    if axis not in (0, 1):
        raise ShapeMismatch(f"axis {axis} out of range for shape {a}")
    dims = list(a.dims)
    dims[axis] = 1
    return TensorShape(tuple(dims))


def infer_shape(kind: OpKind, input_shapes: Sequence[TensorShape], attrs: Mapping) -> TensorShape:
    if kind in (OpKind.ADD, OpKind.SUB, OpKind.MUL, OpKind.DIV):
        return _elementwise_pair(input_shapes[0], input_shapes[1], kind)
    if kind is OpKind.BCE:
        _elementwise_pair(input_shapes[0], input_shapes[1], kind)
        return SCALAR
    if kind in (OpKind.NEG, OpKind.EXP, OpKind.LOG, OpKind.SIGMOID,
                OpKind.CLIP, OpKind.POW, OpKind.IN_INTERVAL):
        return input_shapes[0]
    if kind is OpKind.MATMUL:
        return _matmul_shape(input_shapes[0], input_shapes[1], attrs)
    if kind in (OpKind.SUM, OpKind.MEAN):
        return _reduce_shape(input_shapes[0], attrs, kind)
    raise ArityError(f"cannot infer shape for leaf kind {kind.value}")


# ---------------------------------------------------------------------------
# attribute normalization

_ATTR_KEYS: dict[OpKind, tuple[str, ...]] = {
    OpKind.CONSTANT: ("value",),
    OpKind.MATMUL: ("transpose_a", "transpose_b"),
    OpKind.POW: ("exponent",),
    OpKind.SUM: ("axis",),
    OpKind.MEAN: ("axis",),
    OpKind.CLIP: ("lo", "hi"),
    OpKind.IN_INTERVAL: ("lo", "hi"),
}


def normalize_attrs(kind: OpKind, attrs: Mapping | None) -> dict[str, Any]:
    attrs = dict(attrs or {})
    allowed = _ATTR_KEYS.get(kind, ())
    unknown = set(attrs) - set(allowed)
    if unknown:
        raise ArityError(f"{kind.value} does not accept attrs {sorted(unknown)}")
    if kind is OpKind.CONSTANT:
        if "value" not in attrs:
            raise ArityError("Constant requires a 'value' attr")
        value = np.array(attrs["value"], dtype=np.float64)
        value.setflags(write=False)
        return {"value": value}
    if kind is OpKind.MATMUL:
        return {
            "transpose_a": bool(attrs.get("transpose_a", False)),
            "transpose_b": bool(attrs.get("transpose_b", False)),
        }
    if kind is OpKind.POW:
        if "exponent" not in attrs:
            raise ArityError("Pow requires an 'exponent' attr")
        return {"exponent": float(attrs["exponent"])}
    if kind in (OpKind.SUM, OpKind.MEAN):
        axis = attrs.get("axis")
        return {"axis": None if axis is None else int(axis)}
    if kind in (OpKind.CLIP, OpKind.IN_INTERVAL):
        if "lo" not in attrs or "hi" not in attrs:
            raise ArityError(f"{kind.value} requires 'lo' and 'hi' attrs")
        lo = float(attrs["lo"])
        hi = float(attrs["hi"])
        if lo > hi:
            raise ValueError(f"{kind.value} interval requires lo <= hi")
        return {"lo": lo, "hi": hi}
    return {}


def attr_key(attrs: Mapping[str, Any]) -> tuple:
    """Hashable canonical encoding of a normalized attr dict."""
    parts = []
    for k in sorted(attrs):
        v = attrs[k]
        if isinstance(v, np.ndarray):
            parts.append((k, v.shape, v.tobytes()))
        else:
            parts.append((k, v))
    return tuple(parts)


# ---------------------------------------------------------------------------
# numeric kernels (shared by execution and constant folding)


def _k_matmul(attrs, a, b):
    if attrs["transpose_a"]:
        a = a.T
    if attrs["transpose_b"]:
        b = b.T
    return a @ b


def _k_reduce(fn):
    def kernel(attrs, x):
        axis = attrs["axis"]
        if axis is None:
            return np.asarray(fn(x))
        return fn(x, axis=axis, keepdims=True)

    return kernel


def _k_bce(attrs, p, t):
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return np.asarray(np.mean(-(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))))


KERNELS = {
    OpKind.ADD: lambda attrs, a, b: np.asarray(a + b),
    OpKind.SUB: lambda attrs, a, b: np.asarray(a - b),
    OpKind.MUL: lambda attrs, a, b: np.asarray(a * b),
    OpKind.DIV: lambda attrs, a, b: np.asarray(a / b),
    OpKind.NEG: lambda attrs, a: np.asarray(-a),
    OpKind.MATMUL: _k_matmul,
    OpKind.POW: lambda attrs, a: np.asarray(np.power(a, attrs["exponent"])),
    OpKind.EXP: lambda attrs, a: np.exp(a),
    OpKind.LOG: lambda attrs, a: np.log(a),
    OpKind.SIGMOID: lambda attrs, a: np.asarray(expit(a)),
    OpKind.SUM: _k_reduce(np.sum),
    OpKind.MEAN: _k_reduce(np.mean),
    OpKind.CLIP: lambda attrs, a: np.clip(a, attrs["lo"], attrs["hi"]),
    OpKind.BCE: _k_bce,
    OpKind.IN_INTERVAL: lambda attrs, a: np.asarray(
        ((a >= attrs["lo"]) & (a <= attrs["hi"])), dtype=np.float64
    ),
}


def apply_kind(kind: OpKind, attrs: Mapping, *operands: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        return KERNELS[kind](attrs, *operands)


# ---------------------------------------------------------------------------
# graph and builder


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable DAG of tensor operations with designated roles and bounds."""

    nodes: tuple[Node, ...]
    private_inputs: tuple[int, ...]
    parameters: tuple[int, ...]
    outputs: tuple[int, ...]
    bounds: BoundsSpec
    _names: Mapping[str, int] = field(repr=False, default_factory=dict)

    def node(self, handle: int) -> Node:
        if not isinstance(handle, (int, np.integer)) or not 0 <= handle < len(self.nodes):
            raise UnknownNode(f"no node with handle {handle!r}")
        return self.nodes[handle]

    def find(self, name: str) -> int:
        try:
            return self._names[name]
        except KeyError:
            raise UnknownNode(f"no node named {name!r}") from None

    def leaves(self) -> tuple[int, ...]:
        """Private inputs followed by parameters, in declaration order."""
        return tuple(self.private_inputs) + tuple(self.parameters)

    def ancestors(self, handles: Iterable[int]) -> set[int]:
        seen: set[int] = set()
        stack = list(handles)
        while stack:
            h = stack.pop()
            if h in seen:
                continue
            seen.add(h)
            stack.extend(self.nodes[h].inputs)
        return seen

    def validate(self) -> list[Diagnostic]:
        """Check every structural invariant; returns all violations."""
        diags: list[Diagnostic] = []
        if not self.outputs:
            diags.append(Diagnostic("no-outputs", "graph declares no outputs"))
        for h in self.outputs:
            if not 0 <= h < len(self.nodes):
                diags.append(Diagnostic("bad-output", f"output handle {h} does not exist"))
        for node in self.nodes:
            for i in node.inputs:
                if i >= node.id:
                    diags.append(Diagnostic(
                        "cycle", f"node '{node.name}' references a later node", node.id))
        for h in self.private_inputs:
            if self.nodes[h].kind is not OpKind.INPUT:
                diags.append(Diagnostic(
                    "bad-role", f"private input '{self.nodes[h].name}' is not an Input node", h))
        for h in self.parameters:
            if self.nodes[h].kind is not OpKind.PARAMETER:
                diags.append(Diagnostic(
                    "bad-role", f"parameter '{self.nodes[h].name}' is not a Parameter node", h))
        for h in self.private_inputs:
            b = self.bounds.get(h)
            if b is None:
                diags.append(Diagnostic(
                    "missing-bounds",
                    f"missing bounds on input '{self.nodes[h].name}' (#{h})", h))
        for h, b in self.bounds.items():
            if not b.matches(self.nodes[h].shape):
                diags.append(Diagnostic(
                    "bounds-shape",
                    f"bounds on '{self.nodes[h].name}' do not match shape "
                    f"{self.nodes[h].shape}", h))
        return diags

    def require_valid(self) -> None:
        diags = self.validate()
        if diags:
            raise ValidationFailed(diags)


class GraphBuilder:
    """Single-threaded, append-only constructor for Graph values."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._names: dict[str, int] = {}
        self._private: list[int] = []
        self._params: list[int] = []
        self._outputs: list[int] = []
        self._bounds = BoundsSpec()

    # -- leaves

    def input(self, name: str, shape, bounds=None) -> int:
        h = self._leaf(OpKind.INPUT, name, shape)
        self._private.append(h)
        if bounds is not None:
            self.set_bounds(h, *bounds)
        return h

    def parameter(self, name: str, shape, bounds=None) -> int:
        h = self._leaf(OpKind.PARAMETER, name, shape)
        self._params.append(h)
        if bounds is not None:
            self.set_bounds(h, *bounds)
        return h

    def constant(self, value, name: str | None = None) -> int:
        attrs = normalize_attrs(OpKind.CONSTANT, {"value": value})
        shape = TensorShape(attrs["value"].shape)
        return self._append(OpKind.CONSTANT, (), shape, attrs, name)

    def _leaf(self, kind: OpKind, name: str, shape) -> int:
        if not name:
            raise ValueError(f"{kind.value} nodes require an explicit name")
        return self._append(kind, (), TensorShape.coerce(shape), {}, name)

    # -- generic construction

    def build(self, kind: OpKind | str, inputs: Sequence[int], attrs=None,
              name: str | None = None) -> int:
        kind = OpKind(kind)
        if kind in LEAF_KINDS and kind is not OpKind.CONSTANT:
            raise ArityError(f"{kind.value} nodes are created via input()/parameter()")
        if kind is OpKind.CONSTANT:
            if inputs:
                raise ArityError("Constant takes no inputs")
            return self.constant((attrs or {}).get("value"), name)
        handles = tuple(int(h) for h in inputs)
        if len(handles) != ARITY[kind]:
            raise ArityError(
                f"{kind.value} expects {ARITY[kind]} inputs, got {len(handles)}")
        for h in handles:
            if not 0 <= h < len(self._nodes):
                raise UnknownNode(f"no node with handle {h}")
        norm = normalize_attrs(kind, attrs)
        shape = infer_shape(kind, [self._nodes[h].shape for h in handles], norm)
        return self._append(kind, handles, shape, norm, name)

    def _append(self, kind, inputs, shape, attrs, name) -> int:
        nid = len(self._nodes)
        if name is None:
            name = f"n{nid}"
            while name in self._names:
                name += "_"
        elif name in self._names:
            raise ValueError(f"node name {name!r} already used")
        self._nodes.append(Node(nid, kind, inputs, shape, attrs, name))
        self._names[name] = nid
        return nid

    # -- sugar; numeric arguments are wrapped as constants

    def _coerce(self, h) -> int:
        if isinstance(h, (int, np.integer)):
            return int(h)
        return self.constant(h)

    def add(self, a, b) -> int:
        return self.build(OpKind.ADD, [self._coerce(a), self._coerce(b)])

    def sub(self, a, b) -> int:
        return self.build(OpKind.SUB, [self._coerce(a), self._coerce(b)])

    def mul(self, a, b) -> int:
        return self.build(OpKind.MUL, [self._coerce(a), self._coerce(b)])

    def div(self, a, b) -> int:
        return self.build(OpKind.DIV, [self._coerce(a), self._coerce(b)])

    def neg(self, a) -> int:
        return self.build(OpKind.NEG, [a])

    def matmul(self, a, b, transpose_a=False, transpose_b=False) -> int:
        return self.build(OpKind.MATMUL, [a, b],
                          {"transpose_a": transpose_a, "transpose_b": transpose_b})

    def power(self, a, exponent: float) -> int:
        return self.build(OpKind.POW, [a], {"exponent": exponent})

    def exp(self, a) -> int:
        return self.build(OpKind.EXP, [a])

    def log(self, a) -> int:
        return self.build(OpKind.LOG, [a])

    def sigmoid(self, a) -> int:
        return self.build(OpKind.SIGMOID, [a])

    def reduce_sum(self, a, axis=None) -> int:
        return self.build(OpKind.SUM, [a], {"axis": axis})

    def reduce_mean(self, a, axis=None) -> int:
        return self.build(OpKind.MEAN, [a], {"axis": axis})

    def clip(self, a, lo: float, hi: float) -> int:
        return self.build(OpKind.CLIP, [a], {"lo": lo, "hi": hi})

    def in_interval(self, a, lo: float, hi: float) -> int:
        return self.build(OpKind.IN_INTERVAL, [a], {"lo": lo, "hi": hi})

    def binary_cross_entropy(self, p, t) -> int:
        return self.build(OpKind.BCE, [self._coerce(p), self._coerce(t)])

    # -- finishing

    def set_bounds(self, handle: int, lo, hi) -> None:
        node = self._nodes[handle]
        if node.kind not in (OpKind.INPUT, OpKind.PARAMETER):
            raise ValueError("bounds attach only to Input or Parameter nodes")
        b = Bounds.make(lo, hi)
        if not b.matches(node.shape):
            raise ShapeMismatch(
                f"bounds shape {b.lo.shape} does not match '{node.name}' {node.shape}")
        self._bounds._entries[handle] = b

    def output(self, handle: int) -> int:
        if not 0 <= handle < len(self._nodes):
            raise UnknownNode(f"no node with handle {handle}")
        self._outputs.append(handle)
        return handle

    def graph(self) -> Graph:
        return Graph(
            nodes=tuple(self._nodes),
            private_inputs=tuple(self._private),
            parameters=tuple(self._params),
            outputs=tuple(self._outputs),
            bounds=self._bounds.copy(),
            _names=dict(self._names),
        )


# ---------------------------------------------------------------------------
# optimization passes


def _is_const(nodes: list[Node], h: int, value=None) -> bool:
    n = nodes[h]
    if n.kind is not OpKind.CONSTANT:
        return False
    if value is None:
        return True
    return bool(np.all(n.attrs["value"] == value))


def _identity_rewrite(nodes: list[Node], kind: OpKind, inputs: tuple[int, ...],
                      shape: TensorShape) -> int | None:
    """x+0, 0+x, x-0, x*1, 1*x, x/1, -(-x); only when the result shape is kept."""
    a = inputs[0]
    b = inputs[1] if len(inputs) > 1 else None
    if kind is OpKind.ADD:
        if _is_const(nodes, b, 0.0) and nodes[a].shape == shape:
            return a
        if _is_const(nodes, a, 0.0) and nodes[b].shape == shape:
            return b
    elif kind is OpKind.SUB:
        if _is_const(nodes, b, 0.0) and nodes[a].shape == shape:
            return a
    elif kind is OpKind.MUL:
        if _is_const(nodes, b, 1.0) and nodes[a].shape == shape:
            return a
        if _is_const(nodes, a, 1.0) and nodes[b].shape == shape:
            return b
    elif kind is OpKind.DIV:
        if _is_const(nodes, b, 1.0) and nodes[a].shape == shape:
            return a
    elif kind is OpKind.NEG:
        inner = nodes[a]
        if inner.kind is OpKind.NEG:
            return inner.inputs[0]
    return None


def _rewrite_once(graph: Graph) -> Graph:
    reachable = graph.ancestors(graph.outputs)
    nb = GraphBuilder()
    mapping: dict[int, int] = {}
    memo: dict[tuple, int] = {}

    def intern_constant(value: np.ndarray, name=None) -> int:
        key = (OpKind.CONSTANT, (), attr_key({"value": value}))
        if key in memo:
            return memo[key]
        h = nb.constant(value, name if name not in nb._names else None)
        memo[key] = h
        return h

    for node in graph.nodes:
        keep_leaf = node.kind in (OpKind.INPUT, OpKind.PARAMETER)
        if node.id not in reachable and not keep_leaf:
            continue
        if node.kind is OpKind.INPUT:
            b = graph.bounds.get(node.id)
            mapping[node.id] = nb.input(
                node.name, node.shape, (b.lo, b.hi) if b else None)
            continue
        if node.kind is OpKind.PARAMETER:
            b = graph.bounds.get(node.id)
            mapping[node.id] = nb.parameter(
                node.name, node.shape, (b.lo, b.hi) if b else None)
            continue
        if node.kind is OpKind.CONSTANT:
            mapping[node.id] = intern_constant(node.attrs["value"], node.name)
            continue

        new_inputs = tuple(mapping[i] for i in node.inputs)

        if all(nb._nodes[h].kind is OpKind.CONSTANT for h in new_inputs):
            values = [nb._nodes[h].attrs["value"] for h in new_inputs]
            folded = apply_kind(node.kind, node.attrs, *values)
            if np.all(np.isfinite(folded)):
                mapping[node.id] = intern_constant(folded)
                continue

        rewritten = _identity_rewrite(nb._nodes, node.kind, new_inputs, node.shape)
        if rewritten is not None:
            mapping[node.id] = rewritten
            continue

        key = (node.kind, new_inputs, attr_key(node.attrs))
        if key in memo:
            mapping[node.id] = memo[key]
            continue
        name = node.name if node.name not in nb._names else None
        h = nb.build(node.kind, new_inputs, node.attrs, name)
        memo[key] = h
        mapping[node.id] = h

    for out in graph.outputs:
        nb.output(mapping[out])
    return nb.graph()


def _structure_key(graph: Graph) -> tuple:
    return (
        tuple((n.kind, n.inputs, attr_key(n.attrs)) for n in graph.nodes),
        graph.outputs,
    )


def optimize(graph: Graph) -> Graph:
    """Constant folding, algebraic identity removal, CSE, dead-code removal.

    Returns a semantics-equivalent graph; Input and Parameter nodes are always
    retained so the optimized graph binds the same runtime inputs.
    """
    current = graph
    key = None
    for _ in range(16):
        rewritten = _rewrite_once(current)
        new_key = _structure_key(rewritten)
        if new_key == key:
            return rewritten
        current, key = rewritten, new_key
    return current
