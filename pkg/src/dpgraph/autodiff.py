"""Reverse-mode differentiation: graphs that compute explicit Jacobian matrices.

`jacobian` transforms a graph into a new graph whose single output is the
flattened Jacobian of all outputs with respect to the chosen Input/Parameter
nodes. The transform is purely structural, so the result is itself a graph:
it can be optimized, compiled, interval-propagated, and differentiated again
(`higher_order`).

Each scalar output element gets one backward pass over a shared forward copy;
the duplicated forward work is undone by common-subexpression elimination
when the result is optimized. Derivative rules are registered per node kind
in `VJP_RULES`, so a new operation only needs a table entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonDifferentiable
from .graph import (
    BCE_CLAMP,
    Graph,
    GraphBuilder,
    OpKind,
    TensorShape,
    optimize,
)


@dataclass(frozen=True, eq=False)
class JacobianGraph:
    """Graph whose output is the (output_size, wrt_size) Jacobian matrix."""

    graph: Graph
    wrt: tuple[int, ...]
    wrt_names: tuple[str, ...]
    source: Graph
    output_size: int
    wrt_size: int


def _one_hot(shape: TensorShape, flat_index: int) -> np.ndarray:
    v = np.zeros(shape.dims)
    v.reshape(-1)[flat_index] = 1.0
    return v


def _reduce_like(nb: GraphBuilder, cot: int, target: TensorShape) -> int:
    """Collapse a cotangent to the shape of a scalar-broadcast operand."""
    if nb._nodes[cot].shape == target:
        return cot
    return nb.reduce_sum(cot, axis=None)


def _shape(nb: GraphBuilder, h: int) -> TensorShape:
    return nb._nodes[h].shape


# Each rule receives the builder for the new graph, the original node, its
# already-copied input handles, and the adjoint handle (same shape as the
# node). It returns one cotangent handle per input; None means identically
# zero.


def _vjp_add(nb, node, ins, adj):
    a, b = ins
    return [_reduce_like(nb, adj, _shape(nb, a)),
            _reduce_like(nb, adj, _shape(nb, b))]


def _vjp_sub(nb, node, ins, adj):
    a, b = ins
    return [_reduce_like(nb, adj, _shape(nb, a)),
            _reduce_like(nb, nb.neg(adj), _shape(nb, b))]


def _vjp_mul(nb, node, ins, adj):
    a, b = ins
    return [_reduce_like(nb, nb.mul(adj, b), _shape(nb, a)),
            _reduce_like(nb, nb.mul(adj, a), _shape(nb, b))]


def _vjp_div(nb, node, ins, adj):
    a, b = ins
    da = nb.div(adj, b)
    db = nb.neg(nb.div(nb.mul(adj, a), nb.mul(b, b)))
    return [_reduce_like(nb, da, _shape(nb, a)),
            _reduce_like(nb, db, _shape(nb, b))]


def _vjp_neg(nb, node, ins, adj):
    return [nb.neg(adj)]


def _vjp_matmul(nb, node, ins, adj):
    a, b = ins
    ta = node.attrs["transpose_a"]
    tb = node.attrs["transpose_b"]
    if not ta:
        da = nb.matmul(adj, b, transpose_b=not tb)
    else:
        da = nb.matmul(b, adj, transpose_a=tb, transpose_b=True)
    if not tb:
        db = nb.matmul(a, adj, transpose_a=not ta)
    else:
        db = nb.matmul(adj, a, transpose_a=True, transpose_b=ta)
    return [da, db]


def _vjp_pow(nb, node, ins, adj):
    (x,) = ins
    p = node.attrs["exponent"]
    if p == 0.0:
        return [None]
    return [nb.mul(adj, nb.mul(nb.constant(p), nb.power(x, p - 1.0)))]


def _vjp_exp(nb, node, ins, adj):
    (x,) = ins
    return [nb.mul(adj, nb.exp(x))]


def _vjp_log(nb, node, ins, adj):
    (x,) = ins
    return [nb.div(adj, x)]


def _vjp_sigmoid(nb, node, ins, adj):
    (x,) = ins
    s = nb.sigmoid(x)
    return [nb.mul(adj, nb.mul(s, nb.sub(nb.constant(1.0), s)))]


def _vjp_reduce(nb, node, ins, adj):
    (x,) = ins
    x_shape = _shape(nb, x)
    axis = node.attrs["axis"]
    count = x_shape.num_elements if axis is None else x_shape.dims[axis]
    scale = 1.0 / count if node.kind is OpKind.MEAN else None
    if axis is None:
        ones = np.full(x_shape.dims, 1.0 if scale is None else scale)
        return [nb.mul(adj, nb.constant(ones))]
    m, n = x_shape.dims
    if axis == 0:
        spread = nb.matmul(nb.constant(np.ones((m, 1))), adj)
    else:
        spread = nb.matmul(adj, nb.constant(np.ones((1, n))))
    if scale is not None:
        spread = nb.mul(spread, nb.constant(scale))
    return [spread]


def _vjp_clip(nb, node, ins, adj):
    (x,) = ins
    mask = nb.in_interval(x, node.attrs["lo"], node.attrs["hi"])
    return [nb.mul(adj, mask)]


def _vjp_in_interval(nb, node, ins, adj):
    return [None]  # piecewise constant


def _vjp_bce(nb, node, ins, adj):
    p, t = ins
    p_shape, t_shape = _shape(nb, p), _shape(nb, t)
    term_shape = t_shape if p_shape.rank == 0 else p_shape
    count = term_shape.num_elements
    pc = nb.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    one = nb.constant(1.0)
    # fused stable form (pc - t) / (pc (1 - pc)), zero outside the clamp band
    ratio = nb.div(nb.sub(pc, t), nb.mul(pc, nb.sub(one, pc)))
    band = nb.in_interval(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    dp = nb.mul(adj, nb.mul(nb.constant(1.0 / count), nb.mul(ratio, band)))
    dt = nb.mul(adj, nb.mul(nb.constant(1.0 / count),
                            nb.sub(nb.log(nb.sub(one, pc)), nb.log(pc))))
    return [_reduce_like(nb, dp, p_shape), _reduce_like(nb, dt, t_shape)]


VJP_RULES = {
    OpKind.ADD: _vjp_add,
    OpKind.SUB: _vjp_sub,
    OpKind.MUL: _vjp_mul,
    OpKind.DIV: _vjp_div,
    OpKind.NEG: _vjp_neg,
    OpKind.MATMUL: _vjp_matmul,
    OpKind.POW: _vjp_pow,
    OpKind.EXP: _vjp_exp,
    OpKind.LOG: _vjp_log,
    OpKind.SIGMOID: _vjp_sigmoid,
    OpKind.SUM: _vjp_reduce,
    OpKind.MEAN: _vjp_reduce,
    OpKind.CLIP: _vjp_clip,
    OpKind.IN_INTERVAL: _vjp_in_interval,
    OpKind.BCE: _vjp_bce,
}


def _descendants(graph: Graph, roots: set[int]) -> set[int]:
    out = set(roots)
    for node in graph.nodes:
        if any(i in out for i in node.inputs):
            out.add(node.id)
    return out


def jacobian(graph: Graph, wrt) -> JacobianGraph:
    """Build the graph computing the full Jacobian of outputs w.r.t. `wrt`.

    `wrt` is an ordered list of Input/Parameter handles of `graph`. The
    returned graph keeps every leaf of the source (same names, roles, and
    bounds) and has a single (output_size, wrt_size) matrix output.
    """
    graph.require_valid()
    wrt = tuple(int(h) for h in wrt)
    if not wrt:
        raise NonDifferentiable("empty differentiation target list")
    for h in wrt:
        node = graph.node(h)
        if node.kind not in (OpKind.INPUT, OpKind.PARAMETER):
            raise NonDifferentiable(
                f"'{node.name}' is not an Input or Parameter node")
    for node in graph.nodes:
        if node.kind not in VJP_RULES and node.kind not in (
                OpKind.INPUT, OpKind.PARAMETER, OpKind.CONSTANT):
            raise NonDifferentiable(f"no derivative rule for {node.kind.value}")

    nb = GraphBuilder()
    mapping: dict[int, int] = {}
    reachable = graph.ancestors(graph.outputs)
    for node in graph.nodes:
        if node.kind is OpKind.INPUT:
            b = graph.bounds.get(node.id)
            mapping[node.id] = nb.input(node.name, node.shape,
                                        (b.lo, b.hi) if b else None)
        elif node.kind is OpKind.PARAMETER:
            b = graph.bounds.get(node.id)
            mapping[node.id] = nb.parameter(node.name, node.shape,
                                            (b.lo, b.hi) if b else None)
        elif node.id in reachable:
            if node.kind is OpKind.CONSTANT:
                mapping[node.id] = nb.constant(node.attrs["value"])
            else:
                mapping[node.id] = nb.build(
                    node.kind, [mapping[i] for i in node.inputs], node.attrs)

    wrt_set = set(wrt)
    active = _descendants(graph, wrt_set)

    out_sizes = [graph.nodes[h].shape.num_elements for h in graph.outputs]
    n_rows = sum(out_sizes)
    col_offsets = {}
    col = 0
    for h in wrt:
        col_offsets[h] = col
        col += graph.nodes[h].shape.num_elements
    n_cols = col

    contributions: list[int] = []
    row = 0
    for out_h in graph.outputs:
        out_node = graph.nodes[out_h]
        backward_order = [n for n in reversed(graph.nodes)
                          if n.id in reachable and
                          (n.id in active or n.id == out_h)]
        for element in range(out_node.shape.num_elements):
            adjoint: dict[int, int] = {
                out_h: nb.constant(_one_hot(out_node.shape, element))
            }
            for node in backward_order:
                adj = adjoint.get(node.id)
                if adj is None or node.kind in (
                        OpKind.INPUT, OpKind.PARAMETER, OpKind.CONSTANT):
                    continue
                new_ins = tuple(mapping[i] for i in node.inputs)
                cots = VJP_RULES[node.kind](nb, node, new_ins, adj)
                for src, cot in zip(node.inputs, cots):
                    if cot is None or src not in active:
                        continue
                    if src in adjoint:
                        adjoint[src] = nb.add(adjoint[src], cot)
                    else:
                        adjoint[src] = cot

            for h in wrt:
                grad = adjoint.get(h)
                if grad is None:
                    continue
                w_shape = graph.nodes[h].shape
                for flat in range(w_shape.num_elements):
                    if w_shape.rank == 0:
                        entry = grad
                    else:
                        mask = nb.constant(_one_hot(w_shape, flat))
                        entry = nb.reduce_sum(nb.mul(grad, mask), axis=None)
                    basis = np.zeros((n_rows, n_cols))
                    basis[row, col_offsets[h] + flat] = 1.0
                    contributions.append(nb.mul(entry, nb.constant(basis)))
            row += 1

    if contributions:
        total = contributions[0]
        for c in contributions[1:]:
            total = nb.add(total, c)
    else:
        total = nb.constant(np.zeros((n_rows, n_cols)))
    nb.output(total)

    result = optimize(nb.graph())
    return JacobianGraph(
        graph=result,
        wrt=wrt,
        wrt_names=tuple(graph.nodes[h].name for h in wrt),
        source=graph,
        output_size=n_rows,
        wrt_size=n_cols,
    )


def higher_order(graph: Graph, wrt, order: int) -> JacobianGraph:
    """Iterate `jacobian` `order` times; order 1 is exactly `jacobian`."""
    if order < 1:
        raise ValueError("order must be >= 1")
    jg = jacobian(graph, wrt)
    for _ in range(order - 1):
        handles = [jg.graph.find(name) for name in jg.wrt_names]
        nxt = jacobian(jg.graph, handles)
        jg = JacobianGraph(
            graph=nxt.graph,
            wrt=jg.wrt,
            wrt_names=jg.wrt_names,
            source=graph,
            output_size=nxt.output_size,
            wrt_size=nxt.wrt_size,
        )
    return jg
