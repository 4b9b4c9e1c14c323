"""Interval arithmetic over graphs and the interval-propagation sensitivity baseline.

Propagation applies the textbook interval rules node by node. Occurrences of
the same variable are treated independently on purpose (x - x over [-1, 1]
yields [-2, 2]); this dependency looseness is the known weakness of the
baseline and it is preserved, not patched.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .autodiff import jacobian
from .errors import DomainError, ValidationFailed
from .graph import BCE_CLAMP, BoundsSpec, Diagnostic, Graph, OpKind
from .report import SensitivityReport


@dataclass(frozen=True)
class IntervalTensor:
    """Elementwise enclosure [lo, hi] for one tensor."""

    lo: np.ndarray
    hi: np.ndarray

    @property
    def diverged(self) -> bool:
        """True when an operation provably escaped to an infinite endpoint."""
        return not (np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi)))


def _iv(lo, hi) -> IntervalTensor:
    return IntervalTensor(np.asarray(lo, dtype=np.float64),
                          np.asarray(hi, dtype=np.float64))


def _mul(a: IntervalTensor, b: IntervalTensor) -> IntervalTensor:
    cands = np.stack(np.broadcast_arrays(
        a.lo * b.lo, a.lo * b.hi, a.hi * b.lo, a.hi * b.hi))
    return _iv(cands.min(axis=0), cands.max(axis=0))


def _add(a, b):
    return _iv(a.lo + b.lo, a.hi + b.hi)


def _sub(a, b):
    return _iv(a.lo - b.hi, a.hi - b.lo)


def _neg(a):
    return _iv(-a.hi, -a.lo)


def _scalar(value) -> IntervalTensor:
    v = np.asarray(value, dtype=np.float64)
    return _iv(v, v)


def _matmul(a: IntervalTensor, b: IntervalTensor, attrs) -> IntervalTensor:
    al, ah = a.lo, a.hi
    bl, bh = b.lo, b.hi
    if attrs["transpose_a"]:
        al, ah = al.T, ah.T
    if attrs["transpose_b"]:
        bl, bh = bl.T, bh.T
    # exact interval product: extreme of the four endpoint products per term
    p = np.stack([
        al[:, :, None] * bl[None, :, :],
        al[:, :, None] * bh[None, :, :],
        ah[:, :, None] * bl[None, :, :],
        ah[:, :, None] * bh[None, :, :],
    ])
    return _iv(p.min(axis=0).sum(axis=1), p.max(axis=0).sum(axis=1))


def _pow(a: IntervalTensor, exponent: float, node_name: str) -> IntervalTensor:
    p = exponent
    if p == 0.0:
        return _iv(np.ones_like(a.lo), np.ones_like(a.hi))
    if p != int(p) or p < 0:
        if np.any(a.lo < 0):
            raise DomainError(
                f"Pow exponent {p} needs a nonnegative base at node '{node_name}'")
        if p < 0 and np.any(a.lo <= 0):
            raise DomainError(
                f"Pow exponent {p} has a pole at 0 inside node '{node_name}'")
        lo, hi = (a.lo ** p, a.hi ** p) if p > 0 else (a.hi ** p, a.lo ** p)
        return _iv(lo, hi)
    n = int(p)
    if n % 2 == 1:
        return _iv(a.lo ** n, a.hi ** n)
    straddles = (a.lo < 0) & (a.hi > 0)
    lo_cand = np.minimum(a.lo ** n, a.hi ** n)
    lo = np.where(straddles, 0.0, lo_cand)
    hi = np.maximum(a.lo ** n, a.hi ** n)
    return _iv(lo, hi)


def _log(a: IntervalTensor, node_name: str) -> IntervalTensor:
    if np.any(a.lo < 0):
        raise DomainError(f"Log of an interval with negative values at node "
                          f"'{node_name}'")
    with np.errstate(divide="ignore"):
        return _iv(np.log(a.lo), np.log(a.hi))


def _div(a: IntervalTensor, b: IntervalTensor, node_name: str) -> IntervalTensor:
    blo, bhi = np.broadcast_arrays(b.lo, b.hi)
    if np.any((blo <= 0) & (bhi >= 0)):
        raise DomainError(f"Div by an interval containing 0 at node '{node_name}'")
    recip = _iv(1.0 / bhi, 1.0 / blo)
    return _mul(a, recip)


def _reduce(a: IntervalTensor, attrs, mean: bool) -> IntervalTensor:
    axis = attrs["axis"]
    fn = np.mean if mean else np.sum
    if axis is None:
        return _iv(fn(a.lo), fn(a.hi))
    return _iv(fn(a.lo, axis=axis, keepdims=True),
               fn(a.hi, axis=axis, keepdims=True))


def _clip_iv(a: IntervalTensor, lo: float, hi: float) -> IntervalTensor:
    return _iv(np.clip(a.lo, lo, hi), np.clip(a.hi, lo, hi))


def _in_interval(a: IntervalTensor, lo: float, hi: float) -> IntervalTensor:
    inside = (a.lo >= lo) & (a.hi <= hi)
    outside = (a.hi < lo) | (a.lo > hi)
    return _iv(np.where(inside, 1.0, 0.0), np.where(outside, 0.0, 1.0))


def _bce(p: IntervalTensor, t: IntervalTensor) -> IntervalTensor:
    pc = _clip_iv(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    log_p = _iv(np.log(pc.lo), np.log(pc.hi))
    one_minus = _sub(_scalar(1.0), pc)
    log_q = _iv(np.log(one_minus.lo), np.log(one_minus.hi))
    term = _neg(_add(_mul(t, log_p), _mul(_sub(_scalar(1.0), t), log_q)))
    return _iv(np.mean(term.lo), np.mean(term.hi))


def propagate(graph: Graph, bounds: BoundsSpec | None = None) -> dict[int, IntervalTensor]:
    """Sound enclosures for every node reachable from the outputs.

    Every Input/Parameter feeding an output must carry bounds. Division and
    Log raise DomainError when their operand interval reaches a pole.
    """
    bounds = bounds if bounds is not None else graph.bounds
    reachable = graph.ancestors(graph.outputs)
    result: dict[int, IntervalTensor] = {}
    missing = []
    for node in graph.nodes:
        if node.id not in reachable:
            continue
        k = node.kind
        if k in (OpKind.INPUT, OpKind.PARAMETER):
            b = bounds.get(node.id)
            if b is None:
                missing.append(node)
                continue
            lo, hi = b.broadcast_to(node.shape)
            result[node.id] = _iv(lo, hi)
            continue
        if missing:
            continue
        ins = [result[i] for i in node.inputs]
        if k is OpKind.CONSTANT:
            out = _scalar(node.attrs["value"])
        elif k is OpKind.ADD:
            out = _add(*ins)
        elif k is OpKind.SUB:
            out = _sub(*ins)
        elif k is OpKind.MUL:
            out = _mul(*ins)
        elif k is OpKind.DIV:
            out = _div(ins[0], ins[1], node.name)
        elif k is OpKind.NEG:
            out = _neg(ins[0])
        elif k is OpKind.MATMUL:
            out = _matmul(ins[0], ins[1], node.attrs)
        elif k is OpKind.POW:
            out = _pow(ins[0], node.attrs["exponent"], node.name)
        elif k is OpKind.EXP:
            out = _iv(np.exp(ins[0].lo), np.exp(ins[0].hi))
        elif k is OpKind.LOG:
            out = _log(ins[0], node.name)
        elif k is OpKind.SIGMOID:
            out = _iv(expit(ins[0].lo), expit(ins[0].hi))
        elif k is OpKind.SUM:
            out = _reduce(ins[0], node.attrs, mean=False)
        elif k is OpKind.MEAN:
            out = _reduce(ins[0], node.attrs, mean=True)
        elif k is OpKind.CLIP:
            out = _clip_iv(ins[0], node.attrs["lo"], node.attrs["hi"])
        elif k is OpKind.IN_INTERVAL:
            out = _in_interval(ins[0], node.attrs["lo"], node.attrs["hi"])
        elif k is OpKind.BCE:
            out = _bce(ins[0], ins[1])
        else:  # pragma: no cover
            raise DomainError(f"no interval rule for {k.value}")
        result[node.id] = out
    if missing:
        raise ValidationFailed([
            Diagnostic("missing-bounds",
                       f"missing bounds on '{n.name}' (#{n.id})", n.id)
            for n in missing])
    return result


def ibp_sensitivity(graph: Graph, wrt=None, bounds: BoundsSpec | None = None) -> SensitivityReport:
    """Frobenius-dominated spectral bound from intervals on the Jacobian graph.

    The report interval is [0, U] with U = sqrt(sum of max(|lo|, |hi|)^2) over
    the Jacobian entries; U is a sound (certified) upper bound of the true
    supremum, and usually a loose one.
    """
    from .runtime import graph_fingerprint

    t0 = time.perf_counter()
    if bounds is not None:
        graph = replace(graph, bounds=bounds)
    fingerprint = graph_fingerprint(graph)
    if wrt is None:
        wrt = list(graph.private_inputs) or list(graph.leaves())
    jg = jacobian(graph, wrt)
    enclosures = propagate(jg.graph)
    out = enclosures[jg.graph.outputs[0]]
    magnitude = np.maximum(np.abs(out.lo), np.abs(out.hi))
    bound = float(np.sqrt(np.sum(magnitude ** 2)))
    return SensitivityReport(
        method="ibp",
        bound=bound,
        interval_low=0.0,
        certified=True,
        argmax=None,
        wall_time=time.perf_counter() - t0,
        fingerprint=fingerprint,
    )
