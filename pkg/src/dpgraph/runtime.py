"""Compilation of graphs to linear register programs, execution, benchmarks.

Compilation runs the optimizer, linearizes the surviving nodes, and assigns
tensor slots with last-use reuse. Programs are cached under two content keys:
the canonical hash of the graph as given and the hash of its optimized form
(the program fingerprint), so recompiling an identical graph is a lookup.
"""

from __future__ import annotations

import csv
import hashlib
import statistics
import threading
import time
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .errors import (
    MissingInput,
    NumericalError,
    ShapeMismatch,
    UnknownNode,
    ValidationFailed,
)
from .graph import (
    KERNELS,
    Graph,
    OpKind,
    TensorShape,
    attr_key,
    optimize,
)


def content_hash(graph: Graph) -> str:
    """Content hash of a graph, insensitive to construction order.

    Interior node names never enter the hash; Input/Parameter names, shapes,
    and bounds do, because they are the binding surface of the program.
    """
    memo: dict[int, str] = {}

    def visit(h: int) -> str:
        if h in memo:
            return memo[h]
        node = graph.nodes[h]
        parts: list[str] = [node.kind.value]
        if node.kind in (OpKind.INPUT, OpKind.PARAMETER):
            parts += [node.name, str(node.shape)]
            b = graph.bounds.get(h)
            if b is not None:
                parts += [b.lo.tobytes().hex(), b.hi.tobytes().hex()]
        elif node.kind is OpKind.CONSTANT:
            v = node.attrs["value"]
            parts += [str(node.shape), v.tobytes().hex()]
        else:
            parts.append(repr(attr_key(node.attrs)))
            parts += [visit(i) for i in node.inputs]
        digest = hashlib.sha256("|".join(parts).encode()).hexdigest()
        memo[h] = digest
        return digest

    out_digests = [visit(h) for h in graph.outputs]
    leaf_digests = sorted(visit(h) for h in graph.leaves())
    top = "graph|" + "|".join(out_digests) + "#" + "|".join(leaf_digests)
    return hashlib.sha256(top.encode()).hexdigest()


@dataclass(frozen=True)
class Instruction:
    kind: OpKind
    attrs: Mapping[str, Any]
    in_slots: tuple[int, ...]
    out_slot: int
    label: str


@dataclass(frozen=True, eq=False)
class CompiledProgram:
    plan: tuple[Instruction, ...]
    fingerprint: str
    source_graph: Graph
    optimized_graph: Graph
    compile_time: float
    n_slots: int
    const_loads: tuple[tuple[int, np.ndarray], ...]
    input_slots: Mapping[str, tuple[int | None, TensorShape]]
    output_slots: tuple[int, ...]
    output_names: tuple[str, ...]

    @property
    def param_count(self) -> int:
        g = self.optimized_graph
        return sum(g.nodes[h].shape.num_elements for h in g.parameters)


_CACHE: dict[str, CompiledProgram] = {}
_CACHE_LOCK = threading.Lock()


def clear_cache() -> None:
    with _CACHE_LOCK:
        _CACHE.clear()


def _linearize(source: Graph, opt: Graph, fingerprint: str, t0: float) -> CompiledProgram:
    reachable = opt.ancestors(opt.outputs)
    outputs = set(opt.outputs)

    n_slots = 0

    def new_slot() -> int:
        nonlocal n_slots
        n_slots += 1
        return n_slots - 1

    slot_of: dict[int, int] = {}
    const_loads: list[tuple[int, np.ndarray]] = []
    input_slots: dict[str, tuple[int | None, TensorShape]] = {}

    for h in opt.leaves():
        node = opt.nodes[h]
        slot = new_slot() if h in reachable else None
        input_slots[node.name] = (slot, node.shape)
        if slot is not None:
            slot_of[h] = slot
    for node in opt.nodes:
        if node.kind is OpKind.CONSTANT and node.id in reachable:
            slot = new_slot()
            slot_of[node.id] = slot
            const_loads.append((slot, node.attrs["value"]))

    interior = [n for n in opt.nodes if n.kind not in
                (OpKind.INPUT, OpKind.PARAMETER, OpKind.CONSTANT)
                and n.id in reachable]
    last_use: dict[int, int] = {}
    for pos, node in enumerate(interior):
        for i in node.inputs:
            last_use[i] = pos

    free: list[int] = []
    plan: list[Instruction] = []
    for pos, node in enumerate(interior):
        in_slots = tuple(slot_of[i] for i in node.inputs)
        for i in set(node.inputs):
            n_i = opt.nodes[i]
            reusable = (n_i.kind not in (OpKind.INPUT, OpKind.PARAMETER, OpKind.CONSTANT)
                        and i not in outputs and last_use.get(i) == pos)
            if reusable:
                free.append(slot_of[i])
        out_slot = free.pop() if free else new_slot()
        slot_of[node.id] = out_slot
        plan.append(Instruction(node.kind, node.attrs, in_slots, out_slot, node.name))

    output_slots = tuple(slot_of[h] for h in opt.outputs)
    output_names = tuple(opt.nodes[h].name for h in opt.outputs)
    return CompiledProgram(
        plan=tuple(plan),
        fingerprint=fingerprint,
        source_graph=source,
        optimized_graph=opt,
        compile_time=time.perf_counter() - t0,
        n_slots=n_slots,
        const_loads=tuple(const_loads),
        input_slots=input_slots,
        output_slots=output_slots,
        output_names=output_names,
    )


def compile(graph: Graph, use_cache: bool = True) -> CompiledProgram:
    """Compile a graph to an executable program; identical graphs hit the cache."""
    t0 = time.perf_counter()
    raw_key = content_hash(graph)
    if use_cache:
        with _CACHE_LOCK:
            hit = _CACHE.get(raw_key)
        if hit is not None:
            return hit
    diags = graph.validate()
    if diags:
        raise ValidationFailed(diags)
    opt = optimize(graph)
    fingerprint = content_hash(opt)
    program = None
    if use_cache:
        with _CACHE_LOCK:
            program = _CACHE.get(fingerprint)
    if program is None:
        program = _linearize(graph, opt, fingerprint, t0)
    if use_cache:
        with _CACHE_LOCK:
            _CACHE[raw_key] = program
            _CACHE[fingerprint] = program
    return program


def graph_fingerprint(graph: Graph) -> str:
    """Fingerprint of the optimized form of a graph."""
    return compile(graph).fingerprint


def execute(program: CompiledProgram, inputs: Mapping[str, Any]) -> list[np.ndarray]:
    """Run a compiled program; returns one array per declared output.

    Inputs are bound by tensor name and are never mutated. Every declared
    Input/Parameter must be supplied, even ones the outputs do not depend on.
    """
    unknown = set(inputs) - set(program.input_slots)
    if unknown:
        raise UnknownNode(f"no declared input named {sorted(unknown)[0]!r}")

    regs: list[Any] = [None] * program.n_slots
    for slot, value in program.const_loads:
        regs[slot] = value
    for name, (slot, shape) in program.input_slots.items():
        if name not in inputs:
            raise MissingInput(f"missing value for input '{name}'")
        arr = np.asarray(inputs[name], dtype=np.float64)
        if arr.shape != shape.dims:
            raise ShapeMismatch(
                f"input '{name}' expects shape {shape}, got {arr.shape}")
        if slot is not None:
            regs[slot] = arr

    with np.errstate(all="ignore"):
        for instr in program.plan:
            operands = [regs[s] for s in instr.in_slots]
            out = KERNELS[instr.kind](instr.attrs, *operands)
            if not np.all(np.isfinite(out)):
                raise NumericalError(
                    f"non-finite value produced at node '{instr.label}' "
                    f"({instr.kind.value})")
            regs[instr.out_slot] = out

    return [np.array(regs[s]) for s in program.output_slots]


# ---------------------------------------------------------------------------
# benchmark harness

BENCH_CSV_FIELDS = ("width", "param_count", "compile_s", "compile_cached_s", "exec_us")


@dataclass(frozen=True)
class BenchRecord:
    width: int
    param_count: int
    compile_s: float
    compile_cached_s: float
    exec_us: float


def benchmark(widths, repetitions: int = 100, seed: int = 0) -> list[BenchRecord]:
    """Measure cold compile, cached compile, and median execution time.

    Each width instantiates the classifier architecture used throughout the
    test-suite (four sigmoid layers plus cross-entropy) at that layer width.
    """
    from .models import mlp_classifier

    rng = np.random.default_rng(seed)
    records = []
    for width in widths:
        g = mlp_classifier(int(width))
        clear_cache()
        t0 = time.perf_counter()
        program = compile(g)
        cold = time.perf_counter() - t0

        cached_times = []
        for _ in range(10):
            t0 = time.perf_counter()
            compile(g)
            cached_times.append(time.perf_counter() - t0)
        cached = statistics.median(cached_times)

        inputs = {}
        for h in g.leaves():
            node = g.nodes[h]
            b = g.bounds.get(h)
            lo, hi = b.broadcast_to(node.shape)
            inputs[node.name] = rng.uniform(lo, hi)
        execute(program, inputs)  # warm-up
        times = []
        for _ in range(max(1, repetitions)):
            t0 = time.perf_counter()
            execute(program, inputs)
            times.append(time.perf_counter() - t0)
        records.append(BenchRecord(
            width=int(width),
            param_count=program.param_count,
            compile_s=cold,
            compile_cached_s=cached,
            exec_us=statistics.median(times) * 1e6,
        ))
    return records


def write_bench_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_CSV_FIELDS)
        for r in records:
            writer.writerow([r.width, r.param_count, f"{r.compile_s:.6f}",
                             f"{r.compile_cached_s:.6f}", f"{r.exec_us:.3f}"])
