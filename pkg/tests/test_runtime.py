import threading
import time

import numpy as np
import pytest

from dpgraph import (
    GraphBuilder,
    MissingInput,
    NumericalError,
    ShapeMismatch,
    ValidationFailed,
)
from dpgraph.models import mlp_classifier
from dpgraph import runtime

from conftest import random_graph, ref_eval, sample_inputs


def _affine():
    b = GraphBuilder()
    x = b.input("x", (), bounds=(0.0, 1.0))
    b.output(b.mul(b.constant(3.0), x))
    return b.graph()


def test_compile_twice_same_fingerprint_and_faster():
    g = _affine()
    runtime.clear_cache()
    t0 = time.perf_counter()
    p1 = runtime.compile(g)
    cold = time.perf_counter() - t0

    cached_times = []
    for _ in range(20):
        t0 = time.perf_counter()
        p2 = runtime.compile(g)
        cached_times.append(time.perf_counter() - t0)
    assert p2.fingerprint == p1.fingerprint
    assert p2 is p1
    assert cold >= 5 * sorted(cached_times)[len(cached_times) // 2]


def test_fingerprint_ignores_construction_order():
    def build(sigmoid_first: bool):
        b = GraphBuilder()
        x = b.input("x", (), bounds=(0.0, 1.0))
        y = b.input("y", (), bounds=(0.0, 1.0))
        if sigmoid_first:
            s = b.sigmoid(x)
            e = b.exp(y)
        else:
            e = b.exp(y)
            s = b.sigmoid(x)
        b.output(b.add(s, e))
        return b.graph()

    runtime.clear_cache()
    assert runtime.compile(build(True)).fingerprint == \
        runtime.compile(build(False)).fingerprint


def test_fingerprint_tracks_bounds():
    def build(hi):
        b = GraphBuilder()
        x = b.input("x", (), bounds=(0.0, hi))
        b.output(b.sigmoid(x))
        return b.graph()

    assert runtime.compile(build(1.0)).fingerprint != \
        runtime.compile(build(2.0)).fingerprint


def test_cached_and_cold_compiles_agree(rng):
    g = mlp_classifier(3)
    runtime.clear_cache()
    cached = runtime.compile(g)
    cached_again = runtime.compile(g)
    cold = runtime.compile(g, use_cache=False)
    assert cached_again is cached
    assert cold is not cached
    assert cold.fingerprint == cached.fingerprint
    x = sample_inputs(g, rng)
    for a, b in zip(runtime.execute(cached, x), runtime.execute(cold, x)):
        assert np.array_equal(a, b)


def test_compile_invalid_graph():
    b = GraphBuilder()
    b.input("x", ())
    g = b.graph()
    with pytest.raises(ValidationFailed) as err:
        runtime.compile(g)
    assert any(d.code == "no-outputs" for d in err.value.diagnostics)


def test_identity_graph_roundtrips_input():
    b = GraphBuilder()
    x = b.input("x", (3, 1), bounds=(0.0, 1.0))
    b.output(x)
    program = runtime.compile(b.graph())
    data = np.array([[0.1], [0.2], [0.3]])
    (out,) = runtime.execute(program, {"x": data})
    np.testing.assert_array_equal(out, data)


def test_mlp_zero_point_closed_form():
    g = mlp_classifier(4)
    program = runtime.compile(g)
    inputs = {g.nodes[h].name: np.zeros(g.nodes[h].shape.dims) for h in g.leaves()}
    inputs["t"] = np.ones((4, 1))
    (loss,) = runtime.execute(program, inputs)
    assert loss == pytest.approx(-np.log(0.5), abs=1e-12)


def test_differential_against_reference_interpreter(rng):
    for _ in range(100):
        g = random_graph(rng)
        program = runtime.compile(g)
        x = sample_inputs(g, rng)
        got = runtime.execute(program, x)
        want = ref_eval(g, x)
        for a, b in zip(got, want):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_missing_input():
    program = runtime.compile(_affine())
    with pytest.raises(MissingInput):
        runtime.execute(program, {})


def test_shape_mismatch():
    program = runtime.compile(_affine())
    with pytest.raises(ShapeMismatch):
        runtime.execute(program, {"x": np.zeros((2, 2))})


def test_numerical_error_names_node():
    b = GraphBuilder()
    x = b.input("x", (), bounds=(-10.0, 10.0))
    b.output(b.build("Log", [x], name="badlog"))
    program = runtime.compile(b.graph())
    with pytest.raises(NumericalError) as err:
        runtime.execute(program, {"x": -1.0})
    assert "badlog" in str(err.value)


def test_execution_is_deterministic(rng):
    g = mlp_classifier(3)
    program = runtime.compile(g)
    x = sample_inputs(g, rng)
    a = runtime.execute(program, x)
    b = runtime.execute(program, x)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_inputs_never_mutated(rng):
    g = mlp_classifier(3)
    program = runtime.compile(g)
    x = sample_inputs(g, rng)
    copies = {k: v.copy() for k, v in x.items()}
    runtime.execute(program, x)
    for k in x:
        assert np.array_equal(x[k], copies[k])


def test_concurrent_execution(rng):
    g = mlp_classifier(3)
    program = runtime.compile(g)
    x = sample_inputs(g, rng)
    expected = runtime.execute(program, x)
    results = [None] * 8

    def worker(i):
        results[i] = runtime.execute(program, x)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for r in results:
        assert np.array_equal(r[0], expected[0])


def test_benchmark_records_and_csv(tmp_path):
    records = runtime.benchmark([4, 8, 16], repetitions=5)
    assert [r.width for r in records] == [4, 8, 16]
    counts = [r.param_count for r in records]
    assert counts == sorted(counts) and counts[0] < counts[-1]
    out = tmp_path / "bench.csv"
    runtime.write_bench_csv(records, out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "width,param_count,compile_s,compile_cached_s,exec_us"
    assert len(lines) == 4
