"""Loading and saving the JSON model format.

Schema (all field names exact, unknown keys rejected):

    {
      "tensors": [{"name", "shape", "role": "private_input"|"parameter",
                   "bounds": [lo, hi]}, ...],
      "ops":     [{"name", "kind", "inputs", "attrs"}, ...],
      "outputs": ["opname", ...]
    }

`bounds` halves are scalars or nested arrays matching the shape; the key may
be omitted for parameters. Constants are ops of kind "Constant" with a
"value" attr. Ops must be listed after every name they reference.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DpGraphError, ModelFormatError
from .graph import Graph, GraphBuilder, OpKind

_TOP_KEYS = {"tensors", "ops", "outputs"}
_TENSOR_KEYS = {"name", "shape", "role", "bounds"}
_OP_KEYS = {"name", "kind", "inputs", "attrs"}
_ROLES = {"private_input", "parameter"}


def _reject_unknown(entry: dict, allowed: set, where: str) -> None:
    unknown = set(entry) - allowed
    if unknown:
        raise ModelFormatError(f"unknown key {sorted(unknown)[0]!r} in {where}")


def _require(entry: dict, key: str, where: str):
    if key not in entry:
        raise ModelFormatError(f"missing key {key!r} in {where}")
    return entry[key]


def loads_model(text: str, origin: str = "<string>") -> Graph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ModelFormatError(
            f"{origin}:{err.lineno}:{err.colno}: {err.msg}") from err
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{origin}: top level must be an object")
    _reject_unknown(doc, _TOP_KEYS, "the top-level object")
    tensors = _require(doc, "tensors", "the top-level object")
    ops = _require(doc, "ops", "the top-level object")
    outputs = _require(doc, "outputs", "the top-level object")

    b = GraphBuilder()
    try:
        for entry in tensors:
            where = f"tensor {entry.get('name', '?')!r}"
            _reject_unknown(entry, _TENSOR_KEYS, where)
            name = _require(entry, "name", where)
            shape = tuple(int(d) for d in _require(entry, "shape", where))
            role = _require(entry, "role", where)
            if role not in _ROLES:
                raise ModelFormatError(f"{where}: role must be one of {_ROLES}")
            bounds = entry.get("bounds")
            if bounds is not None:
                if not isinstance(bounds, list) or len(bounds) != 2:
                    raise ModelFormatError(f"{where}: bounds must be [lo, hi]")
                bounds = (np.asarray(bounds[0], dtype=np.float64),
                          np.asarray(bounds[1], dtype=np.float64))
            if role == "private_input":
                b.input(name, shape, bounds)
            else:
                b.parameter(name, shape, bounds)

        for entry in ops:
            where = f"op {entry.get('name', '?')!r}"
            _reject_unknown(entry, _OP_KEYS, where)
            name = _require(entry, "name", where)
            kind_name = _require(entry, "kind", where)
            try:
                kind = OpKind(kind_name)
            except ValueError:
                raise ModelFormatError(f"{where}: unknown kind {kind_name!r}")
            inputs = [b._names[i] if i in b._names else _bad_ref(where, i)
                      for i in _require(entry, "inputs", where)]
            attrs = entry.get("attrs") or {}
            if kind is OpKind.CONSTANT:
                b.constant(attrs.get("value"), name)
            else:
                b.build(kind, inputs, attrs, name)

        if not isinstance(outputs, list):
            raise ModelFormatError("outputs must be a list of op names")
        for name in outputs:
            if name not in b._names:
                raise ModelFormatError(f"output {name!r} names no tensor or op")
            b.output(b._names[name])
    except ModelFormatError:
        raise
    except DpGraphError as err:
        raise ModelFormatError(f"{origin}: {err}") from err
    except (TypeError, ValueError, KeyError) as err:
        raise ModelFormatError(f"{origin}: {err}") from err
    return b.graph()


def _bad_ref(where: str, name) -> int:
    raise ModelFormatError(f"{where}: input {name!r} is not defined yet")


def load_model(path) -> Graph:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ModelFormatError(f"cannot read model file {path}: {err}") from err
    return loads_model(text, origin=str(path))


def _attr_json(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def dumps_model(graph: Graph) -> str:
    tensors = []
    for h in graph.leaves():
        node = graph.nodes[h]
        entry = {
            "name": node.name,
            "shape": list(node.shape.dims),
            "role": "private_input" if node.kind is OpKind.INPUT else "parameter",
        }
        b = graph.bounds.get(h)
        if b is not None:
            entry["bounds"] = [b.lo.tolist(), b.hi.tolist()]
        tensors.append(entry)

    ops = []
    for node in graph.nodes:
        if node.kind in (OpKind.INPUT, OpKind.PARAMETER):
            continue
        ops.append({
            "name": node.name,
            "kind": node.kind.value,
            "inputs": [graph.nodes[i].name for i in node.inputs],
            "attrs": {k: _attr_json(v) for k, v in node.attrs.items()},
        })

    doc = {
        "tensors": tensors,
        "ops": ops,
        "outputs": [graph.nodes[h].name for h in graph.outputs],
    }
    return json.dumps(doc, indent=2, sort_keys=False)


def save_model(graph: Graph, path) -> None:
    Path(path).write_text(dumps_model(graph) + "\n")
