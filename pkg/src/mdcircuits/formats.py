"""JSON and CSV file formats."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .calculus import Pipeline, PipelineNode
from .circuit import TINY, Categorical, Circuit, ConstantOne, Indicator, LeafLayer, SumLayer, make_leaf
from .oracle import CPT, BayesNet, BNVar, Dataset
from .vtree import MdVtree, U, VNode, Vtree


class FormatError(ValueError):
    pass


def _need(obj: Mapping, key: str, what: str):
    if not isinstance(obj, Mapping) or key not in obj:
        raise FormatError(f"{what} is missing field {key!r}")
    return obj[key]


# --- md-vtrees --------------------------------------------------------------


def mdvtree_to_json(w: MdVtree | Vtree) -> dict:
    if isinstance(w, Vtree):
        w = MdVtree(w, {m: U for m in w.nodes})
    v = w.vtree
    nodes = []
    for m in v.postorder():
        n = v.nodes[m]
        lab = w.psi[m]
        entry: dict[str, Any] = {"id": m}
        if n.is_leaf:
            entry["leaf"] = sorted(n.vars)
        else:
            entry["left"], entry["right"] = n.left, n.right
        entry["label"] = "U" if lab is U else sorted(lab)
        nodes.append(entry)
    return {
        "variables": [{"name": x, "card": k} for x, k in v.cards.items()],
        "nodes": nodes,
        "root": v.root,
    }


def mdvtree_from_json(obj: Mapping) -> MdVtree:
    try:
        cards = {str(_need(x, "name", "variable")): int(_need(x, "card", "variable")) for x in _need(obj, "variables", "md-vtree")}
        nodes = {}
        psi = {}
        for n in _need(obj, "nodes", "md-vtree"):
            m = int(_need(n, "id", "vtree node"))
            if m in nodes:
                raise FormatError(f"duplicate vtree node id {m}")
            if "leaf" in n:
                nodes[m] = VNode(m, vars=frozenset(n["leaf"]))
            else:
                nodes[m] = VNode(m, int(_need(n, "left", "vtree node")), int(_need(n, "right", "vtree node")))
            lab = n.get("label", "U")
            psi[m] = U if lab == "U" else frozenset(lab)
        v = Vtree(cards, nodes, int(_need(obj, "root", "md-vtree")))
        return MdVtree(v, psi)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"invalid md-vtree: {exc}") from exc


# --- circuits -------------------------------------------------------------------


def _factor_to_json(f) -> dict:
    if isinstance(f, Categorical):
        return {"cat": f.var, "w": [float(x) for x in f.weights]}
    if isinstance(f, Indicator):
        return {"ind": f.var, "state": f.state}
    return {"one": f.var}


def _factor_from_json(d: Mapping):
    if "cat" in d:
        w = np.asarray(_need(d, "w", "categorical leaf"), dtype=float)
        w[np.abs(w) < TINY] = 0.0
        return Categorical(str(d["cat"]), w)
    if "ind" in d:
        return Indicator(str(d["ind"]), int(_need(d, "state", "indicator leaf")))
    if "one" in d:
        return ConstantOne(str(d["one"]))
    raise FormatError(f"unknown leaf {dict(d)}")


def circuit_to_json(c: Circuit) -> dict:
    layers = []
    for m in c.vtree.postorder():
        layer = c.layers[m]
        if layer.is_leaf:
            leaves = []
            for leaf in layer.leaves:
                leaves.append(_factor_to_json(leaf[0]) if len(leaf) == 1 else {"factors": [_factor_to_json(f) for f in leaf]})
            nz = np.argwhere(layer.mix != 0)
            mix = [[int(i), int(j), float(layer.mix[i, j])] for i, j in nz]
            layers.append({"vtree_node": m, "num_nodes": layer.num_nodes, "leaves": leaves, "mix": mix})
        else:
            wts = [[i, j, k, w] for i, j, k, w in layer.entries()]
            layers.append({"vtree_node": m, "num_nodes": layer.num_nodes, "weights": wts})
    out = {"mdvtree": mdvtree_to_json(c.mdvtree), "layers": layers, "root_index": c.root_index}
    if c.signed:
        out["signed"] = True
    return out


def circuit_from_json(obj: Mapping) -> Circuit:
    w = mdvtree_from_json(_need(obj, "mdvtree", "circuit"))
    v = w.vtree
    layers = {}
    raw = {int(_need(d, "vtree_node", "layer")): d for d in _need(obj, "layers", "circuit")}
    try:
        for m in v.postorder():
            if m not in raw:
                raise FormatError(f"no layer for vtree node {m}")
            d = raw[m]
            k = int(_need(d, "num_nodes", "layer"))
            if v.is_leaf(m):
                leaves = []
                for leaf in _need(d, "leaves", "leaf layer"):
                    fs = leaf["factors"] if "factors" in leaf else [leaf]
                    leaves.append(make_leaf(_factor_from_json(f) for f in fs))
                mix = np.zeros((k, len(leaves)))
                for i, j, x in d.get("mix", []):
                    mix[int(i), int(j)] += 0.0 if abs(x) < TINY else float(x)
                layers[m] = LeafLayer(m, leaves, mix)
            else:
                l, r = v.children(m)
                shape = (k, int(raw[l]["num_nodes"]), int(raw[r]["num_nodes"]))
                ents = [(i, j, kk, 0.0 if abs(x) < TINY else x) for i, j, kk, x in d.get("weights", [])]
                for i, j, kk, _ in ents:
                    if not (0 <= i < shape[0] and 0 <= j < shape[1] and 0 <= kk < shape[2]):
                        raise FormatError(f"weight index {(i, j, kk)} out of range at node {m}")
                layers[m] = SumLayer.from_entries(m, shape, ents)
        return Circuit(w, layers, int(obj.get("root_index", 0)), bool(obj.get("signed", False)))
    except (TypeError, IndexError, KeyError) as exc:
        raise FormatError(f"invalid circuit: {exc}") from exc


# --- pipelines ----------------------------------------------------------------------


def pipeline_to_json(p: Pipeline) -> dict:
    inputs = []
    for i in p.input_ids:
        n = p.nodes[i]
        entry: dict[str, Any] = {"name": n.name, "vars": sorted(p.scope(i))}
        if n.source is not None:
            entry["source"] = n.source
            entry["rename"] = dict(n.rename or {})
        inputs.append(entry)
    nodes = []
    for i in p.order():
        n = p.nodes[i]
        if n.op == "input":
            continue
        entry = {"id": n.id, "op": n.op, "in": list(n.inputs)}
        if n.op == "marg":
            entry["vars"] = sorted(n.vars)
        elif n.op == "inst":
            entry["assign"] = dict(n.assign)
        elif n.op == "pow":
            entry["alpha"] = n.alpha
        nodes.append(entry)
    return {"inputs": inputs, "nodes": nodes, "output": p.output}


def pipeline_from_json(obj: Mapping) -> Pipeline:
    inputs = []
    for i, d in enumerate(_need(obj, "inputs", "pipeline")):
        inputs.append(
            PipelineNode(
                i,
                "input",
                vars=frozenset(d.get("vars", [])),
                name=str(_need(d, "name", "pipeline input")),
                source=d.get("source"),
                rename=d.get("rename"),
            )
        )
    nodes = []
    for d in _need(obj, "nodes", "pipeline"):
        op = str(_need(d, "op", "pipeline node"))
        kw: dict[str, Any] = {}
        if op == "marg":
            kw["vars"] = frozenset(_need(d, "vars", "marg node"))
        elif op == "inst":
            kw["assign"] = {str(x): int(s) for x, s in _need(d, "assign", "inst node").items()}
        elif op == "pow":
            kw["alpha"] = float(_need(d, "alpha", "pow node"))
        nodes.append(PipelineNode(int(_need(d, "id", "pipeline node")), op, tuple(int(x) for x in _need(d, "in", "pipeline node")), **kw))
    return Pipeline(inputs, nodes, int(_need(obj, "output", "pipeline")))


# --- Bayesian networks ----------------------------------------------------------


def bn_to_json(bn: BayesNet) -> dict:
    return {
        "vars": [{"name": v.name, "card": v.card, "hidden": v.hidden} for v in bn.vars],
        "cpts": [{"var": c.var, "parents": list(c.parents), "table": np.asarray(c.table).tolist()} for c in bn.cpts],
    }


def bn_from_json(obj: Mapping) -> BayesNet:
    vs = tuple(
        BNVar(str(_need(d, "name", "variable")), int(_need(d, "card", "variable")), bool(d.get("hidden", False)))
        for d in _need(obj, "vars", "Bayesian network")
    )
    cpts = tuple(
        CPT(str(_need(d, "var", "CPT")), tuple(d.get("parents", [])), np.asarray(_need(d, "table", "CPT"), dtype=float))
        for d in _need(obj, "cpts", "Bayesian network")
    )
    return BayesNet(vs, cpts)


# --- datasets ---------------------------------------------------------------------


def dataset_to_csv(d: Dataset) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(d.columns)
    wr.writerows(d.data.tolist())
    return buf.getvalue()


def dataset_from_csv(text: str) -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FormatError("dataset file is empty")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header) or any(not h for h in header):
        raise FormatError("dataset header must name distinct variables")
    data = []
    for ln, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise FormatError(f"line {ln} has {len(row)} fields, expected {len(header)}")
        try:
            vals = [int(x) for x in row]
        except ValueError:
            raise FormatError(f"line {ln} has a missing or non-integer value") from None
        if any(x < 0 for x in vals):
            raise FormatError(f"line {ln} has a negative state")
        data.append(vals)
    return Dataset(header, np.array(data, dtype=np.int64).reshape(-1, len(header)))


# --- file helpers --------------------------------------------------------------------


def read_json(path: str | Path) -> Any:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=1, sort_keys=False) + "\n"


def load_mdvtree(path) -> MdVtree:
    return mdvtree_from_json(read_json(path))


def load_circuit(path) -> Circuit:
    return circuit_from_json(read_json(path))


def load_pipeline(path) -> Pipeline:
    return pipeline_from_json(read_json(path))


def load_bn(path) -> BayesNet:
    return bn_from_json(read_json(path))


def load_dataset(path) -> Dataset:
    return dataset_from_csv(Path(path).read_text())
