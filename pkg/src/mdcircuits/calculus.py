"""Pipelines of circuit operations and their tractability analysis.

A pipeline is a DAG whose leaves are named input circuits and whose inner
nodes apply one basic operation each. ``forward_analyze`` pushes md-vtrees
through the DAG using only label rules; ``backward_analyze`` derives which
marginal determinisms the inputs need; ``execute`` runs the operations.
"""

from __future__ import annotations

import graphlib
import logging
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import ops
from .circuit import Circuit, _enumerate_states, evaluate_batch, rename
from .vtree import MdVtree, Vtree, compatible, implies_qdet, optimal_labelling, rename_mdvtree, universal

log = logging.getLogger(__name__)

OPS = ("input", "marg", "inst", "prod", "pow", "max", "log")
DET_OPS = ("pow", "max", "log")
ZERO_COUNT_BOUND = 1 << 16


class PipelineError(ValueError):
    pass


def fmt_set(s: Iterable[str]) -> str:
    return "{" + ",".join(sorted(s)) + "}"


@dataclass(frozen=True)
class PipelineNode:
    id: int
    op: str
    inputs: tuple = ()
    vars: frozenset = frozenset()
    assign: Mapping[str, int] | None = None
    alpha: float | None = None
    name: str | None = None
    # renamed inputs: a view of input ``source`` with variables renamed
    source: str | None = None
    rename: Mapping[str, str] | None = None


class Pipeline:
    """Validated DAG of pipeline nodes.

    Input nodes take ids ``0 .. len(inputs) - 1`` in declaration order.
    """

    def __init__(self, inputs: Sequence[PipelineNode], nodes: Sequence[PipelineNode], output: int):
        self.nodes: dict[int, PipelineNode] = {}
        for n in list(inputs) + list(nodes):
            if n.op not in OPS:
                raise PipelineError(f"unknown operation {n.op!r}")
            if n.id in self.nodes:
                raise PipelineError(f"duplicate node id {n.id}")
            self.nodes[n.id] = n
        self.input_ids = [n.id for n in inputs]
        if any(self.nodes[i].op != "input" for i in self.input_ids):
            raise PipelineError("inputs must be input nodes")
        if any(n.op == "input" for n in nodes):
            raise PipelineError("input nodes belong in the inputs list")
        if output not in self.nodes:
            raise PipelineError(f"output {output} is not a node")
        self.output = output
        arity = {"input": 0, "prod": 2}
        for n in self.nodes.values():
            if len(n.inputs) != arity.get(n.op, 1):
                raise PipelineError(f"node {n.id} ({n.op}) has {len(n.inputs)} inputs")
            for i in n.inputs:
                if i not in self.nodes:
                    raise PipelineError(f"node {n.id} refers to unknown node {i}")
        try:
            self._order = list(graphlib.TopologicalSorter({n.id: set(n.inputs) for n in self.nodes.values()}).static_order())
        except graphlib.CycleError as exc:
            raise PipelineError("pipeline has a cycle") from exc
        names = [self.nodes[i].name for i in self.input_ids]
        if len(set(names)) != len(names) or any(not x for x in names):
            raise PipelineError("input names must be distinct and non-empty")
        self._scope: dict[int, frozenset] = {}
        for i in self._order:
            self._scope[i] = self._node_scope(self.nodes[i])

    def _node_scope(self, n: PipelineNode) -> frozenset:
        if n.op == "input":
            if n.source is not None:
                src = self.input_node(n.source)
                if src.source is not None:
                    raise PipelineError("a renamed input must refer to an ordinary input")
                mapping = dict(n.rename or {})
                if not set(mapping) <= src.vars:
                    raise PipelineError(f"renaming of {n.name} mentions variables outside {src.name}")
                expect = frozenset(mapping.get(x, x) for x in src.vars)
                if len(expect) != len(src.vars):
                    raise PipelineError("renaming merges two variables")
                if n.vars and frozenset(n.vars) != expect:
                    raise PipelineError(f"declared variables of {n.name} do not match the renaming")
                return expect
            return frozenset(n.vars)
        ins = [self._scope[i] for i in n.inputs]
        if n.op == "marg":
            if not n.vars <= ins[0]:
                raise PipelineError(f"node {n.id} marginalizes {fmt_set(n.vars - ins[0])} outside its input scope")
            return ins[0] - n.vars
        if n.op == "inst":
            keys = frozenset(n.assign or {})
            if not keys <= ins[0]:
                raise PipelineError(f"node {n.id} instantiates {fmt_set(keys - ins[0])} outside its input scope")
            return ins[0] - keys
        if n.op == "prod":
            return ins[0] | ins[1]
        if n.op == "max":
            return frozenset()
        if n.op == "pow" and (n.alpha is None or not np.isfinite(n.alpha)):
            raise PipelineError(f"node {n.id} needs a finite exponent")
        return ins[0]

    def scope(self, i: int) -> frozenset:
        return self._scope[i]

    def order(self) -> list[int]:
        """Topological order (inputs first)."""
        return list(self._order)

    def input_node(self, name: str) -> PipelineNode:
        for i in self.input_ids:
            if self.nodes[i].name == name:
                return self.nodes[i]
        raise PipelineError(f"no input named {name}")

    def source_name(self, i: int) -> str:
        n = self.nodes[i]
        return n.source or n.name

    def consumers(self, i: int) -> list[int]:
        return [n.id for n in self.nodes.values() if i in n.inputs]

    def __len__(self) -> int:
        return len(self.nodes)


class PipelineBuilder:
    """Incremental construction of a pipeline."""

    def __init__(self) -> None:
        self._inputs: list[PipelineNode] = []
        self._nodes: list[PipelineNode] = []

    def _add(self, **kw) -> int:
        if self._nodes:
            raise PipelineError("declare all inputs before other nodes")
        i = len(self._inputs)
        self._inputs.append(PipelineNode(i, "input", **kw))
        return i

    def input(self, name: str, vars: Iterable[str]) -> int:
        return self._add(name=name, vars=frozenset(vars))

    def renamed_input(self, name: str, source: str, mapping: Mapping[str, str]) -> int:
        return self._add(name=name, source=source, rename=dict(mapping))

    def _node(self, op: str, inputs: tuple, **kw) -> int:
        i = len(self._inputs) + len(self._nodes)
        self._nodes.append(PipelineNode(i, op, inputs, **kw))
        return i

    def marg(self, a: int, w: Iterable[str]) -> int:
        w = frozenset(w)
        return a if not w else self._node("marg", (a,), vars=w)

    def inst(self, a: int, assign: Mapping[str, int]) -> int:
        return a if not assign else self._node("inst", (a,), assign={x: int(s) for x, s in assign.items()})

    def prod(self, a: int, b: int) -> int:
        return self._node("prod", (a, b))

    def pow(self, a: int, alpha: float) -> int:
        return self._node("pow", (a,), alpha=float(alpha))

    def max(self, a: int) -> int:
        return self._node("max", (a,))

    def log(self, a: int) -> int:
        return self._node("log", (a,))

    def scope_of(self, i: int) -> frozenset:
        return Pipeline(self._inputs, self._nodes, i).scope(i)

    def build(self, output: int) -> Pipeline:
        return Pipeline(self._inputs, self._nodes, output)


# --- forward analysis ----------------------------------------------------


@dataclass(frozen=True)
class Failure:
    node: int
    op: str
    reason: str

    def __str__(self) -> str:
        return f"node {self.node} ({self.op}): {self.reason}"


@dataclass
class ForwardResult:
    tractable: bool
    node_mdvtrees: dict
    failures: list


def forward_analyze(p: Pipeline, input_mdvtrees: Mapping[str, MdVtree]) -> ForwardResult:
    """Propagate md-vtrees through ``p`` with label rules only."""
    out: dict[int, MdVtree | None] = {}
    failures: list[Failure] = []
    blocked: set[int] = set()
    for i in p.order():
        n = p.nodes[i]
        if any(j in blocked for j in n.inputs):
            blocked.add(i)
            continue
        try:
            out[i] = _forward_step(p, n, out, input_mdvtrees)
        except _StepFailure as exc:
            failures.append(Failure(i, n.op, str(exc)))
            blocked.add(i)
    return ForwardResult(not failures, out, failures)


class _StepFailure(Exception):
    pass


def _forward_step(p: Pipeline, n: PipelineNode, out: Mapping, given: Mapping[str, MdVtree]) -> MdVtree | None:
    if n.op == "input":
        if n.name in given:
            w = given[n.name]
        elif n.source is not None and n.source in given:
            w = rename_mdvtree(given[n.source], n.rename or {})
        else:
            raise PipelineError(f"no md-vtree supplied for input {n.name}")
        if w.vtree.all_vars != p.scope(n.id):
            raise PipelineError(f"md-vtree for {n.name} covers {fmt_set(w.vtree.all_vars)}, pipeline expects {fmt_set(p.scope(n.id))}")
        return w
    ins = [out[j] for j in n.inputs]
    if any(w is None for w in ins):
        raise _StepFailure("input is a scalar produced by max")
    w = ins[0]
    if n.op == "marg":
        return ops.marg_labels(w, n.vars)
    if n.op == "inst":
        return ops.inst_labels(w, n.assign)
    if n.op == "prod":
        if not compatible(w.vtree, ins[1].vtree):
            raise _StepFailure("input vtrees are not compatible")
        return ops.prod_labels(w, ins[1])
    sc = w.vtree.all_vars
    if sc and not implies_qdet(w, sc):
        raise _StepFailure(f"input md-vtree does not imply {fmt_set(sc)}-determinism")
    if n.op == "pow":
        return w
    if n.op == "log":
        return ops.universal_labels(w)
    return None


# --- backward analysis ---------------------------------------------------


@dataclass(frozen=True)
class Requirement:
    input_name: str
    dets: frozenset

    def __str__(self) -> str:
        body = ", ".join(fmt_set(q) for q in sorted(self.dets, key=lambda q: (len(q), sorted(q))))
        return f"{self.input_name}: {{{body}}}"


@dataclass
class BackwardResult:
    feasible: bool
    requirements: list
    failure: Failure | None = None
    notes: list = field(default_factory=list)

    def sets(self, name: str) -> set[frozenset]:
        for r in self.requirements:
            if r.input_name == name:
                return set(r.dets)
        raise KeyError(name)

    def as_dict(self) -> dict[str, set[frozenset]]:
        return {r.input_name: set(r.dets) for r in self.requirements}


def backward_analyze(p: Pipeline) -> BackwardResult:
    """Marginal determinisms the inputs need for every operation to be tractable.

    Demands start at the inputs of POW, MAX and LOG nodes (determinism over
    their whole scope) and travel toward the inputs. An INST node passes on
    the weakest choice; any superset adding instantiated variables works too.
    """
    demands: dict[int, set[frozenset]] = {i: set() for i in p.nodes}
    notes: list[str] = []
    for n in p.nodes.values():
        if n.op in DET_OPS:
            sc = p.scope(n.inputs[0])
            if sc:
                demands[n.inputs[0]].add(sc)
    fail = None
    for i in reversed(p.order()):
        n = p.nodes[i]
        qs = demands[i]
        if not qs or n.op == "input":
            continue
        if n.op == "marg" or n.op == "pow":
            demands[n.inputs[0]] |= qs
        elif n.op == "inst":
            demands[n.inputs[0]] |= qs
            for q in qs:
                notes.append(
                    f"node {i}: {fmt_set(q)}-determinism after instantiation needs "
                    f"(Q u W')-determinism of its input for some W' within {fmt_set(n.assign)}; recorded W' = {{}}"
                )
        elif n.op == "prod":
            a, b = n.inputs
            sa, sb = p.scope(a), p.scope(b)
            shared = sa & sb
            for q in qs:
                if q <= shared:
                    demands[a].add(q)
                    demands[b].add(q)
                elif q >= shared:
                    if q & sa:
                        demands[a].add(q & sa)
                    if q & sb:
                        demands[b].add(q & sb)
                else:
                    fail = Failure(
                        i,
                        "prod",
                        f"{fmt_set(q)}-determinism cannot be split: rule (a) needs {fmt_set(q)} within the shared "
                        f"scope {fmt_set(shared)}, rule (b) needs it to contain the shared scope",
                    )
                    break
        else:
            fail = Failure(i, n.op, f"{fmt_set(next(iter(qs)))}-determinism demanded of a {n.op} output, which carries none")
        if fail:
            break
    per_input: dict[str, set[frozenset]] = {}
    for i in p.input_ids:
        n = p.nodes[i]
        name = p.source_name(i)
        back = {v: k for k, v in (n.rename or {}).items()}
        per_input.setdefault(name, set()).update(frozenset(back.get(x, x) for x in q) for q in demands[i])
    reqs = [Requirement(name, frozenset(s)) for name, s in per_input.items()]
    if fail is None:
        for r in reqs:
            qs = sorted(r.dets, key=lambda q: (len(q), sorted(q)))
            for x in range(len(qs)):
                for y in range(x + 1, len(qs)):
                    if not (qs[x] <= qs[y] or qs[y] <= qs[x]):
                        fail = Failure(
                            p.input_node(r.input_name).id,
                            "input",
                            f"{r.input_name} would need both {fmt_set(qs[x])}- and {fmt_set(qs[y])}-determinism, "
                            "which is not possible without restricting its support",
                        )
                        break
                if fail:
                    break
    if fail is not None:
        log.info("backward analysis infeasible: %s", fail)
    return BackwardResult(fail is None, reqs, fail, notes)


# --- execution -----------------------------------------------------------


@dataclass
class Execution:
    values: dict
    output: int
    diagnostics: dict

    @property
    def result(self):
        return self.values[self.output]


def execute(p: Pipeline, inputs: Mapping[str, Circuit], debug: bool = False) -> Execution:
    """Run the pipeline on concrete circuits.

    Runs forward analysis first and refuses intractable pipelines. A POW
    node with a negative exponent counts the zeros it maps to zero.
    """
    start = time.perf_counter()
    circuits: dict[str, Circuit] = dict(inputs)
    for i in p.input_ids:
        n = p.nodes[i]
        if n.name not in circuits:
            if n.source is not None and n.source in inputs:
                circuits[n.name] = rename(inputs[n.source], n.rename or {})
            else:
                raise PipelineError(f"no circuit supplied for input {n.name}")
    fw = forward_analyze(p, {k: c.mdvtree for k, c in circuits.items()})
    if not fw.tractable:
        raise PipelineError("pipeline is not tractable: " + "; ".join(str(f) for f in fw.failures))
    values: dict[int, Circuit | float] = {}
    diag = {"zero_divisions": 0, "uncounted_divisions": 0, "argmax": {}}
    for i in p.order():
        n = p.nodes[i]
        if n.op == "input":
            values[i] = circuits[n.name]
            continue
        a = values[n.inputs[0]]
        if n.op == "marg":
            values[i] = ops.marg(a, n.vars)
        elif n.op == "inst":
            values[i] = ops.inst(a, n.assign)
        elif n.op == "prod":
            values[i] = ops.prod(a, values[n.inputs[1]])
        elif n.op == "pow":
            if n.alpha < 0:
                z = _count_zeros(a)
                if z is None:
                    diag["uncounted_divisions"] += 1
                else:
                    diag["zero_divisions"] += z
            values[i] = ops.pow(a, n.alpha, debug)
        elif n.op == "log":
            values[i] = ops.log_circuit(a, debug)
        else:
            val, arg = ops.max_query(a, {}, debug)
            values[i] = val
            diag["argmax"][i] = arg
    diag["seconds"] = time.perf_counter() - start
    return Execution(values, p.output, diag)


def _count_zeros(c: Circuit) -> int | None:
    cards = [c.cards[x] for x in c.variables]
    if int(np.prod(cards)) > ZERO_COUNT_BOUND:
        return None
    vals = evaluate_batch(c, _enumerate_states(cards))
    return int(np.count_nonzero(vals == 0))


def requirement_labelling(v: Vtree, reqs: Iterable[Iterable[str]]) -> MdVtree:
    """Optimal md-vtree for a requirement set; the universal labelling when it is empty."""
    reqs = [frozenset(q) for q in reqs if q]
    return optimal_labelling(v, reqs) if reqs else universal(v)

