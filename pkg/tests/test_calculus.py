import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdcircuits import circuit
from mdcircuits.calculus import (
    Pipeline,
    PipelineBuilder,
    PipelineError,
    PipelineNode,
    backward_analyze,
    execute,
    forward_analyze,
    requirement_labelling,
)
from mdcircuits.causal import (
    backdoor_pipeline,
    frontdoor_pipeline,
    mmap_pipeline,
    mutual_information_pipeline,
    napkin_pipeline,
)
from mdcircuits.mdnet import StructureConfig, build_random
from mdcircuits.oracle import t_inst, t_log, t_marg, t_max, t_pow, t_prod, table_from_circuit
from mdcircuits.vtree import Vtree, enumerate_implied, random_vtree, universal

from conftest import names

V5 = ["X", "Y", "Z1", "Z2", "R"]


def reqs_str(p):
    return [str(r) for r in backward_analyze(p).requirements]


# --- validation -----------------------------------------------------------------------


def test_pipeline_validation():
    a = PipelineNode(0, "input", name="C", vars=frozenset("AB"))
    with pytest.raises(PipelineError, match="unknown operation"):
        Pipeline([a], [PipelineNode(1, "sqrt", (0,))], 1)
    with pytest.raises(PipelineError, match="cycle"):
        Pipeline([a], [PipelineNode(1, "marg", (2,), vars=frozenset("A")), PipelineNode(2, "pow", (1,), alpha=2.0)], 2)
    with pytest.raises(PipelineError, match="outside its input scope"):
        Pipeline([a], [PipelineNode(1, "marg", (0,), vars=frozenset("Q"))], 1)
    with pytest.raises(PipelineError, match="inputs"):
        Pipeline([a], [PipelineNode(1, "prod", (0,))], 1)
    with pytest.raises(PipelineError, match="finite exponent"):
        Pipeline([a], [PipelineNode(1, "pow", (0,), alpha=float("nan"))], 1)
    with pytest.raises(PipelineError, match="not a node"):
        Pipeline([a], [], 7)
    b = PipelineBuilder()
    c = b.input("C", "AB")
    b.marg(c, "A")
    with pytest.raises(PipelineError):
        b.input("D", "A")


def test_renamed_input_validation():
    b = PipelineBuilder()
    b.input("C", "AB")
    b.renamed_input("D", "C", {"A": "B"})
    with pytest.raises(PipelineError, match="merges"):
        b.build(1)
    b = PipelineBuilder()
    b.input("C", "AB")
    b.renamed_input("D", "C", {"A": "A2"})
    p = b.build(1)
    assert p.scope(1) == {"A2", "B"}


def test_causal_pipeline_validation():
    with pytest.raises(PipelineError, match="overlap"):
        backdoor_pipeline(["X"], ["X"], [])
    with pytest.raises(PipelineError):
        backdoor_pipeline(["X"], ["Y"], ["Z"], {"X": 0, "Y": 1})
    with pytest.raises(PipelineError):
        napkin_pipeline(["X"], ["Y"], ["Z"], ["W"], [], None, None)
    with pytest.raises(PipelineError, match="already exist"):
        frontdoor_pipeline(["X"], ["Y"], ["Z"], None, ["X", "Y", "Z", "X'"])


# --- golden derivations --------------------------------------------------------------


def test_backdoor_requirements():
    assert reqs_str(backdoor_pipeline(["X"], ["Y"], ["Z1", "Z2"], None, V5)) == ["C: {{X,Z1,Z2}}"]
    r = backward_analyze(backdoor_pipeline(["X"], ["Y"], ["Z1", "Z2"], {"X": 1}, V5))
    assert r.feasible and [str(q) for q in r.requirements] == ["C: {{Z1,Z2}}"]
    assert len(r.notes) == 1 and "W' = {}" in r.notes[0]


def test_frontdoor_requirements():
    p = frontdoor_pipeline(["X"], ["Y"], ["Z1"], None, ["X", "Y", "Z1"])
    assert reqs_str(p) == ["C: {{X}, {X,Z1}}"]
    p = frontdoor_pipeline(["X"], ["Y"], ["Z1"], {"X": 0}, ["X", "Y", "Z1"])
    assert reqs_str(p) == ["C: {{X,Z1}}"]


def test_napkin_requirements():
    r = backward_analyze(napkin_pipeline(["X"], ["Y"], ["Z"], ["W"], ["K"], {"X": 1}, {"Z": 0}))
    assert r.feasible
    assert [str(q) for q in r.requirements] == ["C: {{K}, {K,W}}"]
    r = backward_analyze(napkin_pipeline(["X"], ["Y"], ["Z"], ["W"], ["K"], None, {"Z": 0}))
    assert not r.feasible
    assert r.failure.op == "prod" and "{K,X}" in r.failure.reason


def test_mutual_information_infeasible():
    r = backward_analyze(mutual_information_pipeline(["X"], ["Y"], ["X", "Y", "R"]))
    assert not r.feasible
    assert r.sets("C") == {frozenset("X"), frozenset("Y"), frozenset("XY")}
    assert "{X}- and {Y}-determinism" in r.failure.reason


def test_mmap_requirements():
    p = mmap_pipeline(["X", "Y"], V5)
    assert reqs_str(p) == ["C: {{X,Y}}"]
    assert not forward_analyze(p, {"C": universal(random_vtree({x: 2 for x in V5}, np.random.default_rng(0)))}).tractable


def test_mmap_value(rng):
    p = mmap_pipeline(["V0", "V2"], names(5))
    v = random_vtree({x: 2 for x in names(5)}, rng)
    c = build_random(requirement_labelling(v, backward_analyze(p).sets("C")), StructureConfig(2, 2, 1))
    res = execute(p, {"C": c})
    t = t_marg(table_from_circuit(c), ["V1", "V3", "V4"])
    assert res.result == pytest.approx(t_max(t), rel=1e-10)
    arg = next(iter(res.diagnostics["argmax"].values()))
    assert t[arg] == pytest.approx(res.result, rel=1e-10)


def test_max_output_cannot_be_consumed():
    b = PipelineBuilder()
    c = b.input("C", "AB")
    p = b.build(b.pow(b.max(c), 2.0))
    r = backward_analyze(p)
    assert r.feasible
    w = requirement_labelling(Vtree.from_nested(("A", "B")), r.sets("C"))
    fw = forward_analyze(p, {"C": w})
    assert not fw.tractable and "scalar" in fw.failures[0].reason


def test_forward_reports_failure_node():
    p = backdoor_pipeline(["X"], ["Y"], ["Z1"])
    fw = forward_analyze(p, {"C": universal(Vtree.from_nested(("X", ("Y", "Z1"))))})
    assert not fw.tractable
    assert fw.failures[0].op == "pow"
    with pytest.raises(PipelineError, match="not tractable"):
        execute(p, {"C": build_random(universal(Vtree.from_nested(("X", ("Y", "Z1")))), StructureConfig(2, 2, 0))})


def test_analysis_builds_no_layers(rng):
    p = napkin_pipeline(["X"], ["Y"], ["Z"], ["W"], ["K"], {"X": 1}, {"Z": 0})
    v = random_vtree({x: 2 for x in "XYZWK"}, rng)
    before = circuit.LAYER_ALLOCATIONS[0]
    r = backward_analyze(p)
    w = requirement_labelling(v, r.sets("C"))
    forward_analyze(p, {"C": w})
    assert circuit.LAYER_ALLOCATIONS[0] == before


# --- random pipeline corpus -------------------------------------------------------------


def random_pipeline(rng, vs):
    b = PipelineBuilder()
    c = b.input("C", vs)
    live = [c]
    prods = 0  # product sizes multiply, so keep the corpus to two of them
    for _ in range(int(rng.integers(1, 7))):
        a = live[int(rng.integers(len(live)))]
        sc = sorted(b.scope_of(a))
        kind = rng.choice(["marg", "inst", "prod", "pow", "log"], p=[0.3, 0.2, 0.25, 0.2, 0.05])
        if kind in ("marg", "inst") and sc:
            pick = rng.choice(sc, size=int(rng.integers(1, len(sc) + 1)), replace=False).tolist()
            if kind == "marg":
                node = b.marg(a, pick)
            else:
                node = b.inst(a, {x: int(rng.integers(2)) for x in pick})
        elif kind == "prod" and prods < 2:
            prods += 1
            node = b.prod(a, live[int(rng.integers(len(live)))])
        elif kind == "pow":
            node = b.pow(a, float(rng.choice([-1.0, 0.5, 2.0])))
        elif kind == "log" and sc:
            node = b.log(a)
        else:
            continue
        live.append(node)
    return b.build(live[-1])


def table_execute(p, t):
    vals = {}
    for i in p.order():
        n = p.nodes[i]
        if n.op == "input":
            vals[i] = t
            continue
        a = vals[n.inputs[0]]
        if n.op == "marg":
            vals[i] = t_marg(a, n.vars)
        elif n.op == "inst":
            vals[i] = t_inst(a, n.assign)
        elif n.op == "prod":
            vals[i] = t_prod(a, vals[n.inputs[1]])
        elif n.op == "pow":
            vals[i] = t_pow(a, n.alpha)
        elif n.op == "log":
            vals[i] = t_log(a)
    return vals[p.output]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_pipelines(seed):
    rng = np.random.default_rng(seed)
    vs = names(int(rng.integers(2, 6)))
    p = random_pipeline(rng, vs)
    r = backward_analyze(p)
    if not r.feasible:
        return
    v = random_vtree({x: 2 for x in vs}, rng)
    w = requirement_labelling(v, r.sets("C"))
    assert set(r.sets("C")) <= enumerate_implied(w)
    # backward feasibility is sound for the forward rules
    fw = forward_analyze(p, {"C": w})
    assert fw.tractable, [str(f) for f in fw.failures]
    c = build_random(w, StructureConfig(2, 2, seed % 1000))
    ex = execute(p, {"C": c})
    # forward labels are sound: every node respects its propagated md-vtree
    for i, val in ex.values.items():
        if isinstance(val, circuit.Circuit):
            for q in enumerate_implied(fw.node_mdvtrees[i]):
                assert circuit.check_qdet(val, q), (i, sorted(q))
    got = ex.result
    ref = table_execute(p, table_from_circuit(c))
    out = table_from_circuit(got).aligned(ref.variables)
    scale = max(np.abs(ref.values).max(), 1.0)
    assert np.allclose(out.values, ref.values, rtol=1e-8, atol=1e-12 * scale)
