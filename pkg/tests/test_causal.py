import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdcircuits.calculus import PipelineError, backward_analyze, execute, forward_analyze, requirement_labelling
from mdcircuits.causal import (
    INPUT,
    backdoor_pipeline,
    frontdoor_pipeline,
    mutual_information_pipeline,
    napkin_pipeline,
    query_pipeline,
)
from mdcircuits.circuit import check_qdet
from mdcircuits.mdnet import StructureConfig, build_random
from mdcircuits.oracle import (
    backdoor_table,
    compile_table,
    frontdoor_table,
    napkin_table,
    random_bn,
    t_inst,
    table_from_circuit,
)
from mdcircuits.vtree import chain_vtree, random_vtree

TOL = 1e-8


def chain_blocks(reqs):
    """Blocks peeled off in order of the nested requirement sets."""
    out, seen = [], frozenset()
    for q in sorted(reqs, key=len):
        out.append(sorted(q - seen))
        seen = q
    return out


def exact_run(p, t, rng):
    r = backward_analyze(p)
    assert r.feasible
    reqs = r.sets(INPUT)
    v = chain_vtree(dict(zip(t.variables, t.cards)), chain_blocks(reqs), rng)
    w = requirement_labelling(v, reqs)
    assert forward_analyze(p, {INPUT: w}).tractable
    c = compile_table(t, w)
    for q in reqs:
        assert check_qdet(c, q)
    return table_from_circuit(execute(p, {INPUT: c}).result)


def joint(rng, n_obs=6, card=2):
    names = ["H"] + [f"V{i}" for i in range(n_obs)]
    return random_bn(names, rng, max_parents=3, hidden=["H"], card=card).joint()


def test_backdoor_exact(rng):
    for _ in range(5):
        t = joint(rng)
        x, y, z = ["V2"], ["V5"], ["V0", "V1"]
        ref = backdoor_table(t, x, y, z)
        assert exact_run(backdoor_pipeline(x, y, z, None, t.variables), t, rng).allclose(ref, rtol=TOL)
        got = exact_run(backdoor_pipeline(x, y, z, {"V2": 1}, t.variables), t, rng)
        assert got.allclose(t_inst(ref, {"V2": 1}), rtol=TOL)


def test_frontdoor_exact(rng):
    for _ in range(5):
        t = joint(rng)
        x, y, z = ["V0"], ["V4"], ["V2", "V3"]
        ref = frontdoor_table(t, x, y, z)
        assert exact_run(frontdoor_pipeline(x, y, z, None, t.variables), t, rng).allclose(ref, rtol=TOL)
        got = exact_run(frontdoor_pipeline(x, y, z, {"V0": 0}, t.variables), t, rng)
        assert got.allclose(t_inst(ref, {"V0": 0}), rtol=TOL)


def test_napkin_exact(rng):
    for _ in range(5):
        t = joint(rng)
        x, y, z, w, k = ["V0"], ["V1"], ["V2"], ["V3", "V4"], ["V5"]
        for xv in (0, 1):
            ref = napkin_table(t, x, y, z, w, k, {"V0": xv}, {"V2": 1})
            p = napkin_pipeline(x, y, z, w, k, {"V0": xv}, {"V2": 1}, t.variables)
            assert exact_run(p, t, rng).allclose(ref, rtol=TOL)


def test_ternary_backdoor_exact(rng):
    t = joint(rng, n_obs=4, card=3)
    ref = backdoor_table(t, ["V0"], ["V3"], ["V1"])
    assert exact_run(backdoor_pipeline(["V0"], ["V3"], ["V1"], None, t.variables), t, rng).allclose(ref, rtol=TOL)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pipelines_on_mdnets(seed):
    # the pipeline applied to any circuit equals the estimand of that circuit's own distribution
    rng = np.random.default_rng(seed)
    vs = [f"V{i}" for i in range(6)]
    x, y = ["V0"], ["V1"]
    z = rng.choice(vs[2:], size=int(rng.integers(1, 4)), replace=False).tolist()
    which = rng.choice(["backdoor", "frontdoor"])
    make, table = (backdoor_pipeline, backdoor_table) if which == "backdoor" else (frontdoor_pipeline, frontdoor_table)
    p = make(x, y, z, None, vs)
    v = random_vtree({x_: 2 for x_ in vs}, rng)
    c = build_random(requirement_labelling(v, backward_analyze(p).sets(INPUT)), StructureConfig(2, 2, seed % 997))
    got = table_from_circuit(execute(p, {INPUT: c}).result)
    assert got.allclose(table(table_from_circuit(c), x, y, z), rtol=TOL)


def test_infeasible_queries():
    r = backward_analyze(napkin_pipeline(["X"], ["Y"], ["Z"], ["W"], ["K"], None, {"Z": 1}))
    assert not r.feasible
    assert not backward_analyze(mutual_information_pipeline(["X"], ["Y"])).feasible


def test_query_pipeline_specs():
    vs = ["X", "Y", "Z", "W"]
    p = query_pipeline({"query": "backdoor", "x_vars": ["X"], "y": ["Y"], "z": ["Z"]}, vs)
    assert backward_analyze(p).sets(INPUT) == {frozenset("XZ")}
    p = query_pipeline({"query": "backdoor", "x": {"X": 1}, "y": ["Y"], "z": ["Z"]}, vs)
    assert backward_analyze(p).sets(INPUT) == {frozenset("Z")}
    p = query_pipeline({"query": "napkin", "x": {"X": 0}, "y": ["Y"], "z_value": {"Z": 1}, "w": ["W"]}, vs)
    assert backward_analyze(p).feasible
    with pytest.raises(PipelineError):
        query_pipeline({"query": "napkin", "x": {"X": 0}, "y": ["Y"], "w": ["W"]}, vs)
    with pytest.raises(PipelineError):
        query_pipeline({"query": "backdoor", "y": ["Y"]}, vs)
    with pytest.raises(PipelineError, match="unknown query"):
        query_pipeline({"query": "iv"}, vs)
