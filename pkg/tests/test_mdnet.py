import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdcircuits.circuit import (
    CircuitError,
    Indicator,
    LeafLayer,
    SumLayer,
    Circuit,
    _enumerate_states,
    check_qdet,
    check_structure,
    evaluate_batch,
    total_mass,
)
from mdcircuits.formats import circuit_to_json, dumps
from mdcircuits.mdnet import (
    StructureConfig,
    build_mdnet,
    build_random,
    fit_em,
    fit_mle,
    log_likelihood,
)
from mdcircuits.oracle import Dataset, bn_sample, random_bn, table_from_circuit
from mdcircuits.vtree import U, MdVtree, Vtree, enumerate_implied, optimal_labelling, random_vtree, universal

from conftest import expanded_chain, quad_vtree, group_invariant_violations, names, random_labelling, smoothed_chain_rule

ALPHA = 0.01


def random_data(rng, vs, n=300, card=2):
    return bn_sample(random_bn(vs, rng, card=card), n, int(rng.integers(2**31)))


# --- structure ----------------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mdnet_valid(seed):
    rng = np.random.default_rng(seed)
    vs = names(int(rng.integers(2, 7)))
    cards = {x: int(rng.integers(2, 4)) for x in vs}
    v = random_vtree(cards, rng)
    w = random_labelling(v, rng)
    net = build_mdnet(w, StructureConfig(int(rng.integers(1, 4)), int(rng.integers(1, 4)), seed))
    c = net.circuit
    assert check_structure(c) == []
    assert total_mass(c) == pytest.approx(1.0, abs=1e-9)
    for q in enumerate_implied(w):
        assert check_qdet(c, q)
    assert group_invariant_violations(net) == []


def test_quad_mdnet():
    v = quad_vtree()
    w = optimal_labelling(v, [["V1", "V2"], ["V1", "V2", "V3"], ["V1", "V2", "V3", "V4"]])
    c = build_random(w, StructureConfig(2, 2, 5))
    for q in (["V1", "V2"], ["V1", "V2", "V3"], ["V1", "V2", "V3", "V4"]):
        assert check_qdet(c, q)


def test_all_empty_labels_factorize(rng):
    v = random_vtree({x: 2 for x in names(5)}, rng)
    w = MdVtree(v, {m: frozenset() for m in v.nodes})
    c = build_random(w, StructureConfig(3, 3, 0))
    for layer in c.layers.values():
        if layer.is_leaf:
            assert np.all((layer.mix > 0).sum(axis=1) == 1)
        else:
            assert np.bincount(layer.idx[:, 0]).max() == 1
    t = table_from_circuit(c).aligned(names(5)).values
    marg = [t.sum(axis=tuple(j for j in range(5) if j != i)) for i in range(5)]
    assert np.allclose(t, np.einsum("a,b,c,d,e->abcde", *marg), rtol=1e-12)


def test_universal_mdnet_has_full_support(rng):
    v = random_vtree({x: 2 for x in names(5)}, rng)
    c = build_random(universal(v), StructureConfig(2, 2, 3))
    assert np.all(table_from_circuit(c).values > 0)
    w = optimal_labelling(v, [names(5)])
    assert np.all(table_from_circuit(build_random(w, StructureConfig(2, 2, 3))).values > 0)


def test_same_seed_same_json(rng):
    v = random_vtree({x: 2 for x in names(6)}, rng)
    w = random_labelling(v, rng, "random")
    a = dumps(circuit_to_json(build_random(w, StructureConfig(2, 2, 11))))
    b = dumps(circuit_to_json(build_random(w, StructureConfig(2, 2, 11))))
    assert a == b
    assert a != dumps(circuit_to_json(build_random(w, StructureConfig(2, 2, 12))))


def test_build_rejects_bad_input():
    v = Vtree.from_nested((("A", "B"), "C"))
    bad = MdVtree(v, {m: ({"A"} if v.is_leaf(m) and v.scope(m) == {"A"} else U) for m in v.nodes})
    bad = MdVtree(v, {**bad.psi, v.root: frozenset({"A", "C"})})
    with pytest.raises(CircuitError):
        build_random(bad, StructureConfig())
    with pytest.raises(ValueError):
        StructureConfig(0, 2)
    with pytest.raises(ValueError):
        StructureConfig(2, 2, 0, "gaussian")


# --- learning ------------------------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_em_monotone(seed):
    rng = np.random.default_rng(seed)
    vs = names(int(rng.integers(2, 7)))
    v = random_vtree({x: 2 for x in vs}, rng)
    c = build_random(random_labelling(v, rng), StructureConfig(2, 2, seed))
    d = random_data(rng, vs)
    for alpha in (ALPHA, 0.0):
        _, trace = fit_em(c, d, iters=30, tol=0.0, alpha=alpha)
        assert all(b >= a - 1e-9 for a, b in zip(trace, trace[1:]))


def test_em_improves_likelihood(rng):
    vs = names(5)
    v = random_vtree({x: 2 for x in vs}, rng)
    c = build_random(universal(v), StructureConfig(2, 2, 1))
    d = random_data(rng, vs, n=500)
    fitted, trace = fit_em(c, d, iters=20, alpha=0.0)
    assert log_likelihood(fitted, d) == pytest.approx(trace[-1], rel=1e-12)
    assert trace[-1] > trace[0]


def test_fit_mle_closed_form(rng):
    cards = {"A": 2, "B": 3, "C": 2}
    order = ["B", "A", "C"]
    c = expanded_chain(cards, order)
    assert check_qdet(c, order)
    d = random_data(rng, ["A", "B", "C"], n=400, card=2)
    d = Dataset(d.columns, np.column_stack([d.data[:, 0], rng.integers(0, 3, len(d)), d.data[:, 2]]))
    fitted = fit_mle(c, d, ALPHA)
    got = table_from_circuit(fitted).aligned(order).values
    assert np.allclose(got, smoothed_chain_rule(d, cards, order, ALPHA), rtol=1e-12, atol=0)
    assert total_mass(fitted) == pytest.approx(1.0, abs=1e-9)


def test_mle_is_em_fixed_point(rng):
    vs = names(4)
    v = random_vtree({x: 2 for x in vs}, rng)
    c = build_random(optimal_labelling(v, [vs]), StructureConfig(2, 2, 4))
    d = random_data(rng, vs)
    m = fit_mle(c, d)
    e, trace = fit_em(m, d, iters=1)
    for a, b in zip(m.layers.values(), e.layers.values()):
        if a.is_leaf:
            assert np.abs(a.mix - b.mix).max() < 1e-9
        else:
            assert np.abs(a.w - b.w).max() < 1e-9
    # any single EM step from the same start does no better
    _, em1 = fit_em(c, d, iters=1, alpha=0.0)
    assert log_likelihood(fit_mle(c, d, 0.0), d) >= em1[-1] - 1e-9


def test_mle_repeated_row(rng):
    vs = names(3)
    v = random_vtree({x: 2 for x in vs}, rng)
    c = build_random(optimal_labelling(v, [vs]), StructureConfig(2, 2, 2))
    d = Dataset(vs, np.tile([1, 0, 1], (50, 1)))
    m = fit_mle(c, d)
    vals = evaluate_batch(m, _enumerate_states([2, 2, 2]))
    assert int(np.argmax(vals)) == 0b101


def test_mle_needs_determinism(rng):
    v = random_vtree({x: 2 for x in names(3)}, rng)
    c = build_random(universal(v), StructureConfig(2, 2, 0))
    with pytest.raises(CircuitError):
        fit_mle(c, random_data(rng, names(3)))
    with pytest.raises(CircuitError):
        fit_em(c, Dataset(names(3), np.zeros((0, 3))))


def test_symmetric_mixture():
    # two indicator blocks over X, mixed at the root; balanced data
    leaves = [(Indicator("X", s),) for s in range(4)]
    mix = np.array([[0.9, 0.1, 0.0, 0.0], [0.0, 0.0, 0.3, 0.7]])
    # the root mixes the blocks through a vtree with a one-state dummy variable
    vt = Vtree.from_nested(("X", "D"), {"X": 4, "D": 1})
    x_node = next(m for m in vt.nodes if vt.scope(m) == {"X"})
    d_node = next(m for m in vt.nodes if vt.scope(m) == {"D"})
    layers = {
        x_node: LeafLayer(x_node, leaves, mix),
        d_node: LeafLayer(d_node, [(Indicator("D", 0),)], np.ones((1, 1))),
        vt.root: SumLayer.from_entries(vt.root, (1, 2, 1), [(0, 0, 0, 0.8), (0, 1, 0, 0.2)]),
    }
    c = Circuit(universal(vt), layers, 0)
    data = Dataset(["X", "D"], [[s, 0] for s in range(4) for _ in range(25)])
    fitted, _ = fit_em(c, data, iters=200, tol=0.0, alpha=0.0)
    assert fitted.layers[vt.root].w == pytest.approx([0.5, 0.5], abs=1e-6)
