import numpy as np
import pytest

from mdcircuits.oracle import (
    CPT,
    BayesNet,
    BNVar,
    Dataset,
    JointTable,
    OracleError,
    backdoor_table,
    bn_sample,
    compile_table,
    frontdoor_table,
    napkin_table,
    random_bn,
    t_marg,
    t_prod,
    table_from_circuit,
)
from mdcircuits.vtree import MdVtree, Vtree, chain_vtree, optimal_labelling, universal


def intervene(bn: BayesNet, x: str, state: int) -> BayesNet:
    """Truncated factorization: X's CPT becomes a point mass."""
    point = np.zeros((1, bn.cards[x]))
    point[0, state] = 1.0
    cpts = [CPT(x, (), point) if c.var == x else c for c in bn.cpts]
    return BayesNet(bn.vars, cpts)


def do_table(bn: BayesNet, x: str, y: str) -> np.ndarray:
    out = np.zeros((bn.cards[x], bn.cards[y]))
    for s in range(bn.cards[x]):
        full = intervene(bn, x, s).full_joint()
        out[s] = t_marg(full, [v for v in full.variables if v != y]).values
    return out


def test_backdoor_hand_example():
    # Z -> X -> Y, Z -> Y
    bn = BayesNet(
        (BNVar("Z", 2), BNVar("X", 2), BNVar("Y", 2)),
        (
            CPT("Z", (), np.array([[0.3, 0.7]])),
            CPT("X", ("Z",), np.array([[0.9, 0.1], [0.2, 0.8]])),
            CPT("Y", ("X", "Z"), np.array([[0.6, 0.4], [0.5, 0.5], [0.1, 0.9], [0.3, 0.7]])),
        ),
    )
    bd = backdoor_table(bn.joint(), ["X"], ["Y"], ["Z"]).aligned(["X", "Y"])
    # p(Y=1 | do X=1) = 0.3 * 0.9 + 0.7 * 0.7
    assert bd.values[1, 1] == pytest.approx(0.76, abs=1e-12)
    assert bd.values[0, 1] == pytest.approx(0.3 * 0.4 + 0.7 * 0.5, abs=1e-12)
    assert np.allclose(bd.values, do_table(bn, "X", "Y"), atol=1e-12)


def test_backdoor_matches_intervention(rng):
    for _ in range(10):
        names = ["Z1", "Z2", "X", "Y"]
        edges = {"Z2": ["Z1"], "X": ["Z1", "Z2"], "Y": ["X", "Z1", "Z2"]}
        bn = random_bn(names, rng, edges=edges)
        bd = backdoor_table(bn.joint(), ["X"], ["Y"], ["Z1", "Z2"]).aligned(["X", "Y"])
        assert np.allclose(bd.values, do_table(bn, "X", "Y"), atol=1e-12)


def test_frontdoor_matches_intervention(rng):
    for _ in range(10):
        names = ["U", "X", "M", "Y"]
        edges = {"X": ["U"], "M": ["X"], "Y": ["M", "U"]}
        bn = random_bn(names, rng, edges=edges, hidden=["U"])
        fd = frontdoor_table(bn.joint(), ["X"], ["Y"], ["M"]).aligned(["X", "Y"])
        assert np.allclose(fd.values, do_table(bn, "X", "Y"), atol=1e-12)


def test_napkin_matches_intervention(rng):
    for _ in range(10):
        names = ["U1", "U2", "W", "Z", "X", "Y"]
        edges = {"W": ["U1", "U2"], "Z": ["W"], "X": ["Z", "U1"], "Y": ["X", "U2"]}
        bn = random_bn(names, rng, edges=edges, hidden=["U1", "U2"])
        truth = do_table(bn, "X", "Y")
        for z in (0, 1):
            nk = napkin_table(bn.joint(), ["X"], ["Y"], ["Z"], ["W"], [], None, {"Z": z}).aligned(["X", "Y"])
            assert np.allclose(nk.values, truth, atol=1e-12)
            one = napkin_table(bn.joint(), ["X"], ["Y"], ["Z"], ["W"], [], {"X": 1}, {"Z": z})
            assert np.allclose(one.values, truth[1], atol=1e-12)


def test_bn_validation():
    with pytest.raises(OracleError):
        BayesNet((BNVar("A", 2),), (CPT("A", (), np.array([[0.5, 0.6]])),))
    with pytest.raises(OracleError):
        BayesNet(
            (BNVar("A", 2), BNVar("B", 2)),
            (CPT("A", ("B",), np.full((2, 2), 0.5)), CPT("B", ("A",), np.full((2, 2), 0.5))),
        )
    with pytest.raises(OracleError):
        BayesNet((BNVar("A", 2),), ())


def test_bn_sample_statistics(rng):
    bn = random_bn(["A", "B", "C", "H"], rng, hidden=["H"], card=3)
    d = bn_sample(bn, 200_000, seed=3)
    assert d.columns == ("A", "B", "C")
    emp = np.zeros((3, 3, 3))
    np.add.at(emp, tuple(d.aligned(["A", "B", "C"]).T), 1)
    emp /= len(d)
    assert np.abs(emp - bn.joint().aligned(["A", "B", "C"]).values).max() < 0.01
    again = bn_sample(bn, 50, seed=3)
    assert np.array_equal(again.data, bn_sample(bn, 50, seed=3).data)


def test_compile_roundtrip_chain(rng):
    cards = {x: 2 for x in "ABCDE"}
    for _ in range(20):
        order = rng.permutation(list("ABCDE")).tolist()
        v = chain_vtree(cards, [[x] for x in order], rng)
        t = JointTable(list("ABCDE"), [2] * 5, rng.random([2] * 5))
        # requirements nested along the chain: each one splits off a prefix
        reqs = [order[:k] for k in sorted(set(rng.integers(1, 6, size=2).tolist()))]
        c = compile_table(t, optimal_labelling(v, reqs))
        assert table_from_circuit(c).allclose(t, rtol=1e-12)


def test_compile_factorization_error():
    v = Vtree.from_nested((("A", "B"), "C"))
    w = MdVtree(v, {m: frozenset() if m == v.root else v.scope(m) for m in v.nodes})
    ab = JointTable(["A", "B"], [2, 2], [[0.1, 0.2], [0.3, 0.4]])
    c = JointTable(["C"], [2], [0.25, 0.75])
    # independent across the root split: fine
    assert table_from_circuit(compile_table(t_prod(ab, c), w)).allclose(t_prod(ab, c))
    dep = JointTable(["A", "B", "C"], [2] * 3, np.arange(1, 9, dtype=float))
    with pytest.raises(OracleError, match="does not factor"):
        compile_table(dep, w)
    with pytest.raises(OracleError):
        compile_table(JointTable(["A", "B", "C"], [2] * 3, np.zeros(8)), universal(v))


def test_dataset_checks():
    with pytest.raises(OracleError):
        Dataset(("A", "B"), np.zeros((3, 3)))
    d = Dataset(("A", "B"), [[0, 1], [1, 0]])
    assert d.aligned(["B"]).ravel().tolist() == [1, 0]
    with pytest.raises(OracleError):
        d.aligned(["C"])


def test_table_from_circuit_full_labelling(rng):
    v = Vtree.from_nested(("A", ("B", "C")), {"A": 2, "B": 3, "C": 2})
    t = JointTable(["A", "B", "C"], [2, 3, 2], rng.random((2, 3, 2)))
    for w in (universal(v), optimal_labelling(v, [["A", "B", "C"]])):
        assert table_from_circuit(compile_table(t, w)).allclose(t, rtol=1e-12)
