import itertools

import numpy as np
import pytest

from mdcircuits.circuit import Circuit, Indicator, LeafLayer, SumLayer, _enumerate_states, layer_values
from mdcircuits.mdnet import StructureConfig, build_random, empirical_table
from mdcircuits.oracle import Dataset
from mdcircuits.vtree import U, MdVtree, Vtree, chain_vtree, optimal_labelling, random_vtree, universal


def names(n):
    return [f"V{i}" for i in range(n)]


def random_labelling(v: Vtree, rng: np.random.Generator, kind: str | None = None) -> MdVtree:
    """Regular md-vtree: universal, full determinism or random requirement sets."""
    kind = kind or rng.choice(["universal", "full", "random", "random"])
    vs = sorted(v.all_vars)
    if kind == "universal":
        return universal(v)
    if kind == "full":
        return optimal_labelling(v, [vs])
    k = int(rng.integers(1, 4))
    reqs = [rng.choice(vs, size=int(rng.integers(1, len(vs) + 1)), replace=False).tolist() for _ in range(k)]
    return optimal_labelling(v, reqs)


def random_model(rng: np.random.Generator, n: int, kind: str | None = None, card: int = 2, groups: int = 2, npg: int = 2):
    cards = {x: card for x in names(n)}
    v = random_vtree(cards, rng)
    w = random_labelling(v, rng, kind)
    return build_random(w, StructureConfig(groups, npg, int(rng.integers(2**31))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def quad_vtree() -> Vtree:
    return Vtree.from_nested((("V1", "V2"), ("V3", "V4")))


def quad_node(v: Vtree, vars_) -> int:
    target = frozenset(vars_)
    return next(m for m in v.nodes if v.scope(m) == target)


def random_raw_labels(v: Vtree, rng) -> MdVtree:
    psi = {}
    for m in v.nodes:
        if rng.random() < 0.2:
            psi[m] = U
        else:
            sc = sorted(v.scope(m))
            psi[m] = frozenset(x for x in sc if rng.random() < 0.5)
    return MdVtree(v, psi)


def group_invariant_violations(net) -> list:
    """Pairs of units in one group whose supports over the node label overlap."""
    c = net.circuit
    states = _enumerate_states([c.cards[x] for x in c.variables])
    vals = layer_values(c, states)
    pos = {x: i for i, x in enumerate(c.variables)}
    bad = []
    for m, groups in net.groups.items():
        lab = c.mdvtree.psi[m]
        if lab is U:
            continue
        cols = [pos[x] for x in sorted(lab)]
        keys = [tuple(r) for r in states[:, cols]]
        for g, ids in enumerate(groups):
            supp = [{k for k, val in zip(keys, vals[m][:, i]) if val > 0} for i in ids]
            for a, b in itertools.combinations(range(len(ids)), 2):
                if supp[a] & supp[b]:
                    bad.append((m, g, ids[a], ids[b]))
    return bad


def expanded_chain(cards: dict, order: list) -> Circuit:
    """Deterministic circuit with one unit per prefix assignment along a right-linear vtree."""
    v = chain_vtree(cards, [[x] for x in order], np.random.default_rng(0))
    w = optimal_labelling(v, [order])
    layers = {}
    prefixes = [1]
    for x in order[:-1]:
        prefixes.append(prefixes[-1] * cards[x])
    # internal nodes: unit p (a prefix) picks state s of x and continues at prefix (p, s)
    m = v.root
    for i, x in enumerate(order[:-1]):
        k = cards[x]
        l, r = v.children(m)
        layers[l] = LeafLayer(l, [(Indicator(x, s),) for s in range(k)], np.eye(k))
        entries = [(p, s, p * k + s, 1.0 / k) for p in range(prefixes[i]) for s in range(k)]
        n_right = prefixes[i + 1]
        layers[m] = SumLayer.from_entries(m, (prefixes[i], k, n_right), entries)
        m = r
    last = order[-1]
    k = cards[last]
    layers[m] = LeafLayer(m, [(Indicator(last, s),) for s in range(k)], np.full((prefixes[-1], k), 1.0 / k))
    return Circuit(w, layers, 0)


def smoothed_chain_rule(data: Dataset, cards: dict, order: list, alpha: float) -> np.ndarray:
    n = empirical_table(data, order, cards)
    out = np.ones(n.shape)
    for i, x in enumerate(order):
        head = n.sum(axis=tuple(range(i + 1, len(order))))
        parent = head.sum(axis=i, keepdims=True)
        cond = (head + alpha) / (parent + alpha * cards[x])
        out *= cond.reshape(cond.shape + (1,) * (len(order) - i - 1))
    return out
