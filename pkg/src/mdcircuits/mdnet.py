"""MDNets: random circuit structures that exactly respect a regular md-vtree.

Every layer is split into node groups. Units inside one group have disjoint
supports over the layer label, which is what lets the parent layer keep its
marginal determinism:

* a mixing layer copies the label of one child; every unit takes distinct
  children from a single group of that child and pairs each with any unit of
  the other child;
* a synthesizing layer takes one group from each child and splits all pairs
  among the units of the new group;
* a layer labelled universal has no constraint; each unit mixes every pair of
  one left and one right group.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .circuit import (
    Categorical,
    Circuit,
    CircuitError,
    Indicator,
    LeafLayer,
    SumLayer,
    _leaf_values,
    make_leaf,
)
from .oracle import Dataset
from .vtree import MdVtree, U, implies_qdet, is_regular, lab_union

log = logging.getLogger(__name__)

ALPHA = 0.01
CHUNK = 2048


@dataclass(frozen=True)
class StructureConfig:
    groups_per_layer: int = 2
    nodes_per_group: int = 2
    seed: int = 0
    leaf_kind: str = "categorical"

    def __post_init__(self) -> None:
        if self.groups_per_layer < 1 or self.nodes_per_group < 1:
            raise ValueError("group counts must be at least 1")
        if self.leaf_kind != "categorical":
            raise ValueError(f"unsupported leaf kind {self.leaf_kind!r}")


@dataclass
class MDNet:
    circuit: Circuit
    groups: dict = field(default_factory=dict)  # node -> list of unit-index lists
    kinds: dict = field(default_factory=dict)  # node -> layer_kind()
    sources: dict = field(default_factory=dict)  # node -> per output group: (left group, right group or None)


def layer_kind(w: MdVtree, m: int) -> str:
    v = w.vtree
    if v.is_leaf(m):
        return "leaf"
    l, r = v.children(m)
    a, b, c = w.psi[l], w.psi[r], w.psi[m]
    if c is U:
        return "free"
    if a is not U and b is not U and c == lab_union(a, b):
        return "synthesizing"
    if c == a:
        return "mixing-left"
    if c == b:
        return "mixing-right"
    if c == frozenset():
        return "factor"
    raise CircuitError(f"label of node {m} is neither a child label, their union, nor empty")


def _split(items: list, k: int, rng: np.random.Generator) -> list[list]:
    """Random partition of ``items`` into ``k`` non-empty parts."""
    order = [items[i] for i in rng.permutation(len(items))]
    cuts = sorted(rng.choice(np.arange(1, len(order)), size=k - 1, replace=False).tolist()) if k > 1 else []
    bounds = [0] + cuts + [len(order)]
    return [order[bounds[i] : bounds[i + 1]] for i in range(k)]


def _grid_split(ga: list, gb: list, k: int, rng: np.random.Generator) -> list[list]:
    """Partition the pairs of ``ga`` x ``gb`` into ``k`` contiguous blocks.

    Pairs are ordered with a randomly chosen side as the major key, so the
    units of that side stay separated whenever ``k`` allows it.
    """
    a = [ga[i] for i in rng.permutation(len(ga))]
    b = [gb[i] for i in rng.permutation(len(gb))]
    if rng.random() < 0.5:
        combos = [(j, kk) for j in a for kk in b]
    else:
        combos = [(j, kk) for kk in b for j in a]
    k = min(k, len(combos))
    bounds = [len(combos) * i // k for i in range(k + 1)]
    return [combos[bounds[i] : bounds[i + 1]] for i in range(k)]


def _blocks(n: int, k: int, rng: np.random.Generator) -> list[range]:
    cuts = sorted(rng.choice(np.arange(1, n), size=k - 1, replace=False).tolist()) if k > 1 else []
    bounds = [0] + cuts + [n]
    return [range(bounds[i], bounds[i + 1]) for i in range(k)]


class _Layer:
    """Units under construction: each unit is a list of children."""

    def __init__(self) -> None:
        self.units: list[list] = []
        self.groups: list[list[int]] = []
        self.sources: list = []
        self.full: list[int] = []  # units whose support covers the whole domain
        self.primary: list[int] = []  # groups that are not covers

    def group(self, parts: list[list], source, full: bool = False, cover: bool = False) -> None:
        if not cover:
            self.primary.append(len(self.groups))
        ids = []
        for part in parts:
            ids.append(len(self.units))
            self.units.append(part)
        self.groups.append(ids)
        self.sources.append(source)
        if full or len(ids) == 1:
            self.full.extend(ids)


def build_mdnet(w: MdVtree, cfg: StructureConfig) -> MDNet:
    """Random MDNet structure with random positive, locally normalized weights.

    Every group's supports together cover the node's domain. A group with
    several units also gets a singleton "cover" group holding all of its
    children, so that mixing layers always find full-support partners.
    """
    if not is_regular(w):
        raise CircuitError("MDNet construction needs a regular md-vtree")
    v = w.vtree
    rng = np.random.default_rng(cfg.seed)
    G, npg = cfg.groups_per_layer, cfg.nodes_per_group
    net = MDNet(circuit=None)  # type: ignore[arg-type]
    built: dict[int, _Layer] = {}
    layers = {}
    for m in v.postorder():
        root = m == v.root
        n_out, size = (1, 1) if root else (G, npg)
        kind = layer_kind(w, m)
        net.kinds[m] = kind
        lay = _Layer()
        if kind == "leaf":
            layers[m] = _leaf_layer(w, m, n_out, size, rng, v.cards, lay)
        else:
            l, r = v.children(m)
            _wire(kind, built[l], built[r], lay, n_out, size, rng)
            layers[m] = _sum_layer(m, lay, layers[l].num_nodes, layers[r].num_nodes, rng)
        built[m] = lay
        net.groups[m] = lay.groups
        net.sources[m] = lay.sources
    net.circuit = Circuit(w, layers, 0)
    return net


def _add_covers(lay: _Layer, n_groups: int) -> None:
    for g in range(n_groups):
        ids = lay.groups[g]
        if len(ids) > 1:
            lay.group([[c for i in ids for c in lay.units[i]]], ("cover", g), cover=True)


def _wire(kind: str, left: _Layer, right: _Layer, lay: _Layer, n_out: int, size: int, rng) -> None:
    gl, gr = left.groups, right.groups
    if kind in ("synthesizing", "free"):
        pairs = [(a, b) for a in left.primary for b in right.primary]
        pairs = [pairs[i] for i in rng.permutation(len(pairs))]
        for g in range(n_out):
            a, b = pairs[g % len(pairs)]
            combos = [(j, k) for j in gl[a] for k in gr[b]]
            if kind == "synthesizing":
                lay.group(_grid_split(gl[a], gr[b], size, rng), (a, b))
            else:
                parts = [combos]
                for _ in range(size - 1):
                    a2, b2 = pairs[int(rng.integers(len(pairs)))]
                    parts.append([(j, k) for j in gl[a2] for k in gr[b2]])
                lay.group(parts, (a, b), full=True)
        if kind == "synthesizing":
            _add_covers(lay, n_out)
        return
    lfull, rfull = left.full, right.full
    if kind == "factor":
        for _ in range(n_out):
            lay.group([[(lfull[int(rng.integers(len(lfull)))], rfull[int(rng.integers(len(rfull)))])]], None)
        return
    copy_left = kind == "mixing-left"
    gc = gl if copy_left else gr
    partners = rfull if copy_left else lfull
    # a cover group would collapse the mixture into a single product
    cands = left.primary if copy_left else right.primary
    order = [cands[i] for i in rng.permutation(len(cands))]
    for g in range(n_out):
        src = order[g % len(order)]
        parts = _split(list(gc[src]), min(size, len(gc[src])), rng)
        units = []
        for part in parts:
            unit = []
            for u in part:
                o = partners[int(rng.integers(len(partners)))]
                unit.append((u, o) if copy_left else (o, u))
            units.append(unit)
        lay.group(units, (src, None) if copy_left else (None, src))
    _add_covers(lay, n_out)


def _sum_layer(m: int, lay: _Layer, kl: int, kr: int, rng) -> SumLayer:
    entries = []
    for i, unit in enumerate(lay.units):
        kids = sorted(set(unit))
        wts = rng.dirichlet(np.ones(len(kids)))
        entries.extend((i, j, k, x) for (j, k), x in zip(kids, wts))
    return SumLayer.from_entries(m, (len(lay.units), kl, kr), entries)


def _leaf_layer(w: MdVtree, m: int, n_groups: int, npg: int, rng, cards, lay: _Layer) -> LeafLayer:
    v = w.vtree
    names = sorted(v.scope(m))
    lab = w.psi[m]
    q = [] if lab is U else [x for x in names if x in lab]
    free = [x for x in names if x not in q]
    states = list(itertools.product(*[range(cards[x]) for x in q]))
    leaves: list[tuple] = []
    for _ in range(n_groups):
        parts = []
        # unlabelled: npg independent full-support units; an empty label allows only one
        blocks = _blocks(len(states), min(npg, len(states)), rng) if q else [range(1)] * (npg if lab is U else 1)
        for blk in blocks:
            part = []
            for s in blk:
                fs = [Indicator(x, int(st)) for x, st in zip(q, states[s])] if q else []
                fs += [Categorical(x, rng.dirichlet(np.ones(cards[x]))) for x in free]
                part.append(len(leaves))
                leaves.append(make_leaf(fs))
            parts.append(part)
        lay.group(parts, None, full=not q)
    _add_covers(lay, n_groups)
    mix = np.zeros((len(lay.units), len(leaves)))
    for i, unit in enumerate(lay.units):
        mix[i, unit] = rng.dirichlet(np.ones(len(unit)))
    return LeafLayer(m, leaves, mix)


def build_random(w: MdVtree, cfg: StructureConfig) -> Circuit:
    return build_mdnet(w, cfg).circuit


# --- learning -------------------------------------------------------------


@dataclass
class _Flows:
    edges: dict  # internal node -> (nnz,) expected counts
    mix: dict  # leaf node -> (K, T) expected counts
    cats: dict  # (leaf node, leaf index, var) -> (card,) expected counts
    loglik: float


def _data_matrix(c: Circuit, data: Dataset) -> np.ndarray:
    if len(data) == 0:
        raise CircuitError("dataset is empty")
    x = data.aligned(c.variables)
    for i, v in enumerate(c.variables):
        col = x[:, i]
        if col.min() < 0 or col.max() >= c.cards[v]:
            raise CircuitError(f"column {v} has states outside 0..{c.cards[v] - 1}")
    return x


def _structure(c: Circuit) -> Circuit:
    """Same support with every positive parameter set to one."""
    layers = {}
    for m, layer in c.layers.items():
        if layer.is_leaf:
            leaves = [
                tuple(Categorical(f.var, (f.weights > 0).astype(float)) if isinstance(f, Categorical) else f for f in leaf)
                for leaf in layer.leaves
            ]
            layers[m] = LeafLayer(m, leaves, (layer.mix > 0).astype(float))
        else:
            layers[m] = SumLayer(m, layer.shape, layer.idx, (layer.w > 0).astype(float))
    return Circuit(c.mdvtree, layers, c.root_index)


def _expected_counts(c: Circuit, x: np.ndarray) -> _Flows:
    v = c.vtree
    col = {name: i for i, name in enumerate(c.variables)}
    edges = {m: np.zeros(len(c.layers[m].w)) for m in v.internal_nodes()}
    mixc = {m: np.zeros(c.layers[m].mix.shape) for m in v.leaves()}
    cats: dict = {}
    ll = 0.0
    # arrays are (units, examples) so that gathers copy whole rows
    routes = {}
    for m in v.internal_nodes():
        layer = c.layers[m]
        lch, rch = v.children(m)
        nnz = len(layer.w)
        rows = np.arange(nnz)
        routes[m] = (
            layer.mixer().T.tocsr(),
            sp.csr_matrix((np.ones(nnz), (layer.idx[:, 1], rows)), shape=(c.layers[lch].num_nodes, nnz)),
            sp.csr_matrix((np.ones(nnz), (layer.idx[:, 2], rows)), shape=(c.layers[rch].num_nodes, nnz)),
        )
    for start in range(0, x.shape[0], CHUNK):
        xb = x[start : start + CHUNK]
        n = xb.shape[0]
        vals: dict[int, np.ndarray] = {}
        lvs: dict[int, np.ndarray] = {}
        for m in v.postorder():
            layer = c.layers[m]
            if layer.is_leaf:
                lvs[m] = _leaf_values(c, layer, xb, col)
                vals[m] = layer.mix @ lvs[m].T
            else:
                lch, rch = v.children(m)
                prods = vals[lch][layer.idx[:, 1]] * vals[rch][layer.idx[:, 2]]
                vals[m] = routes[m][0] @ prods
        p = vals[v.root][c.root_index]
        if np.any(p <= 0):
            raise CircuitError(f"{int(np.sum(p <= 0))} datapoints lie outside the model support")
        ll += float(np.log(p).sum())
        # top-down derivatives, already divided by p
        grad = {v.root: np.zeros((c.layers[v.root].num_nodes, n))}
        grad[v.root][c.root_index] = 1.0 / p
        for m in v.preorder():
            layer = c.layers[m]
            d = grad.pop(m)
            if layer.is_leaf:
                mixc[m] += layer.mix * (d @ lvs[m])
                flow = (layer.mix.T @ d) * lvs[m].T
                for t, leaf in enumerate(layer.leaves):
                    for f in leaf:
                        if isinstance(f, Categorical):
                            key = (m, t, f.var)
                            cnt = np.bincount(xb[:, col[f.var]], weights=flow[t], minlength=c.cards[f.var])
                            cats[key] = cats.get(key, 0.0) + cnt
                continue
            lch, rch = v.children(m)
            de = d[layer.idx[:, 0]] * layer.w[:, None]
            lv, rv = vals[lch][layer.idx[:, 1]], vals[rch][layer.idx[:, 2]]
            de_r = de * rv
            edges[m] += (de_r * lv).sum(axis=1)
            _, to_l, to_r = routes[m]
            grad[lch] = grad.get(lch, 0.0) + to_l @ de_r
            grad[rch] = grad.get(rch, 0.0) + to_r @ (de * lv)
    return _Flows(edges, mixc, cats, ll)


def _normalize_groups(counts: np.ndarray, groups: np.ndarray, size: int, old: np.ndarray) -> np.ndarray:
    """Normalize within groups; groups without any count keep ``old``."""
    tot = np.bincount(groups, weights=counts, minlength=size)[groups]
    return np.where(tot > 0, counts / np.where(tot > 0, tot, 1.0), old)


def _m_step(c: Circuit, fl: _Flows, alpha: float) -> Circuit:
    layers = {}
    for m, layer in c.layers.items():
        if layer.is_leaf:
            mix = np.where(layer.mix > 0, fl.mix[m] + alpha, 0.0)
            tot = mix.sum(axis=1, keepdims=True)
            mix = np.where(tot > 0, mix / np.where(tot > 0, tot, 1.0), layer.mix)
            leaves = []
            for t, leaf in enumerate(layer.leaves):
                new = []
                for f in leaf:
                    if isinstance(f, Categorical):
                        cnt = fl.cats.get((m, t, f.var), np.zeros(len(f.weights)))
                        wv = np.where(f.weights > 0, cnt + alpha, 0.0)
                        s = wv.sum()
                        new.append(Categorical(f.var, wv / s if s > 0 else f.weights))
                    else:
                        new.append(f)
                leaves.append(tuple(new))
            layers[m] = LeafLayer(m, leaves, mix)
        else:
            cnt = fl.edges[m] + alpha
            wts = _normalize_groups(cnt, layer.idx[:, 0], layer.num_nodes, layer.w) if len(cnt) else cnt
            layers[m] = SumLayer(m, layer.shape, layer.idx, wts)
    return Circuit(c.mdvtree, layers, c.root_index, c.signed)


def log_prior(c: Circuit, alpha: float) -> float:
    """alpha times the sum of log parameters (zero parameters are structural and skipped)."""
    if alpha == 0:
        return 0.0
    tot = 0.0
    for layer in c.layers.values():
        if layer.is_leaf:
            tot += float(np.log(layer.mix[layer.mix > 0]).sum())
            for leaf in layer.leaves:
                for f in leaf:
                    if isinstance(f, Categorical):
                        tot += float(np.log(f.weights[f.weights > 0]).sum())
        else:
            tot += float(np.log(layer.w[layer.w > 0]).sum())
    return alpha * tot


def log_likelihood(c: Circuit, data: Dataset) -> float:
    return _expected_counts(c, _data_matrix(c, data)).loglik


def fit_mle(c: Circuit, data: Dataset, alpha: float = ALPHA) -> Circuit:
    """Closed-form smoothed counts for a deterministic circuit."""
    if not implies_qdet(c.mdvtree, c.scope):
        raise CircuitError("closed-form estimation needs an md-vtree implying full determinism")
    x = _data_matrix(c, data)
    fl = _expected_counts(_structure(c), x)
    return _m_step(c, fl, alpha)


def fit_em(
    c: Circuit,
    data: Dataset,
    iters: int = 50,
    tol: float = 1e-6,
    alpha: float = ALPHA,
) -> tuple[Circuit, list[float]]:
    """EM on sum weights, mixing weights and categorical leaves.

    The trace holds the smoothed objective (log-likelihood plus
    ``log_prior``), which EM with pseudo-counts never decreases; with
    ``alpha=0`` it is the plain log-likelihood. Iteration stops once the
    gain per example drops below ``tol``.
    """
    if iters < 1:
        raise ValueError("iters must be at least 1")
    x = _data_matrix(c, data)
    trace: list[float] = []
    fl = _expected_counts(c, x)
    trace.append(fl.loglik + log_prior(c, alpha))
    for it in range(iters):
        c = _m_step(c, fl, alpha)
        fl = _expected_counts(c, x)
        trace.append(fl.loglik + log_prior(c, alpha))
        gain = trace[-1] - trace[-2]
        log.debug("em iteration %d objective %.6f", it, trace[-1])
        if gain < tol * len(x):
            break
    return c, trace


def empirical_table(data: Dataset, variables: Sequence[str], cards) -> np.ndarray:
    x = data.aligned(variables)
    shape = [cards[v] for v in variables]
    flat = np.ravel_multi_index(x.T, shape) if len(variables) else np.zeros(len(x), dtype=np.int64)
    return np.bincount(flat, minlength=int(np.prod(shape))).reshape(shape).astype(float)

