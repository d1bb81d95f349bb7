"""Layered probabilistic circuits that exactly respect an md-vtree.

Every vtree node ``m`` owns one layer holding ``K_m`` sum units.

* A leaf layer holds a list of leaves and a ``(K_m, n_leaves)`` mixing matrix.
  A leaf is a tuple of univariate factors, one per variable of the vtree
  leaf's scope (an empty tuple is the constant 1).
* An internal layer holds a sparse weight tensor of shape
  ``(K_m, K_left, K_right)`` stored as coordinates, with
  ``p[m, i] = sum_jk w[i, j, k] * p[left, j] * p[right, k]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .vtree import MdVtree, Vtree, lab_str, rename_mdvtree

DENSE_LIMIT = 4096
TINY = 1e-300


class CircuitError(ValueError):
    pass


# number of layers constructed so far; lets tests confirm that label-only
# analyses never build circuits
LAYER_ALLOCATIONS = [0]


# --- leaves --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Categorical:
    var: str
    weights: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float).copy())

    def table(self, card: int) -> np.ndarray:
        if len(self.weights) != card:
            raise CircuitError(f"categorical leaf on {self.var} has {len(self.weights)} weights, expected {card}")
        return self.weights


@dataclass(frozen=True)
class Indicator:
    var: str
    state: int

    def table(self, card: int) -> np.ndarray:
        if not 0 <= self.state < card:
            raise CircuitError(f"indicator state {self.state} out of range for {self.var}")
        t = np.zeros(card)
        t[self.state] = 1.0
        return t


@dataclass(frozen=True)
class ConstantOne:
    var: str

    def table(self, card: int) -> np.ndarray:
        return np.ones(card)


LeafFunction = Union[Categorical, Indicator, ConstantOne]
Leaf = tuple


def make_leaf(factors: Iterable[LeafFunction]) -> Leaf:
    fs = sorted(factors, key=lambda f: f.var)
    if len({f.var for f in fs}) != len(fs):
        raise CircuitError("leaf has two factors on the same variable")
    return tuple(fs)


def leaf_vars(leaf: Leaf) -> frozenset:
    return frozenset(f.var for f in leaf)


def categorical_from(table: np.ndarray, var: str) -> LeafFunction:
    """Compact leaf for a table: indicator or constant when it is one."""
    t = np.asarray(table, dtype=float)
    nz = np.flatnonzero(t)
    if len(nz) == 1 and t[nz[0]] == 1.0:
        return Indicator(var, int(nz[0]))
    if np.all(t == 1.0):
        return ConstantOne(var)
    return Categorical(var, t)


# --- layers --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LeafLayer:
    node: int
    leaves: tuple
    mix: np.ndarray

    def __post_init__(self) -> None:
        LAYER_ALLOCATIONS[0] += 1
        object.__setattr__(self, "leaves", tuple(self.leaves))
        mix = np.asarray(self.mix, dtype=float)
        if mix.ndim != 2:
            raise CircuitError("leaf mixing matrix must be two-dimensional")
        object.__setattr__(self, "mix", mix)

    @property
    def num_nodes(self) -> int:
        return self.mix.shape[0]

    @property
    def is_leaf(self) -> bool:
        return True


@dataclass(frozen=True, eq=False)
class SumLayer:
    node: int
    shape: tuple
    idx: np.ndarray
    w: np.ndarray
    _dense: list = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        LAYER_ALLOCATIONS[0] += 1
        idx = np.asarray(self.idx, dtype=np.int64).reshape(-1, 3)
        w = np.asarray(self.w, dtype=float).reshape(-1)
        if len(idx) != len(w):
            raise CircuitError("weight coordinates and values differ in length")
        object.__setattr__(self, "idx", idx)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @property
    def num_nodes(self) -> int:
        return self.shape[0]

    @property
    def is_leaf(self) -> bool:
        return False

    @classmethod
    def from_dense(cls, node: int, theta: np.ndarray) -> "SumLayer":
        theta = np.asarray(theta, dtype=float)
        nz = np.argwhere(theta != 0)
        return cls(node, theta.shape, nz, theta[tuple(nz.T)] if len(nz) else np.zeros(0))

    @classmethod
    def from_entries(cls, node: int, shape, entries: Iterable) -> "SumLayer":
        """Coordinate entries ``(i, j, k, w)``; duplicates are summed."""
        acc: dict[tuple[int, int, int], float] = {}
        for i, j, k, w in entries:
            if w != 0:
                key = (int(i), int(j), int(k))
                acc[key] = acc.get(key, 0.0) + float(w)
        keys = sorted(k for k, v in acc.items() if v != 0)
        return cls(node, shape, np.array(keys, dtype=np.int64).reshape(-1, 3), np.array([acc[k] for k in keys]))

    def dense(self) -> np.ndarray:
        size = int(np.prod(self.shape))
        if size > DENSE_LIMIT:
            raise CircuitError(f"layer {self.node} has {size} entries; too large to materialize")
        if not self._dense:
            t = np.zeros(self.shape)
            np.add.at(t, tuple(self.idx.T), self.w)
            self._dense.append(t)
        return self._dense[0]

    def entries(self):
        for (i, j, k), w in zip(self.idx.tolist(), self.w.tolist()):
            yield i, j, k, w

    def mixer(self) -> sp.csr_matrix:
        """Sparse (nnz, K) matrix routing each coordinate to its sum unit."""
        n = len(self.w)
        return sp.csr_matrix((self.w, (np.arange(n), self.idx[:, 0])), shape=(n, self.shape[0]))


Layer = Union[LeafLayer, SumLayer]


# --- circuit -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Circuit:
    mdvtree: MdVtree
    layers: Mapping[int, Layer]
    root_index: int = 0
    signed: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", dict(self.layers))
        v = self.vtree
        if set(self.layers) != set(v.nodes):
            raise CircuitError("circuit needs exactly one layer per vtree node")
        for m, layer in self.layers.items():
            if layer.is_leaf != v.is_leaf(m):
                raise CircuitError(f"layer kind at node {m} does not match the vtree")
        if not 0 <= self.root_index < self.layers[v.root].num_nodes:
            raise CircuitError("root index out of range")

    @property
    def vtree(self) -> Vtree:
        return self.mdvtree.vtree

    @property
    def variables(self) -> list[str]:
        return self.vtree.variables

    @property
    def cards(self) -> Mapping[str, int]:
        return self.vtree.cards

    @property
    def scope(self) -> frozenset:
        return self.vtree.all_vars

    def size(self) -> int:
        """Number of edges: mixing entries plus weight coordinates."""
        n = 0
        for layer in self.layers.values():
            if layer.is_leaf:
                n += int(np.count_nonzero(layer.mix))
            else:
                n += len(layer.w)
        return n

    def with_root(self, index: int) -> "Circuit":
        return Circuit(self.mdvtree, self.layers, index, self.signed)

    def with_mdvtree(self, w: MdVtree) -> "Circuit":
        return Circuit(w, self.layers, self.root_index, self.signed)


def rename_factor(f: LeafFunction, var: str) -> LeafFunction:
    if isinstance(f, Categorical):
        # share the weight array rather than copying it
        g = object.__new__(Categorical)
        object.__setattr__(g, "var", var)
        object.__setattr__(g, "weights", f.weights)
        return g
    return replace(f, var=var)


def rename(c: Circuit, mapping: Mapping[str, str]) -> Circuit:
    """View of ``c`` over renamed variables; weight arrays are shared."""
    w = rename_mdvtree(c.mdvtree, mapping)
    layers: dict[int, Layer] = {}
    for m, layer in c.layers.items():
        if layer.is_leaf:
            leaves = [make_leaf(rename_factor(f, mapping.get(f.var, f.var)) for f in leaf) for leaf in layer.leaves]
            layers[m] = LeafLayer(m, leaves, layer.mix)
        else:
            layers[m] = layer
    return Circuit(w, layers, c.root_index, c.signed)


# --- evaluation ----------------------------------------------------------


def _as_matrix(c: Circuit, data) -> np.ndarray:
    x = np.asarray(data, dtype=np.int64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != len(c.variables):
        raise CircuitError(f"data has {x.shape[1]} columns, circuit has {len(c.variables)} variables")
    return x


def assignment_row(c: Circuit, a: Mapping[str, int], partial: bool) -> np.ndarray:
    row = np.full(len(c.variables), -1, dtype=np.int64)
    for i, v in enumerate(c.variables):
        if v in a:
            s = int(a[v])
            if not 0 <= s < c.cards[v]:
                raise CircuitError(f"state {s} out of range for {v}")
            row[i] = s
        elif not partial:
            raise CircuitError(f"assignment is missing variable {v}")
    return row


def _leaf_values(c: Circuit, layer: LeafLayer, x: np.ndarray, col: Mapping[str, int]) -> np.ndarray:
    n = x.shape[0]
    out = np.ones((n, len(layer.leaves)))
    for t, leaf in enumerate(layer.leaves):
        for f in leaf:
            card = c.cards[f.var]
            tab = f.table(card)
            ext = np.append(tab, tab.sum())
            s = x[:, col[f.var]]
            out[:, t] *= ext[np.where(s < 0, card, s)]
    return out


def layer_values(c: Circuit, data) -> dict[int, np.ndarray]:
    """Values of every sum unit, shape ``(N, K_m)`` per node.

    Columns follow ``c.variables``; a negative state marginalizes the variable.
    """
    x = _as_matrix(c, data)
    col = {v: i for i, v in enumerate(c.variables)}
    vals: dict[int, np.ndarray] = {}
    v = c.vtree
    for m in v.postorder():
        layer = c.layers[m]
        if layer.is_leaf:
            vals[m] = _leaf_values(c, layer, x, col) @ layer.mix.T
        else:
            l, r = v.children(m)
            if len(layer.w) == 0:
                vals[m] = np.zeros((x.shape[0], layer.num_nodes))
                continue
            prods = vals[l][:, layer.idx[:, 1]] * vals[r][:, layer.idx[:, 2]]
            vals[m] = np.asarray((layer.mixer().T @ prods.T).T)
    return vals


def evaluate_batch(c: Circuit, data, partial: bool = False) -> np.ndarray:
    x = _as_matrix(c, data)
    if not partial and np.any(x < 0):
        raise CircuitError("incomplete assignment; use marginal evaluation")
    return layer_values(c, x)[c.vtree.root][:, c.root_index]


def evaluate(c: Circuit, a: Mapping[str, int]) -> float:
    row = assignment_row(c, a, partial=False)
    return float(evaluate_batch(c, row)[0])


def marginal_evaluate(c: Circuit, e: Mapping[str, int]) -> float:
    row = assignment_row(c, e, partial=True)
    return float(evaluate_batch(c, row, partial=True)[0])


def total_mass(c: Circuit) -> float:
    return marginal_evaluate(c, {})


def _logsumexp_groups(terms: np.ndarray, groups: np.ndarray, k: int) -> np.ndarray:
    """Row-wise log-sum-exp of ``terms`` columns grouped by ``groups``."""
    n = terms.shape[0]
    out = np.full((n, k), -np.inf)
    if terms.shape[1] == 0:
        return out
    order = np.argsort(groups, kind="stable")
    g = groups[order]
    t = terms[:, order]
    starts = np.flatnonzero(np.r_[True, g[1:] != g[:-1]])
    ids = g[starts]
    mx = np.maximum.reduceat(t, starts, axis=1)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    rep = np.repeat(safe, np.diff(np.r_[starts, len(g)]), axis=1)
    with np.errstate(invalid="ignore"):
        s = np.add.reduceat(np.exp(t - rep), starts, axis=1)
    with np.errstate(divide="ignore"):
        out[:, ids] = np.where(np.isfinite(mx), np.log(s) + safe, -np.inf)
    return out


def log_layer_values(c: Circuit, data) -> dict[int, np.ndarray]:
    """Log-space counterpart of :func:`layer_values`; zero maps to -inf."""
    if c.signed:
        raise CircuitError("log-space evaluation needs a nonnegative circuit")
    x = _as_matrix(c, data)
    col = {v: i for i, v in enumerate(c.variables)}
    vals: dict[int, np.ndarray] = {}
    v = c.vtree
    with np.errstate(divide="ignore"):
        for m in v.postorder():
            layer = c.layers[m]
            if layer.is_leaf:
                lv = np.log(_leaf_values(c, layer, x, col))
                nz = np.argwhere(layer.mix > 0)
                terms = lv[:, nz[:, 1]] + np.log(layer.mix[nz[:, 0], nz[:, 1]])
                vals[m] = _logsumexp_groups(terms, nz[:, 0], layer.num_nodes)
            else:
                l, r = v.children(m)
                keep = layer.w > 0
                idx = layer.idx[keep]
                terms = vals[l][:, idx[:, 1]] + vals[r][:, idx[:, 2]] + np.log(layer.w[keep])
                vals[m] = _logsumexp_groups(terms, idx[:, 0], layer.num_nodes)
    return vals


def log_evaluate_batch(c: Circuit, data, partial: bool = False) -> np.ndarray:
    x = _as_matrix(c, data)
    if not partial and np.any(x < 0):
        raise CircuitError("incomplete assignment; use marginal evaluation")
    return log_layer_values(c, x)[c.vtree.root][:, c.root_index]


def log_evaluate(c: Circuit, a: Mapping[str, int]) -> float:
    row = assignment_row(c, a, partial=False)
    return float(log_evaluate_batch(c, row)[0])


# --- structure checks ----------------------------------------------------


def check_structure(c: Circuit) -> list[str]:
    """List of structural violations; empty when the circuit is well formed."""
    out: list[str] = []
    v = c.vtree
    if set(c.layers) != set(v.nodes):
        out.append("shape mismatch: layers do not match vtree nodes")
        return out
    for m in v.postorder():
        layer = c.layers[m]
        if layer.is_leaf != v.is_leaf(m):
            out.append(f"shape mismatch: layer kind at node {m}")
            continue
        if layer.is_leaf:
            sc = v.scope(m)
            if layer.mix.shape[1] != len(layer.leaves):
                out.append(f"shape mismatch: mixing matrix of node {m} has {layer.mix.shape[1]} columns for {len(layer.leaves)} leaves")
            for t, leaf in enumerate(layer.leaves):
                if leaf_vars(leaf) != sc:
                    out.append(f"smoothness: leaf {t} at node {m} covers {lab_str(leaf_vars(leaf))}, node scope {lab_str(sc)}")
                for f in leaf:
                    try:
                        tab = f.table(c.cards.get(f.var, -1))
                    except CircuitError as exc:
                        out.append(f"shape mismatch: {exc}")
                        continue
                    if not np.all(np.isfinite(tab)):
                        out.append(f"non-finite leaf weight at ({m},{t},{f.var})")
                    elif not c.signed and np.any(tab < 0):
                        out.append(f"negative leaf weight at ({m},{t},{f.var})")
            if not np.all(np.isfinite(layer.mix)):
                out.append(f"non-finite weight at node {m}")
            if not c.signed:
                for i, j in np.argwhere(layer.mix < 0):
                    out.append(f"negative weight at ({m},{i},{j})")
        else:
            l, r = v.children(m)
            kl, kr = c.layers[l].num_nodes, c.layers[r].num_nodes
            if layer.shape[1:] != (kl, kr):
                out.append(f"shape mismatch: node {m} has shape {layer.shape}, children have {kl} and {kr} units")
                continue
            if len(layer.idx) and (
                np.any(layer.idx < 0) or np.any(layer.idx >= np.array(layer.shape))
            ):
                out.append(f"shape mismatch: weight coordinate out of range at node {m}")
                continue
            if not np.all(np.isfinite(layer.w)):
                out.append(f"non-finite weight at node {m}")
            if not c.signed:
                for (i, j, k), w in zip(layer.idx.tolist(), layer.w.tolist()):
                    if w < 0:
                        out.append(f"negative weight at ({m},{i},{j},{k})")
    return out


DEFAULT_QDET_BOUND = 1 << 20


def _enumerate_states(cards: Sequence[int]) -> np.ndarray:
    if not cards:
        return np.zeros((1, 0), dtype=np.int64)
    grids = np.meshgrid(*[np.arange(k) for k in cards], indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1).astype(np.int64)


def qdet_violations(c: Circuit, q: Iterable[str], max_assignments: int = DEFAULT_QDET_BOUND) -> list[tuple[int, int]]:
    """Sum units ``(node, index)`` whose children overlap on their Q-support."""
    q = frozenset(q) & c.scope
    qv = [x for x in c.variables if x in q]
    total = int(np.prod([c.cards[x] for x in qv])) if qv else 1
    if total > max_assignments:
        raise CircuitError(f"Q-determinism check needs {total} assignments, bound is {max_assignments}")
    states = _enumerate_states([c.cards[x] for x in qv])
    data = np.full((states.shape[0], len(c.variables)), -1, dtype=np.int64)
    pos = {x: i for i, x in enumerate(c.variables)}
    for t, x in enumerate(qv):
        data[:, pos[x]] = states[:, t]
    vals = layer_values(c, data)
    col = {x: i for i, x in enumerate(c.variables)}
    bad: list[tuple[int, int]] = []
    v = c.vtree
    for m in v.nodes:
        if not (v.scope(m) & q):
            continue
        layer = c.layers[m]
        if layer.is_leaf:
            leafv = _leaf_values(c, layer, data, col)
            pos_nz = np.argwhere(layer.mix != 0)
            supp = leafv[:, pos_nz[:, 1]] != 0
            groups = pos_nz[:, 0]
        else:
            l, r = v.children(m)
            keep = layer.w != 0
            idx = layer.idx[keep]
            supp = (vals[l][:, idx[:, 1]] != 0) & (vals[r][:, idx[:, 2]] != 0)
            groups = idx[:, 0]
        if supp.shape[1] == 0:
            continue
        route = sp.csr_matrix(
            (np.ones(len(groups)), (np.arange(len(groups)), groups)), shape=(len(groups), layer.num_nodes)
        )
        counts = np.asarray((route.T @ supp.T.astype(float)).T)
        for i in np.flatnonzero(np.any(counts > 1, axis=0)):
            bad.append((m, int(i)))
    return bad


def check_qdet(c: Circuit, q: Iterable[str], max_assignments: int = DEFAULT_QDET_BOUND) -> bool:
    return not qdet_violations(c, q, max_assignments)


# --- raw nested circuits -------------------------------------------------


@dataclass(frozen=True, eq=False)
class RawLeaf:
    leaf: Leaf


@dataclass(frozen=True, eq=False)
class RawSum:
    children: tuple  # of (weight, node)


@dataclass(frozen=True, eq=False)
class RawProduct:
    children: tuple


RawNode = Union[RawLeaf, RawSum, RawProduct]


def raw_scope(node: RawNode, _memo: dict | None = None) -> frozenset:
    memo = {} if _memo is None else _memo
    key = id(node)
    if key in memo:
        return memo[key]
    if isinstance(node, RawLeaf):
        s = leaf_vars(node.leaf)
    elif isinstance(node, RawSum):
        s = frozenset().union(*(raw_scope(ch, memo) for _, ch in node.children))
    else:
        s = frozenset().union(*(raw_scope(ch, memo) for ch in node.children))
    memo[key] = s
    return s


def raw_evaluate(node: RawNode, a: Mapping[str, int], cards: Mapping[str, int], _memo: dict | None = None) -> float:
    memo = {} if _memo is None else _memo
    key = id(node)
    if key in memo:
        return memo[key]
    if isinstance(node, RawLeaf):
        val = 1.0
        for f in node.leaf:
            val *= float(f.table(cards[f.var])[a[f.var]])
    elif isinstance(node, RawSum):
        val = sum(w * raw_evaluate(ch, a, cards, memo) for w, ch in node.children)
    else:
        val = 1.0
        for ch in node.children:
            val *= raw_evaluate(ch, a, cards, memo)
    memo[key] = val
    return val


def to_raw(c: Circuit) -> RawNode:
    """Nested view of the circuit's root unit (sharing preserved)."""
    v = c.vtree
    built: dict[int, list] = {}
    for m in v.postorder():
        layer = c.layers[m]
        if layer.is_leaf:
            leaves = [RawLeaf(leaf) for leaf in layer.leaves]
            built[m] = [
                RawSum(tuple((float(layer.mix[i, t]), leaves[t]) for t in np.flatnonzero(layer.mix[i])))
                for i in range(layer.num_nodes)
            ]
        else:
            l, r = v.children(m)
            rows: list[list] = [[] for _ in range(layer.num_nodes)]
            for i, j, k, w in layer.entries():
                rows[i].append((w, RawProduct((built[l][j], built[r][k]))))
            built[m] = [RawSum(tuple(row)) for row in rows]
    return built[v.root][c.root_index]


def smooth(node):
    """Naive smoothing: pad sum children with ConstantOne factors.

    Layered circuits are smooth by construction and are returned unchanged.
    """
    if isinstance(node, Circuit):
        return node
    memo: dict[int, RawNode] = {}
    scopes: dict[int, frozenset] = {}

    def rec(n: RawNode) -> RawNode:
        if id(n) in memo:
            return memo[id(n)]
        if isinstance(n, RawLeaf):
            out: RawNode = n
        elif isinstance(n, RawProduct):
            out = RawProduct(tuple(rec(ch) for ch in n.children))
        else:
            full = raw_scope(n, scopes)
            kids = []
            for w, ch in n.children:
                new = rec(ch)
                missing = sorted(full - raw_scope(ch, scopes))
                if missing:
                    pads = tuple(RawLeaf((ConstantOne(x),)) for x in missing)
                    new = RawProduct((new,) + pads)
                kids.append((w, new))
            out = RawSum(tuple(kids))
        memo[id(n)] = out
        return out

    return rec(node)


def normalize_exact(node, w: MdVtree) -> Circuit:
    """Layered circuit exactly respecting ``w`` from a nested circuit.

    Sum-of-sum chains are collapsed by multiplying weights; products whose
    factors do not line up with a vtree split are regrouped, and grouped or
    nested products are wrapped in single-child sums.
    """
    if isinstance(node, Circuit):
        return node
    v = w.vtree
    by_scope: dict[frozenset, int] = {}
    for m in v.postorder():
        by_scope.setdefault(v.scope(m), m)
    scopes: dict[int, frozenset] = {}
    leaf_tabs: dict[int, list] = {m: [] for m in v.leaves()}
    leaf_pos: dict[int, dict] = {m: {} for m in v.leaves()}
    rows: dict[int, list] = {m: [] for m in v.nodes}
    memo: dict[tuple[int, int], int] = {}

    def node_for(n: RawNode) -> int:
        s = raw_scope(n, scopes)
        m = by_scope.get(s)
        if m is None:
            raise CircuitError(f"node over {lab_str(s)} does not match any vtree node scope")
        return m

    def flatten(n: RawNode, weight: float, acc: list) -> None:
        if isinstance(n, RawSum):
            for w2, ch in n.children:
                flatten(ch, weight * w2, acc)
        else:
            acc.append((weight, n))

    def factors(n: RawNode, acc: list) -> None:
        if isinstance(n, RawProduct):
            for ch in n.children:
                factors(ch, acc)
        else:
            acc.append(n)

    def leaf_index(m: int, n: RawNode) -> int:
        parts: list = []
        factors(n, parts)
        fs: list = []
        for p in parts:
            if isinstance(p, RawLeaf):
                fs.extend(p.leaf)
            else:
                raise CircuitError("sum below a product inside a vtree leaf")
        leaf = make_leaf(fs)
        key = id(n)
        if key not in leaf_pos[m]:
            leaf_pos[m][key] = len(leaf_tabs[m])
            leaf_tabs[m].append(leaf)
        return leaf_pos[m][key]

    keep: list = []

    def side_unit(m: int, parts: list) -> int:
        """Sum unit at ``m`` for the product of ``parts``."""
        if len(parts) == 1:
            return unit(m, parts[0])
        prod = RawProduct(tuple(parts))
        keep.append(prod)  # memo keys are ids, so temporaries must stay alive
        return unit(m, prod)

    def unit(m: int, n: RawNode) -> int:
        key = (m, id(n))
        if key in memo:
            return memo[key]
        acc: list = []
        flatten(n, 1.0, acc)
        row: dict = {}
        for weight, ch in acc:
            if node_for(ch) != m:
                raise CircuitError("sum child scope differs from the sum scope")
            if v.is_leaf(m):
                t = leaf_index(m, ch)
                row[t] = row.get(t, 0.0) + weight
                continue
            parts: list = []
            factors(ch, parts)
            l, r = v.children(m)
            sl, sr = v.scope(l), v.scope(r)
            left = [p for p in parts if raw_scope(p, scopes) <= sl]
            right = [p for p in parts if raw_scope(p, scopes) <= sr]
            if len(left) + len(right) != len(parts) or not left or not right:
                raise CircuitError(f"product does not decompose along the split of node {m}")
            j = side_unit(l, left)
            k = side_unit(r, right)
            row[(j, k)] = row.get((j, k), 0.0) + weight
        idx = len(rows[m])
        rows[m].append(row)
        memo[key] = idx
        return idx

    root_m = node_for(node)
    if root_m != v.root:
        raise CircuitError("circuit scope differs from the vtree variables")
    ri = unit(v.root, node)
    layers: dict[int, Layer] = {}
    for m in v.postorder():
        if v.is_leaf(m):
            mix = np.zeros((len(rows[m]), len(leaf_tabs[m])))
            for i, row in enumerate(rows[m]):
                for t, x in row.items():
                    mix[i, t] = x
            layers[m] = LeafLayer(m, tuple(leaf_tabs[m]), mix)
        else:
            l, r = v.children(m)
            shape = (len(rows[m]), len(rows[l]), len(rows[r]))
            layers[m] = SumLayer.from_entries(
                m, shape, ((i, j, k, x) for i, row in enumerate(rows[m]) for (j, k), x in row.items())
            )
    return Circuit(w, layers, ri)


def describe(c: Circuit) -> str:
    parts = []
    for m in c.vtree.preorder():
        layer = c.layers[m]
        parts.append(f"{m}[{lab_str(c.mdvtree.psi[m])}]x{layer.num_nodes}")
    return " ".join(parts)
