"""The six basic operations on layered circuits.

Each operation builds the output circuit together with its md-vtree, so the
labels of the result are sound for the circuit that is returned.
"""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp

from .circuit import (
    Categorical,
    Circuit,
    CircuitError,
    ConstantOne,
    Indicator,
    LeafLayer,
    SumLayer,
    categorical_from,
    check_qdet,
    make_leaf,
)
from .vtree import (
    MdVtree,
    U,
    VNode,
    Vtree,
    compat_case,
    compatible,
    implies_qdet,
    lab_minus,
    lab_union,
)


class _Builder:
    """Accumulates vtree nodes, labels and layers under fresh ids."""

    def __init__(self, cards: Mapping[str, int]):
        self.cards = dict(cards)
        self.nodes: dict[int, VNode] = {}
        self.psi: dict = {}
        self.layers: dict = {}
        self.scope: dict[int, frozenset] = {}
        self._counter = 0

    def leaf(self, scope: frozenset, label, leaves, mix) -> int:
        m = self._next()
        self.nodes[m] = VNode(m, vars=frozenset(scope))
        self.psi[m] = label
        self.layers[m] = LeafLayer(m, tuple(leaves), mix)
        self.scope[m] = frozenset(scope)
        return m

    def internal(self, left: int, right: int, label, shape, idx, w) -> int:
        m = self._next()
        self.nodes[m] = VNode(m, left, right)
        self.psi[m] = label
        self.layers[m] = SumLayer(m, shape, idx, w)
        self.scope[m] = self.scope[left] | self.scope[right]
        return m

    def _next(self) -> int:
        self._counter += 1
        return self._counter - 1

    def replace_layer(self, m: int, layer, label) -> None:
        self.layers[m] = layer
        self.psi[m] = label

    def copy(self, c: Circuit, m: int) -> int:
        v = c.vtree
        layer = c.layers[m]
        if layer.is_leaf:
            return self.leaf(v.scope(m), c.mdvtree.psi[m], layer.leaves, layer.mix)
        l, r = v.children(m)
        a = self.copy(c, l)
        b = self.copy(c, r)
        return self.internal(a, b, c.mdvtree.psi[m], layer.shape, layer.idx, layer.w)

    def units(self, m: int) -> int:
        return self.layers[m].num_nodes

    def finish(self, root: int, root_index: int, signed: bool = False) -> Circuit:
        keep: list[int] = []
        stack = [root]
        while stack:
            n = stack.pop()
            keep.append(n)
            node = self.nodes[n]
            if not node.is_leaf:
                stack.extend((node.left, node.right))
        sc = self.scope[root]
        cards = {x: k for x, k in self.cards.items() if x in sc}
        v = Vtree(cards, {n: self.nodes[n] for n in keep}, root)
        w = MdVtree(v, {n: self.psi[n] for n in keep})
        layers = {}
        for n in keep:
            layer = self.layers[n]
            if layer.is_leaf:
                layers[n] = LeafLayer(n, layer.leaves, layer.mix)
            else:
                layers[n] = SumLayer(n, layer.shape, layer.idx, layer.w)
        return Circuit(w, layers, root_index, signed)


def _sparse(layer: SumLayer) -> sp.csr_matrix:
    """Weights as a (K, K_l * K_r) sparse matrix."""
    k, kl, kr = layer.shape
    return sp.csr_matrix((layer.w, (layer.idx[:, 0], layer.idx[:, 1] * kr + layer.idx[:, 2])), shape=(k, kl * kr))


def _from_sparse(node: int, mat, kl: int, kr: int) -> SumLayer:
    mat = sp.coo_matrix(mat)
    mat.sum_duplicates()
    keep = mat.data != 0
    rows, cols, data = mat.row[keep], mat.col[keep], mat.data[keep]
    idx = np.stack([rows, cols // kr, cols % kr], axis=1) if len(rows) else np.zeros((0, 3), dtype=np.int64)
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0])) if len(rows) else np.zeros(0, dtype=np.int64)
    return SumLayer(node, (mat.shape[0], kl, kr), idx[order], data[order])


def prune(c: Circuit) -> Circuit:
    """Drop units and leaves unreachable from the root unit."""
    v = c.vtree
    live: dict[int, np.ndarray] = {v.root: np.array([c.root_index])}
    new_layers = {}
    remap: dict[int, np.ndarray] = {}
    for m in v.preorder():
        layer = c.layers[m]
        rows = np.unique(live.get(m, np.zeros(0, dtype=np.int64)))
        pos = np.full(layer.num_nodes, -1, dtype=np.int64)
        pos[rows] = np.arange(len(rows))
        remap[m] = pos
        if layer.is_leaf:
            sub = layer.mix[rows]
            used = np.flatnonzero(np.any(sub != 0, axis=0))
            new_layers[m] = LeafLayer(m, tuple(layer.leaves[t] for t in used), sub[:, used])
        else:
            l, r = v.children(m)
            sel = (pos[layer.idx[:, 0]] >= 0) & (layer.w != 0)
            idx = layer.idx[sel]
            live[l] = idx[:, 1]
            live[r] = idx[:, 2]
            new_layers[m] = (idx, layer.w[sel])
    out = {}
    for m in v.postorder():
        layer = c.layers[m]
        if layer.is_leaf:
            out[m] = new_layers[m]
        else:
            l, r = v.children(m)
            idx, w = new_layers[m]
            nidx = np.stack([remap[m][idx[:, 0]], remap[l][idx[:, 1]], remap[r][idx[:, 2]]], axis=1)
            shape = (int((remap[m] >= 0).sum()), int((remap[l] >= 0).sum()), int((remap[r] >= 0).sum()))
            out[m] = SumLayer(m, shape, nidx, w)
    return Circuit(c.mdvtree, out, int(remap[v.root][c.root_index]), c.signed)


# --- MARG / INST --------------------------------------------------------


def _reduce(c: Circuit, removed: frozenset, factor_value, relabel) -> Circuit:
    v = c.vtree
    b = _Builder({x: k for x, k in c.cards.items() if x not in removed})
    res: dict[int, tuple] = {}
    for m in v.postorder():
        layer = c.layers[m]
        label = relabel(c.mdvtree.psi[m])
        if layer.is_leaf:
            scal = np.ones(len(layer.leaves))
            leaves = []
            for t, leaf in enumerate(layer.leaves):
                kept = []
                for f in leaf:
                    if f.var in removed:
                        scal[t] *= factor_value(f)
                    else:
                        kept.append(f)
                leaves.append(make_leaf(kept))
            mix = layer.mix * scal[None, :]
            sc = v.scope(m) - removed
            if sc:
                res[m] = ("node", b.leaf(sc, label, leaves, mix))
            else:
                res[m] = ("const", mix.sum(axis=1), label)
            continue
        l, r = v.children(m)
        a, z = res[l], res[r]
        i, j, k = layer.idx[:, 0], layer.idx[:, 1], layer.idx[:, 2]
        if a[0] == "node" and z[0] == "node":
            res[m] = ("node", b.internal(a[1], z[1], label, layer.shape, layer.idx, layer.w))
        elif a[0] == "const" and z[0] == "const":
            vec = np.zeros(layer.num_nodes)
            np.add.at(vec, i, layer.w * a[1][j] * z[1][k])
            res[m] = ("const", vec, label)
        else:
            if a[0] == "const":
                coef, other, col = a[1][j], z[1], k
            else:
                coef, other, col = z[1][k], a[1], j
            kn = b.units(other)
            mat = sp.csr_matrix((layer.w * coef, (i, col)), shape=(layer.num_nodes, kn))
            res[m] = ("node", _compose(b, other, mat, label))
    top = res[v.root]
    if top[0] == "const":
        root = b.leaf(frozenset(), top[2], [()], top[1][:, None])
    else:
        root = top[1]
    return b.finish(root, c.root_index, c.signed)


def _compose(b: _Builder, n: int, mat, label) -> int:
    """Replace node ``n``'s units by ``mat @ units``; the node absorbs its collapsed parent."""
    layer = b.layers[n]
    merged = lab_union(label, b.psi[n])
    if layer.is_leaf:
        new = LeafLayer(n, layer.leaves, np.asarray(mat @ layer.mix))
    else:
        _, kl, kr = layer.shape
        new = _from_sparse(n, mat @ _sparse(layer), kl, kr)
    b.replace_layer(n, new, merged)
    return n


def marg(c: Circuit, w: Iterable[str]) -> Circuit:
    """Sum out the variables ``w``."""
    w = frozenset(w)
    if not w <= c.scope:
        raise CircuitError(f"cannot marginalize {sorted(w - c.scope)}: not in the circuit scope")

    def value(f) -> float:
        return float(f.table(c.cards[f.var]).sum())

    def relabel(lab):
        if lab is U or lab & w:
            return U
        return lab

    return _reduce(c, w, value, relabel)


def inst(c: Circuit, a: Mapping[str, int]) -> Circuit:
    """Fix the variables in ``a`` to the given states."""
    a = {x: int(s) for x, s in a.items()}
    w = frozenset(a)
    if not w <= c.scope:
        raise CircuitError(f"cannot instantiate {sorted(w - c.scope)}: not in the circuit scope")
    for x, s in a.items():
        if not 0 <= s < c.cards[x]:
            raise CircuitError(f"state {s} out of range for {x}")

    def value(f) -> float:
        return float(f.table(c.cards[f.var])[a[f.var]])

    return _reduce(c, w, value, lambda lab: lab_minus(lab, w))


# --- PROD ---------------------------------------------------------------


def _leaf_product(x: tuple, y: tuple, cards: Mapping[str, int]) -> tuple:
    by: dict[str, object] = {f.var: f for f in x}
    for f in y:
        if f.var in by:
            g = by[f.var]
            if isinstance(g, ConstantOne):
                by[f.var] = f
            elif isinstance(f, ConstantOne):
                pass
            else:
                card = cards[f.var]
                by[f.var] = categorical_from(g.table(card) * f.table(card), f.var)
        else:
            by[f.var] = f
    return make_leaf(by.values())


def prod(c1: Circuit, c2: Circuit) -> Circuit:
    """Pointwise product of two circuits over compatible vtrees."""
    shared = c1.scope & c2.scope
    for x in shared:
        if c1.cards[x] != c2.cards[x]:
            raise CircuitError(f"variable {x} has different cardinalities")
    v1, v2 = c1.vtree, c2.vtree
    if not compatible(v1, v2):
        raise CircuitError("vtrees are not compatible")
    cards = dict(c1.cards)
    for x, k in c2.cards.items():
        cards.setdefault(x, k)
    b = _Builder(cards)
    psi1, psi2 = c1.mdvtree.psi, c2.mdvtree.psi

    def rec(m1: int, m2: int) -> int:
        if v1.scope(m1) & shared != v2.scope(m2) & shared:
            raise CircuitError("product invariant violated: restricted scopes differ")
        case = compat_case(v1, m1, v2, m2)
        L1, L2 = c1.layers[m1], c2.layers[m2]
        K1, K2 = L1.num_nodes, L2.num_nodes
        if case[0] == "disjoint":
            a = b.copy(c1, m1)
            z = b.copy(c2, m2)
            i1, i2 = np.meshgrid(np.arange(K1), np.arange(K2), indexing="ij")
            i1, i2 = i1.ravel(), i2.ravel()
            idx = np.stack([i1 * K2 + i2, i1, i2], axis=1)
            return b.internal(a, z, frozenset(), (K1 * K2, K1, K2), idx, np.ones(len(idx)))
        if case[0] == "leaves":
            leaves = [_leaf_product(x, y, cards) for x in L1.leaves for y in L2.leaves]
            mix = np.kron(L1.mix, L2.mix)
            return b.leaf(v1.scope(m1) | v2.scope(m2), lab_union(psi1[m1], psi2[m2]), leaves, mix)
        if case[0] == "defer1":
            l, r = v1.children(m1)
            i, j, k, w = L1.idx[:, 0], L1.idx[:, 1], L1.idx[:, 2], L1.w
            i2 = np.arange(K2)
            I = (i[:, None] * K2 + i2[None, :]).ravel()
            W = np.repeat(w, K2)
            if case[1] == "r":
                a = b.copy(c1, l)
                z = rec(r, m2)
                J = np.repeat(j, K2)
                Kx = (k[:, None] * K2 + i2[None, :]).ravel()
            else:
                a = rec(l, m2)
                z = b.copy(c1, r)
                J = (j[:, None] * K2 + i2[None, :]).ravel()
                Kx = np.repeat(k, K2)
            shape = (K1 * K2, b.units(a), b.units(z))
            return b.internal(a, z, psi1[m1], shape, np.stack([I, J, Kx], axis=1), W)
        if case[0] == "defer2":
            l, r = v2.children(m2)
            i, j, k, w = L2.idx[:, 0], L2.idx[:, 1], L2.idx[:, 2], L2.w
            i1 = np.arange(K1)
            I = (i1[None, :] * K2 + i[:, None]).ravel()
            W = np.repeat(w, K1)
            if case[1] == "r":
                a = b.copy(c2, l)
                z = rec(m1, r)
                kr = c2.layers[r].num_nodes
                J = np.repeat(j, K1)
                Kx = (i1[None, :] * kr + k[:, None]).ravel()
            else:
                a = rec(m1, l)
                z = b.copy(c2, r)
                kl = c2.layers[l].num_nodes
                J = (i1[None, :] * kl + j[:, None]).ravel()
                Kx = np.repeat(k, K1)
            shape = (K1 * K2, b.units(a), b.units(z))
            return b.internal(a, z, psi2[m2], shape, np.stack([I, J, Kx], axis=1), W)
        # matching children
        l1, r1 = v1.children(m1)
        l2, r2 = v2.children(m2)
        cross = case[1]
        a2, z2 = (r2, l2) if cross else (l2, r2)
        a = rec(l1, a2)
        z = rec(r1, z2)
        ka2, kz2 = c2.layers[a2].num_nodes, c2.layers[z2].num_nodes
        e1, e2 = L1.idx, L2.idx
        p = np.repeat(np.arange(len(e1)), len(e2))
        q = np.tile(np.arange(len(e2)), len(e1))
        j2 = e2[q, 2] if cross else e2[q, 1]
        k2 = e2[q, 1] if cross else e2[q, 2]
        I = e1[p, 0] * K2 + e2[q, 0]
        J = e1[p, 1] * ka2 + j2
        Kx = e1[p, 2] * kz2 + k2
        shape = (K1 * K2, b.units(a), b.units(z))
        label = lab_union(psi1[m1], psi2[m2])
        return b.internal(a, z, label, shape, np.stack([I, J, Kx], axis=1), L1.w[p] * L2.w[q])

    root = rec(v1.root, v2.root)
    K2 = c2.layers[v2.root].num_nodes
    out = b.finish(root, c1.root_index * K2 + c2.root_index)
    return prune(out)


# --- determinism-requiring operations ------------------------------------


def certify_deterministic(c: Circuit, debug: bool = False) -> None:
    """Raise unless the circuit is known to be deterministic.

    The md-vtree must imply determinism over the whole scope. With ``debug``
    a brute-force check is accepted instead.
    """
    if implies_qdet(c.mdvtree, c.scope):
        return
    if debug and check_qdet(c, c.scope):
        return
    raise CircuitError("determinism not certified by the md-vtree")


def _restricted_power(x: np.ndarray, alpha: float) -> np.ndarray:
    out = np.zeros_like(x, dtype=float)
    nz = x != 0
    out[nz] = np.power(x[nz], alpha)
    return out


def _pow_factor(f, alpha: float, card: int):
    if isinstance(f, (Indicator, ConstantOne)):
        return f
    return Categorical(f.var, _restricted_power(f.table(card), alpha))


def pow(c: Circuit, alpha: float, debug: bool = False) -> Circuit:  # noqa: A001
    """Restricted power: ``p**alpha`` on the support, 0 elsewhere."""
    alpha = float(alpha)
    if not np.isfinite(alpha):
        raise CircuitError("exponent must be finite")
    certify_deterministic(c, debug)
    layers = {}
    for m, layer in c.layers.items():
        if layer.is_leaf:
            leaves = tuple(tuple(_pow_factor(f, alpha, c.cards[f.var]) for f in leaf) for leaf in layer.leaves)
            layers[m] = LeafLayer(m, leaves, _restricted_power(layer.mix, alpha))
        else:
            layers[m] = SumLayer(m, layer.shape, layer.idx, _restricted_power(layer.w, alpha))
    return Circuit(c.mdvtree, layers, c.root_index)


def max_query(c: Circuit, evidence: Mapping[str, int] | None = None, debug: bool = False) -> tuple[float, dict]:
    """Maximum of the circuit over completions of ``evidence`` and an arg-max."""
    evidence = {x: int(s) for x, s in (evidence or {}).items()}
    for x, s in evidence.items():
        if x not in c.scope:
            raise CircuitError(f"evidence variable {x} is not in the circuit scope")
        if not 0 <= s < c.cards[x]:
            raise CircuitError(f"state {s} out of range for {x}")
    certify_deterministic(c, debug)
    v = c.vtree
    best: dict[int, np.ndarray] = {}
    leaf_best: dict[int, np.ndarray] = {}
    for m in v.postorder():
        layer = c.layers[m]
        if layer.is_leaf:
            lv = np.ones(len(layer.leaves))
            for t, leaf in enumerate(layer.leaves):
                for f in leaf:
                    tab = f.table(c.cards[f.var])
                    lv[t] *= tab[evidence[f.var]] if f.var in evidence else tab.max()
            leaf_best[m] = lv
            best[m] = (layer.mix * lv[None, :]).max(axis=1) if len(lv) else np.zeros(layer.num_nodes)
        else:
            l, r = v.children(m)
            vals = layer.w * best[l][layer.idx[:, 1]] * best[r][layer.idx[:, 2]]
            out = np.zeros(layer.num_nodes)
            np.maximum.at(out, layer.idx[:, 0], vals)
            best[m] = out
    value = float(best[v.root][c.root_index])
    assign = dict(evidence)
    stack = [(v.root, c.root_index)]
    while stack:
        m, i = stack.pop()
        layer = c.layers[m]
        if layer.is_leaf:
            scores = layer.mix[i] * leaf_best[m]
            t = int(np.argmax(scores)) if len(scores) else 0
            if len(layer.leaves):
                for f in layer.leaves[t]:
                    if f.var not in assign:
                        assign[f.var] = int(np.argmax(f.table(c.cards[f.var])))
            continue
        l, r = v.children(m)
        sel = np.flatnonzero(layer.idx[:, 0] == i)
        if len(sel) == 0:
            j = k = 0
        else:
            vals = layer.w[sel] * best[l][layer.idx[sel, 1]] * best[r][layer.idx[sel, 2]]
            top = vals.max()
            cands = sel[vals == top]
            pairs = sorted((int(layer.idx[s, 1]), int(layer.idx[s, 2])) for s in cands)
            j, k = pairs[0]
        stack.append((r, k))
        stack.append((l, j))
    for x in c.variables:
        assign.setdefault(x, 0)
    return value, assign


def _support_factor(f, card: int):
    if isinstance(f, (Indicator, ConstantOne)):
        return f
    return categorical_from((f.table(card) != 0).astype(float), f.var)


def _log_factor(f, card: int):
    tab = f.table(card)
    out = np.zeros(card)
    nz = tab != 0
    out[nz] = np.log(tab[nz])
    return Categorical(f.var, out)


def log_circuit(c: Circuit, debug: bool = False) -> Circuit:
    """Restricted logarithm: ``log p`` on the support and 0 elsewhere.

    Every layer doubles: units ``[0, K)`` are support indicators of the input
    units and units ``[K, 2K)`` carry their logarithms. The output has signed
    weights and universal labels.
    """
    certify_deterministic(c, debug)
    v = c.vtree
    layers = {}
    for m in v.postorder():
        layer = c.layers[m]
        k = layer.num_nodes
        if layer.is_leaf:
            leaves: list = []
            rows: list[tuple[int, int, float]] = []
            for t, leaf in enumerate(layer.leaves):
                s_pos = len(leaves)
                leaves.append(tuple(_support_factor(f, c.cards[f.var]) for f in leaf))
                g_pos = []
                for a, f in enumerate(leaf):
                    parts = [
                        _log_factor(g, c.cards[g.var]) if b == a else _support_factor(g, c.cards[g.var])
                        for b, g in enumerate(leaf)
                    ]
                    g_pos.append(len(leaves))
                    leaves.append(tuple(parts))
                for i in np.flatnonzero(layer.mix[:, t] > 0):
                    rows.append((i, s_pos, 1.0))
                    rows.append((k + i, s_pos, float(np.log(layer.mix[i, t]))))
                    for g in g_pos:
                        rows.append((k + i, g, 1.0))
            mix = np.zeros((2 * k, len(leaves)))
            for i, t, x in rows:
                mix[i, t] += x
            layers[m] = LeafLayer(m, leaves, mix)
        else:
            l, r = v.children(m)
            kl, kr = c.layers[l].num_nodes, c.layers[r].num_nodes
            keep = layer.w > 0
            i, j, kk, w = layer.idx[keep, 0], layer.idx[keep, 1], layer.idx[keep, 2], layer.w[keep]
            I = np.concatenate([i, k + i, k + i, k + i])
            J = np.concatenate([j, j, kl + j, j])
            K = np.concatenate([kk, kk, kk, kr + kk])
            W = np.concatenate([np.ones_like(w), np.log(w), np.ones_like(w), np.ones_like(w)])
            layers[m] = SumLayer(m, (2 * k, 2 * kl, 2 * kr), np.stack([I, J, K], axis=1), W)
    w = MdVtree(v, {m: U for m in v.nodes})
    return Circuit(w, layers, c.layers[v.root].num_nodes + c.root_index, signed=True)


# --- label-only counterparts (used by the pipeline analysis) -------------


def marg_labels(w: MdVtree, removed: Iterable[str]) -> MdVtree:
    return _reduce_labels(w, frozenset(removed), lambda lab, ww: U if (lab is U or lab & ww) else lab)


def inst_labels(w: MdVtree, removed: Iterable[str]) -> MdVtree:
    return _reduce_labels(w, frozenset(removed), lambda lab, ww: lab_minus(lab, ww))


def _reduce_labels(w: MdVtree, removed: frozenset, rule) -> MdVtree:
    v = w.vtree
    b = _LabelBuilder({x: k for x, k in v.cards.items() if x not in removed})
    res: dict[int, tuple] = {}
    for m in v.postorder():
        label = rule(w.psi[m], removed)
        sc = v.scope(m) - removed
        if v.is_leaf(m):
            res[m] = ("node", b.leaf(sc, label)) if sc else ("const", label)
            continue
        l, r = v.children(m)
        a, z = res[l], res[r]
        if a[0] == "node" and z[0] == "node":
            res[m] = ("node", b.internal(a[1], z[1], label))
        elif a[0] == "const" and z[0] == "const":
            res[m] = ("const", label)
        else:
            other = z[1] if a[0] == "const" else a[1]
            b.psi[other] = lab_union(label, b.psi[other])
            res[m] = ("node", other)
    top = res[v.root]
    root = b.leaf(frozenset(), top[1]) if top[0] == "const" else top[1]
    return b.finish(root)


class _LabelBuilder:
    def __init__(self, cards):
        self.cards = dict(cards)
        self.nodes: dict[int, VNode] = {}
        self.psi: dict = {}

    def leaf(self, sc, label) -> int:
        m = len(self.nodes)
        self.nodes[m] = VNode(m, vars=frozenset(sc))
        self.psi[m] = label
        return m

    def internal(self, a, z, label) -> int:
        m = len(self.nodes)
        self.nodes[m] = VNode(m, a, z)
        self.psi[m] = label
        return m

    def finish(self, root) -> MdVtree:
        keep, stack = [], [root]
        while stack:
            n = stack.pop()
            keep.append(n)
            if not self.nodes[n].is_leaf:
                stack.extend((self.nodes[n].left, self.nodes[n].right))
        nodes = {n: self.nodes[n] for n in keep}
        sc = set()
        for n in keep:
            sc |= self.nodes[n].vars
        v = Vtree({x: k for x, k in self.cards.items() if x in sc}, nodes, root)
        return MdVtree(v, {n: self.psi[n] for n in keep})


def prod_labels(w1: MdVtree, w2: MdVtree) -> MdVtree:
    """Label half of the product construction; no layers are built."""
    v1, v2 = w1.vtree, w2.vtree
    if not compatible(v1, v2):
        raise CircuitError("vtrees are not compatible")
    cards = dict(v1.cards)
    for x, k in v2.cards.items():
        cards.setdefault(x, k)
    b = _LabelBuilder(cards)

    def copy(w: MdVtree, m: int) -> int:
        v = w.vtree
        if v.is_leaf(m):
            return b.leaf(v.scope(m), w.psi[m])
        l, r = v.children(m)
        return b.internal(copy(w, l), copy(w, r), w.psi[m])

    def rec(m1: int, m2: int) -> int:
        case = compat_case(v1, m1, v2, m2)
        if case[0] == "disjoint":
            return b.internal(copy(w1, m1), copy(w2, m2), frozenset())
        if case[0] == "leaves":
            return b.leaf(v1.scope(m1) | v2.scope(m2), lab_union(w1.psi[m1], w2.psi[m2]))
        if case[0] == "defer1":
            l, r = v1.children(m1)
            if case[1] == "r":
                return b.internal(copy(w1, l), rec(r, m2), w1.psi[m1])
            return b.internal(rec(l, m2), copy(w1, r), w1.psi[m1])
        if case[0] == "defer2":
            l, r = v2.children(m2)
            if case[1] == "r":
                return b.internal(copy(w2, l), rec(m1, r), w2.psi[m2])
            return b.internal(rec(m1, l), copy(w2, r), w2.psi[m2])
        l1, r1 = v1.children(m1)
        l2, r2 = v2.children(m2)
        a2, z2 = (r2, l2) if case[1] else (l2, r2)
        return b.internal(rec(l1, a2), rec(r1, z2), lab_union(w1.psi[m1], w2.psi[m2]))

    return b.finish(rec(v1.root, v2.root))


def universal_labels(w: MdVtree) -> MdVtree:
    return MdVtree(w.vtree, {m: U for m in w.vtree.nodes})
