"""Vtrees, md-vtrees and the label algebra.

A vtree is a rooted binary tree whose leaves partition a set of discrete
variables. An md-vtree attaches a label to every node: either a concrete
subset of the node's scope or the universal set ``U``. A circuit respecting
an md-vtree has, at every node, sum units that are marginally deterministic
with respect to that node's label.

Variables are identified by name. Variable sets are ``frozenset[str]``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

VarSet = frozenset


class _Universal:
    """The universal label. No marginal determinism is guaranteed."""

    _instance: "_Universal | None" = None

    def __new__(cls) -> "_Universal":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "U"

    def __reduce__(self):
        return (_Universal, ())


U = _Universal()
Label = Union[frozenset, _Universal]


def is_universal(label: Label) -> bool:
    return label is U


def lab_union(a: Label, b: Label) -> Label:
    if a is U or b is U:
        return U
    return a | b


def lab_inter(a: Label, b: Label) -> Label:
    if a is U:
        return b
    if b is U:
        return a
    return a & b


def lab_subset(a: Label, b: Label) -> bool:
    """a ⊆ b under the universal-set axioms."""
    if b is U:
        return True
    if a is U:
        return False
    return a <= b


def lab_minus(a: Label, w: Iterable[str]) -> Label:
    if a is U:
        return U
    return a - frozenset(w)


def lab_str(label: Label) -> str:
    if label is U:
        return "U"
    return "{" + ",".join(sorted(label)) + "}"


class VtreeError(ValueError):
    pass


@dataclass(frozen=True)
class VNode:
    id: int
    left: int | None = None
    right: int | None = None
    vars: frozenset = frozenset()

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass(frozen=True, eq=False)
class Vtree:
    """Immutable vtree.

    ``cards`` maps every variable name to its cardinality and fixes the
    canonical variable order. ``nodes`` maps node ids to ``VNode``.
    """

    cards: Mapping[str, int]
    nodes: Mapping[int, VNode]
    root: int
    _scope: dict = field(default_factory=dict, repr=False)
    _parent: dict = field(default_factory=dict, repr=False)
    _post: list = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "cards", dict(self.cards))
        object.__setattr__(self, "nodes", dict(self.nodes))
        if self.root not in self.nodes:
            raise VtreeError(f"unknown root node {self.root}")
        seen: set[int] = set()
        order: list[int] = []
        stack: list[tuple[int, bool]] = [(self.root, False)]
        while stack:
            m, done = stack.pop()
            if done:
                order.append(m)
                continue
            if m in seen:
                raise VtreeError(f"node {m} reached twice")
            seen.add(m)
            node = self.nodes.get(m)
            if node is None:
                raise VtreeError(f"unknown node id {m}")
            stack.append((m, True))
            if not node.is_leaf:
                if node.right is None:
                    raise VtreeError(f"internal node {m} needs two children")
                self._parent[node.left] = m
                self._parent[node.right] = m
                stack.append((node.right, False))
                stack.append((node.left, False))
        if seen != set(self.nodes):
            raise VtreeError("vtree has nodes unreachable from the root")
        for m in order:
            node = self.nodes[m]
            if node.is_leaf:
                self._scope[m] = frozenset(node.vars)
            else:
                a, b = self._scope[node.left], self._scope[node.right]
                if a & b:
                    raise VtreeError(f"children of node {m} overlap on {sorted(a & b)}")
                self._scope[m] = a | b
        allv = self._scope[self.root]
        if set(allv) != set(self.cards):
            raise VtreeError("leaf scopes do not cover the declared variables")
        for v, k in self.cards.items():
            if int(k) < 1:
                raise VtreeError(f"variable {v} has cardinality {k}")
        self._post.extend(order)

    # --- queries -------------------------------------------------------
    @property
    def variables(self) -> list[str]:
        return list(self.cards)

    @property
    def all_vars(self) -> frozenset:
        return self._scope[self.root]

    def scope(self, m: int) -> frozenset:
        try:
            return self._scope[m]
        except KeyError:
            raise VtreeError(f"unknown node id {m}") from None

    def restricted_scope(self, m: int, c: Iterable[str]) -> frozenset:
        return self.scope(m) & frozenset(c)

    def is_leaf(self, m: int) -> bool:
        return self.nodes[m].is_leaf

    def children(self, m: int) -> tuple[int, int]:
        node = self.nodes[m]
        if node.is_leaf:
            raise VtreeError(f"node {m} is a leaf")
        return node.left, node.right

    def parent(self, m: int) -> int | None:
        return self._parent.get(m)

    def postorder(self) -> list[int]:
        return list(self._post)

    def preorder(self) -> list[int]:
        out: list[int] = []
        stack = [self.root]
        while stack:
            m = stack.pop()
            out.append(m)
            node = self.nodes[m]
            if not node.is_leaf:
                stack.append(node.right)
                stack.append(node.left)
        return out

    def internal_nodes(self) -> list[int]:
        return [m for m in self._post if not self.nodes[m].is_leaf]

    def leaves(self) -> list[int]:
        return [m for m in self._post if self.nodes[m].is_leaf]

    def subtree_ids(self, m: int) -> list[int]:
        out: list[int] = []
        stack = [m]
        while stack:
            n = stack.pop()
            out.append(n)
            node = self.nodes[n]
            if not node.is_leaf:
                stack.extend((node.right, node.left))
        return out

    def subtree(self, m: int) -> "Vtree":
        ids = self.subtree_ids(m)
        sc = self.scope(m)
        return Vtree({v: k for v, k in self.cards.items() if v in sc}, {i: self.nodes[i] for i in ids}, m)

    def structure_key(self, m: int | None = None):
        """Hashable shape of the subtree, used for structural equality."""
        m = self.root if m is None else m
        node = self.nodes[m]
        if node.is_leaf:
            return tuple(sorted(node.vars))
        return (self.structure_key(node.left), self.structure_key(node.right))

    def __repr__(self) -> str:
        return f"Vtree({self.structure_key()!r})"

    # --- construction --------------------------------------------------
    @classmethod
    def from_nested(cls, spec, cards: Mapping[str, int] | int = 2) -> "Vtree":
        """Build from nested pairs, e.g. ``(("A", "B"), "C")``.

        A string is a single-variable leaf; a ``frozenset``/``set``/``list``
        is a multi-variable leaf; a 2-tuple is an internal node.
        """
        nodes: dict[int, VNode] = {}
        names: list[str] = []

        def rec(s) -> int:
            if isinstance(s, str):
                vs: tuple[str, ...] = (s,)
            elif isinstance(s, (set, frozenset, list)):
                vs = tuple(sorted(s))
            else:
                if len(s) != 2:
                    raise VtreeError("internal nodes must have two children")
                a = rec(s[0])
                b = rec(s[1])
                i = len(nodes)
                nodes[i] = VNode(i, a, b)
                return i
            i = len(nodes)
            nodes[i] = VNode(i, vars=frozenset(vs))
            names.extend(vs)
            return i

        root = rec(spec)
        if isinstance(cards, int):
            cmap = {v: cards for v in names}
        else:
            cmap = {v: cards[v] for v in names}
        return cls(cmap, nodes, root)


def random_vtree(
    cards: Mapping[str, int],
    rng: np.random.Generator,
    leaf_group: int = 1,
) -> Vtree:
    """Random vtree with singleton leaves (or leaves of up to ``leaf_group`` vars)."""
    names = list(cards)
    order = [names[i] for i in rng.permutation(len(names))]
    blocks: list[tuple[str, ...]] = []
    i = 0
    while i < len(order):
        size = int(rng.integers(1, leaf_group + 1))
        blocks.append(tuple(order[i : i + size]))
        i += size
    nodes: dict[int, VNode] = {}

    def rec(bs: list[tuple[str, ...]]) -> int:
        if len(bs) == 1:
            i = len(nodes)
            nodes[i] = VNode(i, vars=frozenset(bs[0]))
            return i
        cut = int(rng.integers(1, len(bs)))
        a = rec(bs[:cut])
        b = rec(bs[cut:])
        i = len(nodes)
        nodes[i] = VNode(i, a, b)
        return i

    root = rec(blocks)
    return Vtree(dict(cards), nodes, root)


def split_vtree(cards: Mapping[str, int], left: Sequence[str], rng: np.random.Generator) -> Vtree:
    """Vtree whose root separates ``left`` from the remaining variables.

    Both sides are random below the root.
    """
    return chain_vtree(cards, [left], rng)


def chain_vtree(cards: Mapping[str, int], blocks: Sequence[Iterable[str]], rng: np.random.Generator) -> Vtree:
    """Right-linear spine that splits off each block in turn.

    The tree is ``(B1, (B2, (..., rest)))`` with random subtrees for every
    block and for the variables left over. Empty blocks are skipped.
    """
    used: set[str] = set()
    groups: list[list[str]] = []
    for blk in blocks:
        g = [v for v in cards if v in set(blk) and v not in used]
        if g:
            groups.append(g)
            used.update(g)
    rest = [v for v in cards if v not in used]
    if rest:
        groups.append(rest)
    if not groups:
        raise VtreeError("vtree needs at least one variable")
    nodes: dict[int, VNode] = {}

    def graft(sub: Vtree) -> int:
        off = len(nodes)
        for m, n in sub.nodes.items():
            nodes[m + off] = VNode(
                m + off,
                None if n.left is None else n.left + off,
                None if n.right is None else n.right + off,
                n.vars,
            )
        return sub.root + off

    subs = [graft(random_vtree({v: cards[v] for v in g}, rng)) for g in groups]
    root = subs[-1]
    for top in reversed(subs[:-1]):
        i = len(nodes)
        nodes[i] = VNode(i, top, root)
        root = i
    return Vtree(dict(cards), nodes, root)


@dataclass(frozen=True, eq=False)
class MdVtree:
    vtree: Vtree
    psi: Mapping[int, Label]

    def __post_init__(self) -> None:
        psi = dict(self.psi)
        object.__setattr__(self, "psi", psi)
        for m in self.vtree.nodes:
            if m not in psi:
                raise VtreeError(f"node {m} has no label")
            lab = psi[m]
            if lab is not U:
                lab = frozenset(lab)
                psi[m] = lab
                if not lab <= self.vtree.scope(m):
                    raise VtreeError(f"label {lab_str(lab)} of node {m} is not within its scope")

    def label(self, m: int) -> Label:
        return self.psi[m]

    def with_labels(self, updates: Mapping[int, Label]) -> "MdVtree":
        psi = dict(self.psi)
        psi.update(updates)
        return MdVtree(self.vtree, psi)

    def same_labels(self, other: "MdVtree") -> bool:
        return self.psi == other.psi

    def __repr__(self) -> str:
        parts = ", ".join(f"{m}:{lab_str(self.psi[m])}" for m in self.vtree.preorder())
        return f"MdVtree({self.vtree.structure_key()!r}; {parts})"


def universal(v: Vtree) -> MdVtree:
    return MdVtree(v, {m: U for m in v.nodes})


def rename_vtree(v: Vtree, mapping: Mapping[str, str]) -> Vtree:
    """Same structure and node ids with variables renamed."""
    new = [mapping.get(x, x) for x in v.cards]
    if len(set(new)) != len(new):
        raise VtreeError("renaming merges two variables")
    nodes = {m: VNode(m, n.left, n.right, frozenset(mapping.get(x, x) for x in n.vars)) for m, n in v.nodes.items()}
    return Vtree({mapping.get(x, x): k for x, k in v.cards.items()}, nodes, v.root)


def rename_mdvtree(w: MdVtree, mapping: Mapping[str, str]) -> MdVtree:
    psi = {m: lab if lab is U else frozenset(mapping.get(x, x) for x in lab) for m, lab in w.psi.items()}
    return MdVtree(rename_vtree(w.vtree, mapping), psi)


def scope(v: Vtree, m: int) -> frozenset:
    return v.scope(m)


def restricted_scope(v: Vtree, m: int, c: Iterable[str]) -> frozenset:
    return v.restricted_scope(m, c)


# --- implied determinisms ----------------------------------------------


def implies_qdet(w: MdVtree, q: Iterable[str]) -> bool:
    q = frozenset(q)
    v = w.vtree
    for m in v.nodes:
        if v.scope(m) & q and not lab_subset(w.psi[m], q):
            return False
    return True


DEFAULT_ENUM_BOUND = 20


def enumerate_implied(w: MdVtree, max_vars: int = DEFAULT_ENUM_BOUND) -> set[frozenset]:
    """All nonempty Q ⊆ V whose determinism ``w`` implies."""
    v = w.vtree
    names = sorted(v.all_vars)
    n = len(names)
    if n > max_vars:
        raise VtreeError(f"enumeration over {n} variables exceeds bound {max_vars}")
    if n == 0:
        return set()
    bit = {x: 1 << i for i, x in enumerate(names)}

    def mask(s: Iterable[str]) -> int:
        return sum(bit[x] for x in s)

    qs = np.arange(1, 1 << n, dtype=np.int64)
    ok = np.ones(qs.shape, dtype=bool)
    for m in v.nodes:
        overlap = (qs & mask(v.scope(m))) != 0
        lab = w.psi[m]
        if lab is U:
            ok &= ~overlap
        else:
            lm = mask(lab)
            ok &= ~overlap | ((qs & lm) == lm)
    return {frozenset(x for x in names if q & bit[x]) for q in qs[ok].tolist()}


def optimal_labelling(v: Vtree, reqs: Iterable[Iterable[str]]) -> MdVtree:
    """Tightest regular labelling implying every requested determinism."""
    reqs = [frozenset(q) for q in reqs]
    for q in reqs:
        if not q:
            raise VtreeError("empty determinism set requested")
        if not q <= v.all_vars:
            raise VtreeError(f"requested set {lab_str(q)} is not within the vtree variables")
    psi: dict[int, Label] = {}
    for m in v.nodes:
        lab: Label = U
        sc = v.scope(m)
        for q in reqs:
            if q & sc:
                lab = lab_inter(lab, q)
        if lab is not U:
            lab = lab & sc
        psi[m] = lab
    return MdVtree(v, psi)


def is_regular(w: MdVtree) -> bool:
    """Every internal label is a child label, the union of both, or empty.

    The empty label is the union over no children: it is what EPL and
    Algorithm 1 produce when no child label meets the parent label.
    """
    v = w.vtree
    for m in v.internal_nodes():
        l, r = v.children(m)
        a, b, c = w.psi[l], w.psi[r], w.psi[m]
        if not (c == a or c == b or c == lab_union(a, b) or c == frozenset()):
            return False
    return True


# --- regularization ----------------------------------------------------
# Inside EPL a universal child label is read as "everything under this child
# plus a phantom variable", so intersecting it with a concrete parent label
# gives the parent label restricted to the child scope.


def _meet_child(parent: Label, child: Label, child_scope: frozenset) -> Label:
    if child is U and parent is not U:
        return parent & child_scope
    return lab_inter(parent, child)


def ecl(w: MdVtree, parent: int, child: int) -> MdVtree:
    v = w.vtree
    if v.parent(child) != parent:
        raise VtreeError(f"node {child} is not a child of node {parent}")
    pa = w.psi[parent]
    ch = w.psi[child]
    new = lab_union(ch, lab_inter(pa, v.scope(child)))
    return w.with_labels({child: new})


def _epl_precondition(w: MdVtree, parent: int, child: int) -> bool:
    v = w.vtree
    pa, ch = w.psi[parent], w.psi[child]
    if pa is U:
        return ch is U
    return pa & v.scope(child) == _meet_child(pa, ch, v.scope(child))


def epl(w: MdVtree, parent: int) -> MdVtree:
    v = w.vtree
    if v.is_leaf(parent):
        raise VtreeError(f"node {parent} is a leaf")
    kids = v.children(parent)
    for ch in kids:
        if not _epl_precondition(w, parent, ch):
            raise VtreeError(f"EPL precondition violated between {parent} and {ch}")
    pa = w.psi[parent]
    if pa is U:
        return w
    new: Label = frozenset()
    for ch in kids:
        if _meet_child(pa, w.psi[ch], v.scope(ch)):
            new = lab_union(new, w.psi[ch])
    return w.with_labels({parent: new})


def regularize(w: MdVtree) -> MdVtree:
    """Regular md-vtree with the same implied determinisms and larger labels."""
    v = w.vtree
    # Descendants of a universal node cannot matter for any Q that overlaps
    # them, so making them universal too keeps Q(w) and allows regularity.
    psi = dict(w.psi)
    for m in v.preorder():
        p = v.parent(m)
        if p is not None and psi[p] is U:
            psi[m] = U
    out = MdVtree(v, psi)
    for m in v.preorder():
        if not v.is_leaf(m):
            for ch in v.children(m):
                out = ecl(out, m, ch)
    for m in v.postorder():
        if not v.is_leaf(m):
            out = epl(out, m)
    return out


# --- compatibility -----------------------------------------------------


def compatible(v1: Vtree, v2: Vtree) -> bool:
    return _compat(v1, v1.root, v2, v2.root) is not None


def _compat(v1: Vtree, m1: int, v2: Vtree, m2: int):
    """Return the compatibility case used at (m1, m2), or None."""
    c = v1.scope(m1) & v2.scope(m2)
    if not c:
        return ("disjoint",)
    leaf1, leaf2 = v1.is_leaf(m1), v2.is_leaf(m2)
    if leaf1 and leaf2:
        return ("leaves",)
    if not leaf1:
        for side, ch in zip(("l", "r"), v1.children(m1)):
            if v1.scope(ch) & c == c and _compat(v1, ch, v2, m2) is not None:
                return ("defer1", side)
    if not leaf2:
        for side, ch in zip(("l", "r"), v2.children(m2)):
            if v2.scope(ch) & c == c and _compat(v1, m1, v2, ch) is not None:
                return ("defer2", side)
    if not leaf1 and not leaf2:
        l1, r1 = v1.children(m1)
        l2, r2 = v2.children(m2)
        for a2, b2, cross in ((l2, r2, False), (r2, l2, True)):
            if (
                v1.scope(l1) & c == v2.scope(a2) & c
                and v1.scope(r1) & c == v2.scope(b2) & c
                and _compat(v1, l1, v2, a2) is not None
                and _compat(v1, r1, v2, b2) is not None
            ):
                return ("children", cross)
    return None


def compat_case(v1: Vtree, m1: int, v2: Vtree, m2: int):
    return _compat(v1, m1, v2, m2)


def all_subsets(vs: Sequence[str], nonempty: bool = True) -> Iterator[frozenset]:
    start = 1 if nonempty else 0
    for r in range(start, len(vs) + 1):
        for comb in itertools.combinations(vs, r):
            yield frozenset(comb)
