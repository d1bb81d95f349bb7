"""Brute-force reference: dense joint tables.

Everything here works by exhaustive enumeration so that it can serve as an
independent check on the circuit code.
"""

from __future__ import annotations

import graphlib
import itertools
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .circuit import (
    Categorical,
    Circuit,
    Indicator,
    LeafLayer,
    SumLayer,
    make_leaf,
)
from .vtree import MdVtree, U

TABLE_BOUND = 1 << 22


class OracleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class JointTable:
    """Dense nonnegative table, row-major in ``variables`` order."""

    variables: tuple
    cards: tuple
    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "cards", tuple(int(k) for k in self.cards))
        vals = np.asarray(self.values, dtype=float).reshape(self.cards)
        object.__setattr__(self, "values", vals)
        if len(set(self.variables)) != len(self.variables):
            raise OracleError("duplicate variable in table")

    @property
    def card_map(self) -> dict[str, int]:
        return dict(zip(self.variables, self.cards))

    def axis(self, x: str) -> int:
        try:
            return self.variables.index(x)
        except ValueError:
            raise OracleError(f"variable {x} not in table") from None

    def total(self) -> float:
        return float(self.values.sum())

    def __getitem__(self, a: Mapping[str, int]) -> float:
        return float(self.values[tuple(int(a[x]) for x in self.variables)])

    def aligned(self, order: Sequence[str]) -> "JointTable":
        order = list(order)
        if sorted(order) != sorted(self.variables):
            raise OracleError("alignment order must list exactly the table variables")
        perm = [self.axis(x) for x in order]
        cm = self.card_map
        return JointTable(order, [cm[x] for x in order], np.transpose(self.values, perm))

    def renamed(self, mapping: Mapping[str, str]) -> "JointTable":
        return JointTable([mapping.get(x, x) for x in self.variables], self.cards, self.values)

    def allclose(self, other: "JointTable", rtol: float = 1e-9, atol: float = 0.0) -> bool:
        o = other.aligned(self.variables)
        return bool(np.allclose(self.values, o.values, rtol=rtol, atol=atol))


def table_scalar(value: float) -> JointTable:
    return JointTable((), (), np.array(value, dtype=float))


# --- reference operations ----------------------------------------------


def t_marg(t: JointTable, w: Iterable[str]) -> JointTable:
    w = set(w)
    axes = tuple(t.axis(x) for x in w)
    keep = [x for x in t.variables if x not in w]
    return JointTable(keep, [t.card_map[x] for x in keep], t.values.sum(axis=axes))


def t_inst(t: JointTable, a: Mapping[str, int]) -> JointTable:
    idx = tuple(int(a[x]) if x in a else slice(None) for x in t.variables)
    keep = [x for x in t.variables if x not in a]
    return JointTable(keep, [t.card_map[x] for x in keep], t.values[idx])


def t_prod(t1: JointTable, t2: JointTable) -> JointTable:
    cm = t1.card_map
    for x, k in t2.card_map.items():
        if cm.setdefault(x, k) != k:
            raise OracleError(f"variable {x} has different cardinalities")
    order = list(t1.variables) + [x for x in t2.variables if x not in t1.card_map]
    letters = {x: chr(ord("a") + i) for i, x in enumerate(order)}
    if len(order) > 26:
        raise OracleError("too many variables for a dense product")
    spec = "{},{}->{}".format(
        "".join(letters[x] for x in t1.variables),
        "".join(letters[x] for x in t2.variables),
        "".join(letters[x] for x in order),
    )
    return JointTable(order, [cm[x] for x in order], np.einsum(spec, t1.values, t2.values))


def t_pow(t: JointTable, alpha: float) -> JointTable:
    out = np.zeros_like(t.values)
    nz = t.values != 0
    out[nz] = t.values[nz] ** alpha
    return JointTable(t.variables, t.cards, out)


def t_log(t: JointTable) -> JointTable:
    out = np.zeros_like(t.values)
    nz = t.values != 0
    out[nz] = np.log(t.values[nz])
    return JointTable(t.variables, t.cards, out)


def t_max(t: JointTable, evidence: Mapping[str, int] | None = None) -> float:
    sub = t_inst(t, evidence or {})
    return float(sub.values.max()) if sub.values.size else 0.0


def support(t: JointTable) -> np.ndarray:
    return t.values != 0


# --- circuit to table (dense tensor contraction, independent of the
#     row-wise evaluator) ----------------------------------------------


def table_from_circuit(c: Circuit, bound: int = TABLE_BOUND) -> JointTable:
    total = int(np.prod([c.cards[x] for x in c.variables])) if c.variables else 1
    if total > bound:
        raise OracleError(f"table would have {total} entries, bound is {bound}")
    v = c.vtree
    tabs: dict[int, tuple[list[str], np.ndarray]] = {}
    for m in v.postorder():
        layer = c.layers[m]
        if layer.is_leaf:
            names = sorted(v.scope(m))
            shape = [c.cards[x] for x in names]
            leaf_t = np.zeros([len(layer.leaves)] + shape)
            for t, leaf in enumerate(layer.leaves):
                block = np.ones(shape)
                for f in leaf:
                    ax = names.index(f.var)
                    vec = f.table(c.cards[f.var]).reshape([-1 if i == ax else 1 for i in range(len(names))])
                    block = block * vec
                leaf_t[t] = block
            val = np.tensordot(layer.mix, leaf_t, axes=([1], [0]))
            tabs[m] = (names, val.reshape([layer.num_nodes] + shape))
        else:
            l, r = v.children(m)
            ln, lt = tabs[l]
            rn, rt = tabs[r]
            lf = lt.reshape(lt.shape[0], -1)
            rf = rt.reshape(rt.shape[0], -1)
            out = np.zeros((layer.num_nodes, lf.shape[1], rf.shape[1]))
            for i, j, k, w in layer.entries():
                out[i] += w * np.outer(lf[j], rf[k])
            tabs[m] = (ln + rn, out.reshape((layer.num_nodes,) + lt.shape[1:] + rt.shape[1:]))
    names, val = tabs[v.root]
    t = JointTable(names, [c.cards[x] for x in names], val[c.root_index])
    return t.aligned(c.variables)


# --- causal estimands by direct summation --------------------------------


def _names(s) -> list[str]:
    return sorted(s)


def backdoor_table(t: JointTable, x: Iterable[str], y: Iterable[str], z: Iterable[str]) -> JointTable:
    """sum_z p(z) p(x, y, z) / p(x, z), as a table over X and Y."""
    x, y, z = _names(x), _names(y), _names(z)
    rest = [v for v in t.variables if v not in set(x) | set(y) | set(z)]
    j = t_marg(t, rest).aligned(x + y + z)
    cm = j.card_map
    out = np.zeros([cm[v] for v in x + y])
    pz = j.values.sum(axis=tuple(range(len(x) + len(y)))) if (x or y) else j.values
    pxz = j.values.sum(axis=tuple(range(len(x), len(x) + len(y))))
    for xs in itertools.product(*[range(cm[v]) for v in x]):
        for ys in itertools.product(*[range(cm[v]) for v in y]):
            acc = 0.0
            for zs in itertools.product(*[range(cm[v]) for v in z]):
                den = pxz[xs + zs]
                if den != 0:
                    acc += pz[zs] * j.values[xs + ys + zs] / den
            out[xs + ys] = acc
    return JointTable(x + y, [cm[v] for v in x + y], out)


def frontdoor_table(t: JointTable, x: Iterable[str], y: Iterable[str], z: Iterable[str]) -> JointTable:
    """sum_z p(z | x) sum_x' p(x') p(y | x', z), as a table over X and Y."""
    x, y, z = _names(x), _names(y), _names(z)
    rest = [v for v in t.variables if v not in set(x) | set(y) | set(z)]
    j = t_marg(t, rest).aligned(x + y + z)
    cm = j.card_map
    nx, ny = len(x), len(y)
    pxz = j.values.sum(axis=tuple(range(nx, nx + ny)))
    px = pxz.sum(axis=tuple(range(nx, pxz.ndim)))
    xr = [range(cm[v]) for v in x]
    yr = [range(cm[v]) for v in y]
    zr = [range(cm[v]) for v in z]
    out = np.zeros([cm[v] for v in x + y])
    for xs in itertools.product(*xr):
        for ys in itertools.product(*yr):
            acc = 0.0
            for zs in itertools.product(*zr):
                if px[xs] == 0:
                    continue
                pz_x = pxz[xs + zs] / px[xs]
                inner = 0.0
                for xp in itertools.product(*xr):
                    if pxz[xp + zs] != 0:
                        inner += px[xp] * j.values[xp + ys + zs] / pxz[xp + zs]
                acc += pz_x * inner
            out[xs + ys] = acc
    return JointTable(x + y, [cm[v] for v in x + y], out)


def napkin_table(
    t: JointTable,
    x: Iterable[str],
    y: Iterable[str],
    z: Iterable[str],
    w: Iterable[str],
    k: Iterable[str],
    xval: Mapping[str, int] | None,
    zval: Mapping[str, int],
) -> JointTable:
    """Extended napkin estimand, as a table over Y (or X and Y when ``xval`` is None).

    sum_k [sum_{w,x',y'} p(x',y'|k,z,w) p(w,k)]
          * [sum_w p(x,y|k,z,w) p(w,k)] / [sum_w p(x|k,z,w) p(w,k)]
    """
    x, y, z, w, k = (_names(s) for s in (x, y, z, w, k))
    rest = [v for v in t.variables if v not in set(x) | set(y) | set(z) | set(w) | set(k)]
    j = t_marg(t, rest).aligned(x + y + z + w + k)
    cm = j.card_map

    def p(assign: dict) -> float:
        return t_marg(j, [v for v in j.variables if v not in assign])[assign] if assign else j.total()

    zs = {v: int(zval[v]) for v in z}
    xr = [range(cm[v]) for v in x]
    yr = [range(cm[v]) for v in y]
    wr = [range(cm[v]) for v in w]
    kr = [range(cm[v]) for v in k]
    xs_list = [dict(zip(x, xv)) for xv in itertools.product(*xr)] if xval is None else [dict(xval)]
    out_vars = (x if xval is None else []) + y
    out = np.zeros([cm[v] for v in out_vars])
    pjoint = {}

    def pj(assign: dict) -> float:
        key = tuple(sorted(assign.items()))
        if key not in pjoint:
            pjoint[key] = p(assign)
        return pjoint[key]

    for xa in xs_list:
        for yv in itertools.product(*yr):
            ya = dict(zip(y, yv))
            total = 0.0
            for kv in itertools.product(*kr):
                ka = dict(zip(k, kv))
                f = 0.0
                num = 0.0
                den = 0.0
                for wv in itertools.product(*wr):
                    wa = dict(zip(w, wv))
                    pkzw = pj({**ka, **zs, **wa})
                    if pkzw == 0:
                        continue
                    pwk = pj({**wa, **ka})
                    f += pj({**ka, **zs, **wa}) / pkzw * pwk
                    num += pj({**xa, **ya, **ka, **zs, **wa}) / pkzw * pwk
                    den += pj({**xa, **ka, **zs, **wa}) / pkzw * pwk
                if den != 0:
                    total += f * num / den
            key = tuple(xa[v] for v in x) if xval is None else ()
            out[key + tuple(yv)] = total
    return JointTable(out_vars, [cm[v] for v in out_vars], out)


# --- table compiler ------------------------------------------------------


def compile_table(t: JointTable, w: MdVtree, tol: float = 1e-9, bound: int = TABLE_BOUND) -> Circuit:
    """Circuit exactly respecting ``w`` whose function is the table ``t``.

    At each node the table is split into one product per positive-mass
    assignment of the node label; each such cell must factor across the
    node's split. Universal labels expand over the smaller side.
    """
    v = w.vtree
    if set(v.all_vars) != set(t.variables):
        raise OracleError("vtree and table cover different variables")
    if t.values.size > bound:
        raise OracleError(f"table has {t.values.size} entries, bound is {bound}")
    if not t.total() > 0:
        raise OracleError("cannot compile a table with zero mass")
    cm = t.card_map
    for x in v.variables:
        if v.cards[x] != cm[x]:
            raise OracleError(f"cardinality of {x} differs between vtree and table")
    units: dict[int, list] = {m: [] for m in v.nodes}
    cache: dict[int, dict] = {m: {} for m in v.nodes}
    names = {m: sorted(v.scope(m)) for m in v.nodes}

    def emit(m: int, tab: np.ndarray) -> int:
        key = tab.tobytes()
        hit = cache[m].get(key)
        if hit is not None:
            return hit
        lab = w.psi[m]
        sc = names[m]
        if v.is_leaf(m):
            entry = _leaf_unit(sc, tab, lab, tol)
        else:
            l, r = v.children(m)
            ln, rn = names[l], names[r]
            # bring the table to (left vars..., right vars...) order
            perm = [sc.index(x) for x in ln + rn]
            mat = np.transpose(tab, perm).reshape(int(np.prod([cm[x] for x in ln])), -1)
            lshape = [cm[x] for x in ln]
            rshape = [cm[x] for x in rn]
            entry = []
            for cell in _cells(mat, ln, rn, lshape, rshape, lab, cm, tol, m):
                u, s, vv = cell
                j = emit(l, u.reshape(lshape))
                k = emit(r, vv.reshape(rshape))
                entry.append((j, k, s))
        idx = len(units[m])
        units[m].append(entry)
        cache[m][key] = idx
        return idx

    tab = t.aligned(names[v.root]).values
    root = emit(v.root, tab)
    layers = {}
    for m in v.postorder():
        if v.is_leaf(m):
            leaves: list = []
            pos: dict = {}
            rows = []
            for entry in units[m]:
                row = {}
                for leaf, weight in entry:
                    key = tuple((f.var, _fkey(f)) for f in leaf)
                    if key not in pos:
                        pos[key] = len(leaves)
                        leaves.append(leaf)
                    row[pos[key]] = row.get(pos[key], 0.0) + weight
                rows.append(row)
            mix = np.zeros((len(rows), len(leaves)))
            for i, row in enumerate(rows):
                for tt, x in row.items():
                    mix[i, tt] = x
            layers[m] = LeafLayer(m, leaves, mix)
        else:
            l, r = v.children(m)
            shape = (len(units[m]), len(units[l]), len(units[r]))
            layers[m] = SumLayer.from_entries(m, shape, ((i, j, k, s) for i, e in enumerate(units[m]) for j, k, s in e))
    return Circuit(w, layers, root)


def _fkey(f):
    if isinstance(f, Categorical):
        return ("c",) + tuple(np.round(f.weights, 300).tolist())
    if isinstance(f, Indicator):
        return ("i", f.state)
    return ("1",)


def _cells(mat, ln, rn, lshape, rshape, lab, cm, tol, m):
    """Split ``mat`` (left assignments x right assignments) into rank-one cells."""
    if lab is U:
        # expand over the side with fewer assignments
        if mat.shape[0] <= mat.shape[1]:
            for a in np.flatnonzero(mat.sum(axis=1) > 0):
                u = np.zeros(mat.shape[0])
                u[a] = 1.0
                yield u, 1.0, mat[a].copy()
        else:
            for b in np.flatnonzero(mat.sum(axis=0) > 0):
                vv = np.zeros(mat.shape[1])
                vv[b] = 1.0
                yield mat[:, b].copy(), 1.0, vv
        return
    lq = [x for x in ln if x in lab]
    rq = [x for x in rn if x in lab]
    lkey = _cell_keys(ln, lshape, lq)
    rkey = _cell_keys(rn, rshape, rq)
    for lk in np.unique(lkey):
        for rk in np.unique(rkey):
            cell = np.where((lkey == lk)[:, None] & (rkey == rk)[None, :], mat, 0.0)
            s = cell.sum()
            if s <= 0:
                continue
            u = cell.sum(axis=1)
            vv = cell.sum(axis=0) / s
            resid = np.abs(cell - np.outer(u, vv)).max()
            if resid > tol * max(cell.max(), 1e-300):
                raise OracleError(f"table does not factor across the split of node {m} (residual {resid:.3g})")
            yield u, 1.0, vv


def _cell_keys(names, shape, q):
    """Integer key of each assignment restricted to the variables ``q``."""
    if not names:
        return np.zeros(1, dtype=np.int64)
    grids = np.meshgrid(*[np.arange(k) for k in shape], indexing="ij")
    key = np.zeros(grids[0].shape, dtype=np.int64)
    for x in q:
        i = names.index(x)
        key = key * shape[i] + grids[i]
    return key.reshape(-1)


def _leaf_unit(names, tab, lab, tol):
    """Mixture entries ``(leaf, weight)`` for a table over a vtree leaf."""
    if not names:
        return [((), float(tab))]
    if len(names) == 1:
        s = float(tab.sum())
        if s == 0:
            return []
        return [(make_leaf([Categorical(names[0], tab / s)]), s)]
    q = [] if lab is U else [x for x in names if x in lab]
    if lab is U:
        q = list(names)
    shape = tab.shape
    keys = _cell_keys(names, shape, q).reshape(shape)
    out = []
    for key in np.unique(keys):
        cell = np.where(keys == key, tab, 0.0)
        s = cell.sum()
        if s <= 0:
            continue
        margs = [cell.sum(axis=tuple(j for j in range(len(names)) if j != i)) / s for i in range(len(names))]
        prod = s
        for i, mvec in enumerate(margs):
            prod = np.multiply.outer(prod, mvec) if i else s * mvec
        resid = np.abs(cell - prod).max()
        if resid > tol * max(cell.max(), 1e-300):
            raise OracleError(f"leaf table over {names} does not factor within a label cell")
        out.append((make_leaf([Categorical(x, mv) for x, mv in zip(names, margs)]), float(s)))
    return out


# --- Bayesian networks -----------------------------------------------------


@dataclass(frozen=True)
class BNVar:
    name: str
    card: int
    hidden: bool = False


@dataclass(frozen=True, eq=False)
class CPT:
    var: str
    parents: tuple
    table: np.ndarray  # rows indexed by parent assignment (row-major), columns by state


@dataclass(frozen=True, eq=False)
class BayesNet:
    vars: tuple
    cpts: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "vars", tuple(self.vars))
        object.__setattr__(self, "cpts", tuple(self.cpts))
        names = [v.name for v in self.vars]
        if len(set(names)) != len(names):
            raise OracleError("duplicate variable in Bayesian network")
        card = self.cards
        seen = set()
        for cpt in self.cpts:
            if cpt.var not in card:
                raise OracleError(f"CPT for unknown variable {cpt.var}")
            if cpt.var in seen:
                raise OracleError(f"two CPTs for {cpt.var}")
            seen.add(cpt.var)
            for p in cpt.parents:
                if p not in card:
                    raise OracleError(f"unknown parent {p} of {cpt.var}")
            rows = int(np.prod([card[p] for p in cpt.parents])) if cpt.parents else 1
            tab = np.asarray(cpt.table, dtype=float)
            if tab.shape != (rows, card[cpt.var]):
                raise OracleError(f"CPT of {cpt.var} has shape {tab.shape}, expected {(rows, card[cpt.var])}")
            if np.any(tab < 0) or not np.allclose(tab.sum(axis=1), 1.0, atol=1e-9):
                raise OracleError(f"CPT of {cpt.var} is not normalized")
        if seen != set(card):
            raise OracleError("every variable needs a CPT")
        self.order()

    @property
    def cards(self) -> dict[str, int]:
        return {v.name: v.card for v in self.vars}

    @property
    def visible(self) -> list[str]:
        return [v.name for v in self.vars if not v.hidden]

    def cpt(self, name: str) -> CPT:
        for c in self.cpts:
            if c.var == name:
                return c
        raise KeyError(name)

    def order(self) -> list[str]:
        graph = {c.var: set(c.parents) for c in self.cpts}
        try:
            return list(graphlib.TopologicalSorter(graph).static_order())
        except graphlib.CycleError as exc:
            raise OracleError("Bayesian network has a cycle") from exc

    def full_joint(self) -> JointTable:
        names = [v.name for v in self.vars]
        card = self.cards
        total = int(np.prod([card[x] for x in names]))
        if total > TABLE_BOUND:
            raise OracleError("network too large for a dense joint")
        vals = np.ones([card[x] for x in names])
        for cpt in self.cpts:
            axes = list(cpt.parents) + [cpt.var]
            tab = np.asarray(cpt.table).reshape([card[x] for x in axes])
            shape = [card[x] if x in axes else 1 for x in names]
            perm = sorted(range(len(axes)), key=lambda i: names.index(axes[i]))
            vals = vals * np.transpose(tab, perm).reshape(shape)
        return JointTable(names, [card[x] for x in names], vals)

    def joint(self) -> JointTable:
        """Joint over the visible variables (hidden ones summed out)."""
        full = self.full_joint()
        return t_marg(full, [v.name for v in self.vars if v.hidden])


@dataclass(frozen=True, eq=False)
class Dataset:
    columns: tuple
    data: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "columns", tuple(self.columns))
        d = np.asarray(self.data, dtype=np.int64)
        if d.ndim != 2 or d.shape[1] != len(self.columns):
            raise OracleError("dataset shape does not match its columns")
        object.__setattr__(self, "data", d)

    def __len__(self) -> int:
        return self.data.shape[0]

    def aligned(self, order: Sequence[str]) -> np.ndarray:
        pos = {c: i for i, c in enumerate(self.columns)}
        missing = [x for x in order if x not in pos]
        if missing:
            raise OracleError(f"dataset lacks columns {missing}")
        return self.data[:, [pos[x] for x in order]]


def bn_sample(bn: BayesNet, n: int, seed: int) -> Dataset:
    """Ancestral sampling; hidden variables are dropped from the output."""
    rng = np.random.default_rng(seed)
    card = bn.cards
    values: dict[str, np.ndarray] = {}
    for x in bn.order():
        cpt = bn.cpt(x)
        row = np.zeros(n, dtype=np.int64)
        for p in cpt.parents:
            row = row * card[p] + values[p]
        probs = np.asarray(cpt.table, dtype=float)[row]
        cum = np.cumsum(probs, axis=1)
        u = rng.random(n)[:, None]
        values[x] = np.minimum((u >= cum).sum(axis=1), card[x] - 1)
    cols = bn.visible
    return Dataset(cols, np.stack([values[x] for x in cols], axis=1) if cols else np.zeros((n, 0)))


def random_bn(
    names: Sequence[str],
    rng: np.random.Generator,
    max_parents: int = 2,
    card: int = 2,
    hidden: Iterable[str] = (),
    edges: Mapping[str, Sequence[str]] | None = None,
    concentration: float = 1.0,
) -> BayesNet:
    """Random network over ``names`` in the given topological order."""
    hidden = set(hidden)
    cards = {x: card for x in names}
    cpts = []
    for i, x in enumerate(names):
        if edges is not None:
            parents = list(edges.get(x, ()))
        else:
            k = int(rng.integers(0, min(max_parents, i) + 1))
            parents = sorted(rng.choice(i, size=k, replace=False).tolist()) if k else []
            parents = [names[j] for j in parents]
        rows = int(np.prod([cards[p] for p in parents])) if parents else 1
        tab = rng.dirichlet(np.full(cards[x], concentration), size=rows)
        cpts.append(CPT(x, tuple(parents), tab))
    return BayesNet(tuple(BNVar(x, cards[x], x in hidden) for x in names), tuple(cpts))
