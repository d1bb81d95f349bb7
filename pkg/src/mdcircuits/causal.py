"""Pipelines for causal estimands over a single input circuit ``C``."""

from __future__ import annotations

from typing import Iterable, Mapping

from .calculus import Pipeline, PipelineBuilder, PipelineError

INPUT = "C"
COPY = "C_copy"


def _sets(**named: Iterable[str]) -> dict[str, frozenset]:
    out = {k: frozenset(v) for k, v in named.items()}
    keys = list(out)
    for i, a in enumerate(keys):
        for b in keys[i + 1 :]:
            both = out[a] & out[b]
            if both:
                raise PipelineError(f"variable sets {a} and {b} overlap on {sorted(both)}")
    return out


def _check_total(assign: Mapping[str, int] | None, vs: frozenset, what: str) -> dict | None:
    if assign is None:
        return None
    if set(assign) != set(vs):
        raise PipelineError(f"instantiation of {what} must assign exactly {sorted(vs)}")
    return {x: int(s) for x, s in assign.items()}


def primed(x: str) -> str:
    return x + "'"


def backdoor_pipeline(
    x: Iterable[str],
    y: Iterable[str],
    z: Iterable[str],
    xval: Mapping[str, int] | None = None,
    variables: Iterable[str] | None = None,
) -> Pipeline:
    """sum_Z p(Z) p(Y, X, Z) / p(X, Z).

    ``variables`` is the scope of the input circuit; it defaults to X, Y, Z.
    With ``xval`` the treatment is instantiated before the division.
    """
    s = _sets(X=x, Y=y, Z=z)
    X, Y, Z = s["X"], s["Y"], s["Z"]
    V = frozenset(variables) if variables is not None else X | Y | Z
    if not X | Y | Z <= V:
        raise PipelineError("X, Y and Z must lie within the circuit variables")
    xa = _check_total(xval, X, "X")
    b = PipelineBuilder()
    c = b.input(INPUT, V)
    pz = b.marg(c, V - Z)
    pxyz = b.marg(c, V - (X | Y | Z))
    if xa is not None:
        pxyz = b.inst(pxyz, xa)
    pxz = b.marg(pxyz, Y)
    ratio = b.prod(pxyz, b.pow(pxz, -1))
    out = b.marg(b.prod(pz, ratio), Z)
    return b.build(out)


def frontdoor_pipeline(
    x: Iterable[str],
    y: Iterable[str],
    z: Iterable[str],
    xval: Mapping[str, int] | None = None,
    variables: Iterable[str] | None = None,
) -> Pipeline:
    """sum_Z p(Z | X) sum_X' p(X') p(Y | X', Z).

    The X' factor reads a renamed view of the input in which every treatment
    variable ``v`` is called ``v'``.
    """
    s = _sets(X=x, Y=y, Z=z)
    X, Y, Z = s["X"], s["Y"], s["Z"]
    V = frozenset(variables) if variables is not None else X | Y | Z
    if not X | Y | Z <= V:
        raise PipelineError("X, Y and Z must lie within the circuit variables")
    clash = {primed(v) for v in X} & V
    if clash:
        raise PipelineError(f"renamed treatment variables {sorted(clash)} already exist")
    xa = _check_total(xval, X, "X")
    ren = {v: primed(v) for v in X}
    Xp = frozenset(ren.values())
    b = PipelineBuilder()
    c = b.input(INPUT, V)
    c2 = b.renamed_input(COPY, INPUT, ren)
    rest = V - (X | Y | Z)
    # p(Z | X), possibly at X = x
    pxz = b.marg(c, rest | Y)
    px = b.marg(pxz, Z)
    if xa is not None:
        pxz = b.inst(pxz, xa)
        px = b.inst(px, xa)
    pz_x = b.prod(pxz, b.pow(px, -1))
    # sum_X' p(X') p(Y | X', Z) from the renamed copy
    pxyz2 = b.marg(c2, rest)
    pxz2 = b.marg(pxyz2, Y)
    py_xz = b.prod(pxyz2, b.pow(pxz2, -1))
    px2 = b.marg(pxz2, Z)
    inner = b.marg(b.prod(px2, py_xz), Xp)
    out = b.marg(b.prod(pz_x, inner), Z)
    return b.build(out)


def napkin_pipeline(
    x: Iterable[str],
    y: Iterable[str],
    z: Iterable[str],
    w: Iterable[str],
    k: Iterable[str],
    xval: Mapping[str, int] | None,
    zval: Mapping[str, int],
    variables: Iterable[str] | None = None,
) -> Pipeline:
    """Extended napkin estimand with Z fixed at ``zval``.

    sum_K f(K) * [sum_W p(x, Y | K, z, W) p(W, K)] / [sum_W p(x | K, z, W) p(W, K)]
    with f(K) = sum_{W, X, Y} p(X, Y | K, z, W) p(W, K).

    Passing ``xval=None`` builds the non-instantiated variant, which backward
    analysis reports as infeasible.
    """
    s = _sets(X=x, Y=y, Z=z, W=w, K=k)
    X, Y, Z, W, K = (s[n] for n in "XYZWK")
    V = frozenset(variables) if variables is not None else X | Y | Z | W | K
    if not X | Y | Z | W | K <= V:
        raise PipelineError("X, Y, Z, W and K must lie within the circuit variables")
    za = _check_total(zval, Z, "Z")
    if za is None:
        raise PipelineError("the napkin estimand needs an instantiation of Z")
    xa = _check_total(xval, X, "X")
    b = PipelineBuilder()
    c = b.input(INPUT, V)
    a = b.marg(c, V - (X | Y | Z | W | K))
    az = b.inst(a, za)  # p(X, Y, K, z, W)
    pkzw = b.marg(az, X | Y)
    inv = b.pow(pkzw, -1)
    pwk = b.marg(a, X | Y | Z)
    # f(K)
    cond_all = b.prod(az, inv)
    f = b.marg(b.prod(b.marg(cond_all, X | Y), pwk), W)
    # numerator and denominator
    axz = b.inst(az, xa) if xa is not None else az
    num = b.marg(b.prod(b.prod(axz, inv), pwk), W)
    den = b.marg(b.prod(b.prod(b.marg(axz, Y), inv), pwk), W)
    out = b.marg(b.prod(b.prod(f, num), b.pow(den, -1)), K)
    return b.build(out)


def mutual_information_pipeline(x: Iterable[str], y: Iterable[str], variables: Iterable[str] | None = None) -> Pipeline:
    """sum_{X,Y} p(X,Y) log(p(X,Y) / (p(X) p(Y)))."""
    s = _sets(X=x, Y=y)
    X, Y = s["X"], s["Y"]
    V = frozenset(variables) if variables is not None else X | Y
    b = PipelineBuilder()
    c = b.input(INPUT, V)
    pxy = b.marg(c, V - (X | Y))
    px = b.marg(pxy, Y)
    py = b.marg(pxy, X)
    ratio = b.prod(pxy, b.prod(b.pow(px, -1), b.pow(py, -1)))
    out = b.marg(b.prod(pxy, b.log(ratio)), X | Y)
    return b.build(out)


def mmap_pipeline(keep: Iterable[str], variables: Iterable[str]) -> Pipeline:
    """max over ``keep`` of the marginal on ``keep``."""
    keep = frozenset(keep)
    V = frozenset(variables)
    b = PipelineBuilder()
    c = b.input(INPUT, V)
    return b.build(b.max(b.marg(c, V - keep)))


def query_pipeline(spec: Mapping, variables: Iterable[str]) -> Pipeline:
    """Pipeline for a query description ``{"query": ..., "x": ..., ...}``."""
    kind = spec.get("query")
    V = frozenset(variables)
    xval = spec.get("x")
    x = spec.get("x_vars") or (sorted(xval) if xval else None)
    if kind in ("backdoor", "frontdoor", "napkin") and not x:
        raise PipelineError("query needs the treatment variables (x or x_vars)")
    y = spec.get("y") or []
    z = spec.get("z") or []
    if kind == "backdoor":
        return backdoor_pipeline(x, y, z, xval, V)
    if kind == "frontdoor":
        return frontdoor_pipeline(x, y, z, xval, V)
    if kind == "napkin":
        zval = spec.get("z_value")
        if zval is None:
            raise PipelineError("napkin query needs z_value")
        return napkin_pipeline(x, y, zval.keys() if not z else z, spec.get("w") or [], spec.get("k") or [], xval, zval, V)
    raise PipelineError(f"unknown query {kind!r}")
