"""Command-line interface: ``mdcircuits <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import calculus
from .bench import bench_backdoor, fixture_bn, format_table, summarize
from .calculus import backward_analyze, execute, forward_analyze
from .causal import INPUT, query_pipeline
from .circuit import Circuit, _enumerate_states, evaluate_batch, total_mass
from .formats import (
    bn_from_json,
    circuit_from_json,
    circuit_to_json,
    dataset_to_csv,
    dumps,
    load_dataset,
    load_mdvtree,
    load_pipeline,
    mdvtree_to_json,
    read_json,
)
from .mdnet import StructureConfig, build_random, fit_em, fit_mle
from .oracle import bn_sample
from .ops import marg
from .vtree import is_regular, lab_str, optimal_labelling, regularize

log = logging.getLogger("mdcircuits")


class CliError(Exception):
    pass


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _names(s: str) -> list[str]:
    out = [x.strip() for x in s.split(",") if x.strip()]
    if not out:
        raise CliError(f"empty variable list {s!r}")
    return out


# --- subcommands -------------------------------------------------------------


def cmd_sample(a) -> None:
    bn = bn_from_json(read_json(a.bn))
    if a.n < 0:
        raise CliError("-n must be non-negative")
    _emit(dataset_to_csv(bn_sample(bn, a.n, a.seed)), a.output)


def cmd_label(a) -> None:
    v = load_mdvtree(a.vtree).vtree
    reqs = [_names(r) for r in a.require]
    w = optimal_labelling(v, reqs)
    for m in v.postorder():
        log.info("node %d: %s", m, lab_str(w.psi[m]))
    _emit(dumps(mdvtree_to_json(w)), a.output)


def _input_mdvtrees(p, paths: list[str]) -> dict:
    names = [p.nodes[i].name for i in p.input_ids if p.nodes[i].source is None]
    out = {}
    plain = []
    for s in paths:
        if "=" in s:
            name, path = s.split("=", 1)
            out[name] = load_mdvtree(path)
        else:
            plain.append(s)
    rest = [n for n in names if n not in out]
    if len(plain) > len(rest):
        raise CliError(f"{len(plain)} md-vtrees given for {len(rest)} unassigned inputs")
    for name, path in zip(rest, plain):
        out[name] = load_mdvtree(path)
    missing = [n for n in names if n not in out]
    if missing:
        raise CliError(f"no md-vtree for inputs {missing}")
    return out


def cmd_analyze(a) -> None:
    p = load_pipeline(a.pipeline)
    lines = []
    record: dict = {}
    if a.backward:
        res = backward_analyze(p)
        record["backward"] = {
            "feasible": res.feasible,
            "requirements": {r.input_name: [sorted(q) for q in sorted(r.dets, key=len)] for r in res.requirements},
            "failure": str(res.failure) if res.failure else None,
        }
        lines.append("feasible" if res.feasible else f"infeasible: {res.failure}")
        lines.extend(f"requirement {r}" for r in res.requirements)
        lines.extend(f"note {n}" for n in res.notes)
    if a.inputs or not a.backward:
        fw = forward_analyze(p, _input_mdvtrees(p, a.inputs or []))
        record["forward"] = {"tractable": fw.tractable, "failures": [str(f) for f in fw.failures]}
        lines.append("tractable" if fw.tractable else "intractable")
        lines.extend(f"failure {f}" for f in fw.failures)
    if a.output:
        _emit(dumps(record), a.output)
    else:
        print("\n".join(lines))


def cmd_build(a) -> None:
    w = load_mdvtree(a.mdvtree)
    if not is_regular(w):
        log.info("md-vtree is not regular; regularizing")
        w = regularize(w)
    c = build_random(w, StructureConfig(a.groups, a.nodes_per_group, a.seed))
    _emit(dumps(circuit_to_json(c)), a.output)


def cmd_learn(a) -> None:
    c = circuit_from_json(read_json(a.model))
    data = load_dataset(a.data)
    if a.mle:
        c = fit_mle(c, data, a.alpha)
    else:
        c, trace = fit_em(c, data, iters=a.em_iters, alpha=a.alpha)
        log.info("EM ran %d iterations; objective %.6f", len(trace) - 1, trace[-1])
    _emit(dumps(circuit_to_json(c)), a.output)


def _most_frequent(data, names: list[str]) -> dict:
    rows = Counter(map(tuple, data.aligned(names).tolist()))
    best = max(rows.items(), key=lambda kv: (kv[1], tuple(-x for x in kv[0])))[0]
    return dict(zip(names, (int(x) for x in best)))


def _most_probable(c: Circuit, names: list[str]) -> dict:
    m = marg(c, [x for x in c.variables if x not in names])
    cards = [m.cards[x] for x in m.variables]
    if int(np.prod(cards)) > calculus.ZERO_COUNT_BOUND:
        raise CliError("too many assignments to choose a default z_value; pass one or --data")
    states = _enumerate_states(cards)
    best = states[int(np.argmax(evaluate_batch(m, states)))]
    return dict(zip(m.variables, (int(x) for x in best)))


def cmd_query(a) -> None:
    c = circuit_from_json(read_json(a.model))
    spec = dict(read_json(a.spec))
    if spec.get("query") == "napkin" and spec.get("z_value") is None:
        z = spec.get("z") or []
        if not z:
            raise CliError("napkin query needs z or z_value")
        spec["z_value"] = _most_frequent(load_dataset(a.data), z) if a.data else _most_probable(c, z)
        log.info("napkin z_value %s", spec["z_value"])
    p = query_pipeline(spec, c.variables)
    res = execute(p, {INPUT: c})
    out = res.result
    diag = {k: v for k, v in res.diagnostics.items() if k != "argmax"}
    record: dict = {"query": spec.get("query"), "diagnostics": diag}
    if isinstance(out, Circuit) and out.variables:
        record["result"] = circuit_to_json(out)
    else:
        record["value"] = out if not isinstance(out, Circuit) else total_mass(out)
    if spec.get("z_value") is not None:
        record["z_value"] = spec["z_value"]
    _emit(dumps(record), a.output)


def cmd_bench(a) -> None:
    bn = bn_from_json(read_json(a.bn)) if a.bn else fixture_bn()
    rows = bench_backdoor(
        bn,
        _names(a.x),
        _names(a.y),
        _names(a.z),
        n=a.n,
        runs=a.runs,
        seed=a.seed,
        groups=a.groups,
        nodes_per_group=a.nodes_per_group,
        em_iters=a.em_iters,
        jobs=a.jobs,
    )
    s = summarize(rows)
    head = f"backdoor |Z|={len(_names(a.z))} n={a.n} runs={a.runs} error=mean absolute error of p(Y|do(X))"
    text = head + "\n" + format_table(rows) + "\n"
    if a.output:
        record = {"summary": s, "runs": [r.__dict__ for r in rows]}
        _emit(dumps(record), a.output)
        if a.output != "-":
            sys.stdout.write(text)
    else:
        sys.stdout.write(text)


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mdcircuits", description="Circuits with marginal determinism.")
    ap.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    ap.add_argument("--max-enum-bits", type=int, default=None, help="log2 of the largest enumeration allowed")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample", help="sample a dataset from a Bayesian network")
    s.add_argument("--bn", required=True)
    s.add_argument("-n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("label", help="optimal md-vtree for requirement sets")
    s.add_argument("--vtree", required=True)
    s.add_argument("--require", action="append", default=[], help="comma-separated variables; repeatable")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_label)

    s = sub.add_parser("analyze", help="forward or backward analysis of a pipeline")
    s.add_argument("--pipeline", required=True)
    s.add_argument("--inputs", nargs="*", help="md-vtree files, in input order or as name=path")
    s.add_argument("--backward", action="store_true")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("build", help="random MDNet for an md-vtree")
    s.add_argument("--mdvtree", required=True)
    s.add_argument("--groups", type=int, default=4)
    s.add_argument("--nodes-per-group", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("learn", help="fit circuit parameters to data")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--em-iters", type=int, default=50)
    g.add_argument("--mle", action="store_true")
    s.add_argument("--alpha", type=float, default=0.01, help="pseudo-count")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_learn)

    s = sub.add_parser("query", help="run a causal query on a circuit")
    s.add_argument("--model", required=True)
    s.add_argument("--spec", required=True)
    s.add_argument("--data", help="training data; picks the napkin z_value when absent from the spec")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("bench", help="benchmarks")
    bsub = s.add_subparsers(dest="bench", required=True)
    b = bsub.add_parser("backdoor", help="learned MDNet against the counting estimator")
    b.add_argument("--bn", help="network JSON (default: shipped 10-variable fixture)")
    b.add_argument("--x", required=True)
    b.add_argument("--y", required=True)
    b.add_argument("--z", required=True)
    b.add_argument("-n", type=int, default=1000)
    b.add_argument("--runs", type=int, default=10)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--groups", type=int, default=4)
    b.add_argument("--nodes-per-group", type=int, default=4)
    b.add_argument("--em-iters", type=int, default=30)
    b.add_argument("--jobs", type=int, default=1, help="parallel runs")
    b.add_argument("-o", "--output")
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = getattr(logging, str(args.log_level).upper(), None)
    if not isinstance(level, int):
        print(f"error: unknown log level {args.log_level!r}", file=sys.stderr)
        return 2
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.max_enum_bits is not None:
        if not 0 <= args.max_enum_bits <= 40:
            print("error: --max-enum-bits must lie in 0..40", file=sys.stderr)
            return 2
        calculus.ZERO_COUNT_BOUND = 1 << args.max_enum_bits
    try:
        args.func(args)
    except (CliError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
