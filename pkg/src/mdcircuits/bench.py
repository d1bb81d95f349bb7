"""Backdoor estimation benchmark: learned MDNet against the counting estimator.

The error of an estimate is the mean absolute difference between the
estimated interventional table p(Y | do(X)) and the table computed from the
true network, taken over all (X, Y) cells and averaged over runs.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from .calculus import backward_analyze, execute, requirement_labelling
from .causal import INPUT, backdoor_pipeline
from .mdnet import StructureConfig, build_random, fit_em
from .oracle import BayesNet, Dataset, JointTable, backdoor_table, bn_sample, table_from_circuit
from .vtree import split_vtree

log = logging.getLogger(__name__)

FIXTURE = "bn10.json"


def fixture_bn() -> BayesNet:
    """The shipped 10-variable network (Z1..Z6, X, Y and two extra variables)."""
    from .formats import bn_from_json
    import json

    text = resources.files("mdcircuits").joinpath("data", FIXTURE).read_text()
    return bn_from_json(json.loads(text))


def counting_estimate(data: Dataset, x: Sequence[str], y: Sequence[str], z: Sequence[str], cards) -> JointTable:
    """sum_z N(z)/N * N(y, x, z) / N(x, z), with a zero ratio when N(x, z) = 0."""
    names = list(x) + list(y) + list(z)
    shape = [cards[v] for v in names]
    cols = data.aligned(names)
    flat = np.ravel_multi_index(cols.T, shape)
    n_xyz = np.bincount(flat, minlength=int(np.prod(shape))).reshape(shape).astype(float)
    ax_y = tuple(range(len(x), len(x) + len(y)))
    n_xz = n_xyz.sum(axis=ax_y, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(n_xz > 0, n_xyz / n_xz, 0.0)
    p_z = n_xz.sum(axis=tuple(range(len(x))), keepdims=True) / max(len(data), 1)
    ax_z = tuple(range(len(x) + len(y), len(names)))
    est = (ratio * p_z).sum(axis=ax_z)
    return JointTable(list(x) + list(y), shape[: len(x) + len(y)], est)


def mae(est: JointTable, truth: JointTable) -> float:
    return float(np.mean(np.abs(est.aligned(truth.variables).values - truth.values)))


@dataclass(frozen=True)
class RunResult:
    run: int
    md_error: float
    count_error: float
    md_seconds: float
    count_seconds: float
    em_iters: int
    zero_divisions: int


@dataclass(frozen=True)
class BenchTask:
    bn: BayesNet
    x: tuple
    y: tuple
    z: tuple
    n: int
    seed: int
    run: int
    groups: int
    nodes_per_group: int
    em_iters: int


def _run(task: BenchTask) -> RunResult:
    bn = task.bn
    seed = task.seed + task.run
    cards = bn.cards
    visible = bn.visible
    vcards = {v: cards[v] for v in visible}
    data = bn_sample(bn, task.n, seed)
    truth = backdoor_table(bn.joint(), task.x, task.y, task.z)

    t0 = time.perf_counter()
    p = backdoor_pipeline(task.x, task.y, task.z, None, visible)
    reqs = backward_analyze(p).sets(INPUT)
    rng = np.random.default_rng(seed)
    v = split_vtree(vcards, sorted(set(task.x) | set(task.z)), rng)
    w = requirement_labelling(v, reqs)
    model = build_random(w, StructureConfig(task.groups, task.nodes_per_group, seed))
    model, trace = fit_em(model, data, iters=task.em_iters)
    res = execute(p, {INPUT: model})
    md = table_from_circuit(res.result)
    md_seconds = time.perf_counter() - t0

    t1 = time.perf_counter()
    cnt = counting_estimate(data, task.x, task.y, task.z, cards)
    count_seconds = time.perf_counter() - t1
    return RunResult(
        task.run,
        mae(md, truth),
        mae(cnt, truth),
        md_seconds,
        count_seconds,
        len(trace) - 1,
        res.diagnostics["zero_divisions"],
    )


def bench_backdoor(
    bn: BayesNet,
    x: Sequence[str],
    y: Sequence[str],
    z: Sequence[str],
    n: int = 1000,
    runs: int = 10,
    seed: int = 0,
    groups: int = 4,
    nodes_per_group: int = 4,
    em_iters: int = 30,
    jobs: int = 1,
) -> list[RunResult]:
    """Run ``runs`` independent repetitions; run ``r`` uses seed ``seed + r``."""
    hidden = set(bn.visible) ^ set(bn.cards)
    bad = (set(x) | set(y) | set(z)) & hidden
    if bad:
        raise ValueError(f"bench variables {sorted(bad)} are hidden")
    tasks = [BenchTask(bn, tuple(x), tuple(y), tuple(z), n, seed, r, groups, nodes_per_group, em_iters) for r in range(runs)]
    if jobs > 1 and runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(_run, tasks))
    else:
        out = [_run(t) for t in tasks]
    return sorted(out, key=lambda r: r.run)


def summarize(rows: Sequence[RunResult]) -> dict:
    return {
        "md_error": float(np.mean([r.md_error for r in rows])),
        "count_error": float(np.mean([r.count_error for r in rows])),
        "md_seconds": float(np.mean([r.md_seconds for r in rows])),
        "count_seconds": float(np.mean([r.count_seconds for r in rows])),
    }


def format_table(rows: Sequence[RunResult]) -> str:
    lines = [f"{'run':>4} {'MD error':>10} {'count error':>12} {'MD time':>9} {'count time':>11} {'EM it':>6}"]
    for r in rows:
        lines.append(
            f"{r.run:>4} {r.md_error:>10.5f} {r.count_error:>12.5f} {r.md_seconds:>8.2f}s {r.count_seconds:>10.4f}s {r.em_iters:>6}"
        )
    s = summarize(rows)
    lines.append(f"{'mean':>4} {s['md_error']:>10.5f} {s['count_error']:>12.5f} {s['md_seconds']:>8.2f}s {s['count_seconds']:>10.4f}s")
    return "\n".join(lines)
