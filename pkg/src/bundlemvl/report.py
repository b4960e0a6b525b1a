"""Benchmark harness: per-run records, optimality gaps, and summaries."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .benchmarks import BRUTE_FORCE_LIMIT, adxopt_l, brute_force_opt, mnl_opt, revenue_ordered
from .data import SyntheticSpec, generate, subsample_instance
from .errors import BundleError, DomainError
from .model import EMPTY, Assortment, ModelParams, expected_revenue_k2
from .search import (
    SearchConfig,
    binary_search_ao,
    binary_search_ao_efficient,
    constrained_binary_search_ao,
    noisy_binary_search_ao,
)

ALGORITHMS = ("brute", "revord", "bsao", "bsao-eff", "noisy-bsao", "adxopt1", "adxopt2", "mnl")


@dataclass
class BenchmarkRecord:
    algorithm: str
    n: int
    seed: int
    revenue: float
    gap_pct: float
    wall_ms: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        finite = lambda v: None if math.isnan(v) else v
        return {
            "algorithm": self.algorithm,
            "n": self.n,
            "seed": self.seed,
            "revenue": finite(self.revenue),
            "gap_pct": finite(self.gap_pct),
            "wall_ms": self.wall_ms,
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class RunOptions:
    epsilon: float = 1e-4
    cap: int | None = None
    deadline_ms: float = 250.0
    compare_mode: str = "auto"
    inner_threads: int = 1


def _search_config(opts: RunOptions, seed: int, noisy=False) -> SearchConfig:
    mode = opts.compare_mode
    if noisy and mode == "auto":
        mode = "heuristic_portfolio"
    return SearchConfig(
        epsilon=opts.epsilon, compare_mode=mode, noisy=noisy, seed=seed,
        deadline_ms=opts.deadline_ms, threads=opts.inner_threads,
    )


def run_algorithm(tag: str, params: ModelParams, opts: RunOptions, seed: int = 0, keep_trace: bool = False):
    """Run one algorithm; returns (assortment, R_2 revenue, wall_ms, extra).

    Search algorithms put their trace under ``extra["trace"]`` when ``keep_trace``.
    """
    cap = opts.cap
    extra: dict = {}
    t0 = time.perf_counter()
    if tag == "brute":
        items, _ = brute_force_opt(params, cap=cap)
    elif tag == "revord":
        items, _ = revenue_ordered(params, cap)
    elif tag == "mnl":
        if cap is not None:
            raise DomainError("mnl benchmark is unconstrained")
        items, _ = mnl_opt(params)
    elif tag in ("adxopt1", "adxopt2"):
        items, _ = adxopt_l(params, l=int(tag[-1]), cap=cap)
    elif tag in ("bsao", "bsao-eff", "noisy-bsao"):
        cfg = _search_config(opts, seed, noisy=tag == "noisy-bsao")
        if tag == "bsao-eff":
            if cap is not None and cap < params.n:
                raise DomainError("bsao-eff prunes with unconstrained structure; it cannot take a capacity")
            items, trace = binary_search_ao_efficient(params, cfg)
        elif tag == "noisy-bsao":
            if cap is not None and cap < params.n:
                items, trace = constrained_binary_search_ao(params, cfg, cap)
            else:
                items, trace = noisy_binary_search_ao(params, cfg)
        else:
            items, trace = binary_search_ao(params, cfg, cap)
        extra["iterations"] = len(trace)
        extra["qubo_vars"] = max((it.n_vars for it in trace.iterations), default=0)
        if trace.truncated:
            extra["truncated"] = True
        if keep_trace:
            extra["trace"] = trace
    else:
        raise DomainError(f"unknown algorithm {tag!r}; choose from {', '.join(ALGORITHMS)}")
    wall = (time.perf_counter() - t0) * 1e3
    rev = expected_revenue_k2(params, items) if len(items) else 0.0
    if cap is not None:
        extra["cap"] = cap
    return items, rev, wall, extra


def instance_seed(seed: int, n: int, run: int) -> int:
    return int(np.random.SeedSequence([seed, n, run]).generate_state(1, dtype=np.uint32)[0])


def make_instance(n: int, seed: int, generator: str = "two_group", model: ModelParams | None = None,
                  no_purchase_prob: float = 0.30) -> ModelParams:
    if model is not None:
        return subsample_instance(model, n, seed, no_purchase_prob)
    return generate(SyntheticSpec(n, seed, generator, no_purchase_prob))


def gap_pct(ref: float, rev: float) -> float:
    if not (ref > 0) or not math.isfinite(ref):
        return float("nan")
    return 100.0 * (ref - rev) / ref


def _pool_map(fn: Callable, tasks: Sequence, threads: int):
    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def run_benchmark(
    n_list: Sequence[int],
    runs: int,
    algorithms: Sequence[str],
    generator: str = "two_group",
    model: ModelParams | None = None,
    opts: RunOptions = RunOptions(),
    seed: int = 0,
    threads: int = 1,
) -> list[BenchmarkRecord]:
    """Every algorithm on every (n, run) instance; gaps against brute force or best found."""
    bad = [a for a in algorithms if a not in ALGORITHMS]
    if bad:
        raise DomainError(f"unknown algorithm(s) {bad}; choose from {', '.join(ALGORITHMS)}")
    tasks = [(n, run) for n in n_list for run in range(runs)]

    def one(task):
        n, run = task
        s = instance_seed(seed, n, run)
        params = make_instance(n, s, generator, model)
        results = {}
        for tag in algorithms:
            try:
                results[tag] = run_algorithm(tag, params, opts, s)
            except BundleError as exc:
                results[tag] = (EMPTY, float("nan"), 0.0, {"error": type(exc).__name__, "message": str(exc)})
        if n <= BRUTE_FORCE_LIMIT:
            if "brute" in results and "error" not in results["brute"][3]:
                ref = results["brute"][1]
            else:
                ref = brute_force_opt(params, cap=opts.cap)[1]
            ref_tag = "brute_force"
        else:
            found = [r[1] for r in results.values() if math.isfinite(r[1])]
            ref = max(found) if found else float("nan")
            ref_tag = "best_found"
        out = []
        for tag, (items, rev, wall, extra) in results.items():
            extra = dict(extra, gap_ref=ref_tag, run=run, assortment=list(items.indices()))
            out.append(BenchmarkRecord(tag, n, s, rev, gap_pct(ref, rev), wall, extra))
        return out

    records = [r for chunk in _pool_map(one, tasks, threads) for r in chunk]
    records.sort(key=lambda r: (r.n, r.seed, r.algorithm))
    return records


def run_mnl_gap(
    n_list: Sequence[int],
    runs: int,
    generator: str = "two_group",
    model: ModelParams | None = None,
    opts: RunOptions = RunOptions(),
    seed: int = 0,
    threads: int = 1,
) -> list[BenchmarkRecord]:
    """Revenue lost by optimizing the single-purchase model when pairs are real."""
    tasks = [(n, run) for n in n_list for run in range(runs)]

    def one(task):
        n, run = task
        s = instance_seed(seed, n, run)
        params = make_instance(n, s, generator, model)
        t0 = time.perf_counter()
        items, _ = mnl_opt(params)
        wall = (time.perf_counter() - t0) * 1e3
        rev = expected_revenue_k2(params, items) if len(items) else 0.0
        if n <= BRUTE_FORCE_LIMIT:
            _, ref = brute_force_opt(params)
            ref_tag = "brute_force"
        else:
            best, _ = binary_search_ao_efficient(params, _search_config(opts, s))
            ref = expected_revenue_k2(params, best)
            ref_tag = "bsao-eff"
        extra = {"gap_ref": ref_tag, "run": run, "ref_revenue": ref, "assortment": list(items.indices())}
        return BenchmarkRecord("mnl", n, s, rev, gap_pct(ref, rev), wall, extra)

    records = _pool_map(one, tasks, threads)
    records.sort(key=lambda r: (r.n, r.seed, r.algorithm))
    return records


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

SUMMARY_FIELDS = ("algorithm", "n", "runs", "gap_median", "gap_p25", "gap_p75",
                  "wall_ms_median", "wall_ms_p25", "wall_ms_p75")


def summarize(records: Sequence[BenchmarkRecord]) -> list[dict]:
    groups: dict[tuple[str, int], list[BenchmarkRecord]] = {}
    for r in records:
        groups.setdefault((r.algorithm, r.n), []).append(r)
    rows = []
    for (alg, n), recs in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        gaps = np.array([r.gap_pct for r in recs if not math.isnan(r.gap_pct)])
        walls = np.array([r.wall_ms for r in recs])
        q = lambda a, p: float(np.percentile(a, p)) if a.size else float("nan")
        rows.append({
            "algorithm": alg, "n": n, "runs": len(recs),
            "gap_median": q(gaps, 50), "gap_p25": q(gaps, 25), "gap_p75": q(gaps, 75),
            "wall_ms_median": q(walls, 50), "wall_ms_p25": q(walls, 25), "wall_ms_p75": q(walls, 75),
        })
    return rows


def summary_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def summary_table(rows: Sequence[dict]) -> str:
    head = f"{'algorithm':<12}{'n':>6}{'runs':>6}{'gap med':>10}{'gap p25':>10}{'gap p75':>10}{'ms med':>10}{'ms p25':>10}{'ms p75':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['algorithm']:<12}{r['n']:>6}{r['runs']:>6}"
            f"{r['gap_median']:>10.4f}{r['gap_p25']:>10.4f}{r['gap_p75']:>10.4f}"
            f"{r['wall_ms_median']:>10.2f}{r['wall_ms_p25']:>10.2f}{r['wall_ms_p75']:>10.2f}"
        )
    return "\n".join(lines)


def records_jsonl(records: Sequence[BenchmarkRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in records)
