"""Binary-search assortment optimization over compare-step QUBOs."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import BudgetExceeded, DomainError, SizeError
from .model import EMPTY, Assortment, ModelParams, expected_revenue_k2, prefix_revenues
from .qubo import (
    PORTFOLIO,
    CompareBuilder,
    embed_cardinality,
    solve_exact,
    solve_heuristic,
)

COMPARE_MODES = ("exact", "heuristic_portfolio", "auto")
#: ``auto`` compare mode solves exactly up to this many free variables.
AUTO_EXACT_LIMIT = 24


@dataclass(frozen=True)
class SearchConfig:
    epsilon: float = 1e-4
    max_iters: int = 200
    compare_mode: str = "exact"
    noisy: bool = False
    noise_p: float = 0.1
    grid_size: int = 1024
    credible_mass: float = 0.95
    seed: int = 0
    deadline_ms: float = 250.0
    threads: int = 1
    portfolio: tuple = PORTFOLIO
    node_budget: int = 50_000_000
    prune: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DomainError("epsilon must be positive")
        if not (0.0 < self.noise_p < 0.5):
            raise DomainError("noise_p must lie in (0, 0.5)")
        if self.compare_mode not in COMPARE_MODES:
            raise DomainError(f"compare_mode must be one of {COMPARE_MODES}")
        if not (0.0 < self.credible_mass < 1.0):
            raise DomainError("credible_mass must lie in (0, 1)")
        if self.grid_size < 8:
            raise DomainError("grid_size must be at least 8")
        if self.max_iters < 0:
            raise DomainError("max_iters must be nonnegative")


@dataclass
class Iteration:
    L: float
    U: float
    kappa: float
    compare_true: bool
    incumbent: Assortment
    incumbent_revenue: float
    wall_ms: float
    n_vars: int = 0
    solver: str = ""

    def to_json(self) -> dict:
        return {
            "L": self.L,
            "U": self.U,
            "kappa": self.kappa,
            "compare": self.compare_true,
            "incumbent": list(self.incumbent.indices()),
            "revenue": self.incumbent_revenue,
            "wall_ms": self.wall_ms,
        }


@dataclass
class SearchTrace:
    iterations: list[Iteration] = field(default_factory=list)
    pruned_in: Assortment = EMPTY
    pruned_out: Assortment = EMPTY
    L: float = 0.0
    U: float = 0.0
    truncated: bool = False
    final_witness_compare: bool = False
    wall_ms: float = 0.0

    def write_jsonl(self, path) -> None:
        lines = [json.dumps(it.to_json()) for it in self.iterations]
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    def __len__(self):
        return len(self.iterations)


@dataclass(frozen=True)
class CompareResult:
    outcome: bool
    witness: Assortment
    witness_revenue: float
    n_vars: int
    solver: str


CompareFn = Callable[[float, Assortment, Assortment], CompareResult]


def make_compare(params: ModelParams, config: SearchConfig, cap: int | None = None) -> CompareFn:
    """Compare oracle: is there a set (respecting fixings and cap) with revenue >= kappa?"""
    builder = CompareBuilder(params)
    calls = [0]

    def compare(kappa: float, fixed_in: Assortment = EMPTY, fixed_out: Assortment = EMPTY) -> CompareResult:
        qubo = builder.build(kappa, fixed_in, fixed_out)
        if cap is not None:
            qubo = embed_cardinality(qubo, cap)
        mode = config.compare_mode
        if mode == "auto":
            mode = "exact" if qubo.n_vars <= AUTO_EXACT_LIMIT else "heuristic_portfolio"
        if mode == "exact":
            sol = solve_exact(qubo, config.node_budget)
        else:
            seed = int(np.random.SeedSequence([config.seed, calls[0]]).generate_state(1)[0])
            sol = solve_heuristic(qubo, config.portfolio, config.deadline_ms, seed, config.threads)
        calls[0] += 1
        witness = qubo.products(sol.assignment)
        feasible = cap is None or len(witness) <= cap
        if not feasible:
            witness = EMPTY
        rev = expected_revenue_k2(params, witness) if len(witness) else 0.0
        outcome = feasible and qubo.meets_threshold(sol.objective)
        if not outcome and rev >= kappa:
            # heuristic false negative refuted by its own incumbent
            outcome = True
        return CompareResult(outcome, witness, rev, qubo.n_vars, sol.solver_tag)

    return compare


def _top_two(params: ModelParams) -> tuple[float, float]:
    order = params.item_order
    r1 = float(params.revenue[order[0]])
    r2 = float(params.revenue[order[1]]) if params.n > 1 else 0.0
    return r1, r2


def _upper_bound(params: ModelParams) -> float:
    r1, r2 = _top_two(params)
    return r1 + r2 if params.n > 1 else r1


def best_prefix(params: ModelParams, cap: int | None = None) -> tuple[Assortment, float, np.ndarray]:
    """Best revenue-ordered prefix (optionally of size <= cap) and all prefix revenues."""
    revs = prefix_revenues(params)
    limit = len(revs) if cap is None else min(cap, len(revs))
    t = int(np.argmax(revs[:limit]))
    items = Assortment.of(params.item_order[: t + 1].tolist())
    return items, expected_revenue_k2(params, items), revs


def _prune_sets(params: ModelParams, lo: float, hi: float) -> tuple[Assortment, Assortment]:
    r = params.revenue
    r1 = float(r.max())
    forced_in = Assortment.of(np.flatnonzero(r > hi).tolist())
    forced_out = Assortment.of(np.flatnonzero(r + r1 < lo).tolist())
    return forced_in, forced_out - forced_in


class _Incumbent:
    def __init__(self, params: ModelParams, items: Assortment, revenue: float):
        self.params = params
        self.items = items
        self.revenue = revenue

    def offer(self, items: Assortment, revenue: float):
        if revenue > self.revenue or (revenue == self.revenue and items.sort_key() < self.items.sort_key()):
            self.items, self.revenue = items, revenue


def _check(params: ModelParams):
    if params.n < 1:
        raise DomainError("need at least one product")


def _bisect(
    params: ModelParams,
    config: SearchConfig,
    compare: CompareFn,
    lo: float,
    hi: float,
    inc: _Incumbent,
    prune: bool,
) -> tuple[Assortment, SearchTrace]:
    t_start = time.perf_counter()
    trace = SearchTrace(L=lo, U=hi)
    pin, pout = EMPTY, EMPTY
    while hi - lo > config.epsilon and len(trace.iterations) < config.max_iters:
        t0 = time.perf_counter()
        if prune:
            a, b = _prune_sets(params, lo, hi)
            pin, pout = pin | a, (pout | b) - (pin | a)
        kappa = 0.5 * (lo + hi)
        try:
            res = compare(kappa, pin, pout)
        except (BudgetExceeded, SizeError):
            trace.truncated = True
            break
        before = (lo, hi)
        if res.outcome:
            lo = kappa
            inc.offer(res.witness, res.witness_revenue)
        else:
            hi = kappa
        trace.iterations.append(
            Iteration(*before, kappa, res.outcome, inc.items, inc.revenue,
                      (time.perf_counter() - t0) * 1e3, res.n_vars, res.solver)
        )
    if prune:
        a, b = _prune_sets(params, lo, hi)
        pin, pout = pin | a, (pout | b) - (pin | a)
        _repair(params, inc, pin, pout, lo, compare, trace)
    trace.pruned_in, trace.pruned_out = pin, pout
    trace.L, trace.U = lo, hi
    trace.wall_ms = (time.perf_counter() - t_start) * 1e3
    return inc.items, trace


def _repair(params, inc: _Incumbent, pin, pout, lo, compare, trace):
    """Make the incumbent contain every forced-in product and no forced-out one.

    Adding a product priced above the upper bound, or dropping one whose best
    bundle earns less than the lower bound, never lowers revenue once the
    incumbent earns at least the lower bound.
    """
    tol = 1e-12 * (1.0 + abs(lo))
    if inc.revenue < lo - tol and not trace.truncated:
        res = compare(lo, pin, pout)
        trace.final_witness_compare = True
        if res.outcome:
            inc.offer(res.witness, res.witness_revenue)
    items = (inc.items | pin) - pout
    if items != inc.items:
        rev = expected_revenue_k2(params, items)
        if rev >= inc.revenue - tol:
            inc.items, inc.revenue = items, rev


def binary_search_ao(params: ModelParams, config: SearchConfig | None = None, cap: int | None = None,
                     compare: CompareFn | None = None):
    """Plain bisection on the optimal revenue, starting from [0, r1 + r2]."""
    config = config or SearchConfig()
    _check(params)
    if cap is not None and cap < params.n:
        return constrained_binary_search_ao(params, config, cap, compare)
    if config.noisy:
        return noisy_binary_search_ao(params, config, compare)
    compare = compare or make_compare(params, config)
    top = int(params.item_order[0])
    first = Assortment.of([top])
    inc = _Incumbent(params, first, expected_revenue_k2(params, first))
    return _bisect(params, config, compare, 0.0, _upper_bound(params), inc, prune=False)


def binary_search_ao_efficient(params: ModelParams, config: SearchConfig | None = None,
                               compare: CompareFn | None = None):
    """Bisection warm-started from the revenue-ordered scan with price-based pruning.

    Products priced above the current upper bound are fixed into the compare
    step and products whose best possible bundle falls below the lower bound
    are fixed out.
    """
    config = config or SearchConfig()
    _check(params)
    compare = compare or make_compare(params, config)
    items, rev, revs = best_prefix(params)
    # first non-increasing step of the scan also bounds the optimum from below
    order = params.item_order
    stop = next((t for t in range(1, len(revs)) if revs[t] < revs[t - 1]), None)
    lo = rev
    if stop is not None:
        lo = max(lo, float(params.revenue[order[stop]]))
    inc = _Incumbent(params, items, rev)
    hi = _upper_bound(params)
    lo = min(lo, hi)
    return _bisect(params, config, compare, lo, hi, inc, prune=True)


def constrained_binary_search_ao(params: ModelParams, config: SearchConfig | None, cap: int,
                                 compare: CompareFn | None = None):
    """Bisection under ``|C| <= cap`` using the slack-variable penalty embedding."""
    config = config or SearchConfig()
    _check(params)
    if cap < 1:
        raise DomainError("cap must be at least 1")
    if cap >= params.n:
        return binary_search_ao(params, config, None, compare)
    compare = compare or make_compare(params, config, cap=cap)
    items, rev, _ = best_prefix(params, cap)
    inc = _Incumbent(params, items, rev)
    hi = _upper_bound(params)
    if config.noisy:
        return _noisy(params, config, compare, rev, hi, inc, prune=False)
    return _bisect(params, config, compare, min(rev, hi), hi, inc, prune=False)


# ---------------------------------------------------------------------------
# Noisy variant
# ---------------------------------------------------------------------------


class GridPosterior:
    """Piecewise-constant density over ``[lo, hi]`` on ``size`` equal cells."""

    def __init__(self, lo: float, hi: float, size: int):
        self.size = size
        self.lo, self.hi = float(lo), float(hi)
        self.mass = np.full(size, 1.0 / size)
        self.floor = self.lo

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.size

    def edges(self) -> np.ndarray:
        return self.lo + self.width * np.arange(self.size + 1)

    def quantile(self, q: float) -> float:
        cdf = np.cumsum(self.mass)
        c = int(np.searchsorted(cdf, q, side="left"))
        c = min(c, self.size - 1)
        below = cdf[c - 1] if c > 0 else 0.0
        frac = (q - below) / self.mass[c] if self.mass[c] > 0 else 0.0
        return self.lo + self.width * (c + min(max(frac, 0.0), 1.0))

    def credible(self, mass: float) -> tuple[float, float]:
        """Shortest run of cells holding at least ``mass``, clipped at the proven floor."""
        cdf = np.concatenate([[0.0], np.cumsum(self.mass)])
        target = min(mass, cdf[-1]) * (1.0 - 1e-12)
        ends = np.searchsorted(cdf, cdf[:-1] + target, side="left")
        ok = ends <= self.size
        starts = np.flatnonzero(ok)
        widths = ends[ok] - starts
        k = int(np.argmin(widths))
        s, e = int(starts[k]), int(ends[ok][k])
        lo = max(self.lo + self.width * s, self.floor)
        hi = max(self.lo + self.width * e, lo)
        return lo, hi

    def median_edge(self) -> float:
        """Interior cell edge closest to the posterior median."""
        m = self.quantile(0.5)
        k = int(round((m - self.lo) / self.width))
        k = min(max(k, 1), self.size - 1)
        return self.lo + self.width * k

    def _normalize(self):
        total = self.mass.sum()
        if total <= 0 or not np.isfinite(total):
            raise DomainError("posterior collapsed")
        self.mass /= total

    def update(self, kappa: float, outcome: bool, p: float):
        """Multiply by (1 - p) on the side consistent with ``outcome`` and by p elsewhere."""
        e = self.edges()
        centers = 0.5 * (e[:-1] + e[1:])
        above = centers >= kappa
        consistent = above if outcome else ~above
        self.mass *= np.where(consistent, 1.0 - p, p)
        self._normalize()

    def truncate_below(self, bound: float):
        """Remove mass below a proven lower bound on the optimum."""
        if bound <= self.floor:
            return
        self.floor = min(bound, self.hi)
        if bound <= self.lo:
            return
        e = self.edges()
        if bound >= self.hi:
            self.mass[:] = 0.0
            self.mass[-1] = 1.0
            return
        frac = np.clip((e[1:] - bound) / self.width, 0.0, 1.0)
        if (self.mass * frac).sum() <= 0:
            return
        self.mass *= frac
        self._normalize()

    def maybe_zoom(self, keep: float = 1.0 - 1e-6):
        """Re-grid onto the high-mass interval once it covers under a quarter of the cells."""
        lo, hi = self.credible(keep)
        span = (hi - lo) / self.width
        if span >= self.size / 4 or hi <= lo:
            return False
        pad = self.width
        lo, hi = max(self.lo, lo - pad), min(self.hi, hi + pad)
        old_edges = self.edges()
        cdf = np.concatenate([[0.0], np.cumsum(self.mass)])
        new_edges = np.linspace(lo, hi, self.size + 1)
        new_cdf = np.interp(new_edges, old_edges, cdf)
        self.mass = np.maximum(np.diff(new_cdf), 0.0)
        self.lo, self.hi = lo, hi
        self._normalize()
        return True


def _noisy(params, config, compare, lo, hi, inc: _Incumbent, prune: bool):
    t_start = time.perf_counter()
    trace = SearchTrace(L=lo, U=hi)
    if hi - lo <= config.epsilon:
        trace.wall_ms = (time.perf_counter() - t_start) * 1e3
        return inc.items, trace
    post = GridPosterior(lo, hi, config.grid_size)
    post.truncate_below(inc.revenue)
    c_lo, c_hi = post.credible(config.credible_mass)
    pin, pout = EMPTY, EMPTY
    while c_hi - c_lo >= config.epsilon and len(trace.iterations) < config.max_iters:
        t0 = time.perf_counter()
        if prune:
            a, b = _prune_sets(params, c_lo, c_hi)
            pin, pout = a, b
        kappa = post.median_edge()
        res = compare(kappa, pin, pout)
        if res.witness_revenue > 0:
            inc.offer(res.witness, res.witness_revenue)
        post.update(kappa, res.outcome, config.noise_p)
        post.truncate_below(inc.revenue)
        post.maybe_zoom()
        before = (c_lo, c_hi)
        c_lo, c_hi = post.credible(config.credible_mass)
        trace.iterations.append(
            Iteration(*before, kappa, res.outcome, inc.items, inc.revenue,
                      (time.perf_counter() - t0) * 1e3, res.n_vars, res.solver)
        )
    trace.pruned_in, trace.pruned_out = pin, pout
    trace.L, trace.U = c_lo, c_hi
    trace.wall_ms = (time.perf_counter() - t_start) * 1e3
    return inc.items, trace


def noisy_binary_search_ao(params: ModelParams, config: SearchConfig | None = None,
                           compare: CompareFn | None = None):
    """Bisection on a grid posterior that tolerates wrong compare answers.

    Each compare outcome is trusted with probability ``1 - noise_p``. Mass
    below the best revenue actually achieved is discarded since that revenue
    is a proven lower bound. With ``config.prune`` the price-based fixings
    use the current credible interval as (L, U).
    """
    config = config or SearchConfig(compare_mode="heuristic_portfolio", noisy=True)
    _check(params)
    compare = compare or make_compare(params, config)
    items, rev, _ = best_prefix(params)
    inc = _Incumbent(params, items, rev)
    hi = _upper_bound(params)
    return _noisy(params, config, compare, min(rev, hi), hi, inc, prune=config.prune)


def iteration_bound(params: ModelParams, epsilon: float) -> int:
    return math.ceil(math.log2(_upper_bound(params) / epsilon))
