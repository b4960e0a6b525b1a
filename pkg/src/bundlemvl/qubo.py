"""Compare-step QUBOs, penalty embeddings, and exact / heuristic solvers.

A QUBO here maximizes ``x'Qx + offset`` over binary ``x`` with ``Q``
symmetric; the diagonal holds linear terms (``x_i^2 = x_i``).
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels as K
from .errors import BudgetExceeded, DomainError, ParseError, SizeError
from .model import EMPTY, Assortment, ModelParams

#: Exact solve switches from enumeration to branch and bound above this size.
ENUMERATION_LIMIT = 22
#: Largest instance accepted by the exact solver.
EXACT_LIMIT = 60
DEFAULT_NODE_BUDGET = 50_000_000

PORTFOLIO = ("descent_restart", "tabu", "anneal")


@dataclass(frozen=True, eq=False)
class QuboInstance:
    q: np.ndarray
    offset: float = 0.0
    threshold: float = 0.0
    var_map: tuple = ()
    kappa: float | None = None
    fixed_in: Assortment = EMPTY
    fixed_out: Assortment = EMPTY

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise DomainError("Q must be square")
        if q.size and np.max(np.abs(q - q.T)) > 1e-12 * max(1.0, np.max(np.abs(q))):
            raise DomainError("Q must be symmetric")
        q = (q + q.T) / 2.0
        q.flags.writeable = False
        var_map = tuple(self.var_map) if self.var_map else tuple(range(q.shape[0]))
        if len(var_map) != q.shape[0]:
            raise DomainError("var_map must name every variable exactly once")
        if len(set(var_map)) != len(var_map):
            raise DomainError("var_map entries must be unique")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "offset", float(self.offset))
        object.__setattr__(self, "threshold", float(self.threshold))
        object.__setattr__(self, "var_map", var_map)

    @property
    def n_vars(self) -> int:
        return self.q.shape[0]

    def product_vars(self) -> list[int]:
        return [k for k, v in enumerate(self.var_map) if not isinstance(v, str)]

    def evaluate(self, x) -> float:
        x = np.asarray(x, dtype=np.uint8)
        return float(K.qubo_value(self.q, x)) + self.offset

    def tolerance(self) -> float:
        return 1e-11 * (1.0 + float(np.abs(self.q).sum()) + abs(self.offset))

    def meets_threshold(self, objective: float) -> bool:
        return objective >= self.threshold - 1e-12 * (1.0 + abs(self.threshold))

    def products(self, assignment: int) -> Assortment:
        """Product set selected by an assignment, including folded fixed products."""
        bits = self.fixed_in.bits
        for k, v in enumerate(self.var_map):
            if not isinstance(v, str) and (assignment >> k) & 1:
                bits |= 1 << v
        return Assortment(bits)


@dataclass(frozen=True)
class QuboSolution:
    assignment: int
    objective: float
    solver_tag: str
    wall_ms: float = field(default=0.0, compare=False)
    stats: dict = field(default_factory=dict, compare=False)

    def x(self, n_vars: int) -> np.ndarray:
        return np.array([(self.assignment >> k) & 1 for k in range(n_vars)], dtype=np.uint8)


def _bits(x) -> int:
    out = 0
    for k in np.flatnonzero(x):
        out |= 1 << int(k)
    return out


def _assignment_key(bits: int):
    return (bits.bit_count(), Assortment(bits).indices())


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


class CompareBuilder:
    """Caches theta and theta * rhat for repeated compare-step builds."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.theta = params.theta()
        self.theta_r = self.theta * params.rhat()

    def build(self, kappa: float, fixed_in: Assortment = EMPTY, fixed_out: Assortment = EMPTY) -> QuboInstance:
        if kappa < 0:
            raise DomainError("kappa must be nonnegative")
        if not fixed_in.isdisjoint(fixed_out):
            raise DomainError("fixed_in and fixed_out overlap")
        n = self.params.n
        if max(fixed_in.max_index(), fixed_out.max_index()) >= n:
            raise DomainError("fixed sets exceed the product range")
        fixed = fixed_in | fixed_out
        free = np.array([i for i in range(n) if i not in fixed], dtype=np.int64)
        ins = np.fromiter(fixed_in, dtype=np.int64, count=len(fixed_in))
        coef_free = self.theta_r[np.ix_(free, free)] - kappa * self.theta[np.ix_(free, free)]
        q = coef_free
        offset = 0.0
        if ins.size:
            cross = self.theta_r[np.ix_(free, ins)] - kappa * self.theta[np.ix_(free, ins)]
            q[np.diag_indices_from(q)] += 2.0 * cross.sum(axis=1)
            offset = float(
                (self.theta_r[np.ix_(ins, ins)] - kappa * self.theta[np.ix_(ins, ins)]).sum()
            )
        return QuboInstance(
            q,
            offset=offset,
            threshold=kappa * self.params.v0,
            var_map=tuple(int(i) for i in free),
            kappa=float(kappa),
            fixed_in=fixed_in,
            fixed_out=fixed_out,
        )


def build_compare_qubo(
    params: ModelParams, kappa: float, fixed_in: Assortment = EMPTY, fixed_out: Assortment = EMPTY
) -> QuboInstance:
    """QUBO whose optimum reaches ``kappa * v0`` iff some set earns revenue >= kappa.

    Products in ``fixed_in`` are folded into the linear terms and the offset,
    so the objective of a free assignment equals the full objective of the
    assignment extended by ``fixed_in``.
    """
    return CompareBuilder(params).build(kappa, fixed_in, fixed_out)


def auto_lambda(qubo: QuboInstance) -> float:
    return -(1.0 + float(np.abs(qubo.q).sum()))


def embed_linear_equality(qubo: QuboInstance, d, e, lam="auto") -> QuboInstance:
    """Add ``lam * ||D y - e||^2`` for constraints over the instance's variables."""
    d = np.atleast_2d(np.asarray(d, dtype=float))
    e = np.atleast_1d(np.asarray(e, dtype=float))
    if d.shape != (e.shape[0], qubo.n_vars):
        raise DomainError(f"D must have shape ({e.shape[0]}, {qubo.n_vars})")
    lam = auto_lambda(qubo) if lam == "auto" else float(lam)
    if lam >= 0:
        raise DomainError("penalty multiplier must be negative for maximization")
    q = np.array(qubo.q)
    # (Dy - e)'(Dy - e) = y'D'Dy - 2 e'D y + e'e ; y_i^2 = y_i folds linear terms to the diagonal
    q += lam * (d.T @ d)
    q[np.diag_indices_from(q)] += lam * (-2.0 * (e @ d))
    offset = qubo.offset + lam * float(e @ e)
    return QuboInstance(q, offset, qubo.threshold, qubo.var_map, qubo.kappa, qubo.fixed_in, qubo.fixed_out)


def embed_cardinality(qubo: QuboInstance, cap: int, lam="auto") -> QuboInstance:
    """Enforce ``|selected products| <= cap`` via ``cap`` slack variables."""
    if cap < 0:
        raise DomainError("cap must be nonnegative")
    prods = qubo.product_vars()
    cap_free = cap - len(qubo.fixed_in)
    if cap_free < 0:
        raise DomainError("fixed-in products already exceed the cap")
    if cap_free >= len(prods):
        return qubo
    lam = auto_lambda(qubo) if lam == "auto" else float(lam)
    n_old = qubo.n_vars
    n_new = n_old + cap_free
    q = np.zeros((n_new, n_new))
    q[:n_old, :n_old] = qubo.q
    base_slack = sum(1 for v in qubo.var_map if isinstance(v, str))
    var_map = qubo.var_map + tuple(f"slack:{base_slack + s}" for s in range(cap_free))
    grown = QuboInstance(q, qubo.offset, qubo.threshold, var_map, qubo.kappa, qubo.fixed_in, qubo.fixed_out)
    row = np.zeros((1, n_new))
    row[0, prods] = 1.0
    row[0, n_old:] = 1.0
    return embed_linear_equality(grown, row, [cap_free], lam)


# ---------------------------------------------------------------------------
# Dump format
# ---------------------------------------------------------------------------


def dump_qubo(qubo: QuboInstance, path) -> None:
    lines = [f"# {qubo.n_vars} {qubo.offset!r} {qubo.threshold!r}"]
    n = qubo.n_vars
    for i in range(n):
        lines.append(f"{i} {i} {float(qubo.q[i, i])!r}")
        for j in range(i + 1, n):
            if qubo.q[i, j] != 0.0:
                lines.append(f"{i} {j} {float(qubo.q[i, j])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_qubo(path) -> QuboInstance:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("#"):
        raise ParseError("missing '# nvars offset threshold' header", line=1, path=path)
    try:
        _, n, offset, threshold = text[0].split()
        n = int(n)
        q = np.zeros((n, n))
        for lineno, line in enumerate(text[1:], start=2):
            if not line.strip():
                continue
            i, j, c = line.split()
            i, j, c = int(i), int(j), float(c)
            if i > j:
                raise ParseError("expected i <= j", line=lineno, path=path)
            q[i, j] = q[j, i] = c
    except ValueError as exc:
        raise ParseError(str(exc), path=path) from exc
    return QuboInstance(q, float(offset), float(threshold))


# ---------------------------------------------------------------------------
# Exact solver
# ---------------------------------------------------------------------------


def solve_exact(qubo: QuboInstance, max_nodes: int = DEFAULT_NODE_BUDGET) -> QuboSolution:
    """Globally optimal assignment; ties go to fewest ones, then lexicographic."""
    t0 = time.perf_counter()
    n = qubo.n_vars
    if n == 0:
        return QuboSolution(0, qubo.offset, "exact", 0.0)
    if n > EXACT_LIMIT:
        raise SizeError(f"exact QUBO solve limited to {EXACT_LIMIT} variables, got {n}")
    q = np.ascontiguousarray(qubo.q)
    tol = qubo.tolerance()
    stats = {}
    if n <= ENUMERATION_LIMIT:
        mask, _ = K.enumerate_qubo(q, tol)
        tag = "exact:enumerate"
    else:
        start = _descent_start(q)
        mask, _, nodes, done = K.bnb_qubo(q, tol, max_nodes, np.int64(start))
        stats["nodes"] = int(nodes)
        if not done:
            raise BudgetExceeded(f"branch and bound exhausted {max_nodes} nodes")
        tag = "exact:bnb"
    mask = int(mask)
    x = np.array([(mask >> k) & 1 for k in range(n)], dtype=np.uint8)
    obj = qubo.evaluate(x)
    return QuboSolution(mask, obj, tag, (time.perf_counter() - t0) * 1e3, stats)


def _descent_start(q: np.ndarray) -> int:
    best_val, best = 0.0, 0
    for init in (np.zeros(q.shape[0], dtype=np.uint8), np.ones(q.shape[0], dtype=np.uint8)):
        x = init.copy()
        val = K.steepest_ascent(q, x, 0.0)
        if val > best_val:
            best_val, best = val, int(K.x_to_mask(x))
    return best


# ---------------------------------------------------------------------------
# Heuristic portfolio
# ---------------------------------------------------------------------------


@dataclass
class _Incumbent:
    x: np.ndarray
    value: float


def _descent_restart(q, rng, deadline, scale):
    n = q.shape[0]
    tol = 1e-12 * (1.0 + np.abs(q).sum())
    restarts = max(8, int(32 * scale))
    best = None
    for r in range(restarts):
        if r == 0:
            x = np.zeros(n, dtype=np.uint8)
        elif r == 1:
            x = np.ones(n, dtype=np.uint8)
        else:
            x = (rng.random(n) < 0.5).astype(np.uint8)
        val = K.steepest_ascent(q, x, tol)
        if best is None or val > best.value + tol:
            best = _Incumbent(x.copy(), val)
        if time.perf_counter() >= deadline:
            break
    return best


def _tabu(q, rng, deadline, scale):
    n = q.shape[0]
    tol = 1e-12 * (1.0 + np.abs(q).sum())
    x = (rng.random(n) < 0.5).astype(np.uint8)
    K.steepest_ascent(q, x, tol)
    h = K.field(q, x)
    val = K.qubo_value(q, x)
    best_x = x.copy()
    best_val = val
    tenure = max(7, n // 10)
    total = int(max(500, 20 * n) * scale)
    chunk = max(50, 200_000 // max(n, 1))
    tabu_until = np.zeros(n, dtype=np.int64)
    done = 0
    while done < total and time.perf_counter() < deadline:
        step = min(chunk, total - done)
        val, best_val = K.tabu_chunk(q, x, h, val, tabu_until, done, step, tenure, best_x, best_val, tol)
        done += step
    K.steepest_ascent(q, best_x, tol)
    return _Incumbent(best_x, K.qubo_value(q, best_x))


def _anneal(q, rng, deadline, scale):
    n = q.shape[0]
    tol = 1e-12 * (1.0 + np.abs(q).sum())
    x = (rng.random(n) < 0.5).astype(np.uint8)
    h = K.field(q, x)
    gains = np.abs(np.diag(q) + 2.0 * h)
    t_start = max(float(np.median(gains)), 1e-12)
    t_end = t_start * 1e-4
    total = int(max(2000, 100 * n) * scale)
    temps = t_start * (t_end / t_start) ** (np.arange(total) / max(total - 1, 1))
    ks = rng.integers(0, n, size=total)
    us = rng.random(total)
    val = K.qubo_value(q, x)
    best_x = x.copy()
    best_val = val
    chunk = max(1000, 400_000 // max(n, 1))
    done = 0
    while done < total:
        sl = slice(done, min(total, done + chunk))
        val, best_val = K.anneal_chunk(q, x, h, val, temps[sl], ks[sl], us[sl], best_x, best_val, tol)
        done = sl.stop
        if time.perf_counter() >= deadline:
            break
    K.steepest_ascent(q, best_x, tol)
    return _Incumbent(best_x, K.qubo_value(q, best_x))


_MEMBERS = {"descent_restart": _descent_restart, "tabu": _tabu, "anneal": _anneal}


def solve_heuristic(
    qubo: QuboInstance,
    portfolio: Sequence[str] = PORTFOLIO,
    deadline_ms: float = 250.0,
    seed: int = 0,
    threads: int = 1,
    effort: float = 1.0,
) -> QuboSolution:
    """Best incumbent over a portfolio of local-search members.

    Each member has a fixed work budget (scaled by ``effort``) and private
    random stream derived from ``(seed, member)``; the deadline truncates
    members that have not finished. Results do not depend on ``threads``
    unless the deadline cuts a member short.
    """
    if deadline_ms <= 0:
        raise DomainError("deadline must be positive")
    t0 = time.perf_counter()
    n = qubo.n_vars
    if n == 0:
        return QuboSolution(0, qubo.offset, "empty", 0.0)
    unknown = [m for m in portfolio if m not in _MEMBERS]
    if unknown:
        raise DomainError(f"unknown portfolio members: {unknown}")
    deadline = t0 + deadline_ms / 1e3
    q = np.ascontiguousarray(qubo.q)

    def run(tag):
        idx = PORTFOLIO.index(tag)
        rng = np.random.default_rng([int(seed), idx])
        return tag, _MEMBERS[tag](q, rng, deadline, effort)

    members = list(dict.fromkeys(portfolio))
    if threads > 1 and len(members) > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(members))) as pool:
            results = list(pool.map(run, members))
    else:
        results = [run(m) for m in members]

    empty_obj = qubo.offset
    best_bits, best_obj, best_tag = 0, empty_obj, "empty"
    tol = qubo.tolerance()
    for tag, inc in results:
        bits = _bits(inc.x)
        obj = qubo.evaluate(inc.x)
        if obj > best_obj + tol or (obj >= best_obj - tol and _assignment_key(bits) < _assignment_key(best_bits)):
            best_bits, best_obj, best_tag = bits, obj, tag
    stats = {"members": {tag: qubo.evaluate(inc.x) for tag, inc in results}}
    return QuboSolution(best_bits, best_obj, best_tag, (time.perf_counter() - t0) * 1e3, stats)
