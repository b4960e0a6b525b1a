"""Reference and competitor algorithms for assortment optimization."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .errors import DomainError, PreconditionError, SizeError
from .model import (
    EMPTY,
    Assortment,
    ModelParams,
    expected_revenue_k,
    expected_revenue_k2,
    mnl_revenue,
    prefix_revenues,
)

BRUTE_FORCE_LIMIT = 20
BRUTE_FORCE_K3_LIMIT = 12
CAPPED_ENUMERATION_LIMIT = 1_000_000


def _best_key(best, cand):
    """Max revenue, then fewer products, then lexicographic indices."""
    (r0, s0), (r1, s1) = best, cand
    tol = 1e-12 * max(1.0, abs(r0))
    if r1 > r0 + tol:
        return True
    return r1 >= r0 - tol and s1.sort_key() < s0.sort_key()


def brute_force_opt(params: ModelParams, k_max: int = 2, cap: int | None = None) -> tuple[Assortment, float]:
    """Exact optimum by enumeration; ties go to the smallest, then lexicographically first set."""
    n = params.n
    cap = n if cap is None else int(cap)
    if cap < 0:
        raise DomainError("cap must be nonnegative")
    cap = min(cap, n)
    if cap == 0 or n == 0:
        return EMPTY, 0.0
    if k_max == 3:
        if n > BRUTE_FORCE_K3_LIMIT:
            raise SizeError(f"k_max=3 brute force limited to {BRUTE_FORCE_K3_LIMIT} products")
        best = (0.0, EMPTY)
        for size in range(1, cap + 1):
            for combo in itertools.combinations(range(n), size):
                s = Assortment.of(combo)
                cand = (expected_revenue_k(params, s, 3), s)
                if _best_key(best, cand):
                    best = cand
        return best[1], best[0]
    if k_max not in (1, 2):
        raise DomainError("k_max must be 1, 2 or 3")
    model = params.without_pairs() if k_max == 1 else params
    if n <= BRUTE_FORCE_LIMIT:
        v2 = np.ascontiguousarray(model.dense_pairs())
        mask, _ = K.brute_force_revenue(
            np.ascontiguousarray(model.v_item), v2, np.ascontiguousarray(model.revenue), model.v0, cap, 1e-12
        )
        best = Assortment(int(mask))
    else:
        count = sum(math.comb(n, s) for s in range(cap + 1))
        if count > CAPPED_ENUMERATION_LIMIT:
            raise SizeError(f"brute force over {count} subsets exceeds {CAPPED_ENUMERATION_LIMIT}")
        best = _enumerate_capped(model, cap)
    rev = expected_revenue_k2(model, best) if len(best) else 0.0
    return best, rev


def _enumerate_capped(params: ModelParams, cap: int) -> Assortment:
    v = params.v_item
    r = params.revenue
    pm = params.dense_pairs()
    best = (0.0, EMPTY)
    for size in range(1, cap + 1):
        combos = np.array(list(itertools.combinations(range(params.n), size)), dtype=np.int64)
        num = (r[combos] * v[combos]).sum(axis=1)
        den = params.v0 + v[combos].sum(axis=1)
        for a, b in itertools.combinations(range(size), 2):
            i, j = combos[:, a], combos[:, b]
            w = pm[i, j]
            num += (r[i] + r[j]) * w
            den += w
        rev = num / den
        k = int(np.argmax(rev))  # combinations are lexicographic, argmax takes the first
        cand = (float(rev[k]), Assortment.of(combos[k].tolist()))
        if _best_key(best, cand):
            best = cand
    return best[1]


def revenue_ordered(params: ModelParams, cap: int | None = None) -> tuple[Assortment, float]:
    """Best of the nested highest-revenue sets A_1, A_2, ... (up to ``cap`` items)."""
    if params.n == 0 or cap == 0:
        return EMPTY, 0.0
    revs = prefix_revenues(params)
    limit = len(revs) if cap is None else min(cap, len(revs))
    t = int(np.argmax(revs[:limit]))
    items = Assortment.of(params.item_order[: t + 1].tolist())
    return items, expected_revenue_k2(params, items)


def mnl_opt(params: ModelParams) -> tuple[Assortment, float]:
    """Optimal set under the single-purchase model (pair weights ignored)."""
    items, _ = revenue_ordered(params.without_pairs())
    return items, mnl_revenue(params, items) if len(items) else 0.0


def adxopt_l(params: ModelParams, l: int = 1, b: int | None = None, cap: int | None = None) -> tuple[Assortment, float]:
    """Greedy add / delete / exchange local search moving up to ``l`` items at once.

    ``b`` bounds how often each product may be removed (default ``l * n``).
    """
    if l not in (1, 2):
        raise DomainError("l must be 1 or 2")
    n = params.n
    b = l * n if b is None else int(b)
    if b < 1:
        raise DomainError("removal bound b must be at least 1")
    cap = n if cap is None else min(int(cap), n)
    if n == 0 or cap <= 0:
        return EMPTY, 0.0
    v1 = np.ascontiguousarray(params.v_item)
    v2 = np.ascontiguousarray(params.dense_pairs())
    r = np.ascontiguousarray(params.revenue)
    x = np.zeros(n, dtype=np.uint8)
    removals = np.zeros(n, dtype=np.int64)
    tol = 1e-12 * max(1.0, float(r.max()))
    while True:
        kind, a1, a2, d1, d2, best, current = K.adxopt_moves(v1, v2, r, params.v0, x, removals, b, l, cap, tol)
        if kind == 0 or best <= current + tol:
            break
        for d in (d1, d2):
            if d >= 0:
                x[d] = 0
                removals[d] += 1
        for a in (a1, a2):
            if a >= 0:
                x[a] = 1
    items = Assortment.of(np.flatnonzero(x).tolist())
    return items, expected_revenue_k2(params, items) if len(items) else 0.0


# ---------------------------------------------------------------------------
# MIP formulation
# ---------------------------------------------------------------------------


@dataclass
class MipModel:
    """Linear objective and rows over named variables; ``binary`` lists integer ones."""

    variables: list[str]
    objective: dict[str, float]
    rows: list[tuple[str, dict[str, float], str, float]] = field(default_factory=list)
    binary: list[str] = field(default_factory=list)

    def to_lp(self) -> str:
        def expr(coeffs):
            parts = []
            for name, c in coeffs.items():
                sign = "-" if c < 0 else "+"
                mag = abs(c)
                term = name if mag == 1.0 else f"{mag!r} {name}"
                parts.append(f"{sign} {term}")
            text = " ".join(parts)
            return text[2:] if text.startswith("+ ") else text

        lines = ["\\ assortment MIP", "Maximize", f" obj: {expr(self.objective)}", "Subject To"]
        for name, coeffs, sense, rhs in self.rows:
            lines.append(f" {name}: {expr(coeffs)} {sense} {rhs!r}")
        lines.append("Bounds")
        cont = [v for v in self.variables if v not in set(self.binary)]
        lines.extend(f" 0 <= {v}" for v in cont)
        lines.append("Binary")
        lines.extend(f" {v}" for v in self.binary)
        lines.append("End")
        return "\n".join(lines) + "\n"

    def to_arrays(self):
        """(c, A, lower, upper, integrality) for a maximization, rows as lower <= A x <= upper."""
        index = {v: k for k, v in enumerate(self.variables)}
        c = np.zeros(len(index))
        for name, val in self.objective.items():
            c[index[name]] = val
        a = np.zeros((len(self.rows), len(index)))
        lo = np.full(len(self.rows), -np.inf)
        hi = np.full(len(self.rows), np.inf)
        for k, (_, coeffs, sense, rhs) in enumerate(self.rows):
            for name, val in coeffs.items():
                a[k, index[name]] += val
            if sense in ("<=", "="):
                hi[k] = rhs
            if sense in (">=", "="):
                lo[k] = rhs
        integrality = np.array([1 if v in set(self.binary) else 0 for v in self.variables])
        return c, a, lo, hi, integrality


def build_mip(params: ModelParams, cap: int | None = None) -> MipModel:
    """MIP over bundle probabilities p_i_j, bundle indicators x_i_j, and no-purchase p00.

    Ordered pairs (i, j) and (j, i) each carry half the pair weight so the
    normalization row counts every bundle once.
    """
    n = params.n
    theta = params.theta()
    rhat = params.rhat()
    v0 = params.v0
    p = lambda i, j: f"p_{i}_{j}"
    x = lambda i, j: f"x_{i}_{j}"
    pairs = [(i, j) for i in range(n) for j in range(n)]
    variables = [p(i, j) for i, j in pairs] + [x(i, j) for i, j in pairs] + ["p00"]
    objective = {p(i, j): float(rhat[i, j]) for i, j in pairs}
    rows = []
    for i, j in pairs:
        rows.append((f"ub_x_{i}_{j}", {p(i, j): 1.0, x(i, j): -1.0}, "<=", 0.0))
    for i, j in pairs:
        w = float(theta[i, j] / v0)
        rows.append((f"ub_w_{i}_{j}", {p(i, j): 1.0, "p00": -w}, "<=", 0.0))
    for i, j in pairs:
        w = float(theta[i, j] / v0)
        rows.append((f"lb_w_{i}_{j}", {p(i, j): 1.0, "p00": -w, x(i, j): -w}, ">=", -w))
    for i, j in pairs:
        if i == j:
            continue  # linking rows are vacuous on the diagonal
        rows.append((f"link_lo_{i}_{j}", {x(i, i): 1.0, x(j, j): 1.0, x(i, j): -1.0}, "<=", 1.0))
        rows.append((f"link_i_{i}_{j}", {x(i, j): 1.0, x(i, i): -1.0}, "<=", 0.0))
        rows.append((f"link_j_{i}_{j}", {x(i, j): 1.0, x(j, j): -1.0}, "<=", 0.0))
    norm = {"p00": 1.0}
    norm.update({p(i, j): 1.0 for i, j in pairs})
    rows.append(("norm", norm, "=", 1.0))
    if cap is not None:
        rows.append(("cap", {x(i, i): 1.0 for i in range(n)}, "<=", float(cap)))
    return MipModel(variables, objective, rows, [x(i, j) for i, j in pairs])


def export_mip(params: ModelParams, path, cap: int | None = None) -> MipModel:
    model = build_mip(params, cap)
    Path(path).write_text(model.to_lp(), encoding="utf-8")
    return model


# ---------------------------------------------------------------------------
# Structural guarantees
# ---------------------------------------------------------------------------


def check_small_pairs(params: ModelParams, eps: float) -> None:
    """Raise unless every pair weight is at most ``eps`` times the smallest item/no-purchase weight."""
    floor = min(params.v0, float(params.v_item.min())) if params.n else params.v0
    limit = eps * floor
    for (i, j), v in params.v_pair.items():
        if v > limit * (1 + 1e-12):
            raise PreconditionError(
                f"pair ({i}, {j}) has weight {v:.6g} > eps * min weight = {limit:.6g}"
            )


def theorem4_bound_check(params: ModelParams, epsilon_ratio: float) -> tuple[float, float, bool]:
    """Compare the revenue-ordered revenue with its small-pair-weight guarantee."""
    if epsilon_ratio < 0:
        raise DomainError("epsilon_ratio must be nonnegative")
    check_small_pairs(params, epsilon_ratio)
    _, lhs = revenue_ordered(params)
    opt, r_opt = brute_force_opt(params)
    mnl_set, _ = mnl_opt(params)
    eps = epsilon_ratio
    rhs = (2.0 - eps * len(mnl_set)) / (2.0 + 4.0 * eps * len(opt)) * r_opt
    return lhs, rhs, lhs >= rhs - 1e-12 * max(1.0, abs(rhs))


def check_value_conscious(params: ModelParams, rel_tol: float = 1e-12) -> None:
    """Raise unless the value-conscious ordering holds with products in index order.

    For i < j (and any third product k): V_i <= V_j, V_ik <= V_jk,
    r_i V_i >= r_j V_j and (r_i + r_k) V_ik >= (r_j + r_k) V_jk.
    """
    n = params.n
    r, v = params.revenue, params.v_item
    pm = params.dense_pairs()
    slack = lambda a, b: a <= b + rel_tol * max(1.0, abs(a), abs(b))
    for i in range(n - 1):
        j = i + 1
        if not slack(v[i], v[j]):
            raise PreconditionError(f"V_{i} = {v[i]:.6g} exceeds V_{j} = {v[j]:.6g}")
        if not slack(r[j] * v[j], r[i] * v[i]):
            raise PreconditionError(f"r_{j} V_{j} exceeds r_{i} V_{i}")
    for i, j in itertools.combinations(range(n), 2):
        for k in range(n):
            if k in (i, j):
                continue
            if not slack(pm[i, k], pm[j, k]):
                raise PreconditionError(f"pair ({i}, {k}) outweighs pair ({j}, {k})")
            if not slack((r[j] + r[k]) * pm[j, k], (r[i] + r[k]) * pm[i, k]):
                raise PreconditionError(f"pair ({j}, {k}) out-earns pair ({i}, {k})")


def value_conscious_instance(n: int, seed: int = 0, gamma: float = 0.5, gamma_pair: float = 0.5,
                             v0: float = 1.0) -> ModelParams:
    """Instance where cheaper products carry more weight but less revenue-weight.

    Products are indexed in decreasing revenue. With ``gamma`` in (0, 1),
    V_i = c / r_i**gamma rises as price falls while r_i V_i = c r_i**(1-gamma)
    falls; pair weights follow the same law in r_i + r_k. Every pair gets a
    weight, since a missing pair would break the ordering.
    """
    if not (0.0 < gamma < 1.0 and 0.0 < gamma_pair < 1.0):
        raise DomainError("gamma exponents must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    r = np.sort(rng.uniform(1.0, 10.0, size=n))[::-1].copy()
    c = rng.uniform(0.2, 1.0)
    c_pair = rng.uniform(0.05, 0.5)
    v_item = c / r**gamma
    pairs = {(i, k): c_pair / (r[i] + r[k]) ** gamma_pair for i, k in itertools.combinations(range(n), 2)}
    return ModelParams(v0, v_item, r, pairs)


def small_pair_instance(n: int, eps: float, seed: int = 0) -> ModelParams:
    """Random instance satisfying the small-pair-weight condition with ratio ``eps``."""
    rng = np.random.default_rng(seed)
    r = rng.uniform(1.0, 10.0, size=n)
    v_item = rng.uniform(0.2, 1.0, size=n)
    v0 = rng.uniform(0.2, 2.0)
    floor = min(v0, float(v_item.min()))
    pairs = {(i, j): float(eps * floor * rng.uniform(0.0, 1.0)) for i, j in itertools.combinations(range(n), 2)}
    pairs = {k: v for k, v in pairs.items() if v > 0}
    return ModelParams(v0, v_item, r, pairs)
