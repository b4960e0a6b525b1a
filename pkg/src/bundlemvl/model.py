"""BundleMVL-K parameterization, bundle probabilities and expected revenue.

Products are indexed ``0..n-1``. A model stores the no-purchase weight
``v0``, per-item weights ``V_i``, a sparse map of pair weights ``V_ij``
(``i < j``, unstored pairs weigh zero) and item revenues ``r_i``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping

import numpy as np
import scipy.sparse as sp

from .errors import DomainError, ParseError, SizeError

#: Dense pair-weight storage is used up to this many products.
DENSE_LIMIT = 2000
#: Largest offered set evaluated by explicit enumeration when ``k_max = 3``.
K3_ENUMERATION_LIMIT = 25


class _AbsentPair:
    """Sentinel for a pair whose weight is zero (log weight is -inf)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "ABSENT_PAIR"

    def __bool__(self):
        return False


ABSENT_PAIR = _AbsentPair()


# ---------------------------------------------------------------------------
# Assortments and bundles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Assortment:
    """A subset of products stored as an integer bitset."""

    bits: int = 0

    def __post_init__(self):
        if self.bits < 0:
            raise DomainError("assortment bits must be nonnegative")

    @classmethod
    def of(cls, indices: Iterable[int]) -> "Assortment":
        bits = 0
        for i in indices:
            i = int(i)
            if i < 0:
                raise DomainError(f"negative product index {i}")
            bits |= 1 << i
        return cls(bits)

    @classmethod
    def full(cls, n: int) -> "Assortment":
        return cls((1 << n) - 1)

    @classmethod
    def from_mask(cls, mask) -> "Assortment":
        return cls.of(np.flatnonzero(np.asarray(mask, dtype=bool)))

    def __contains__(self, i: int) -> bool:
        return i >= 0 and (self.bits >> i) & 1 == 1

    def __len__(self) -> int:
        return self.bits.bit_count()

    def __iter__(self) -> Iterator[int]:
        b = self.bits
        while b:
            low = b & -b
            yield low.bit_length() - 1
            b ^= low

    def __repr__(self):
        return f"Assortment({list(self)})"

    def __or__(self, other: "Assortment") -> "Assortment":
        return Assortment(self.bits | other.bits)

    def __and__(self, other: "Assortment") -> "Assortment":
        return Assortment(self.bits & other.bits)

    def __sub__(self, other: "Assortment") -> "Assortment":
        return Assortment(self.bits & ~other.bits)

    def __le__(self, other: "Assortment") -> bool:
        return self.bits & ~other.bits == 0

    def isdisjoint(self, other: "Assortment") -> bool:
        return self.bits & other.bits == 0

    def add(self, i: int) -> "Assortment":
        return Assortment(self.bits | (1 << i))

    def remove(self, i: int) -> "Assortment":
        return Assortment(self.bits & ~(1 << i))

    def indices(self) -> tuple[int, ...]:
        return tuple(self)

    def max_index(self) -> int:
        return self.bits.bit_length() - 1

    def to_mask(self, n: int) -> np.ndarray:
        if self.max_index() >= n:
            raise DomainError(f"assortment {self!r} exceeds {n} products")
        mask = np.zeros(n, dtype=bool)
        mask[list(self)] = True
        return mask

    def sort_key(self) -> tuple[int, tuple[int, ...]]:
        """Deterministic tie-break order: cardinality, then lexicographic."""
        return (len(self), self.indices())


EMPTY = Assortment(0)


@dataclass(frozen=True)
class Bundle:
    """Products purchased together; the empty bundle is no-purchase."""

    items: tuple[int, ...] = ()

    def __post_init__(self):
        items = tuple(int(i) for i in self.items)
        object.__setattr__(self, "items", items)
        for a, b in zip(items, items[1:]):
            if a >= b:
                raise DomainError(f"bundle items must be strictly increasing: {items}")
        if items and items[0] < 0:
            raise DomainError(f"negative product index in bundle {items}")

    @classmethod
    def of(cls, items: Iterable[int]) -> "Bundle":
        items = sorted(int(i) for i in items)
        if len(set(items)) != len(items):
            raise DomainError(f"bundle items must be distinct: {items}")
        return cls(tuple(items))

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def as_assortment(self) -> Assortment:
        return Assortment.of(self.items)


NO_PURCHASE = Bundle(())


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _normalize_pairs(v_pair: Mapping | None, n: int) -> dict[tuple[int, int], float]:
    out: dict[tuple[int, int], float] = {}
    if not v_pair:
        return out
    for key, value in v_pair.items():
        i, j = (int(key[0]), int(key[1]))
        if i == j:
            raise DomainError(f"pair ({i}, {j}) repeats a product")
        if i > j:
            i, j = j, i
        if not (0 <= i and j < n):
            raise DomainError(f"pair ({i}, {j}) out of range for {n} products")
        if (i, j) in out:
            raise DomainError(f"pair ({i}, {j}) stored twice")
        value = float(value)
        if not math.isfinite(value) or value < 0:
            raise DomainError(f"pair weight for ({i}, {j}) must be finite and >= 0, got {value}")
        if value > 0:
            out[(i, j)] = value
    return dict(sorted(out.items()))


def _frozen_array(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ModelParams:
    """BundleMVL-2 weights and revenues (K = 3 bundles derive from pairs)."""

    v0: float
    v_item: np.ndarray
    revenue: np.ndarray
    v_pair: Mapping[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        v_item = _frozen_array(self.v_item, "v_item")
        revenue = _frozen_array(self.revenue, "revenue")
        if v_item.shape != revenue.shape:
            raise DomainError("v_item and revenue must have the same length")
        v0 = float(self.v0)
        if not (math.isfinite(v0) and v0 > 0):
            raise DomainError(f"v0 must be positive, got {v0}")
        if np.any(v_item < 0):
            raise DomainError("item weights must be nonnegative")
        if np.any(revenue <= 0):
            raise DomainError("revenues must be positive")
        pairs = _normalize_pairs(self.v_pair, len(v_item))
        object.__setattr__(self, "v0", v0)
        object.__setattr__(self, "v_item", v_item)
        object.__setattr__(self, "revenue", revenue)
        object.__setattr__(self, "v_pair", MappingProxyType(pairs))

    @classmethod
    def from_dense(cls, v0, v_item, pair_matrix, revenue) -> "ModelParams":
        """Build from a symmetric ``n x n`` pair-weight matrix (diagonal ignored)."""
        m = np.asarray(pair_matrix, dtype=float)
        iu, ju = np.triu_indices(m.shape[0], k=1)
        vals = m[iu, ju]
        keep = vals > 0
        pairs = {(int(i), int(j)): float(v) for i, j, v in zip(iu[keep], ju[keep], vals[keep])}
        return cls(v0, v_item, revenue, pairs)

    @property
    def n(self) -> int:
        return len(self.v_item)

    @cached_property
    def item_order(self) -> np.ndarray:
        """Indices sorted by revenue descending, ties by ascending index."""
        order = np.lexsort((np.arange(self.n), -self.revenue))
        order.flags.writeable = False
        return order

    @cached_property
    def pair_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.v_pair:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty.copy(), np.zeros(0)
        keys = np.array(list(self.v_pair.keys()), dtype=np.int64)
        vals = np.array(list(self.v_pair.values()), dtype=float)
        return keys[:, 0], keys[:, 1], vals

    @cached_property
    def pair_matrix(self):
        """Symmetric pair weights: dense ndarray up to DENSE_LIMIT, CSR beyond."""
        pi, pj, pv = self.pair_arrays
        n = self.n
        if n <= DENSE_LIMIT:
            m = np.zeros((n, n))
            m[pi, pj] = pv
            m[pj, pi] = pv
            m.flags.writeable = False
            return m
        rows = np.concatenate([pi, pj])
        cols = np.concatenate([pj, pi])
        return sp.csr_matrix((np.concatenate([pv, pv]), (rows, cols)), shape=(n, n))

    def dense_pairs(self) -> np.ndarray:
        m = self.pair_matrix
        return m.toarray() if sp.issparse(m) else np.array(m)

    def pair_weight(self, i: int, j: int) -> float:
        if i > j:
            i, j = j, i
        return self.v_pair.get((i, j), 0.0)

    def with_v0(self, v0: float) -> "ModelParams":
        return ModelParams(v0, self.v_item, self.revenue, dict(self.v_pair))

    def without_pairs(self) -> "ModelParams":
        return ModelParams(self.v0, self.v_item, self.revenue, {})

    def scaled(self, c: float) -> "ModelParams":
        """Multiply v0 and every weight by ``c``."""
        return ModelParams(
            self.v0 * c,
            self.v_item * c,
            self.revenue,
            {k: v * c for k, v in self.v_pair.items()},
        )

    def restrict(self, items: Iterable[int]) -> "ModelParams":
        """Induced sub-model on ``items`` (reindexed in the given order)."""
        items = [int(i) for i in items]
        pos = {old: new for new, old in enumerate(items)}
        if len(pos) != len(items):
            raise DomainError("restrict: duplicate product index")
        pairs = {}
        for (i, j), v in self.v_pair.items():
            if i in pos and j in pos:
                pairs[(pos[i], pos[j])] = v
        return ModelParams(self.v0, self.v_item[items], self.revenue[items], pairs)

    def theta(self) -> np.ndarray:
        """Dense quadratic-form weights: V_i on the diagonal, V_ij / 2 elsewhere."""
        t = self.dense_pairs() / 2.0
        np.fill_diagonal(t, self.v_item)
        return t

    def rhat(self) -> np.ndarray:
        """Bundle revenues: r_i on the diagonal, r_i + r_j elsewhere."""
        r = self.revenue
        m = r[:, None] + r[None, :]
        np.fill_diagonal(m, r)
        return m


@dataclass(frozen=True, eq=False)
class NaturalParams:
    """Log-linear parameters: V_S = exp(sum alpha_i + sum beta_ij).

    Pairs missing from ``beta`` have zero weight (beta = -inf); items with
    ``alpha = -inf`` have zero weight.
    """

    alpha: np.ndarray
    beta: Mapping[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float).reshape(-1)
        alpha.flags.writeable = False
        beta = {}
        for (i, j), b in self.beta.items():
            i, j = (int(i), int(j)) if i < j else (int(j), int(i))
            beta[(i, j)] = float(b)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", MappingProxyType(dict(sorted(beta.items()))))

    @property
    def n(self) -> int:
        return len(self.alpha)

    def beta_of(self, i: int, j: int):
        if i > j:
            i, j = j, i
        return self.beta.get((i, j), ABSENT_PAIR)

    def to_weights(self, v0: float, revenue) -> ModelParams:
        return from_natural(self, v0, revenue)


def to_natural(params: ModelParams) -> NaturalParams:
    """Solve log V_S = sum alpha + sum beta for (alpha, beta)."""
    if np.any(params.v_item <= 0):
        bad = int(np.flatnonzero(params.v_item <= 0)[0])
        raise DomainError(f"item {bad} has nonpositive weight; log undefined")
    alpha = np.log(params.v_item)
    beta = {(i, j): math.log(v) - alpha[i] - alpha[j] for (i, j), v in params.v_pair.items()}
    return NaturalParams(alpha, beta)


def from_natural(nat: NaturalParams, v0: float, revenue) -> ModelParams:
    alpha = nat.alpha
    v_item = np.exp(alpha)
    pairs = {(i, j): math.exp(alpha[i] + alpha[j] + b) for (i, j), b in nat.beta.items()}
    return ModelParams(v0, v_item, revenue, pairs)


# ---------------------------------------------------------------------------
# Probabilities and revenue
# ---------------------------------------------------------------------------


def _check_index(params: ModelParams, i: int):
    if not (0 <= i < params.n):
        raise DomainError(f"product index {i} out of range for {params.n} products")


def _offered_indices(params: ModelParams, offered) -> np.ndarray:
    if isinstance(offered, Assortment):
        if offered.max_index() >= params.n:
            raise DomainError(f"{offered!r} exceeds {params.n} products")
        return np.fromiter(offered, dtype=np.int64, count=len(offered))
    mask = np.asarray(offered)
    if mask.dtype == bool:
        if mask.shape != (params.n,):
            raise DomainError("mask length must equal the number of products")
        return np.flatnonzero(mask)
    idx = np.unique(mask.astype(np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] >= params.n):
        raise DomainError("product index out of range")
    return idx


def bundle_weight(params: ModelParams, bundle: Bundle) -> float:
    """Weight V_S of a bundle; the empty bundle carries the no-purchase weight v0."""
    for i in bundle:
        _check_index(params, i)
    k = len(bundle)
    if k == 0:
        return params.v0
    if k == 1:
        return float(params.v_item[bundle.items[0]])
    if k == 2:
        return params.pair_weight(*bundle.items)
    pair_w = [params.pair_weight(i, j) for i, j in itertools.combinations(bundle.items, 2)]
    if min(pair_w) == 0.0:
        return 0.0
    item_w = params.v_item[list(bundle.items)]
    if np.any(item_w <= 0):
        raise DomainError("bundle of size > 2 needs positive item weights")
    log_w = sum(math.log(w) for w in pair_w) - (k - 2) * float(np.sum(np.log(item_w)))
    return math.exp(log_w)


def iter_bundles(offered: Assortment, k_max: int) -> Iterator[Bundle]:
    """All nonempty bundles of size <= k_max within ``offered``."""
    items = offered.indices()
    for k in range(1, k_max + 1):
        for combo in itertools.combinations(items, k):
            yield Bundle(combo)


def _check_k(k_max: int):
    if k_max not in (1, 2, 3):
        raise DomainError(f"k_max must be 1, 2 or 3, got {k_max}")


def total_weight(params: ModelParams, offered, k_max: int = 2) -> float:
    """v0 plus the weight of every nonempty bundle of size <= k_max in ``offered``."""
    _check_k(k_max)
    idx = _offered_indices(params, offered)
    total = params.v0 + float(np.sum(params.v_item[idx]))
    if k_max >= 2 and idx.size > 1:
        sub = _pair_submatrix(params, idx)
        total += float(np.sum(np.triu(sub, 1)))
    if k_max == 3 and idx.size > 2:
        if idx.size > K3_ENUMERATION_LIMIT:
            raise SizeError(f"k_max=3 enumeration limited to {K3_ENUMERATION_LIMIT} offered products")
        for combo in itertools.combinations(idx.tolist(), 3):
            total += bundle_weight(params, Bundle(combo))
    return total


def choice_probability(params: ModelParams, offered: Assortment, bundle: Bundle, k_max: int = 2) -> float:
    _check_k(k_max)
    if len(bundle) > k_max:
        raise DomainError(f"bundle size {len(bundle)} exceeds k_max={k_max}")
    if not bundle.as_assortment() <= offered:
        raise DomainError(f"bundle {bundle.items} is not contained in the offered set")
    return bundle_weight(params, bundle) / total_weight(params, offered, k_max)


def choice_distribution(params: ModelParams, offered: Assortment, k_max: int = 2) -> dict[Bundle, float]:
    """Probability of no-purchase and of every bundle of size <= k_max."""
    weights = {NO_PURCHASE: params.v0}
    for b in iter_bundles(offered, k_max):
        weights[b] = bundle_weight(params, b)
    total = math.fsum(weights.values())
    return {b: w / total for b, w in weights.items()}


def _pair_submatrix(params: ModelParams, idx: np.ndarray) -> np.ndarray:
    m = params.pair_matrix
    if sp.issparse(m):
        return m[idx][:, idx].toarray()
    return m[np.ix_(idx, idx)]


def _sum(values: np.ndarray, compensated: bool) -> float:
    return math.fsum(values) if compensated else float(np.sum(values))


def revenue_terms_k2(params: ModelParams, offered) -> tuple[float, float]:
    """Numerator and denominator of R_2 over ``offered``."""
    idx = _offered_indices(params, offered)
    if idx.size == 0:
        return 0.0, params.v0
    r = params.revenue[idx]
    v = params.v_item[idx]
    compensated = params.n > 1000
    sub = _pair_submatrix(params, idx)
    row = sub.sum(axis=1)
    # sum_{i<j} (r_i + r_j) V_ij == sum_i r_i * sum_{j != i} V_ij
    num = _sum(r * v, compensated) + _sum(r * row, compensated)
    den = params.v0 + _sum(v, compensated) + 0.5 * _sum(row, compensated)
    return num, den


def expected_revenue_k2(params: ModelParams, offered) -> float:
    num, den = revenue_terms_k2(params, offered)
    return num / den


def mnl_revenue(params: ModelParams, offered) -> float:
    """Revenue under the single-purchase model that ignores pair weights."""
    idx = _offered_indices(params, offered)
    v = params.v_item[idx]
    return float(np.sum(params.revenue[idx] * v)) / (params.v0 + float(np.sum(v)))


def expected_revenue_k(params: ModelParams, offered, k_max: int) -> float:
    """R_K by explicit enumeration of bundles of size <= k_max."""
    _check_k(k_max)
    idx = _offered_indices(params, offered).tolist()
    if k_max == 3 and len(idx) > K3_ENUMERATION_LIMIT:
        raise SizeError(f"k_max=3 enumeration limited to {K3_ENUMERATION_LIMIT} offered products")
    num = []
    den = [params.v0]
    r = params.revenue
    for k in range(1, k_max + 1):
        for combo in itertools.combinations(idx, k):
            w = bundle_weight(params, Bundle(combo))
            if w:
                num.append(w * sum(r[i] for i in combo))
                den.append(w)
    return math.fsum(num) / math.fsum(den)


def revenue_decomposition(params: ModelParams, c: Assortment, c_prime: Assortment) -> tuple[float, float]:
    """Split R_2(C u C') into alpha * R_2(C) + (1 - alpha) * T(C, C') for disjoint sets.

    ``T`` is returned as 0.0 when C' adds no weight (then alpha = 1).
    """
    if not c.isdisjoint(c_prime):
        raise DomainError("revenue_decomposition requires disjoint sets")
    theta = params.theta()
    rhat = params.rhat()
    a = _offered_indices(params, c)
    b = _offered_indices(params, c_prime)
    w_cc = theta[np.ix_(a, a)].sum()
    w_bb = theta[np.ix_(b, b)].sum()
    w_cb = theta[np.ix_(a, b)].sum()
    rw_bb = (rhat * theta)[np.ix_(b, b)].sum()
    rw_cb = (rhat * theta)[np.ix_(a, b)].sum()
    alpha = (params.v0 + w_cc) / (params.v0 + w_cc + w_bb + 2 * w_cb)
    t_den = w_bb + 2 * w_cb
    t = (rw_bb + 2 * rw_cb) / t_den if t_den > 0 else 0.0
    return float(alpha), float(t)


def prefix_revenues(params: ModelParams, order=None) -> np.ndarray:
    """R_2 of every prefix of ``order`` (default: revenue order), computed incrementally."""
    order = params.item_order if order is None else np.asarray(order, dtype=np.int64)
    r = params.revenue
    pm = params.pair_matrix
    sparse = sp.issparse(pm)
    chosen = np.zeros(params.n, dtype=bool)
    num, den = 0.0, params.v0
    out = np.empty(len(order))
    for t, a in enumerate(order):
        row = pm.getrow(a).toarray().ravel() if sparse else pm[a]
        link = row * chosen
        num += r[a] * params.v_item[a] + float(np.sum(link * (r[a] + r)))
        den += params.v_item[a] + float(np.sum(link))
        chosen[a] = True
        out[t] = num / den
    return out


# ---------------------------------------------------------------------------
# Model file
# ---------------------------------------------------------------------------


def model_to_dict(params: ModelParams, labels: list[str] | None = None) -> dict:
    items = []
    for i in range(params.n):
        item = {"id": i, "revenue": float(params.revenue[i]), "v": float(params.v_item[i])}
        if labels is not None:
            item["label"] = str(labels[i])
        items.append(item)
    out = {"v0": params.v0, "items": items}
    if params.v_pair:
        out["pairs"] = [{"i": i, "j": j, "v": v} for (i, j), v in params.v_pair.items()]
    return out


def model_from_dict(data: Mapping) -> ModelParams:
    try:
        v0 = data["v0"]
        items = sorted(data["items"], key=lambda it: int(it["id"]))
        ids = [int(it["id"]) for it in items]
        if ids != list(range(len(items))):
            raise ParseError("item ids must be exactly 0..n-1 without duplicates")
        revenue = [float(it["revenue"]) for it in items]
        v_item = [float(it["v"]) for it in items]
        pairs = {}
        for p in data.get("pairs", []):
            i, j = int(p["i"]), int(p["j"])
            if not i < j:
                raise ParseError(f"pair ({i}, {j}) must satisfy i < j")
            if (i, j) in pairs:
                raise ParseError(f"duplicate pair ({i}, {j})")
            pairs[(i, j)] = float(p["v"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed model file: {exc!r}") from exc
    try:
        return ModelParams(v0, v_item, revenue, pairs)
    except DomainError as exc:
        raise ParseError(str(exc)) from exc


def save_model(params: ModelParams, path, labels: list[str] | None = None) -> None:
    text = json.dumps(model_to_dict(params, labels), indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_model(path) -> ModelParams:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno, path=path) from exc
    try:
        return model_from_dict(data)
    except ParseError as exc:
        raise ParseError(str(exc), path=path) from exc


def load_labels(path) -> list[str] | None:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    items = sorted(data["items"], key=lambda it: int(it["id"]))
    if all("label" in it for it in items):
        return [str(it["label"]) for it in items]
    return None
