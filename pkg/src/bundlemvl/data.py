"""Transaction ingestion, bundle augmentation, estimation, and synthetic instances."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DomainError, EstimationError, ParseError
from .model import (
    NO_PURCHASE,
    Assortment,
    Bundle,
    ModelParams,
    NaturalParams,
    choice_probability,
    from_natural,
)

log = logging.getLogger(__name__)

MAX_AUGMENT_SIZE = 8
MAX_REJECT_FRACTION = 0.10
DEFAULT_NO_PURCHASE = 0.30
DEFAULT_MIN_SUPPORT = 5


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RawTransaction:
    order_id: str
    item_id: str
    price: float

    def __post_init__(self):
        if not (math.isfinite(self.price) and self.price > 0):
            raise DomainError(f"price must be positive, got {self.price}")


@dataclass
class TransactionLog:
    """Orders as sorted item-index tuples plus the item index map.

    ``items[k]`` is the external id of product ``k``; ``prices[k]`` its price.
    """

    orders: list[tuple[str, tuple[int, ...]]]
    items: list[str]
    prices: np.ndarray
    price_conflicts: int = 0

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def item_index(self) -> dict[str, int]:
        return {item: k for k, item in enumerate(self.items)}

    def bundles(self) -> list[Bundle]:
        return [Bundle(items) for _, items in self.orders]

    def __len__(self):
        return len(self.orders)


@dataclass(frozen=True)
class Observation:
    offered: Assortment
    purchased: Bundle
    weight: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.weight <= 1.0):
            raise DomainError(f"observation weight must lie in (0, 1], got {self.weight}")
        if not self.purchased.as_assortment() <= self.offered:
            raise DomainError(f"purchased {self.purchased.items} not within offered set")


@dataclass(frozen=True)
class Fragment:
    """One partition of a source bundle; every block is purchased with ``weight``."""

    source: int
    blocks: tuple[Bundle, ...]
    weight: Fraction

    def observations(self, offered: Assortment) -> list[Observation]:
        w = float(self.weight)
        return [Observation(offered, b, w) for b in self.blocks]


@dataclass(frozen=True)
class SyntheticSpec:
    n: int
    seed: int = 0
    generator: str = "two_group"
    no_purchase_prob: float = DEFAULT_NO_PURCHASE

    def __post_init__(self):
        if self.n < 2:
            raise DomainError("synthetic instances need n >= 2")
        if not (0.0 < self.no_purchase_prob < 1.0):
            raise DomainError("no_purchase_prob must lie in (0, 1)")
        if self.generator not in GENERATORS:
            raise DomainError(f"unknown generator {self.generator!r}; choose from {sorted(GENERATORS)}")


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

REQUIRED_COLUMNS = ("order_id", "item_id", "price")


def ingest_csv(path) -> TransactionLog:
    """Read ``order_id,item_id,price`` rows; items are indexed by first appearance."""
    path = Path(path)
    items: dict[str, int] = {}
    prices: list[float] = []
    orders: dict[str, set[int]] = {}
    conflicts = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("missing header row", line=1, path=path) from None
        header = [h.strip() for h in header]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"missing column(s): {', '.join(missing)}", line=1, path=path)
        cols = [header.index(c) for c in REQUIRED_COLUMNS]
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=line, path=path)
            order_id, item_id, price_text = (row[c].strip() for c in cols)
            if not order_id or not item_id:
                raise ParseError("empty order_id or item_id", line=line, path=path)
            try:
                price = float(price_text)
            except ValueError:
                raise ParseError(f"price {price_text!r} is not a number", line=line, path=path) from None
            if not (math.isfinite(price) and price > 0):
                raise ParseError(f"price must be positive, got {price_text!r}", line=line, path=path)
            idx = items.get(item_id)
            if idx is None:
                idx = items[item_id] = len(prices)
                prices.append(price)
            elif abs(prices[idx] - price) > 1e-9:
                conflicts += 1
                prices[idx] = price
            orders.setdefault(order_id, set()).add(idx)
    if conflicts:
        log.warning("%s: %d price disagreement(s); last value kept", path, conflicts)
    return TransactionLog(
        orders=[(oid, tuple(sorted(s))) for oid, s in orders.items()],
        items=list(items),
        prices=np.array(prices, dtype=float),
        price_conflicts=conflicts,
    )


def filter_infrequent(log_: TransactionLog, min_support: int = DEFAULT_MIN_SUPPORT) -> TransactionLog:
    """Drop products seen in fewer than ``min_support`` orders and compact indices."""
    if min_support < 0:
        raise DomainError("min_support must be nonnegative")
    support = Counter(i for _, items in log_.orders for i in items)
    keep = [k for k in range(log_.n_items) if support[k] >= min_support]
    remap = {old: new for new, old in enumerate(keep)}
    orders = []
    for oid, items in log_.orders:
        kept = tuple(remap[i] for i in items if i in remap)
        if kept:
            orders.append((oid, kept))
    return TransactionLog(
        orders=orders,
        items=[log_.items[k] for k in keep],
        prices=log_.prices[keep] if keep else np.zeros(0),
        price_conflicts=log_.price_conflicts,
    )


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def set_partitions(items: Sequence[int], k: int) -> Iterator[tuple[tuple[int, ...], ...]]:
    """All partitions of ``items`` into blocks of size at most ``k``."""
    if not items:
        yield ()
        return
    first, rest = items[0], items[1:]
    for size in range(min(k, len(items))):
        for mates in combinations(rest, size):
            block = (first,) + mates
            remaining = [x for x in rest if x not in mates]
            for tail in set_partitions(remaining, k):
                yield (block,) + tail


def augment_to_k(bundles: Sequence[Bundle], k: int, max_size: int = MAX_AUGMENT_SIZE) -> list[Fragment]:
    """Split bundles larger than ``k`` into every partition with blocks of size <= k.

    Partitions of one source share weight ``1/|partitions|`` so each source
    contributes total weight one. Bundles above ``max_size`` are skipped with a
    warning; more than 10% skipped raises :class:`EstimationError`.
    """
    if k < 1:
        raise DomainError("k must be at least 1")
    out: list[Fragment] = []
    rejected = 0
    for src, bundle in enumerate(bundles):
        if len(bundle) <= k:
            out.append(Fragment(src, (bundle,), Fraction(1)))
            continue
        if len(bundle) > max_size:
            rejected += 1
            log.warning("bundle %d of size %d exceeds augmentation limit %d; skipped", src, len(bundle), max_size)
            continue
        parts = list(set_partitions(bundle.items, k))
        w = Fraction(1, len(parts))
        out.extend(Fragment(src, tuple(Bundle(b) for b in p), w) for p in parts)
    if bundles and rejected > MAX_REJECT_FRACTION * len(bundles):
        raise EstimationError(
            f"{rejected} of {len(bundles)} bundles exceed size {max_size}; refusing to continue"
        )
    return out


def log_to_observations(log_: TransactionLog, k: int, max_size: int = MAX_AUGMENT_SIZE) -> list[Observation]:
    """Observations with every product offered, purchases augmented to size <= k."""
    offered = Assortment.full(log_.n_items)
    obs: list[Observation] = []
    for frag in augment_to_k(log_.bundles(), k, max_size):
        obs.extend(frag.observations(offered))
    return obs


def train_test_split(log_: TransactionLog, test_fraction: float = 0.2, seed: int = 0):
    """Seeded uniform split of orders; returns (train, test) logs sharing the item map."""
    if not (0.0 <= test_fraction < 1.0):
        raise DomainError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(log_.orders))
    n_test = int(round(test_fraction * len(log_.orders)))
    test_idx = set(perm[:n_test].tolist())
    train = [o for k, o in enumerate(log_.orders) if k not in test_idx]
    test = [o for k, o in enumerate(log_.orders) if k in test_idx]
    mk = lambda orders: TransactionLog(orders, list(log_.items), log_.prices.copy(), log_.price_conflicts)
    return mk(train), mk(test)


# ---------------------------------------------------------------------------
# Calibration and counting
# ---------------------------------------------------------------------------


def calibrate_v0(params: ModelParams, no_purchase_prob: float = DEFAULT_NO_PURCHASE) -> ModelParams:
    """Set v0 so the no-purchase probability with every product offered equals ``p``."""
    p = float(no_purchase_prob)
    if not (0.0 < p < 1.0):
        raise DomainError("no_purchase_prob must lie in (0, 1)")
    total = math.fsum(params.v_item) + math.fsum(params.v_pair.values())
    if total <= 0:
        raise DomainError("cannot calibrate v0: every bundle weight is zero")
    return params.with_v0(p / (1.0 - p) * total)


def _check_bundle(b: Bundle, k: int, n: int):
    if len(b) > k:
        raise EstimationError(f"purchased bundle {b.items} has size {len(b)} > k={k}")
    if b.items and b.items[-1] >= n:
        raise EstimationError(f"purchased bundle {b.items} references unknown product")


def estimate_counting(
    observations: Sequence[Observation],
    revenue,
    no_purchase_prob: float = DEFAULT_NO_PURCHASE,
) -> ModelParams:
    """Closed-form weights for data sharing one offered set (K = 2).

    With no-purchase observations, weights are count ratios against the
    no-purchase count and v0 = 1. Otherwise weights are relative frequencies
    and v0 comes from :func:`calibrate_v0`.
    """
    if not observations:
        raise EstimationError("no observations to estimate from")
    revenue = np.asarray(revenue, dtype=float)
    n = len(revenue)
    offered = observations[0].offered
    counts: dict[Bundle, float] = defaultdict(float)
    for ob in observations:
        if ob.offered != offered:
            raise DomainError("counting estimator needs a single fixed offered set")
        _check_bundle(ob.purchased, 2, n)
        counts[ob.purchased] += ob.weight
    v_item = np.zeros(n)
    pairs = {}
    base = counts.get(NO_PURCHASE, 0.0)
    denom = base if base > 0 else math.fsum(counts.values())
    for b, c in counts.items():
        if len(b) == 1:
            v_item[b.items[0]] = c / denom
        elif len(b) == 2:
            pairs[b.items] = c / denom
    params = ModelParams(1.0, v_item, revenue, pairs)
    return params if base > 0 else calibrate_v0(params, no_purchase_prob)


# ---------------------------------------------------------------------------
# Maximum likelihood
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MLEConfig:
    tol: float = 1e-6
    max_iters: int = 20_000
    seed: int = 0
    batch_size: int | None = None
    learning_rate: float = 0.5


@dataclass(frozen=True)
class MLEResult:
    params: NaturalParams
    v0: float
    loglik: float
    grad_norm: float
    iterations: int
    converged: bool
    observed_no_purchase: bool

    def weights(self, revenue, no_purchase_prob: float = DEFAULT_NO_PURCHASE) -> ModelParams:
        """Weight-space model; v0 is calibrated when no-purchase was never observed."""
        if self.observed_no_purchase:
            return from_natural(self.params, self.v0, revenue)
        return calibrate_v0(from_natural(self.params, 1.0, revenue), no_purchase_prob)


class _Likelihood:
    """Mean weighted log-likelihood in natural parameters, grouped by offered set."""

    def __init__(self, observations: Sequence[Observation], n: int, k: int):
        if not observations:
            raise EstimationError("no observations to estimate from")
        if k not in (1, 2):
            raise DomainError("MLE supports k in {1, 2}")
        offered_ids: dict[Assortment, int] = {}
        purchase_w: dict[Bundle, float] = defaultdict(float)
        offered_w: list[float] = []
        rows: list[int] = []
        wts: list[float] = []
        for ob in observations:
            _check_bundle(ob.purchased, k, n)
            if not ob.purchased.as_assortment() <= ob.offered:
                raise EstimationError(f"purchased bundle {ob.purchased.items} was not offered")
            g = offered_ids.setdefault(ob.offered, len(offered_ids))
            if g == len(offered_w):
                offered_w.append(0.0)
            offered_w[g] += ob.weight
            purchase_w[ob.purchased] += ob.weight
            rows.append(g)
            wts.append(ob.weight)
        self.total = math.fsum(wts)
        self.n = n
        self.k = k
        self.v0 = 1.0 if purchase_w.get(NO_PURCHASE, 0.0) > 0 else 0.0
        items = sorted({i for b in purchase_w for i in b.items})
        pairs = sorted(b.items for b in purchase_w if len(b) == 2)
        self.items = np.array(items, dtype=np.int64)
        self.pairs = pairs
        self.pi = np.array([p[0] for p in pairs], dtype=np.int64)
        self.pj = np.array([p[1] for p in pairs], dtype=np.int64)
        item_pos = {i: a for a, i in enumerate(items)}
        pair_pos = {p: a for a, p in enumerate(pairs)}
        self.n_alpha = len(items)
        self.dim = len(items) + len(pairs)
        masks = np.zeros((len(offered_ids), n))
        for o, g in offered_ids.items():
            masks[g, list(o)] = 1.0
        self.masks_items = masks[:, self.items]
        self.masks_pairs = masks[:, self.pi] * masks[:, self.pj]
        self.offered_w = np.array(offered_w)
        # sufficient statistics: weighted purchase counts per parameter
        emp = np.zeros(self.dim)
        for b, w in purchase_w.items():
            for i in b.items:
                emp[item_pos[i]] += w
            if len(b) == 2:
                a = pair_pos[b.items]
                emp[self.n_alpha + a] += w
        self.emp = emp
        self.purchase_w = dict(purchase_w)
        self.item_pos = item_pos
        self.pair_pos = pair_pos
        if self.v0 == 0.0 and np.any(self.masks_items.sum(axis=1) == 0):
            raise EstimationError("an offered set contains no purchasable product and no-purchase is unobserved")
        # per-observation data for mini-batches
        self._rows = np.array(rows, dtype=np.int64)
        self._wts = np.array(wts)
        self._obs = observations

    def _pieces(self, theta):
        alpha = theta[: self.n_alpha]
        beta = theta[self.n_alpha :]
        v1 = np.exp(alpha)
        ai = self.pi
        pos_i = np.array([self.item_pos[i] for i in ai], dtype=np.int64)
        pos_j = np.array([self.item_pos[j] for j in self.pj], dtype=np.int64)
        log_v2 = alpha[pos_i] + alpha[pos_j] + beta if len(beta) else np.zeros(0)
        v2 = np.exp(log_v2)
        z = self.v0 + self.masks_items @ v1 + self.masks_pairs @ v2
        return v1, v2, z, pos_i, pos_j

    def value_grad(self, theta, group_w=None, emp=None, total=None):
        group_w = self.offered_w if group_w is None else group_w
        emp = self.emp if emp is None else emp
        total = self.total if total is None else total
        v1, v2, z, pos_i, pos_j = self._pieces(theta)
        if np.any(z <= 0) or not np.all(np.isfinite(z)):
            raise EstimationError("likelihood is not finite at the current parameters")
        value = (float(emp @ theta) - float(group_w @ np.log(z))) / total
        scale = group_w / z
        g_items = (scale @ self.masks_items) * v1
        g_pairs = (scale @ self.masks_pairs) * v2
        expected = np.empty(self.dim)
        expected[: self.n_alpha] = g_items
        if len(v2):
            np.add.at(expected[: self.n_alpha], pos_i, g_pairs)
            np.add.at(expected[: self.n_alpha], pos_j, g_pairs)
            expected[self.n_alpha :] = g_pairs
        grad = (emp - expected) / total
        return value, grad

    def batch_stats(self, idx):
        group_w = np.bincount(self._rows[idx], weights=self._wts[idx], minlength=len(self.offered_w))
        emp = np.zeros(self.dim)
        for t in idx:
            ob = self._obs[t]
            for i in ob.purchased.items:
                emp[self.item_pos[i]] += ob.weight
            if len(ob.purchased) == 2:
                emp[self.n_alpha + self.pair_pos[ob.purchased.items]] += ob.weight
        return group_w, emp, float(self._wts[idx].sum())

    def to_natural(self, theta) -> NaturalParams:
        alpha = np.full(self.n, -np.inf)
        alpha[self.items] = theta[: self.n_alpha]
        beta = {p: float(b) for p, b in zip(self.pairs, theta[self.n_alpha :])}
        return NaturalParams(alpha, beta)


def estimate_mle(
    observations: Sequence[Observation],
    n: int,
    k: int = 2,
    config: MLEConfig | None = None,
) -> MLEResult:
    """Maximize the weighted log-likelihood by gradient ascent.

    Full-batch mode uses Barzilai-Borwein steps safeguarded by Armijo
    backtracking and stops when the gradient infinity-norm drops below
    ``config.tol``. Items never purchased get ``alpha = -inf`` and pairs
    never purchased together stay absent. When no observation is a
    no-purchase, the conditional likelihood (v0 = 0) is fitted and v0 is
    left to calibration.
    """
    config = config or MLEConfig()
    lik = _Likelihood(observations, n, k)
    theta = np.zeros(lik.dim)
    if lik.dim == 0:
        value = 0.0 if lik.v0 else -np.inf
        return MLEResult(lik.to_natural(theta), lik.v0, value, 0.0, 0, True, bool(lik.v0))
    if config.batch_size:
        theta = _minibatch(lik, theta, config)
    value, grad = lik.value_grad(theta)
    step = 1.0
    prev = None
    it = 0
    gnorm = float(np.max(np.abs(grad)))
    while gnorm > config.tol and it < config.max_iters:
        if prev is not None:
            s, y = theta - prev[0], grad - prev[1]
            sy = float(s @ y)
            step = abs(float(s @ s) / sy) if sy != 0 else step * 2.0
            step = min(max(step, 1e-10), 1e10)
        # backtracking on sufficient increase
        g2 = float(grad @ grad)
        while True:
            cand = theta + step * grad
            try:
                cval, cgrad = lik.value_grad(cand)
            except (EstimationError, FloatingPointError, OverflowError):
                cval = -np.inf
            if np.isfinite(cval) and cval >= value + 1e-4 * step * g2:
                break
            # near the optimum the value change drops below rounding; fall back to the gradient
            if np.isfinite(cval) and abs(cval - value) <= 1e-13 * (1.0 + abs(value)) \
                    and np.max(np.abs(cgrad)) < gnorm:
                break
            step *= 0.5
            if step < 1e-16:
                break
        if step < 1e-16:
            break
        prev = (theta, grad)
        theta, value, grad = cand, cval, cgrad
        gnorm = float(np.max(np.abs(grad)))
        it += 1
    converged = gnorm <= config.tol
    if not np.isfinite(value):
        raise EstimationError("likelihood is not finite at the fitted parameters")
    return MLEResult(lik.to_natural(theta), lik.v0, value, gnorm, it, converged, bool(lik.v0))


def _minibatch(lik: _Likelihood, theta, config: MLEConfig):
    rng = np.random.default_rng(config.seed)
    m = len(lik._obs)
    bs = min(config.batch_size, m)
    epochs = max(1, config.max_iters // max(1, m // bs))
    lr = config.learning_rate
    for epoch in range(min(epochs, 50)):
        perm = rng.permutation(m)
        for start in range(0, m, bs):
            idx = perm[start : start + bs]
            gw, emp, tot = lik.batch_stats(idx)
            _, g = lik.value_grad(theta, gw, emp, tot)
            theta = theta + lr / (1.0 + epoch) * g
    return theta


def log_likelihood(params: ModelParams, observations: Iterable[Observation], k_max: int = 2):
    """Weighted log-likelihood over observations of positive probability.

    Returns ``(loglik, n_zero)`` where ``n_zero`` counts observations whose
    bundle has probability zero under ``params`` (excluded from the sum).
    """
    cache: dict[tuple[Assortment, Bundle], float] = {}
    terms = []
    n_zero = 0
    for ob in observations:
        key = (ob.offered, ob.purchased)
        p = cache.get(key)
        if p is None:
            p = cache[key] = choice_probability(params, ob.offered, ob.purchased, k_max)
        if p > 0:
            terms.append(ob.weight * math.log(p))
        else:
            n_zero += 1
    return math.fsum(terms), n_zero


# ---------------------------------------------------------------------------
# Instances
# ---------------------------------------------------------------------------


def subsample_instance(
    params: ModelParams, n_sub: int, seed: int = 0, no_purchase_prob: float = DEFAULT_NO_PURCHASE
) -> ModelParams:
    if not (1 <= n_sub <= params.n):
        raise DomainError(f"n_sub must lie in [1, {params.n}]")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(params.n, size=n_sub, replace=False))
    return calibrate_v0(params.restrict(idx.tolist()), no_purchase_prob)


def _upper_pairs(n: int):
    iu, ju = np.triu_indices(n, k=1)
    return iu, ju


def generate_two_group(spec: SyntheticSpec) -> ModelParams:
    """Two price tiers with weak pairs inside the high tier and strong pairs elsewhere.

    Pair draws are bundle-level quadratic weights theta_ij, so V_ij = 2 theta_ij.
    """
    n = spec.n
    rng = np.random.default_rng(spec.seed)
    revenue = np.sort(rng.beta(2.0, 10.0, size=n))[::-1].copy()
    v_item = rng.beta(1.0, 1.0, size=n)
    iu, ju = _upper_pairs(n)
    n_high = (n + 1) // 2
    high_high = (iu < n_high) & (ju < n_high)
    weak = rng.beta(1.0, 10.0, size=len(iu))
    strong = rng.beta(10.0, 1.0, size=len(iu))
    theta = np.where(high_high, weak, strong)
    pairs = {(int(i), int(j)): float(2.0 * t) for i, j, t in zip(iu, ju, theta) if t > 0}
    return calibrate_v0(ModelParams(1.0, v_item, revenue, pairs), spec.no_purchase_prob)


def generate_uniform(spec: SyntheticSpec, density: float = 1.0) -> ModelParams:
    """Revenues in [1, 10], item weights in [0.1, 1], pair weights in [0, 1]."""
    n = spec.n
    rng = np.random.default_rng(spec.seed)
    revenue = rng.uniform(1.0, 10.0, size=n)
    v_item = rng.uniform(0.1, 1.0, size=n)
    iu, ju = _upper_pairs(n)
    vals = rng.uniform(0.0, 1.0, size=len(iu))
    keep = rng.random(len(iu)) < density
    pairs = {(int(i), int(j)): float(v) for i, j, v, kp in zip(iu, ju, vals, keep) if kp and v > 0}
    return calibrate_v0(ModelParams(1.0, v_item, revenue, pairs), spec.no_purchase_prob)


GENERATORS = {"two_group": generate_two_group, "uniform": generate_uniform}


def generate(spec: SyntheticSpec) -> ModelParams:
    return GENERATORS[spec.generator](spec)


def sample_observations(
    params: ModelParams, offered: Assortment, m: int, seed: int = 0, k_max: int = 2
) -> list[Observation]:
    """Draw ``m`` purchases from the closed-form choice distribution."""
    from .model import choice_distribution

    dist = choice_distribution(params, offered, k_max)
    bundles = list(dist)
    probs = np.array([dist[b] for b in bundles])
    rng = np.random.default_rng(seed)
    draws = rng.choice(len(bundles), size=m, p=probs / probs.sum())
    return [Observation(offered, bundles[d]) for d in draws]
