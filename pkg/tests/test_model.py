import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bundlemvl.errors import DomainError, ParseError, SizeError
from bundlemvl.model import (
    ABSENT_PAIR,
    EMPTY,
    NO_PURCHASE,
    Assortment,
    Bundle,
    ModelParams,
    NaturalParams,
    bundle_weight,
    choice_distribution,
    choice_probability,
    expected_revenue_k,
    expected_revenue_k2,
    from_natural,
    load_model,
    mnl_revenue,
    model_from_dict,
    prefix_revenues,
    revenue_decomposition,
    revenue_terms_k2,
    save_model,
    to_natural,
)

from conftest import random_params, revenue_by_hand


# -- types -------------------------------------------------------------------


def test_assortment_set_semantics():
    a = Assortment.of([0, 3, 5])
    assert 3 in a and 4 not in a
    assert len(a) == 3
    assert list(a) == [0, 3, 5]
    assert a.add(4).remove(0) == Assortment.of([3, 4, 5])
    assert (a | Assortment.of([1])) - a == Assortment.of([1])
    assert Assortment.of([3]) <= a
    assert a == Assortment.of([5, 3, 0])


def test_assortment_rejects_negative():
    with pytest.raises(DomainError):
        Assortment.of([-1])


def test_bundle_must_be_strictly_increasing():
    with pytest.raises(DomainError):
        Bundle((2, 1))
    with pytest.raises(DomainError):
        Bundle((1, 1))
    assert len(NO_PURCHASE) == 0


def test_params_invariants():
    with pytest.raises(DomainError):
        ModelParams(0.0, [1.0], [1.0])
    with pytest.raises(DomainError):
        ModelParams(1.0, [1.0], [0.0])
    with pytest.raises(DomainError):
        ModelParams(1.0, [-1.0], [1.0])
    with pytest.raises(DomainError):
        ModelParams(1.0, [1, 1], [1, 1], {(0, 1): 1.0, (1, 0): 2.0})
    p = ModelParams(1.0, [1, 1], [1, 1], {(1, 0): 2.0})
    assert dict(p.v_pair) == {(0, 1): 2.0}


def test_item_order_breaks_ties_by_index():
    p = ModelParams(1.0, [1] * 4, [2.0, 5.0, 2.0, 5.0])
    assert p.item_order.tolist() == [1, 3, 0, 2]


# -- bundle weights and probabilities -------------------------------------------


def test_bundle_weight_examples():
    p = ModelParams(1.0, [2.0, 1.0], [1.0, 1.0])
    assert bundle_weight(p, Bundle((0,))) == 2.0
    assert bundle_weight(p, Bundle((0, 1))) == 0.0
    nat = NaturalParams([1.0, 2.0], {(0, 1): 0.5})
    q = from_natural(nat, 1.0, [1.0, 1.0])
    assert bundle_weight(q, Bundle((0, 1))) == pytest.approx(math.exp(3.5), rel=1e-14)
    with pytest.raises(DomainError):
        bundle_weight(p, Bundle((2,)))


def test_bundle_weight_no_purchase_is_v0():
    p = ModelParams(1.7, [1.0], [1.0])
    assert bundle_weight(p, NO_PURCHASE) == 1.7


def test_triple_weight_is_log_linear():
    rng = np.random.default_rng(3)
    alpha = rng.normal(size=4)
    beta = {(i, j): float(rng.normal()) for i, j in itertools.combinations(range(4), 2)}
    p = from_natural(NaturalParams(alpha, beta), 1.0, np.ones(4))
    for combo in itertools.combinations(range(4), 3):
        want = math.exp(sum(alpha[i] for i in combo) + sum(beta[pr] for pr in itertools.combinations(combo, 2)))
        assert bundle_weight(p, Bundle(combo)) == pytest.approx(want, rel=1e-12)


def test_choice_probability_examples():
    p = ModelParams(1.0, [1.0], [1.0])
    assert choice_probability(p, Assortment.of([0]), Bundle((0,)), 1) == 0.5
    q = ModelParams(1.0, [1.0, 1.0], [1.0, 1.0], {(0, 1): 1.0})
    assert choice_probability(q, Assortment.of([0, 1]), NO_PURCHASE, 2) == 0.25
    with pytest.raises(DomainError):
        choice_probability(q, Assortment.of([0]), Bundle((1,)), 2)


@pytest.mark.parametrize("k_max", [1, 2, 3])
@pytest.mark.parametrize("seed", range(10))
def test_probabilities_normalize(seed, k_max):
    p = random_params(6, seed)
    offered = Assortment.of(np.flatnonzero(np.random.default_rng(seed).random(6) < 0.7).tolist())
    dist = choice_distribution(p, offered, k_max)
    assert math.fsum(dist.values()) == pytest.approx(1.0, abs=1e-9)
    for b, pr in dist.items():
        assert pr == pytest.approx(choice_probability(p, offered, b, k_max), rel=1e-12)


# -- revenue -------------------------------------------------------------------


def test_revenue_examples(two_product):
    assert expected_revenue_k2(two_product, EMPTY) == 0.0
    assert expected_revenue_k2(two_product, Assortment.of([0, 1])) == pytest.approx(3.6, abs=1e-15)
    mnl = ModelParams(1.0, [1.0, 1.0], [10.0, 6.0])
    assert expected_revenue_k2(mnl, Assortment.of([0, 1])) == pytest.approx(16 / 3, rel=1e-15)
    assert expected_revenue_k(mnl, Assortment.of([0, 1]), 1) == pytest.approx(16 / 3, rel=1e-15)


def test_revenue_k3_symmetric():
    p = ModelParams(1.0, [1.0] * 3, [1.0] * 3, {(0, 1): 1.0, (0, 2): 1.0, (1, 2): 1.0})
    assert expected_revenue_k(p, Assortment.full(3), 3) == pytest.approx(1.5, rel=1e-15)


def test_revenue_k3_guard():
    p = random_params(30, 0)
    with pytest.raises(SizeError):
        expected_revenue_k(p, Assortment.full(30), 3)


@pytest.mark.parametrize("seed", range(50))
def test_k2_closed_form_matches_enumeration(seed):
    p = random_params(8, seed)
    c = Assortment.of(np.flatnonzero(np.random.default_rng(seed + 99).random(8) < 0.6).tolist())
    assert expected_revenue_k2(p, c) == pytest.approx(expected_revenue_k(p, c, 2), rel=1e-12, abs=1e-15)
    assert expected_revenue_k2(p, c) == pytest.approx(revenue_by_hand(p, c.indices()), rel=1e-12, abs=1e-15)


def test_offered_accepts_masks_and_indices(two_product):
    a = expected_revenue_k2(two_product, np.array([True, True]))
    b = expected_revenue_k2(two_product, [0, 1])
    assert a == b == expected_revenue_k2(two_product, Assortment.full(2))


def test_compensated_path_for_large_n():
    rng = np.random.default_rng(0)
    n = 1200
    pairs = {(int(i), int(i) + 1): 0.5 for i in range(n - 1)}
    p = ModelParams(1.0, rng.uniform(0.1, 1, n), rng.uniform(1, 10, n), pairs)
    c = Assortment.full(n)
    num, den = revenue_terms_k2(p, c)
    r, v = p.revenue, p.v_item
    want_num = math.fsum(list(r * v) + [(r[i] + r[i + 1]) * 0.5 for i in range(n - 1)])
    want_den = math.fsum([1.0] + list(v) + [0.5] * (n - 1))
    assert num == pytest.approx(want_num, rel=1e-13)
    assert den == pytest.approx(want_den, rel=1e-13)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_scale_invariance(seed, c):
    from bundlemvl.benchmarks import brute_force_opt

    p = random_params(7, seed)
    q = p.scaled(c)
    s = Assortment.of([i for i in range(7) if (seed >> i) & 1])
    assert expected_revenue_k2(q, s) == pytest.approx(expected_revenue_k2(p, s), rel=1e-9, abs=1e-12)
    assert brute_force_opt(p)[0] == brute_force_opt(q)[0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_mnl_reduction_exact(seed):
    p = random_params(8, seed).without_pairs()
    for mask in range(1, 256, 17):
        s = Assortment(mask)
        idx = list(s)
        want = float(np.sum(p.revenue[idx] * p.v_item[idx])) / (p.v0 + float(np.sum(p.v_item[idx])))
        assert expected_revenue_k2(p, s) == pytest.approx(want, rel=1e-15)
        assert mnl_revenue(p, s) == pytest.approx(want, rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 7))
def test_denominator_monotone(seed, extra):
    p = random_params(8, seed)
    s = Assortment.of([i for i in range(8) if (seed >> i) & 1 and i != extra])
    _, d0 = revenue_terms_k2(p, s)
    _, d1 = revenue_terms_k2(p, s.add(extra))
    assert d1 >= d0


def test_prefix_revenues_match_direct():
    p = random_params(12, 4)
    revs = prefix_revenues(p)
    for t in range(12):
        s = Assortment.of(p.item_order[: t + 1].tolist())
        assert revs[t] == pytest.approx(expected_revenue_k2(p, s), rel=1e-12)


# -- natural parameters ----------------------------------------------------------


def test_natural_examples():
    e = math.e
    p = ModelParams(1.0, [e, e], [1.0, 1.0], {(0, 1): e**3})
    nat = to_natural(p)
    assert nat.alpha == pytest.approx([1.0, 1.0], abs=1e-15)
    assert nat.beta_of(0, 1) == pytest.approx(1.0, abs=1e-15)
    q = ModelParams(1.0, [e, e], [1.0, 1.0])
    assert to_natural(q).beta_of(0, 1) is ABSENT_PAIR
    with pytest.raises(DomainError):
        to_natural(ModelParams(1.0, [0.0, 1.0], [1.0, 1.0]))


@pytest.mark.parametrize("seed", range(100))
def test_natural_round_trip(seed):
    p = random_params(6, seed)
    q = from_natural(to_natural(p), p.v0, p.revenue)
    assert np.max(np.abs(q.v_item / p.v_item - 1)) < 1e-12
    assert set(q.v_pair) == set(p.v_pair)
    for k, v in p.v_pair.items():
        assert abs(q.v_pair[k] / v - 1) < 1e-12


# -- decomposition -----------------------------------------------------------


def test_decomposition_edge_cases(two_product):
    full = Assortment.full(2)
    alpha, t = revenue_decomposition(two_product, EMPTY, full)
    assert alpha == pytest.approx(1.0 / 5.0)
    assert expected_revenue_k2(two_product, full) == pytest.approx((1 - alpha) * t)
    alpha, t = revenue_decomposition(two_product, full, EMPTY)
    assert alpha == 1.0 and t == 0.0
    with pytest.raises(DomainError):
        revenue_decomposition(two_product, full, Assortment.of([0]))


def test_decomposition_identity_random():
    rng = np.random.default_rng(11)
    for k in range(1000):
        p = random_params(10, k % 50)
        labels = rng.integers(0, 3, size=10)
        c = Assortment.of(np.flatnonzero(labels == 1).tolist())
        cp = Assortment.of(np.flatnonzero(labels == 2).tolist())
        alpha, t = revenue_decomposition(p, c, cp)
        lhs = expected_revenue_k2(p, c | cp)
        assert 0.0 <= alpha <= 1.0
        assert lhs == pytest.approx(alpha * expected_revenue_k2(p, c) + (1 - alpha) * t, abs=1e-9)


# -- model file ----------------------------------------------------------------


def test_model_file_round_trip(tmp_path, two_product):
    path = tmp_path / "m.json"
    save_model(two_product, path, labels=["a", "b"])
    q = load_model(path)
    assert q.v0 == two_product.v0
    assert dict(q.v_pair) == dict(two_product.v_pair)
    assert q.revenue.tolist() == [4.0, 2.0]


def test_model_file_validation(tmp_path):
    base = {"v0": 1, "items": [{"id": 0, "revenue": 1, "v": 1}, {"id": 1, "revenue": 1, "v": 1}]}
    with pytest.raises(ParseError):
        model_from_dict(dict(base, pairs=[{"i": 1, "j": 0, "v": 1}]))
    with pytest.raises(ParseError):
        model_from_dict(dict(base, pairs=[{"i": 0, "j": 1, "v": 1}, {"i": 0, "j": 1, "v": 2}]))
    with pytest.raises(ParseError):
        model_from_dict(dict(base, v0=-1))
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  oops", encoding="utf-8")
    with pytest.raises(ParseError, match="line 2"):
        load_model(bad)
