import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bundlemvl.benchmarks import brute_force_opt, mnl_opt, revenue_ordered
from bundlemvl.errors import DomainError
from bundlemvl.model import EMPTY, Assortment, ModelParams, expected_revenue_k2
from bundlemvl.search import (
    CompareResult,
    GridPosterior,
    SearchConfig,
    binary_search_ao,
    best_prefix,
    binary_search_ao_efficient,
    constrained_binary_search_ao,
    iteration_bound,
    make_compare,
    noisy_binary_search_ao,
)

from conftest import enumerate_opt, random_params

EXACT = SearchConfig(epsilon=1e-6, compare_mode="exact")


def spy(compare, log):
    def wrapped(kappa, fixed_in=EMPTY, fixed_out=EMPTY):
        res = compare(kappa, fixed_in, fixed_out)
        log.append((kappa, fixed_in, fixed_out, res))
        return res

    return wrapped


# -- config ----------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(DomainError):
        SearchConfig(epsilon=0)
    with pytest.raises(DomainError):
        SearchConfig(noise_p=0.5)
    with pytest.raises(DomainError):
        SearchConfig(compare_mode="fast")


# -- plain bisection ---------------------------------------------------------------


def test_two_product(two_product):
    items, trace = binary_search_ao(two_product, EXACT)
    assert items == Assortment.of([0, 1])
    assert expected_revenue_k2(two_product, items) == pytest.approx(3.6, abs=1e-6)
    assert trace.iterations[0].L == 0.0 and trace.iterations[0].U == 6.0


def test_single_product():
    p = ModelParams(1.0, [1.0], [10.0])
    items, trace = binary_search_ao(p, EXACT)
    assert items == Assortment.of([0])
    assert expected_revenue_k2(p, items) == pytest.approx(5.0, abs=1e-6)
    assert trace.iterations[0].U == 10.0


@pytest.mark.parametrize("seed", range(10))
def test_mnl_instance_matches_linear_solver(seed):
    p = random_params(9, seed).without_pairs()
    items, _ = binary_search_ao(p, EXACT)
    assert expected_revenue_k2(p, items) >= mnl_opt(p)[1] - 1e-6


@pytest.mark.parametrize("seed", range(40))
def test_interval_invariants(seed):
    p = random_params(6 + seed % 7, seed)
    best, _ = enumerate_opt(p)
    items, trace = binary_search_ao(p, EXACT)
    assert expected_revenue_k2(p, items) >= best - 1e-6
    prev_rev = -math.inf
    for it in trace.iterations:
        assert it.L - 1e-12 <= best <= it.U + 1e-12
        assert it.kappa == pytest.approx(0.5 * (it.L + it.U))
        assert it.incumbent_revenue >= prev_rev
        prev_rev = it.incumbent_revenue
    for a, b in zip(trace.iterations, trace.iterations[1:]):
        assert b.U - b.L == pytest.approx(0.5 * (a.U - a.L), rel=1e-9)
    assert len(trace) <= iteration_bound(p, 1e-6) + 1


def test_trace_jsonl(tmp_path, two_product):
    import json

    _, trace = binary_search_ao(two_product, SearchConfig(epsilon=1e-3))
    path = tmp_path / "t.jsonl"
    trace.write_jsonl(path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == len(trace)
    assert set(rows[0]) == {"L", "U", "kappa", "compare", "incumbent", "revenue", "wall_ms"}
    assert rows[-1]["incumbent"] == [0, 1]


# -- efficient variant ---------------------------------------------------------------


def test_high_price_product_forced_in():
    # product 0 is priced above anything achievable, so it must be fixed in
    p = ModelParams(1.0, [0.05, 1.0, 1.0], [100.0, 3.0, 2.0], {(1, 2): 0.5})
    best, _ = enumerate_opt(p)
    assert p.revenue[0] > best
    items, trace = binary_search_ao_efficient(p, EXACT)
    assert 0 in trace.pruned_in and 0 in items
    first = next(k for k, it in enumerate(trace.iterations) if not it.compare_true)
    log = []
    binary_search_ao_efficient(p, EXACT, spy(make_compare(p, EXACT), log))
    assert all(0 in fin for _, fin, _, _ in log[first + 1:])


def test_cheap_product_never_in_qubo():
    p = ModelParams(0.1, [1.0, 1.0, 1.0], [10.0, 9.0, 0.1], {(0, 1): 100.0})
    _, rev, _ = best_prefix(p)
    assert p.revenue[2] + p.revenue[0] < rev
    log = []
    items, trace = binary_search_ao_efficient(p, EXACT, spy(make_compare(p, EXACT), log))
    assert log and all(2 in fout for _, _, fout, _ in log)
    assert 2 in trace.pruned_out and 2 not in items


@pytest.mark.parametrize("seed", range(50))
def test_efficient_agrees_with_plain_12(seed):
    p = random_params(12, seed)
    a, ta = binary_search_ao(p, EXACT)
    b, tb = binary_search_ao_efficient(p, EXACT)
    assert expected_revenue_k2(p, b) == pytest.approx(expected_revenue_k2(p, a), abs=1e-6)
    assert max((it.n_vars for it in tb.iterations), default=0) <= max(it.n_vars for it in ta.iterations)


@pytest.mark.parametrize("seed", range(60))
def test_pruning_soundness(seed):
    p = random_params(6 + seed % 7, 1000 + seed, generator="two_group" if seed % 2 else None)
    best, optima = enumerate_opt(p)
    items, trace = binary_search_ao_efficient(p, EXACT)
    assert expected_revenue_k2(p, items) >= best - 1e-6
    assert trace.pruned_in <= items
    assert not (trace.pruned_out & items)
    assert any(set(trace.pruned_in) <= set(c) for c in optima)
    smallest = min(len(c) for c in optima)
    for c in optima:
        if len(c) == smallest:
            assert not set(trace.pruned_out) & set(c)
    revs = [it.incumbent_revenue for it in trace.iterations]
    assert revs == sorted(revs)


def test_efficient_lower_bound_start():
    for seed in range(30):
        p = random_params(10, seed)
        best, _ = enumerate_opt(p)
        _, trace = binary_search_ao_efficient(p, EXACT)
        if trace.iterations:
            first = trace.iterations[0]
            assert first.L >= revenue_ordered(p)[1] - 1e-12
            assert first.L <= best + 1e-12 <= first.U + 2e-12


# -- constrained --------------------------------------------------------------------


def test_cap_one_closed_form():
    for seed in range(10):
        p = random_params(8, seed)
        items, _ = constrained_binary_search_ao(p, EXACT, 1)
        single = p.revenue * p.v_item / (p.v0 + p.v_item)
        assert len(items) == 1
        assert expected_revenue_k2(p, items) == pytest.approx(single.max(), abs=1e-6)


def test_cap_n_is_unconstrained():
    p = random_params(8, 3)
    a, _ = constrained_binary_search_ao(p, EXACT, 8)
    b, _ = binary_search_ao(p, EXACT)
    assert expected_revenue_k2(p, a) == pytest.approx(expected_revenue_k2(p, b), abs=1e-6)


@pytest.mark.parametrize("seed", range(15))
def test_cap_three_matches_enumeration(seed):
    p = random_params(10, seed)
    best, _ = enumerate_opt(p, cap=3)
    items, _ = constrained_binary_search_ao(p, EXACT, 3)
    assert len(items) <= 3
    assert expected_revenue_k2(p, items) >= best - 1e-6


def test_constrained_rejects_zero_cap(two_product):
    with pytest.raises(DomainError):
        constrained_binary_search_ao(two_product, EXACT, 0)


def test_constrained_heuristic_mode_respects_cap():
    p = random_params(40, 2, density=0.2)
    cfg = SearchConfig(epsilon=1e-3, compare_mode="heuristic_portfolio", deadline_ms=50)
    items, _ = constrained_binary_search_ao(p, cfg, 4)
    assert len(items) <= 4


# -- noisy ----------------------------------------------------------------------------


def test_posterior_mass_normalized():
    post = GridPosterior(0.0, 10.0, 64)
    rng = np.random.default_rng(0)
    for _ in range(200):
        post.update(float(rng.uniform(0, 10)), bool(rng.random() < 0.5), 0.2)
        assert post.mass.sum() == pytest.approx(1.0, abs=1e-12)
        post.truncate_below(float(rng.uniform(0, 2)))
        assert post.mass.sum() == pytest.approx(1.0, abs=1e-12)
        post.maybe_zoom()
        assert post.mass.sum() == pytest.approx(1.0, abs=1e-12)


def test_posterior_credible_clipped_at_floor():
    post = GridPosterior(0.0, 1.0, 100)
    post.truncate_below(0.55)
    lo, hi = post.credible(0.95)
    assert lo == 0.55 and hi > lo


@pytest.mark.parametrize("seed", range(10))
def test_noisy_with_exact_compares(seed):
    p = random_params(10, seed)
    best, _ = enumerate_opt(p)
    cfg = SearchConfig(epsilon=1e-6, compare_mode="exact", noisy=True)
    items, trace = noisy_binary_search_ao(p, cfg)
    assert expected_revenue_k2(p, items) >= best - 1e-6
    assert trace.L - 1e-9 <= best <= trace.U + 1e-9
    assert trace.U - trace.L < 1e-6
    assert len(trace) <= 3 * iteration_bound(p, 1e-6)
    revs = [it.incumbent_revenue for it in trace.iterations]
    assert revs == sorted(revs)


def test_noisy_survives_one_wrong_answer():
    cfg = SearchConfig(epsilon=1e-6, compare_mode="exact", noisy=True)
    contained = 0
    for seed in range(100):
        p = random_params(10, 500 + seed)
        best, _ = enumerate_opt(p)
        honest = make_compare(p, cfg)
        calls = [0]

        def liar(kappa, fin=EMPTY, fout=EMPTY):
            res = honest(kappa, fin, fout)
            calls[0] += 1
            if calls[0] == 1:
                if res.outcome:
                    return CompareResult(False, EMPTY, 0.0, res.n_vars, res.solver)
                return CompareResult(True, res.witness, res.witness_revenue, res.n_vars, res.solver)
            return res

        _, trace = noisy_binary_search_ao(p, cfg, liar)
        contained += trace.L - 1e-9 <= best <= trace.U + 1e-9
    assert contained >= 95


def test_noisy_default_portfolio_mode():
    p = random_params(30, 1, density=0.3)
    items, trace = noisy_binary_search_ao(p, SearchConfig(epsilon=1e-4, compare_mode="heuristic_portfolio",
                                                          noisy=True, deadline_ms=50))
    assert expected_revenue_k2(p, items) >= revenue_ordered(p)[1] - 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 9))
def test_search_is_epsilon_optimal(seed, n):
    p = random_params(n, seed)
    best = brute_force_opt(p)[1]
    for fn in (binary_search_ao, binary_search_ao_efficient):
        items, _ = fn(p, EXACT)
        assert expected_revenue_k2(p, items) >= best - 1e-6
