import itertools
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bundlemvl import _kernels as K
from bundlemvl.errors import DomainError, SizeError
from bundlemvl.model import EMPTY, Assortment, ModelParams
from bundlemvl.qubo import (
    EXACT_LIMIT,
    QuboInstance,
    auto_lambda,
    build_compare_qubo,
    dump_qubo,
    embed_cardinality,
    embed_linear_equality,
    load_qubo,
    solve_exact,
    solve_heuristic,
)

from conftest import enumerate_opt, random_params


def scan(qubo):
    """Exhaustive maximum with the same tie rule as solve_exact."""
    n = qubo.n_vars
    best = None
    for bits in range(1 << n):
        x = np.array([(bits >> k) & 1 for k in range(n)], dtype=np.uint8)
        val = float(x @ qubo.q @ x) + qubo.offset
        key = (-val, bin(bits).count("1"), [k for k in range(n) if (bits >> k) & 1])
        if best is None or val > best[0] + 1e-12 or (abs(val - best[0]) <= 1e-12 and key[1:] < best[1]):
            best = (val, key[1:], bits)
    return best[0], best[2]


def random_qubo(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    return QuboInstance((a + a.T) / 2, offset=float(rng.normal()))


def x_of(bits, n):
    return np.array([(bits >> k) & 1 for k in range(n)], dtype=np.uint8)


# -- instance ------------------------------------------------------------------


def test_rejects_asymmetric():
    with pytest.raises(DomainError):
        QuboInstance(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_compare_example(two_product):
    qb = build_compare_qubo(two_product, 3.0, EMPTY, EMPTY)
    assert qb.evaluate([1, 1]) == pytest.approx(6.0, abs=1e-12)
    assert qb.threshold == 3.0
    assert qb.meets_threshold(qb.evaluate([1, 1]))


def test_kappa_zero_all_ones(two_product):
    qb = build_compare_qubo(two_product, 0.0, EMPTY, EMPTY)
    assert np.all(np.diag(qb.q) > 0)
    sol = solve_exact(qb)
    assert sol.assignment == 0b11
    assert qb.meets_threshold(sol.objective)


def test_fold_example(two_product):
    full = build_compare_qubo(two_product, 3.0, EMPTY, EMPTY)
    folded = build_compare_qubo(two_product, 3.0, Assortment.of([0]), EMPTY)
    assert folded.n_vars == 1
    assert folded.var_map == (1,)
    assert folded.evaluate([1]) == pytest.approx(full.evaluate([1, 1]), abs=1e-12)
    assert folded.products(1) == Assortment.of([0, 1])


def test_builder_errors(two_product):
    with pytest.raises(DomainError):
        build_compare_qubo(two_product, 1.0, Assortment.of([0]), Assortment.of([0]))
    with pytest.raises(DomainError):
        build_compare_qubo(two_product, -1.0, EMPTY, EMPTY)


@pytest.mark.parametrize("seed", range(8))
def test_folding_exhaustive(seed):
    n = 8 + seed % 3
    p = random_params(n, seed)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=n)
    fin = Assortment.of(np.flatnonzero(labels == 1).tolist())
    fout = Assortment.of(np.flatnonzero(labels == 2).tolist())
    kappa = float(rng.uniform(0, p.revenue.max()))
    full = build_compare_qubo(p, kappa, EMPTY, EMPTY)
    folded = build_compare_qubo(p, kappa, fin, fout)
    free = [i for i in range(n) if labels[i] == 0]
    assert list(folded.var_map) == free
    for bits in range(1 << len(free)):
        x = np.zeros(n, dtype=np.uint8)
        x[list(fin.indices())] = 1
        for k, i in enumerate(free):
            x[i] = (bits >> k) & 1
        assert folded.evaluate(x_of(bits, len(free))) == pytest.approx(full.evaluate(x), abs=1e-9)


@pytest.mark.parametrize("seed", range(30))
def test_compare_sign_equals_revenue_test(seed):
    # x'Qx >= kappa v0  <=>  R_2(C) >= kappa for every nonempty C
    p = random_params(6, seed)
    kappa = float(np.random.default_rng(seed).uniform(0, p.revenue.max()))
    from bundlemvl.model import expected_revenue_k2

    qb = build_compare_qubo(p, kappa)
    for bits in range(1, 64):
        c = Assortment(bits)
        lhs = qb.evaluate(x_of(bits, 6)) - qb.threshold
        rhs = expected_revenue_k2(p, c) - kappa
        if abs(rhs) > 1e-9:
            assert np.sign(lhs) == np.sign(rhs)


def test_dump_round_trip(tmp_path):
    qb = random_qubo(7, 1)
    qb = QuboInstance(qb.q, qb.offset, 2.5)
    path = tmp_path / "q.txt"
    dump_qubo(qb, path)
    text = path.read_text().splitlines()
    assert text[0].split()[:2] == ["#", "7"]
    for line in text[1:]:
        i, j, _ = line.split()
        assert int(i) <= int(j)
    back = load_qubo(path)
    assert np.array_equal(back.q, qb.q)
    assert back.offset == qb.offset and back.threshold == 2.5


# -- embedding -----------------------------------------------------------------


def test_linear_equality_penalty_value():
    qb = random_qubo(4, 2)
    d = np.array([[1.0, 2.0, 0.0, -1.0]])
    emb = embed_linear_equality(qb, d, [1.0], lam=-3.0)
    for bits in range(16):
        x = x_of(bits, 4)
        viol = float((d @ x)[0] - 1.0)
        assert emb.evaluate(x) == pytest.approx(qb.evaluate(x) - 3.0 * viol**2, abs=1e-12)
    with pytest.raises(DomainError):
        embed_linear_equality(qb, d, [1.0], lam=1.0)


def test_cardinality_exact_satisfaction_has_zero_penalty():
    qb = random_qubo(5, 3)
    emb = embed_cardinality(qb, 2)
    assert emb.n_vars == 7
    assert emb.var_map[5:] == ("slack:0", "slack:1")
    for bits in range(1 << 7):
        x = x_of(bits, 7)
        if x.sum() == 2:
            assert emb.evaluate(x) == pytest.approx(qb.evaluate(x[:5]), abs=1e-9)


def test_cardinality_vacuous_returns_input():
    qb = random_qubo(4, 0)
    assert embed_cardinality(qb, 4) is qb
    assert embed_cardinality(qb, 9) is qb


def test_auto_lambda():
    qb = random_qubo(4, 5)
    assert auto_lambda(qb) == pytest.approx(-(1 + np.abs(qb.q).sum()))


@pytest.mark.parametrize("cap", [1, 2, 3])
@pytest.mark.parametrize("seed", range(10))
def test_penalty_dominance_exhaustive(seed, cap):
    p = random_params(6, seed)
    kappa = float(np.random.default_rng(seed).uniform(0, p.revenue.max()))
    base = build_compare_qubo(p, kappa)
    emb = embed_cardinality(base, cap)
    n = emb.n_vars
    vals = np.array([emb.evaluate(x_of(b, n)) for b in range(1 << n)])
    top = vals.max()
    for b in np.flatnonzero(vals >= top - 1e-9):
        x = x_of(int(b), n)
        assert x[:6].sum() <= cap
        assert x.sum() == cap
    # the embedded maximum equals the capped maximum of the base objective
    capped = max(base.evaluate(x_of(b, 6)) for b in range(64) if bin(b).count("1") <= cap)
    assert top == pytest.approx(capped, abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_embedded_solve_matches_capped_brute(seed):
    p = random_params(6, seed)
    best, _ = enumerate_opt(p, cap=2)
    kappa = best * 0.999
    emb = embed_cardinality(build_compare_qubo(p, kappa), 2)
    sol = solve_exact(emb)
    assert emb.meets_threshold(sol.objective)
    kappa = best * 1.001 + 1e-9
    emb = embed_cardinality(build_compare_qubo(p, kappa), 2)
    assert not emb.meets_threshold(solve_exact(emb).objective)


# -- exact solver ----------------------------------------------------------------


def test_exact_trivial_signs():
    neg = QuboInstance(-np.ones((5, 5)))
    sol = solve_exact(neg)
    assert sol.assignment == 0 and sol.objective == 0.0
    pos = QuboInstance(np.ones((5, 5)))
    assert solve_exact(pos).assignment == 0b11111


@pytest.mark.parametrize("seed", range(20))
def test_exact_matches_scan_12(seed):
    qb = random_qubo(12, seed)
    val, bits = scan(qb)
    sol = solve_exact(qb)
    assert sol.objective == pytest.approx(val, abs=1e-9)
    assert sol.assignment == bits
    assert sol.objective == pytest.approx(qb.evaluate(sol.x(12)), abs=1e-9)


@pytest.mark.parametrize("n", [23, 26])
def test_branch_and_bound_matches_enumeration(n):
    qb = random_qubo(n, n)
    sol = solve_exact(qb)
    assert sol.solver_tag == "exact:bnb"
    bits, _ = K.enumerate_qubo(np.ascontiguousarray(qb.q), qb.tolerance())
    assert sol.assignment == int(bits)
    assert sol.objective == pytest.approx(qb.evaluate(x_of(int(bits), n)), abs=1e-9)


def test_exact_size_guard():
    with pytest.raises(SizeError):
        solve_exact(QuboInstance(np.eye(EXACT_LIMIT + 1)))


def test_exact_deterministic():
    qb = random_qubo(16, 9)
    assert solve_exact(qb) == solve_exact(qb)


# -- heuristic portfolio ---------------------------------------------------------


def test_heuristic_single_variable():
    sol = solve_heuristic(QuboInstance(np.array([[2.0]])), deadline_ms=50)
    assert sol.assignment == 1 and sol.objective == 2.0


def test_heuristic_matches_exact_12():
    hits = 0
    for seed in range(100):
        p = random_params(12, seed)
        qb = build_compare_qubo(p, float(np.random.default_rng(seed).uniform(0, p.revenue.max())))
        ex = solve_exact(qb)
        he = solve_heuristic(qb, deadline_ms=250, seed=seed)
        assert he.objective <= ex.objective + 1e-9
        hits += he.objective >= ex.objective - 1e-9
    assert hits >= 95


def test_heuristic_objective_consistent():
    qb = random_qubo(30, 4)
    sol = solve_heuristic(qb, deadline_ms=100, seed=1)
    assert sol.objective == pytest.approx(qb.evaluate(sol.x(30)), abs=1e-9)


def test_descent_member_is_one_flip_optimal():
    qb = random_qubo(40, 7)
    sol = solve_heuristic(qb, portfolio=("descent_restart",), deadline_ms=200, seed=3)
    x = sol.x(40)
    base = qb.evaluate(x)
    for k in range(40):
        y = x.copy()
        y[k] ^= 1
        assert qb.evaluate(y) <= base + 1e-9


def test_heuristic_thread_invariance():
    qb = random_qubo(25, 11)
    a = solve_heuristic(qb, deadline_ms=2000, seed=5, threads=1)
    b = solve_heuristic(qb, deadline_ms=2000, seed=5, threads=4)
    assert a.assignment == b.assignment and a.objective == b.objective


def test_heuristic_short_deadline_large_instance():
    p = random_params(500, 0, density=0.02)
    qb = build_compare_qubo(p, float(np.median(p.revenue)))
    solve_heuristic(qb, deadline_ms=1, seed=0)  # warm any lazy paths
    t0 = time.perf_counter()
    sol = solve_heuristic(qb, deadline_ms=1, seed=0)
    assert (time.perf_counter() - t0) * 1e3 < 50
    assert sol.objective >= qb.offset - 1e-12


def test_heuristic_rejects_bad_input():
    qb = random_qubo(3, 0)
    with pytest.raises(DomainError):
        solve_heuristic(qb, deadline_ms=0)
    with pytest.raises(DomainError):
        solve_heuristic(qb, portfolio=("nope",))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 10))
def test_heuristic_never_beats_exact(seed, n):
    qb = random_qubo(n, seed)
    assert solve_heuristic(qb, deadline_ms=50, seed=seed).objective <= solve_exact(qb).objective + 1e-9
