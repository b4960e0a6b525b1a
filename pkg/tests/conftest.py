import itertools
import math

import numpy as np
import pytest

from bundlemvl.data import SyntheticSpec, generate
from bundlemvl.model import Assortment, ModelParams


@pytest.fixture
def two_product():
    return ModelParams(1.0, [1.0, 1.0], [4.0, 2.0], {(0, 1): 2.0})


def random_params(n, seed, density=0.6, generator=None):
    """Random instance with sparse-ish pairs; optionally routed through a named generator."""
    if generator is not None:
        return generate(SyntheticSpec(n, seed, generator))
    rng = np.random.default_rng(seed)
    r = rng.uniform(1.0, 10.0, size=n)
    v = rng.uniform(0.05, 1.0, size=n)
    pairs = {}
    for i, j in itertools.combinations(range(n), 2):
        if rng.random() < density:
            pairs[(i, j)] = float(rng.uniform(0.0, 1.5))
    return ModelParams(float(rng.uniform(0.3, 3.0)), v, r, pairs)


def revenue_by_hand(params, items):
    """R_2 straight from the definition, pair by pair."""
    items = sorted(items)
    num = math.fsum(params.revenue[i] * params.v_item[i] for i in items)
    den = params.v0 + math.fsum(params.v_item[i] for i in items)
    for i, j in itertools.combinations(items, 2):
        w = params.pair_weight(i, j)
        num += (params.revenue[i] + params.revenue[j]) * w
        den += w
    return num / den if items else 0.0


def enumerate_opt(params, cap=None):
    """Independent oracle: best revenue and every subset attaining it (within 1e-12 relative)."""
    n = params.n
    cap = n if cap is None else cap
    scores = [(0.0, ())]
    for size in range(1, cap + 1):
        for combo in itertools.combinations(range(n), size):
            scores.append((revenue_by_hand(params, combo), combo))
    best = max(s for s, _ in scores)
    tol = 1e-12 * max(1.0, best)
    return best, [c for s, c in scores if s >= best - tol]


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record one pass/fail line per acceptance criterion, then assert."""

    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
