"""Multi-purchase choice modeling and assortment optimization under BundleMVL-K."""

from .errors import (
    BudgetExceeded,
    BundleError,
    DomainError,
    EstimationError,
    ParseError,
    PreconditionError,
    SizeError,
)
from .model import (
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
    revenue_decomposition,
    save_model,
    to_natural,
)
from .qubo import (
    QuboInstance,
    QuboSolution,
    build_compare_qubo,
    embed_cardinality,
    embed_linear_equality,
    solve_exact,
    solve_heuristic,
)
from .search import (
    SearchConfig,
    SearchTrace,
    binary_search_ao,
    binary_search_ao_efficient,
    constrained_binary_search_ao,
    noisy_binary_search_ao,
)
from .benchmarks import adxopt_l, brute_force_opt, export_mip, mnl_opt, revenue_ordered, theorem4_bound_check

__version__ = "0.1.0"
