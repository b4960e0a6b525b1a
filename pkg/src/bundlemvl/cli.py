"""Command-line entry point: ``bundlemvl <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import data as D
from .benchmarks import BRUTE_FORCE_LIMIT, export_mip
from .errors import (
    BudgetExceeded,
    BundleError,
    DomainError,
    EstimationError,
    ParseError,
    PreconditionError,
    SizeError,
)
from .model import Assortment, load_model, save_model
from .qubo import build_compare_qubo, dump_qubo, embed_cardinality
from .report import (
    ALGORITHMS,
    RunOptions,
    records_jsonl,
    run_algorithm,
    run_benchmark,
    run_mnl_gap,
    summarize,
    summary_csv,
    summary_table,
)

log = logging.getLogger("bundlemvl")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.cause = exc


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (BundleError, OSError, ValueError) as exc:
        raise StageError(name, exc) from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _emit(text: str, path: str | None):
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_estimate(args) -> int:
    txlog = _stage("ingest", D.ingest_csv, args.csv)
    txlog = _stage("filter", D.filter_infrequent, txlog, args.min_support)
    if txlog.n_items == 0:
        raise StageError("filter", EstimationError("no products survive the support filter"))
    train, test = D.train_test_split(txlog, args.test_fraction, args.seed)
    config = D.MLEConfig(tol=args.tol, max_iters=args.max_iters, seed=args.seed)

    def fit(part):
        obs = _stage("augment", D.log_to_observations, part, args.k)
        if not obs:
            raise StageError("estimate", EstimationError("no observations to estimate from"))
        # transaction data offers every product, so counting is the closed-form MLE
        if args.estimator in ("auto", "counting"):
            return _stage("estimate", D.estimate_counting, obs, part.prices, args.no_purchase_prob), obs
        res = _stage("estimate", D.estimate_mle, obs, part.n_items, args.k, config)
        if not res.converged:
            log.warning("MLE stopped after %d iterations with gradient norm %.3g", res.iterations, res.grad_norm)
        return _stage("calibrate", res.weights, part.prices, args.no_purchase_prob), obs

    train_model, train_obs = fit(train)
    summary = {"n_items": txlog.n_items, "n_orders": len(txlog), "k": args.k}
    tr_ll, tr_zero = D.log_likelihood(train_model, train_obs, args.k)
    summary.update(train_orders=len(train), train_loglik=tr_ll)
    if len(test):
        test_obs = _stage("augment", D.log_to_observations, test, args.k)
        te_ll, te_zero = D.log_likelihood(train_model, test_obs, args.k)
        summary.update(test_orders=len(test), test_loglik=te_ll, test_zero_probability=te_zero)
    model, _ = fit(txlog)
    _stage("write", save_model, model, args.output, txlog.items)
    summary["output"] = str(args.output)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _options(args, cap=None) -> RunOptions:
    return RunOptions(
        epsilon=args.epsilon, cap=cap, deadline_ms=args.time_limit_ms,
        compare_mode={"heuristic": "heuristic_portfolio"}.get(args.compare_mode, args.compare_mode),
        inner_threads=args.threads,
    )


def cmd_optimize(args) -> int:
    params = _stage("load", load_model, args.model)
    cap = args.capacity
    if cap is not None and cap < 1:
        raise UsageError("--capacity must be at least 1")
    if args.algorithm == "bsao-eff" and cap is not None:
        raise UsageError(
            "bsao-eff relies on structure of the unconstrained optimum, which does not hold under a "
            "capacity; use --algorithm bsao or noisy-bsao with --capacity"
        )
    if args.algorithm == "brute" and params.n > BRUTE_FORCE_LIMIT and cap is None:
        raise StageError("optimize", SizeError(f"brute force supports n <= {BRUTE_FORCE_LIMIT}, model has {params.n}"))
    if args.algorithm == "mnl" and cap is not None:
        raise UsageError("--algorithm mnl does not take --capacity")
    opts = _options(args, cap)
    items, rev, wall, extra = _stage("optimize", run_algorithm, args.algorithm, params, opts, args.seed,
                                     keep_trace=bool(args.trace))
    trace_path = None
    if args.trace and "trace" in extra:
        extra.pop("trace").write_jsonl(args.trace)
        trace_path = str(args.trace)
    out = {"algorithm": args.algorithm, "assortment": list(items.indices()), "revenue": rev, "wall_ms": wall}
    out.update({k: v for k, v in extra.items() if k in ("iterations", "truncated", "cap")})
    if trace_path:
        out["trace_path"] = trace_path
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def _write_report(records, args):
    rows = summarize(records)
    _emit(records_jsonl(records), args.output)
    if args.csv:
        Path(args.csv).write_text(summary_csv(rows), encoding="utf-8")
    if not args.quiet:
        stream = sys.stderr if not args.output else sys.stdout
        print(summary_table(rows), file=stream)


def _source_model(args):
    return _stage("load", load_model, args.model) if getattr(args, "model", None) else None


def cmd_benchmark(args) -> int:
    algorithms = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    bad = [a for a in algorithms if a not in ALGORITHMS]
    if bad:
        raise UsageError(f"unknown algorithm(s) {', '.join(bad)}; choose from {', '.join(ALGORITHMS)}")
    if args.cap is not None and "bsao-eff" in algorithms:
        raise UsageError("bsao-eff cannot run with --cap; its pruning assumes the unconstrained problem")
    model = _source_model(args)
    records = _stage(
        "benchmark", run_benchmark, args.n_list, args.runs, algorithms, args.generator, model,
        _options(args, args.cap), args.seed, args.threads,
    )
    _write_report(records, args)
    return EXIT_OK


def cmd_mnl_gap(args) -> int:
    model = _source_model(args)
    if model is not None and not model.v_pair:
        log.info("model has no pair weights; the gap is identically zero")
    records = _stage(
        "mnl-gap", run_mnl_gap, args.n_list, args.runs, args.generator, model,
        _options(args), args.seed, args.threads,
    )
    _write_report(records, args)
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = _stage("synth", D.SyntheticSpec, args.n, args.seed, args.generator, args.no_purchase_prob)
    params = D.generate(spec)
    _stage("write", save_model, params, args.output)
    return EXIT_OK


def cmd_export_mip(args) -> int:
    params = _stage("load", load_model, args.model)
    _stage("write", export_mip, params, args.output, args.capacity)
    return EXIT_OK


def cmd_export_qubo(args) -> int:
    params = _stage("load", load_model, args.model)
    if args.kappa < 0:
        raise UsageError("--kappa must be nonnegative")
    qubo = build_compare_qubo(params, args.kappa)
    if args.capacity is not None:
        qubo = embed_cardinality(qubo, args.capacity)
    _stage("write", dump_qubo, qubo, args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _env_threads() -> int:
    raw = os.environ.get("BUNDLE_OPT_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


def _global_options(p: argparse.ArgumentParser, suppress: bool):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=default(0), help="base random seed (default 0)")
    p.add_argument("--threads", type=int, default=default(None),
                   help="worker threads (default: $BUNDLE_OPT_THREADS or 1)")
    p.add_argument("--quiet", action="store_true", default=default(False), help="suppress logs and tables")


def _search_options(p):
    p.add_argument("--epsilon", type=float, default=1e-4, help="absolute revenue tolerance")
    p.add_argument("--time-limit-ms", type=float, default=250.0, help="heuristic deadline per compare step")
    p.add_argument("--compare-mode", choices=("auto", "exact", "heuristic"), default="auto")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bundlemvl", description="Multi-purchase assortment optimization")
    _global_options(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="fit a model from a transactions CSV")
    _global_options(p, True)
    p.add_argument("csv")
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--k", type=int, choices=(1, 2), default=2)
    p.add_argument("--min-support", type=int, default=D.DEFAULT_MIN_SUPPORT)
    p.add_argument("--no-purchase-prob", type=float, default=D.DEFAULT_NO_PURCHASE)
    p.add_argument("--estimator", choices=("auto", "counting", "mle"), default="auto")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=20_000)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("optimize", help="choose a revenue-maximizing assortment")
    _global_options(p, True)
    p.add_argument("model")
    p.add_argument("--algorithm", choices=ALGORITHMS, default="bsao-eff")
    p.add_argument("--capacity", type=int)
    p.add_argument("--trace", help="write the search trace as JSON lines")
    _search_options(p)
    p.set_defaults(func=cmd_optimize)

    for name, func, helptext in (
        ("benchmark", cmd_benchmark, "compare algorithms on synthetic or subsampled instances"),
        ("mnl-gap", cmd_mnl_gap, "revenue lost by ignoring multi-purchases"),
    ):
        p = sub.add_parser(name, help=helptext)
        _global_options(p, True)
        p.add_argument("--n-list", type=_int_list, default=[8])
        p.add_argument("--runs", type=int, default=10)
        p.add_argument("--generator", choices=sorted(D.GENERATORS), default="two_group")
        p.add_argument("--model", help="subsample instances from this model instead of generating")
        p.add_argument("--output", "-o", help="JSON-lines report (default stdout)")
        p.add_argument("--csv", help="plot-ready summary CSV")
        _search_options(p)
        if name == "benchmark":
            p.add_argument("--algorithms", default="brute,revord,bsao-eff")
            p.add_argument("--cap", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("synth", help="write a synthetic model")
    _global_options(p, True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--generator", choices=sorted(D.GENERATORS), default="two_group")
    p.add_argument("--no-purchase-prob", type=float, default=D.DEFAULT_NO_PURCHASE)
    p.add_argument("--output", "-o", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-mip", help="write the MIP formulation in LP format")
    _global_options(p, True)
    p.add_argument("model")
    p.add_argument("--capacity", type=int)
    p.add_argument("--output", "-o", required=True)
    p.set_defaults(func=cmd_export_mip)

    p = sub.add_parser("export-qubo", help="write a compare-step QUBO")
    _global_options(p, True)
    p.add_argument("model")
    p.add_argument("--kappa", type=float, required=True)
    p.add_argument("--capacity", type=int)
    p.add_argument("--output", "-o", required=True)
    p.set_defaults(func=cmd_export_qubo)
    return parser


USAGE_ERRORS = (ParseError, DomainError, PreconditionError, SizeError, OSError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if args.threads is None:
        args.threads = _env_threads()
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.cause
        if isinstance(cause, (EstimationError, BudgetExceeded)):
            return EXIT_FAILURE
        return EXIT_USAGE if isinstance(cause, USAGE_ERRORS) else EXIT_FAILURE
    except BundleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, USAGE_ERRORS) else EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
