"""Command-line interface: ``lpmt rerank | eval | gen | bench``.

Exit codes: 0 success, 2 input error, 3 a solver hit its iteration limit
(the run is still written and the sidecar report says which).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .core import FeatureSet, PipelineConfig
from .evaluation import evaluate, generate_manifold
from .io import (FormatError, format_config_value, load_config, load_features, parse_config_value,
                 read_queries, read_run, read_truth, resolve_config, save_features, write_run,
                 write_text_atomic, write_truth)
from .pipeline import baseline, rerank

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NONCONVERGED = 3

log = logging.getLogger("lpmt")


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _thread_limit():
    value = os.environ.get("LPMT_THREADS")
    if not value:
        return nullcontext()
    try:
        limit = int(value)
    except ValueError:
        raise InputError(f"LPMT_THREADS must be a positive integer, got {value!r}") from None
    if limit < 1:
        raise InputError(f"LPMT_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=limit)


def _add_config_flags(parser):
    group = parser.add_argument_group("pipeline parameters (override --config)")
    for name in PipelineConfig.field_names():
        flags = [f"--{name.replace('_', '-')}"]
        if "_" in name:
            flags.append(f"--{name}")
        group.add_argument(*flags, dest=f"cfg_{name}", metavar="VALUE", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lpmt", description="Manifold-aware re-ranking of Euclidean retrieval results.")
    parser.add_argument("--version", action="version", version=f"lpmt {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("rerank", help="re-rank every query's gallery and write a run file")
    p.add_argument("--features", required=True, help="feature file (binary or CSV)")
    p.add_argument("--queries", help="file with one query id per line (default: every instance)")
    p.add_argument("--out", required=True, help="run file to write")
    p.add_argument("--config", help="key=value parameter file")
    p.add_argument("--baseline", action="store_true", help="write the plain Euclidean ranking instead")
    p.add_argument("--l2-normalize", action="store_true", help="scale every feature vector to unit length")
    p.add_argument("--report", help="sidecar report path (default: OUT.report.json)")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="score a run file against ground truth")
    p.add_argument("--run", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--features", help="feature file listing the gallery; unknown run ids are rejected")

    p = sub.add_parser("gen", help="write the synthetic manifold benchmark")
    p.add_argument("--out-features", required=True)
    p.add_argument("--out-truth", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-cluster", type=int, default=100)
    p.add_argument("--clusters", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.05)

    p = sub.add_parser("bench", help="time the pipeline on random features")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--queries", type=int, default=None, help="number of queries (default: all)")
    p.add_argument("--config", help="key=value parameter file")
    _add_config_flags(p)
    return parser


def _config_from_args(args) -> tuple:
    file_values = {}
    if getattr(args, "config", None):
        file_values = load_config(args.config)
    flags = {}
    for name in PipelineConfig.field_names():
        raw = getattr(args, f"cfg_{name}")
        if raw is not None:
            try:
                flags[name] = parse_config_value(name, raw)
            except ValueError as exc:
                raise InputError(f"--{name.replace('_', '-')}: {exc}") from None
    try:
        return resolve_config(file_values, flags)
    except ValueError as exc:
        raise InputError(f"invalid configuration: {exc}") from None


def _banner(command: str, config: PipelineConfig, sources: dict) -> None:
    lines = [f"lpmt {__version__} {command}"]
    lines += [f"  {name} = {format_config_value(getattr(config, name))}  [{sources[name]}]"
              for name in PipelineConfig.field_names()]
    print("\n".join(lines), file=sys.stderr)


def _load_features(path) -> FeatureSet:
    try:
        return load_features(path)
    except FileNotFoundError:
        raise InputError(f"feature file not found: {path}") from None
    except (FormatError, ValueError) as exc:
        raise InputError(str(exc)) from None


def cmd_rerank(args) -> int:
    config, sources = _config_from_args(args)
    _banner("rerank", config, sources)
    features = _load_features(args.features)
    if args.l2_normalize:
        features = features.l2_normalized()
    queries = None
    if args.queries:
        queries = read_queries(args.queries)
        unknown = [q for q in queries if q not in features._index]
        if unknown:
            raise InputError(f"query id {unknown[0]!r} is not in {args.features}")
    if features.n < 2:
        raise InputError("need at least two instances")

    report = {"version": __version__, "features": str(args.features),
              "config": {k: format_config_value(getattr(config, k)) for k in PipelineConfig.field_names()}}
    if args.baseline:
        rankings = baseline(features, queries)
        converged = True
        report.update(mode="baseline")
    else:
        try:
            result = rerank(features, queries, config)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        rankings, converged = result.rankings, result.converged
        report.update(mode="rerank", timings=result.timings, warnings=result.warnings,
                      diagnostics=result.diagnostics)
    report["converged"] = converged
    write_run(args.out, rankings)
    report_path = args.report or f"{args.out}.report.json"
    write_text_atomic(report_path, json.dumps(report, indent=2, sort_keys=True, default=_jsonable) + "\n")
    if not converged:
        log.error("some transport problems hit sinkhorn_maxiter; see %s", report_path)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def cmd_eval(args) -> int:
    try:
        runs = read_run(args.run)
        truth = read_truth(args.truth)
    except FileNotFoundError as exc:
        raise InputError(f"file not found: {exc.filename}") from None
    except FormatError as exc:
        raise InputError(str(exc)) from None
    if args.features:
        known = set(_load_features(args.features).ids)
        for ranking in runs:
            for ident in (ranking.query_id, *ranking.ids):
                if ident not in known:
                    raise InputError(f"run references unknown id {ident!r}")
        try:
            truth.check_ids(known)
        except ValueError as exc:
            raise InputError(str(exc)) from None
    try:
        report = evaluate(runs, truth)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    print(f"{'metric':<8}{'value':>8}")
    print(f"{'mAP':<8}{report.mAP:>8.4f}")
    print(f"{'R@1':<8}{report.recall_at_1:>8.4f}")
    print(f"{'queries':<8}{report.n_queries:>8d}")
    for line in report.lines():
        print(line)
    return EXIT_OK


def cmd_gen(args) -> int:
    try:
        features, truth = generate_manifold(args.seed, args.n_per_cluster, args.clusters, args.noise)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    save_features(args.out_features, features)
    write_truth(args.out_truth, truth)
    print(f"wrote {features.n} instances ({args.clusters} labels) to {args.out_features}", file=sys.stderr)
    return EXIT_OK


def cmd_bench(args) -> int:
    config, sources = _config_from_args(args)
    _banner("bench", config, sources)
    rng = np.random.default_rng(args.seed)
    features = FeatureSet.from_array(rng.standard_normal((args.n, args.d)).astype(np.float32))
    queries = None if args.queries is None else list(features.ids[:args.queries])
    start = time.perf_counter()
    result = rerank(features, queries, config)
    total = time.perf_counter() - start
    for stage, seconds in result.timings.items():
        print(f"{stage}={seconds:.3f}")
    print(f"total={total:.3f}")
    print(f"converged={str(result.converged).lower()}")
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


COMMANDS = {"rerank": cmd_rerank, "eval": cmd_eval, "gen": cmd_gen, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(name)s: %(levelname)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"lpmt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FormatError as exc:
        print(f"lpmt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"lpmt {args.command}: error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
