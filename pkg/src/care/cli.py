"""Command-line entry point: generate maps, retrieve, run benchmark grids and latency sweeps.

Every subcommand that writes files also writes ``run_manifest.json`` next to
its outputs; ``care rerun <manifest>`` replays it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__, uncertainty
from .benchmark import (
    DEFAULT_KS, GridRow, SuccessCriterion, default_grid, latency_csv, load_benchmark, loglog_slope,
    measure_latency, measure_view_scaling, run_grid, save_benchmark, top_n_accuracy,
)
from .errors import ConfigurationError, GenerationError, MapFormatError
from .replanner import (
    ABLATION, PAPER, STRATEGY_MEASURES, TOP_K_CATEGORY, TOP_K_CONFIDENCE,
    ReplanConfig, ReplanStrategy, SelectionCriterion, retrieve,
)
from .semantic_map import GRID, INSTANCE, load_map
from .synthetic import DISTANCE_DECAY, UNIFORM, GroundingModelSpec, SceneSpec, bias_model, make_benchmark

log = logging.getLogger("care")

OUTPUT_ENV = "CARE_OUTPUT_DIR"
CRITERIA = {"confidence": TOP_K_CONFIDENCE, "category": TOP_K_CATEGORY}


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUTPUT_ENV)
    if not out:
        raise UsageError(f"--out is required (or set {OUTPUT_ENV})")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out: Path, argv: list[str], args, outputs: list[str], started: float) -> None:
    manifest = {
        "tool": "care",
        "version": __version__,
        "subcommand": args.command,
        "argv": argv,
        "flags": {k: v for k, v in vars(args).items() if k not in ("func", "command")},
        "outputs": outputs,
        "wall_clock_s": time.perf_counter() - started,
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")


def _model_from_args(args) -> GroundingModelSpec:
    kw = dict(n_classes=args.n_classes, n_pairs=args.biased_pairs, bias=args.bias, accuracy=args.accuracy,
              view_noise=args.view_noise, feature_noise_sigma=args.feature_noise,
              feature_dim=args.feature_dim, max_views=args.max_views, weight_model=args.weight_model)
    try:
        return bias_model(**kw)
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_generate(args, argv) -> int:
    started = time.perf_counter()
    if args.classes.isdigit():
        n_classes, names = int(args.classes), None
    else:
        names = tuple(s.strip() for s in args.classes.split(",") if s.strip())
        n_classes = len(names)
    if n_classes < 2:
        raise UsageError("--classes needs at least two classes")
    args.n_classes = n_classes
    model = _model_from_args(args)
    try:
        scene = SceneSpec(
            n_candidates=args.candidates, class_names=names, views_min=args.views_min,
            views_max=args.views_max, single_view_rate=args.single_view_rate, kind=args.kind,
            room_size_m=args.room_size, seed=args.seed,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    bench = make_benchmark(scene, model, queries_per_class=args.queries_per_class)
    if args.cache:
        bench.map = dataclasses.replace(bench.map, cache_weighted=args.weight_model == DISTANCE_DECAY)
    out = _out_dir(args)
    manifest = save_benchmark(bench, out)
    _write_manifest(out, argv, args, ["map.json", manifest.name], started)
    print(f"map={out / 'map.json'}")
    print(f"benchmark={manifest}")
    print(f"candidates={len(bench.map)} queries={len(bench.queries)}")
    return 0


def _fmt(x) -> str:
    if x is None:
        return "-"
    if isinstance(x, bool):
        return str(x).lower()
    return repr(float(x)) if isinstance(x, float) else str(x)


def cmd_retrieve(args, argv) -> int:
    smap = load_map(args.map)
    try:
        cls = smap.vocabulary.resolve(args.cls)
    except KeyError:
        raise UsageError(f"unknown class {args.cls!r}; vocabulary: {', '.join(smap.vocabulary.names)}") from None
    strategy = ReplanStrategy(args.strategy, args.direction, args.weighted, args.seed)
    attempts = 1 if args.strategy == "none" else args.attempts
    config = ReplanConfig(SelectionCriterion(CRITERIA[args.criterion], args.k), strategy, attempts)
    if strategy.is_random and args.seed is None:
        raise UsageError("--seed is required for random strategies")
    succeeded = None
    if smap.has_labels:
        succeeded = lambda cid: smap.candidate(cid).gt_class == cls
    trace = retrieve(smap, cls, config, succeeded=succeeded)
    print(f"query class={smap.vocabulary.names[cls]} class_id={cls} strategy={strategy.label} "
          f"criterion={args.criterion} k={args.k} attempts={attempts}")
    for i, a in enumerate(trace.attempts, 1):
        print(f"attempt={i} candidate={a.candidate_id} confidence={_fmt(a.confidence)} "
              f"uncertainty={_fmt(a.uncertainty)} set_size={_fmt(a.set_size)} rule={a.rule} "
              f"success={_fmt(a.success)}")
    return 0


def _rows_from_args(args) -> list[GridRow]:
    rows = default_grid(args.seed, ablations=args.ablations, weighted_stderr=args.weighted)
    if args.strategies:
        wanted = set(args.strategies.split(","))
        unknown = wanted - {r.label for r in rows}
        if unknown:
            raise UsageError(f"unknown strategies {sorted(unknown)}; choose from {sorted({r.label for r in rows})}")
        rows = [r for r in rows if r.label in wanted]
    if args.criteria:
        keep = {CRITERIA[c] for c in args.criteria.split(",") if c in CRITERIA}
        rows = [r for r in rows if r.criterion is None or r.criterion in keep]
    return rows


def cmd_bench(args, argv) -> int:
    started = time.perf_counter()
    out = _out_dir(args)
    if args.latency:
        rows = []
        for measure in args.measures.split(","):
            if measure not in uncertainty.MEASURES:
                raise UsageError(f"unknown measure {measure!r}")
            rows += measure_latency(args.sizes, measure, args.repetitions, seed=args.seed)
        views = measure_view_scaling(args.views, args.repetitions, seed=args.seed)
        (out / "latency.csv").write_text(latency_csv(rows))
        (out / "view_scaling.csv").write_text(latency_csv(views))
        for measure in args.measures.split(","):
            sel = [r for r in rows if r.measure == measure]
            print(f"slope measure={measure} value={loglog_slope([r.n for r in sel], [r.median_us for r in sel]):.3f}")
        print(f"slope measure=pwkl_views value={loglog_slope([r.n for r in views], [r.median_us for r in views]):.3f}")
        _write_manifest(out, argv, args, ["latency.csv", "view_scaling.csv"], started)
        return 0

    if not args.benchmark:
        raise UsageError("bench needs a benchmark manifest (or --latency)")
    bench = load_benchmark(args.benchmark)
    crit = SuccessCriterion(args.success) if args.success else SuccessCriterion.for_map(bench.map)
    table = run_grid(bench, _rows_from_args(args), args.ks, crit, args.attempts, args.jobs, args.seed)
    (out / "results.csv").write_text(table.to_csv())
    (out / "table.txt").write_text(table.render())
    sys.stdout.write(table.render())
    top2 = top_n_accuracy(bench, 2, crit) if args.attempts == 2 else None
    problems = table.check_invariants(top2)
    _write_manifest(out, argv, args, ["results.csv", "table.txt"], started)
    for p in problems:
        print(f"invariant violated: {p}", file=sys.stderr)
    return 1 if problems else 0


def cmd_rerun(args, argv) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    return main(manifest["argv"])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="care", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"care {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic map and benchmark manifest")
    g.add_argument("--classes", required=True, help="class count or comma-separated labels")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV})")
    g.add_argument("--candidates", type=int, default=200)
    g.add_argument("--kind", choices=(INSTANCE, GRID), default=INSTANCE)
    g.add_argument("--views-min", type=int, default=2)
    g.add_argument("--views-max", type=int, default=5)
    g.add_argument("--max-views", type=int, default=5)
    g.add_argument("--single-view-rate", type=float, default=0.1)
    g.add_argument("--room-size", type=float, default=20.0, help="room side length in meters")
    g.add_argument("--view-noise", type=float, default=0.1)
    g.add_argument("--feature-noise", type=float, default=0.02)
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--biased-pairs", type=int, default=3)
    g.add_argument("--bias", type=float, default=0.6)
    g.add_argument("--accuracy", type=float, default=0.5)
    g.add_argument("--weight-model", choices=(UNIFORM, DISTANCE_DECAY), default=UNIFORM)
    g.add_argument("--queries-per-class", type=int, default=1)
    g.add_argument("--cache", action="store_true", help="store uncertainty values in the map file")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("retrieve", help="run one query against a map")
    r.add_argument("map")
    r.add_argument("--class", dest="cls", required=True, help="class label or id")
    r.add_argument("--strategy", choices=STRATEGY_MEASURES, default="pwkl")
    r.add_argument("--criterion", choices=tuple(CRITERIA), default="confidence")
    r.add_argument("--k", type=int, default=8)
    r.add_argument("--attempts", type=int, default=2)
    r.add_argument("--direction", choices=(PAPER, ABLATION), default=PAPER)
    r.add_argument("--weighted", action="store_true", help="weighted standard error")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_retrieve)

    b = sub.add_parser("bench", help="run the strategy grid, or the latency sweep with --latency")
    b.add_argument("benchmark", nargs="?")
    b.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV})")
    b.add_argument("--strategies", help="comma-separated row labels, e.g. max_entropy,min_pwkl")
    b.add_argument("--criteria", help="comma-separated: confidence,category")
    b.add_argument("--ks", type=_int_list, default=list(DEFAULT_KS))
    b.add_argument("--attempts", type=int, default=2)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--ablations", action="store_true")
    b.add_argument("--weighted", action="store_true")
    b.add_argument("--success", choices=("iou", "distance"))
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--latency", action="store_true")
    b.add_argument("--sizes", type=_int_list, default=[1000, 4000, 16000])
    b.add_argument("--measures", default=",".join(uncertainty.MEASURES))
    b.add_argument("--views", type=_int_list, default=[128, 256, 512])
    b.add_argument("--repetitions", type=int, default=7)
    b.set_defaults(func=cmd_bench)

    rr = sub.add_parser("rerun", help="replay a run_manifest.json")
    rr.add_argument("manifest")
    rr.set_defaults(func=cmd_rerun)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (UsageError, ConfigurationError) as e:
        parser.print_usage(sys.stderr)
        print(f"care: error: {e}", file=sys.stderr)
        return 2
    except (MapFormatError, GenerationError, OSError, ValueError) as e:
        print(f"care: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
