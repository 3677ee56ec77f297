"""Success metrics, the strategy-grid runner and the latency harness."""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import uncertainty
from .errors import ConfigurationError, MapFormatError
from .replanner import (
    ABLATION, MAX_CONFIDENCE, NONE, ORACLE, PAPER, RANDOM, RANDOM_TOP_K, TOP_K_CATEGORY, TOP_K_CONFIDENCE,
    Attempt, ReplanConfig, ReplanStrategy, RetrievalTrace, SelectionCriterion, first_attempt,
    precomputed_scores, replan, retrieve,
)
from .semantic_map import (
    GRID_CELL, INSTANCE, POINT_SET, Candidate, SemanticMap, SpatialExtent, load_map, save_map,
)

IOU = "iou"
DISTANCE = "distance"
DEFAULT_KS = (2, 4, 8, 16, 40)
CRITERION_NAMES = {TOP_K_CONFIDENCE: "confidence", TOP_K_CATEGORY: "category"}


@dataclass(frozen=True)
class SuccessCriterion:
    kind: str = IOU
    iou_threshold: float = 0.25
    distance_threshold_m: float = 1.0

    @classmethod
    def for_map(cls, smap: SemanticMap, **kw) -> "SuccessCriterion":
        return cls(IOU if smap.kind == INSTANCE else DISTANCE, **kw)


def point_iou(a, b) -> float:
    """Intersection over union of two point sets, matching points by exact coordinates."""
    sa = {tuple(p) for p in np.asarray(a, dtype=float).reshape(-1, 3).tolist()}
    sb = {tuple(p) for p in np.asarray(b, dtype=float).reshape(-1, 3).tolist()}
    union = len(sa | sb)
    return len(sa & sb) / union if union else 0.0


def is_success(chosen, gt: Sequence[SpatialExtent], crit: SuccessCriterion) -> bool:
    """IoU above the threshold (strict), or distance to the nearest GT object within it (inclusive)."""
    if not gt:
        return False
    if crit.kind == IOU:
        if chosen.extent.kind != POINT_SET or any(g.kind != POINT_SET for g in gt):
            raise ConfigurationError("IoU success needs point-set extents")
        return any(point_iou(chosen.extent.points, g.points) > crit.iou_threshold for g in gt)
    if crit.kind == DISTANCE:
        if chosen.extent.kind != GRID_CELL or any(g.kind != GRID_CELL for g in gt):
            raise ConfigurationError("distance success needs grid-cell extents")
        here = chosen.extent.world
        dist = min(float(np.linalg.norm(here - g.world)) for g in gt)
        return dist <= crit.distance_threshold_m
    raise ConfigurationError(f"unknown success criterion {crit.kind!r}")


# --- benchmark instances -----------------------------------------------------


@dataclass(frozen=True)
class Query:
    cls: int
    gt_ids: tuple[int, ...]


@dataclass
class Benchmark:
    map: SemanticMap
    queries: list[Query]
    meta: dict = field(default_factory=dict)

    def gt_extents(self, q: Query) -> list[SpatialExtent]:
        return [self.map.candidate(i).extent for i in q.gt_ids]


def save_benchmark(bench: Benchmark, directory, map_name: str = "map.json") -> Path:
    """Write ``map.json`` and ``benchmark.json`` into ``directory``; return the manifest path."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    save_map(bench.map, out / map_name)
    doc = {
        "version": 1,
        "map": map_name,
        "queries": [{"class": q.cls, "gt": list(q.gt_ids)} for q in bench.queries],
        "meta": bench.meta,
    }
    path = out / "benchmark.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_benchmark(path) -> Benchmark:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        smap = load_map(path.parent / doc["map"])
        queries = [Query(int(q["class"]), tuple(int(i) for i in q["gt"])) for q in doc["queries"]]
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, MapFormatError):
            raise
        raise MapFormatError(f"bad benchmark manifest {path}: {e}") from None
    for q in queries:
        for i in q.gt_ids:
            if i not in smap.position_of:
                raise MapFormatError(f"query references unknown candidate {i}")
    return Benchmark(smap, queries, doc.get("meta", {}))


# --- strategy grid -----------------------------------------------------------


@dataclass(frozen=True)
class GridRow:
    strategy: ReplanStrategy
    criterion: str | None = None  # TOP_K_* for set-based strategies

    @property
    def label(self) -> str:
        return self.strategy.label

    @property
    def criterion_name(self) -> str:
        return CRITERION_NAMES[self.criterion] if self.criterion else "-"


def default_grid(seed: int = 0, ablations: bool = False, weighted_stderr: bool = False) -> list[GridRow]:
    """Baselines plus every measure under both selection criteria."""
    rows = [
        GridRow(ReplanStrategy(NONE)),
        GridRow(ReplanStrategy(ORACLE)),
        GridRow(ReplanStrategy(MAX_CONFIDENCE)),
        GridRow(ReplanStrategy(RANDOM, seed=seed)),
    ]
    crits = (TOP_K_CONFIDENCE, TOP_K_CATEGORY)
    rows += [GridRow(ReplanStrategy(RANDOM_TOP_K, seed=seed), c) for c in crits]
    directions = (PAPER, ABLATION) if ablations else (PAPER,)
    for d in directions:
        for m in uncertainty.MEASURES:
            for c in crits:
                rows.append(GridRow(ReplanStrategy(m, direction=d, weighted_stderr=weighted_stderr), c))
    return rows


@dataclass
class CellResult:
    strategy: str
    criterion: str
    k: int
    successes: int
    queries: int
    per_query: tuple[bool, ...] = field(default=(), repr=False)

    @property
    def success_rate(self) -> float:
        return 100.0 * self.successes / self.queries if self.queries else 0.0


@dataclass
class ResultsTable:
    cells: list[CellResult]
    meta: dict = field(default_factory=dict)

    def cell(self, strategy: str, criterion: str = "-", k: int | None = None) -> CellResult:
        for c in self.cells:
            if c.strategy == strategy and c.criterion == criterion and (k is None or c.k == k):
                return c
        raise KeyError((strategy, criterion, k))

    @property
    def ks(self) -> list[int]:
        return sorted({c.k for c in self.cells})

    def rows(self) -> list[tuple[str, str]]:
        seen = []
        for c in self.cells:
            if (c.strategy, c.criterion) not in seen:
                seen.append((c.strategy, c.criterion))
        return seen

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "criterion", "k", "successes", "queries", "success_rate"])
        for c in self.cells:
            w.writerow([c.strategy, c.criterion, c.k, c.successes, c.queries, repr(c.success_rate)])
        return buf.getvalue()

    def render(self) -> str:
        ks = self.ks
        header = ["Replan Strategy", "Selection Criteria"] + [f"k={k}" for k in ks]
        body = []
        for strat, crit in self.rows():
            vals = [f"{self.cell(strat, crit, k).success_rate:.2f}" for k in ks]
            body.append([strat, crit] + vals)
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        fmt = lambda r: "  ".join(s.ljust(wd) if i < 2 else s.rjust(wd) for i, (s, wd) in enumerate(zip(r, widths)))
        rule = "-" * len(fmt(header))
        return "\n".join([fmt(header), rule] + [fmt(r) for r in body]) + "\n"

    def check_invariants(self, top2: tuple[int, int] | None = None) -> list[str]:
        """Violated structural invariants, as messages; empty when all hold."""
        problems = []
        for c in self.cells:
            if not 0.0 <= c.success_rate <= 100.0:
                problems.append(f"{c.strategy}/{c.criterion}/k={c.k}: rate {c.success_rate} outside [0, 100]")
        by_k: dict[int, list[CellResult]] = {}
        for c in self.cells:
            by_k.setdefault(c.k, []).append(c)
        for k, cells in by_k.items():
            oracle = [c for c in cells if c.strategy == ORACLE]
            if not oracle:
                continue
            o = oracle[0]
            for c in cells:
                if c.successes > o.successes:
                    problems.append(f"k={k}: {c.strategy}/{c.criterion} beats oracle")
                if c.per_query and o.per_query and any(x and not y for x, y in zip(c.per_query, o.per_query)):
                    problems.append(f"k={k}: {c.strategy}/{c.criterion} succeeds on a query the oracle misses")
        for name in ("no_replan", ORACLE, MAX_CONFIDENCE, RANDOM):
            vals = {c.successes for c in self.cells if c.strategy == name}
            if len(vals) > 1:
                problems.append(f"{name} row varies with k: {sorted(vals)}")
        if top2 is not None:
            for c in self.cells:
                if c.strategy == MAX_CONFIDENCE and (c.successes, c.queries) != top2:
                    problems.append(f"max_confidence k={c.k}: {c.successes}/{c.queries} != top-2 {top2[0]}/{top2[1]}")
        return problems


def success_sets(bench: Benchmark, crit: SuccessCriterion) -> list[frozenset[int]]:
    """For each query, the ids of every candidate that would count as a success."""
    memo: dict[tuple[int, ...], frozenset[int]] = {}
    out = []
    smap = bench.map
    if crit.kind == IOU:
        pts = [{tuple(p) for p in c.extent.points.tolist()} if c.extent.kind == POINT_SET else None
               for c in smap.candidates]
    for q in bench.queries:
        key = q.gt_ids
        if key not in memo:
            gt = bench.gt_extents(q)
            if crit.kind == IOU and all(p is not None for p in pts):
                gsets = [{tuple(p) for p in g.points.tolist()} for g in gt]
                hits = set()
                for c, s in zip(smap.candidates, pts):
                    for g in gsets:
                        inter = len(s & g)
                        if inter and inter / len(s | g) > crit.iou_threshold:
                            hits.add(c.id)
                            break
                memo[key] = frozenset(hits)
            else:
                memo[key] = frozenset(c.id for c in smap.candidates if is_success(c, gt, crit))
        out.append(memo[key])
    return out


def query_seed(base: int | None, qi: int) -> int | None:
    if base is None:
        return None
    return int(np.random.SeedSequence([base, qi]).generate_state(1)[0])


def run_cell(bench: Benchmark, row: GridRow, k: int, crit: SuccessCriterion, attempts: int = 2,
             hits: list[frozenset[int]] | None = None, scores=None) -> CellResult:
    smap = bench.map
    hits = success_sets(bench, crit) if hits is None else hits
    scores = scores or precomputed_scores(smap)
    criterion = SelectionCriterion(row.criterion or TOP_K_CONFIDENCE, k)
    n_attempts = 1 if row.strategy.measure == NONE else attempts
    flags = []
    for qi, q in enumerate(bench.queries):
        strategy = row.strategy
        if strategy.is_random:
            strategy = ReplanStrategy(strategy.measure, strategy.direction, strategy.weighted_stderr,
                                      query_seed(strategy.seed, qi))
        config = ReplanConfig(criterion, strategy, n_attempts)
        trace = retrieve(smap, q.cls, config, succeeded=hits[qi].__contains__, scores=scores)
        flags.append(trace.succeeded)
    return CellResult(row.label, row.criterion_name, k, sum(flags), len(flags), tuple(flags))


def run_grid(bench: Benchmark, rows: Sequence[GridRow] | None = None, ks: Sequence[int] = DEFAULT_KS,
             crit: SuccessCriterion | None = None, attempts: int = 2, jobs: int = 1,
             seed: int = 0) -> ResultsTable:
    """Success rate of every (strategy, criterion, k) cell over all queries.

    A query succeeds if any of its attempts succeeds.
    """
    t0 = time.perf_counter()
    rows = list(default_grid(seed) if rows is None else rows)
    crit = crit or SuccessCriterion.for_map(bench.map)
    hits = success_sets(bench, crit)
    scores = precomputed_scores(bench.map)
    if any(r.strategy.is_uncertainty for r in rows):
        # fill the memo up front so worker threads only read it
        for r in rows:
            if r.strategy.is_uncertainty:
                scores(r.strategy.measure, r.strategy.weighted_stderr, np.arange(0))
    jobs_list = [(r, k) for r in rows for k in ks]
    work = lambda rk: run_cell(bench, rk[0], rk[1], crit, attempts, hits, scores)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            cells = list(pool.map(work, jobs_list))
    else:
        cells = [work(rk) for rk in jobs_list]
    meta = {"seed": seed, "attempts": attempts, "success": asdict(crit),
            "wall_clock_s": time.perf_counter() - t0}
    if "scene_hash" in bench.meta:
        meta["scene_hash"] = bench.meta["scene_hash"]
    return ResultsTable(cells, meta)


def top_n_accuracy(bench: Benchmark, n: int = 2, crit: SuccessCriterion | None = None) -> tuple[int, int]:
    """Queries whose n most confident candidates include a success (brute force)."""
    crit = crit or SuccessCriterion.for_map(bench.map)
    smap = bench.map
    wins = 0
    for q in bench.queries:
        gt = bench.gt_extents(q)
        ranked = sorted(smap.candidates, key=lambda c: (-c.fused[q.cls], c.id))
        if any(is_success(c, gt, crit) for c in ranked[:n]):
            wins += 1
    return wins, len(bench.queries)


# --- latency -----------------------------------------------------------------


@dataclass
class LatencyRow:
    measure: str
    n: int
    median_us: float
    p90_us: float


def latency_csv(rows: Sequence[LatencyRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["measure", "n", "median_us", "p90_us"])
    for r in rows:
        w.writerow([r.measure, r.n, f"{r.median_us:.3f}", f"{r.p90_us:.3f}"])
    return buf.getvalue()


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def _timed(fn, repetitions: int) -> tuple[float, float]:
    times = []
    for _ in range(repetitions):
        t = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t) * 1e6)
    return float(np.median(times)), float(np.percentile(times, 90))


def time_retrieval(smap: SemanticMap, measure: str, criterion: SelectionCriterion,
                   repetitions: int = 7, cls: int = 0) -> tuple[float, float]:
    """Median and p90 microseconds of one replanning attempt, uncertainty computed on the fly."""
    config = ReplanConfig(criterion, ReplanStrategy(measure))
    cid = first_attempt(smap, cls)
    trace = RetrievalTrace(cls, [Attempt(cid, float(smap.fused[smap.position_of[cid], cls]))])
    return _timed(lambda: replan(smap, cls, config, trace), repetitions)


def measure_latency(sizes: Sequence[int], measure: str, repetitions: int = 7,
                    criterion: SelectionCriterion | None = None, n_classes: int = 20,
                    feature_dim: int = 32, seed: int = 0) -> list[LatencyRow]:
    """Retrieval latency on random maps of increasing candidate count.

    The default criterion (top-k category with k equal to the class count)
    admits every unvisited candidate, so the measure runs over the whole map.
    """
    from .synthetic import random_map

    sizes = list(sizes)
    if len(sizes) < 3 or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing with at least 3 entries")
    criterion = criterion or SelectionCriterion(TOP_K_CATEGORY, n_classes)
    rows = []
    for n in sizes:
        smap = random_map(n, n_classes=n_classes, feature_dim=feature_dim, seed=seed)
        med, p90 = time_retrieval(smap, measure, criterion, repetitions)
        rows.append(LatencyRow(measure, n, med, p90))
    return rows


def measure_view_scaling(view_counts: Sequence[int], repetitions: int = 7, n_classes: int = 20,
                         seed: int = 0) -> list[LatencyRow]:
    """Per-candidate mean pairwise KL time against the candidate's view count."""
    rng = np.random.default_rng(seed)
    rows = []
    for v in view_counts:
        dists = rng.dirichlet(np.ones(n_classes), size=v)
        c = Candidate(0, np.zeros((v, 1)), np.ones(v), dists, SpatialExtent.grid_cell(0, 0, [0, 0]))
        med, p90 = _timed(lambda: uncertainty.mean_pairwise_kl(c), repetitions)
        rows.append(LatencyRow(uncertainty.PWKL, v, med, p90))
    return rows
