"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines are printed even
without ``-s``) or directly as ``python tests/test_acceptance.py``.
"""

import itertools
import math
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

import oracles  # noqa: E402
from care import uncertainty as U  # noqa: E402
from care.benchmark import (  # noqa: E402
    DEFAULT_KS, SuccessCriterion, default_grid, is_success, loglog_slope, measure_latency, measure_view_scaling, run_grid,
    save_benchmark, time_retrieval,
)
from care.replanner import (  # noqa: E402
    ABLATION, PAPER, TOP_K_CATEGORY, TOP_K_CONFIDENCE, ReplanConfig, ReplanStrategy, RetrievalTrace,
    SelectionCriterion, Attempt, first_attempt, replan,
)
from care.semantic_map import GRID, INSTANCE, dumps_map, load_map, loads_map, save_map  # noqa: E402
from care.synthetic import SceneSpec, bias_model, make_benchmark, random_map  # noqa: E402
from conftest import cand, random_grid_map  # noqa: E402

BIAS_SEEDS = range(10)
# Success-rate margin over max-confidence, averaged over k and seeds.
# Observed with the naive re-implementation: entropy 10.2/8.2, stderr 10.2/7.0, pwkl 7.4/3.0
# (confidence/category); frozen at about half.
FROZEN_MARGINS = {
    ("max_entropy", "confidence"): 5.0, ("max_entropy", "category"): 4.0,
    ("min_stderr", "confidence"): 5.0, ("min_stderr", "category"): 3.5,
    ("min_pwkl", "confidence"): 3.5, ("min_pwkl", "category"): 1.5,
}
ABLATION_OF = {"max_entropy": "min_entropy", "min_stderr": "max_stderr", "min_pwkl": "max_pwkl"}
SOFT_LATENCY_MS = 15.0
PAPER_INSTANCE_COUNT = 5370


class Report:
    def __init__(self, number, title, limit_s):
        self.number, self.title, self.limit_s = number, title, limit_s
        self.failures = []
        self.notes = []
        self.t0 = time.perf_counter()

    def check(self, ok, what):
        if not ok:
            self.failures.append(what)

    def note(self, text):
        self.notes.append(text)

    def finish(self, capsys=None):
        elapsed = time.perf_counter() - self.t0
        if self.limit_s is not None:
            self.check(elapsed < self.limit_s, f"runtime {elapsed:.2f}s >= {self.limit_s}s")
        status = "FAIL" if self.failures else "PASS"
        detail = "; ".join(self.failures or self.notes)
        line = f"[acceptance {self.number}] {status} {self.title} ({elapsed:.2f}s){': ' + detail if detail else ''}"
        if capsys is not None:
            with capsys.disabled():
                print("\n" + line)
        else:
            print(line)
        assert not self.failures, line


def test_1_reproducibility_statement(capsys):
    r = Report(1, "absolute real-scene success rates", None)
    r.note("not reproducible here: they need Matterport3D scenes, CLIP/LSeg features and Habitat; "
           "criteria 2-7 substitute property and synthetic checks (informational)")
    r.finish(capsys)


def test_2_analytic_values(capsys):
    r = Report(2, "analytic unit values", 1.0)
    for m in (2, 4, 10):
        r.check(abs(U.entropy(np.full(m, 1.0 / m)) - math.log(m)) <= 1e-12, f"entropy uniform m={m}")
    r.check(U.entropy([0.0, 1.0, 0.0]) == 0.0, "entropy one-hot")
    p = np.array([0.2, 0.3, 0.5])
    r.check(U.kl_divergence(p, p) == 0.0, "KL(p,p)")
    c = cand(0, [[0.9, 0.1], [0.1, 0.9]])
    target = 0.8 * math.log(9)
    raw = U.mean_pairwise_kl(c, eps=0.0)
    smoothed = U.mean_pairwise_kl(c)
    r.check(abs(raw - target) <= 1e-9, f"symmetric KL {raw!r} vs 0.8 ln 9")
    r.check(abs(smoothed - raw) < 1e-8, f"smoothing perturbation {abs(smoothed - raw):.2e}")
    r.note(f"0.8 ln 9 = {target:.9f}, unsmoothed error {abs(raw - target):.1e}, "
           f"smoothing perturbation {abs(smoothed - raw):.1e}")
    r.finish(capsys)


def test_3_brute_force_equivalence(capsys):
    r = Report(3, "brute-force oracle equivalence", 10.0)
    smap = random_grid_map(2024, 200, m=6, d=8, max_views=5)
    worst = 0.0
    for c in smap.candidates:
        f, w, p = c.features.tolist(), c.weights.tolist(), c.dists.tolist()
        for got, want in ((U.stderr_channel_avg(c, False), oracles.stderr(f, w, False)),
                          (U.stderr_channel_avg(c, True), oracles.stderr(f, w, True)),
                          (U.mean_pairwise_kl(c), oracles.mean_pairwise_kl(p))):
            if math.isinf(want):
                r.check(got == want, f"candidate {c.id}: expected inf")
            else:
                worst = max(worst, abs(got - want))
    r.check(worst <= 1e-9, f"max measure deviation {worst:.2e}")

    cands = oracles.as_dicts(smap)
    # memoise the oracle's per-candidate measures; the decision logic stays naive
    memo = {}
    orig = oracles.measure

    def cached(cd, name, weighted=False):
        key = (cd["id"], name, weighted)
        if key not in memo:
            memo[key] = orig(cd, name, weighted)
        return memo[key]

    oracles.measure = cached
    decisions = mismatches = 0
    try:
        for kind, measure, k, direction in itertools.product(
                (TOP_K_CONFIDENCE, TOP_K_CATEGORY), U.MEASURES, (2, 4, 8), (PAPER, ABLATION)):
            config = ReplanConfig(SelectionCriterion(kind, k), ReplanStrategy(measure, direction))
            for cls in range(smap.n_classes):
                first = first_attempt(smap, cls)
                trace = RetrievalTrace(cls, [Attempt(first, 0.0)])
                got = replan(smap, cls, config, trace)
                want = oracles.replan(cands, cls, kind, k, measure, config.strategy.prefers_high, [first])
                decisions += 1
                mismatches += got != want
    finally:
        oracles.measure = orig
    r.check(mismatches == 0, f"{mismatches}/{decisions} replan decisions differ")
    r.note(f"200 candidates, max deviation {worst:.1e}, {decisions} replan decisions identical")
    r.finish(capsys)


def _top2_bruteforce(bench, crit):
    wins = 0
    for q in bench.queries:
        ranked = sorted(bench.map.candidates, key=lambda c: (-c.fused[q.cls], c.id))
        wins += any(is_success(c, bench.gt_extents(q), crit) for c in ranked[:2])
    return wins, len(bench.queries)


def test_4_table_invariants(capsys):
    r = Report(4, "structural table invariants", 30.0)
    for kind, seed in ((INSTANCE, 11), (GRID, 12)):
        bench = make_benchmark(SceneSpec(200, kind=kind, seed=seed), bias_model(), queries_per_class=10)
        r.check(len(bench.queries) == 100, "benchmark should have 100 queries")
        crit = SuccessCriterion.for_map(bench.map)
        table = run_grid(bench, default_grid(seed, ablations=True, weighted_stderr=kind == GRID),
                         DEFAULT_KS, crit, seed=seed)
        top2 = _top2_bruteforce(bench, crit)
        for p in table.check_invariants(top2):
            r.check(False, f"{kind}: {p}")
        # restate the invariants directly, independent of check_invariants
        for k in table.ks:
            o = table.cell("oracle", k=k)
            for c in (c for c in table.cells if c.k == k):
                r.check(c.successes <= o.successes, f"{kind} k={k}: {c.strategy} above oracle")
                r.check(all(y or not x for x, y in zip(c.per_query, o.per_query)),
                        f"{kind} k={k}: {c.strategy} beats oracle on a query")
                r.check(0.0 <= c.success_rate <= 100.0, "rate outside [0, 100]")
        r.check(len({table.cell("no_replan", k=k).successes for k in table.ks}) == 1, f"{kind}: no_replan varies")
        r.check(all((table.cell("max_confidence", k=k).successes, 100) == top2 for k in table.ks),
                f"{kind}: max_confidence != top-2 {top2}")
        r.note(f"{kind}: top-2 {top2[0]}/100, oracle {table.cell('oracle', k=2).successes}/100")
    r.finish(capsys)


def test_5_bias_recovery(capsys):
    r = Report(5, "bias recovery over max-confidence", 60.0)
    rates: dict[tuple[str, str], list[float]] = {}
    naive_rows = {(ABLATION_OF.get(lbl, lbl), crit) for lbl, crit in FROZEN_MARGINS} | set(FROZEN_MARGINS)
    for seed in BIAS_SEEDS:
        bench = make_benchmark(SceneSpec(200, seed=seed), bias_model())
        table = run_grid(bench, default_grid(seed, ablations=True), DEFAULT_KS, seed=seed)
        for c in table.cells:
            rates.setdefault((c.strategy, c.criterion), []).append(c.success_rate)
        # independent cross-check of every uncertainty row on this seed
        cands = oracles.as_dicts(bench.map)
        for (label, crit), k in itertools.product(sorted(naive_rows), DEFAULT_KS):
            kind = TOP_K_CONFIDENCE if crit == "confidence" else TOP_K_CATEGORY
            high, name = label.startswith("max_"), label.split("_", 1)[1]
            wins = 0
            for q in bench.queries:
                first = max(cands, key=lambda cd: (cd["fused"][q.cls], -cd["id"]))
                ok = first["gt"] == q.cls
                if not ok:
                    nxt = oracles.replan(cands, q.cls, kind, k, name, high, [first["id"]])
                    ok = nxt is not None and cands[nxt]["gt"] == q.cls
                wins += ok
            lib = table.cell(label, crit, k)
            r.check(lib.successes == wins, f"seed {seed} {label}/{crit}/k={k}: library {lib.successes} != naive {wins}")
    mean = {key: float(np.mean(v)) for key, v in rates.items()}
    base = mean[("max_confidence", "-")]
    summary = []
    for (label, crit), margin in FROZEN_MARGINS.items():
        paper, abl = mean[(label, crit)], mean[(ABLATION_OF[label], crit)]
        r.check(paper > base, f"{label}/{crit} {paper:.2f} not above max_confidence {base:.2f}")
        r.check(paper - base >= margin, f"{label}/{crit} margin {paper - base:.2f} < frozen {margin}")
        r.check(abl <= paper, f"{ABLATION_OF[label]}/{crit} {abl:.2f} above {label} {paper:.2f}")
        summary.append(f"{label}/{crit} {paper:.1f} (abl {abl:.1f})")
    r.note(f"max_confidence {base:.1f}; " + ", ".join(summary))
    r.finish(capsys)


def test_6_complexity(capsys):
    r = Report(6, "latency scaling", 120.0)
    sizes = [1000, 4000, 16000]
    slopes = {}
    for measure in (U.ENTROPY, U.STDERR):
        rows = measure_latency(sizes, measure, repetitions=7)
        slopes[measure] = loglog_slope(sizes, [x.median_us for x in rows])
        r.check(0.7 <= slopes[measure] <= 1.3, f"{measure} slope {slopes[measure]:.3f} outside [0.7, 1.3]")
    views = measure_view_scaling([128, 256, 512], repetitions=7)
    per_doubling = 2.0 ** loglog_slope([v.n for v in views], [v.median_us for v in views])
    r.check(2.0 <= per_doubling <= 6.0, f"pwkl cost per view doubling x{per_doubling:.2f} outside x4 +/- 50%")

    smap = random_map(PAPER_INSTANCE_COUNT, seed=0)
    worst = 0.0
    for measure in U.MEASURES:
        med, _ = time_retrieval(smap, measure, SelectionCriterion(TOP_K_CATEGORY, smap.n_classes), 7)
        worst = max(worst, med / 1000.0)
    soft = "met" if worst < SOFT_LATENCY_MS else "NOT met (soft, hardware-dependent)"
    r.note(f"slopes entropy {slopes[U.ENTROPY]:.2f}, stderr {slopes[U.STDERR]:.2f}; pwkl x{per_doubling:.2f} "
           f"per view doubling; n={PAPER_INSTANCE_COUNT} worst-case attempt {worst:.2f} ms, "
           f"< {SOFT_LATENCY_MS:.0f} ms {soft}")
    r.finish(capsys)


def test_7_determinism_round_trip(tmp_path, capsys):
    r = Report(7, "determinism and round trip", 5.0)
    if tmp_path is None:
        import tempfile
        tmp_path = Path(tempfile.mkdtemp())
    for kind in (INSTANCE, GRID):
        scene = SceneSpec(200, kind=kind, seed=42)
        a = save_benchmark(make_benchmark(scene, bias_model()), tmp_path / kind / "a")
        b = save_benchmark(make_benchmark(scene, bias_model()), tmp_path / kind / "b")
        for name in ("map.json", "benchmark.json"):
            r.check((a.parent / name).read_bytes() == (b.parent / name).read_bytes(), f"{kind} {name} differs")
        bench = make_benchmark(scene, bias_model())
        csv1 = run_grid(bench, seed=42).to_csv()
        csv2 = run_grid(make_benchmark(scene, bias_model()), seed=42, jobs=4).to_csv()
        r.check(csv1 == csv2, f"{kind} CSV differs")
        first = (a.parent / "map.json").read_bytes()
        save_map(load_map(a.parent / "map.json"), tmp_path / kind / "again.json")
        r.check((tmp_path / kind / "again.json").read_bytes() == first, f"{kind} save/load/save differs")
        cached = dumps_map(type(bench.map)(bench.map.vocabulary, bench.map.candidates, bench.map.kind,
                                           bench.map.feature_dim, cache_weighted=True))
        r.check(dumps_map(loads_map(cached)) == cached, f"{kind} cached round trip differs")
    r.note("maps, manifests and CSVs byte-identical for both map kinds")
    r.finish(capsys)


if __name__ == "__main__":
    failed = 0
    for fn in (test_1_reproducibility_statement, test_2_analytic_values, test_3_brute_force_equivalence,
               test_4_table_invariants, test_5_bias_recovery, test_6_complexity, test_7_determinism_round_trip):
        try:
            fn(**{name: None for name in fn.__code__.co_varnames[:fn.__code__.co_argcount]})
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
