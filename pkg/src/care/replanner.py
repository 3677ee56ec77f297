"""Candidate selection and uncertainty-aware replanning.

The first retrieval attempt always takes the most confident candidate for
the query class. After a failure, ``replan`` proposes the next candidate:

1. form a high-confidence set (top-k by confidence, or every candidate that
   ranks the query class among its top-k predicted classes), excluding
   already visited candidates;
2. pick from that set by an uncertainty measure: maximum entropy, minimum
   feature standard error or minimum mean pairwise KL (direction
   ``"paper"``, the default), or the flipped direction ``"ablation"``.

Baselines (max confidence, random, random from the set, oracle) share the
same entry point.

Ties are broken by the measure, then confidence (descending), then candidate
id (ascending). A single-view candidate (multi-view measure ``inf``) is only
chosen when every member of the set is ``inf``, in either direction; the most
confident member wins then. An empty set falls back to the most
confident unvisited candidate in the whole map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import uncertainty
from .errors import ConfigurationError
from .semantic_map import SemanticMap

TOP_K_CONFIDENCE = "top_k_confidence"
TOP_K_CATEGORY = "top_k_category"
CRITERIA = (TOP_K_CONFIDENCE, TOP_K_CATEGORY)

MAX_CONFIDENCE = "max_confidence"
RANDOM = "random"
RANDOM_TOP_K = "random_top_k"
ORACLE = "oracle"
NONE = "none"
STRATEGY_MEASURES = (*uncertainty.MEASURES, MAX_CONFIDENCE, RANDOM, RANDOM_TOP_K, ORACLE, NONE)

PAPER = "paper"
ABLATION = "ablation"

# Measures where higher values win in the default direction.
_PREFERS_HIGH = {uncertainty.ENTROPY: True, uncertainty.STDERR: False, uncertainty.PWKL: False}

ScoreSource = Callable[[str, bool, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SelectionCriterion:
    kind: str = TOP_K_CONFIDENCE
    k: int = 8

    def __post_init__(self):
        if self.kind not in CRITERIA:
            raise ConfigurationError(f"unknown selection criterion {self.kind!r}")
        if int(self.k) < 1:
            raise ConfigurationError("k must be at least 1")


@dataclass(frozen=True)
class ReplanStrategy:
    measure: str = uncertainty.PWKL
    direction: str = PAPER
    weighted_stderr: bool = False
    seed: int | None = None

    def __post_init__(self):
        if self.measure not in STRATEGY_MEASURES:
            raise ConfigurationError(f"unknown replan strategy {self.measure!r}")
        if self.direction not in (PAPER, ABLATION):
            raise ConfigurationError(f"unknown direction {self.direction!r}")

    @property
    def is_uncertainty(self) -> bool:
        return self.measure in _PREFERS_HIGH

    @property
    def uses_criterion(self) -> bool:
        return self.is_uncertainty or self.measure == RANDOM_TOP_K

    @property
    def is_random(self) -> bool:
        return self.measure in (RANDOM, RANDOM_TOP_K)

    @property
    def prefers_high(self) -> bool:
        high = _PREFERS_HIGH[self.measure]
        return high if self.direction == PAPER else not high

    @property
    def label(self) -> str:
        if not self.is_uncertainty:
            return {NONE: "no_replan"}.get(self.measure, self.measure)
        name = ("max_" if self.prefers_high else "min_") + self.measure
        if self.measure == uncertainty.STDERR and self.weighted_stderr:
            name += "_w"
        return name


@dataclass(frozen=True)
class ReplanConfig:
    criterion: SelectionCriterion = field(default_factory=SelectionCriterion)
    strategy: ReplanStrategy = field(default_factory=ReplanStrategy)
    attempts: int = 2

    def __post_init__(self):
        if self.attempts < 1:
            raise ConfigurationError("attempts must be at least 1")


@dataclass
class Attempt:
    candidate_id: int
    confidence: float
    uncertainty: float | None = None
    set_size: int | None = None
    rule: str = "first"
    success: bool | None = None


@dataclass
class RetrievalTrace:
    query_class: int
    attempts: list[Attempt] = field(default_factory=list)

    @property
    def visited(self) -> list[int]:
        return [a.candidate_id for a in self.attempts]

    @property
    def chosen(self) -> list[int]:
        return self.visited

    @property
    def succeeded(self) -> bool:
        return any(a.success for a in self.attempts)


def _check_class(smap: SemanticMap, cls: int) -> None:
    if not 0 <= cls < smap.n_classes:
        raise ValueError(f"class id {cls} outside vocabulary of size {smap.n_classes}")


def _order(smap: SemanticMap, idx: np.ndarray, cls: int) -> np.ndarray:
    """Positions ``idx`` sorted by confidence desc, then id asc."""
    conf = smap.fused[idx, cls]
    return idx[np.lexsort((smap.ids[idx], -conf))]


def _unvisited(smap: SemanticMap, excluded: Iterable[int]) -> np.ndarray:
    mask = np.ones(len(smap), dtype=bool)
    pos = smap.position_of
    for cid in excluded:
        if cid in pos:
            mask[pos[cid]] = False
    return np.flatnonzero(mask)


def first_attempt(smap: SemanticMap, cls: int) -> int:
    """Id of the most confident candidate for ``cls``; ties go to the lowest id."""
    if len(smap) == 0:
        raise ValueError("cannot retrieve from an empty map")
    _check_class(smap, cls)
    return int(smap.ids[_order(smap, np.arange(len(smap)), cls)[0]])


def class_ranks(probs: np.ndarray, cls: int) -> np.ndarray:
    """Rank of ``cls`` in each row's descending class order (ties: lower class id first)."""
    p = np.asarray(probs)
    ref = p[:, cls:cls + 1]
    return np.sum(p > ref, axis=1) + np.sum(p[:, :cls] == ref, axis=1)


def _select_positions(smap: SemanticMap, cls: int, criterion: SelectionCriterion,
                      excluded: Iterable[int]) -> np.ndarray:
    idx = _unvisited(smap, excluded)
    if criterion.kind == TOP_K_CONFIDENCE:
        return _order(smap, idx, cls)[:criterion.k]
    keep = class_ranks(smap.fused[idx], cls) < criterion.k
    return _order(smap, idx[keep], cls)


def select_candidates(smap: SemanticMap, cls: int, criterion: SelectionCriterion,
                      excluded: Iterable[int] = ()) -> list[int]:
    """High-confidence candidate set, ordered by confidence desc then id asc."""
    _check_class(smap, cls)
    return smap.ids[_select_positions(smap, cls, criterion, excluded)].tolist()


def _rng(seed: int | None, cls: int, n_visited: int) -> np.random.Generator:
    if seed is None:
        raise ConfigurationError("random strategies need an explicit seed")
    return np.random.default_rng([seed, cls, n_visited])


def _on_the_fly(smap: SemanticMap) -> ScoreSource:
    return lambda measure, weighted, idx: uncertainty.batch_measure(smap, idx, measure, weighted)


def precomputed_scores(smap: SemanticMap) -> ScoreSource:
    """Score source that computes each measure once for the whole map."""
    memo: dict[tuple[str, bool], np.ndarray] = {}

    def scores(measure, weighted, idx):
        key = (measure, weighted)
        if key not in memo:
            memo[key] = uncertainty.batch_measure(smap, np.arange(len(smap)), measure, weighted)
        return memo[key][idx]

    return scores


def _pick(smap: SemanticMap, cls: int, pos: int, rule: str, **kw) -> Attempt:
    return Attempt(int(smap.ids[pos]), float(smap.fused[pos, cls]), rule=rule, **kw)


def _replan_attempt(smap: SemanticMap, cls: int, config: ReplanConfig, trace: RetrievalTrace,
                    scores: ScoreSource | None = None,
                    succeeded: Callable[[int], bool] | None = None) -> Attempt | None:
    strategy = config.strategy
    visited = trace.visited
    if strategy.measure == NONE:
        return None
    if strategy.measure == ORACLE and not smap.has_labels:
        raise ConfigurationError("oracle strategy needs ground-truth labels on every candidate")
    _check_class(smap, cls)
    free = _unvisited(smap, visited)
    if len(free) == 0:
        return None

    if strategy.measure == MAX_CONFIDENCE:
        return _pick(smap, cls, _order(smap, free, cls)[0], "max_confidence")
    if strategy.measure == RANDOM:
        ids = np.sort(smap.ids[free])
        cid = int(_rng(strategy.seed, cls, len(visited)).choice(ids))
        return _pick(smap, cls, smap.position_of[cid], "random")
    if strategy.measure == ORACLE:
        ordered = _order(smap, free, cls)
        if succeeded is not None:
            hits = [p for p in ordered if succeeded(int(smap.ids[p]))]
        else:
            hits = [p for p in ordered if smap.gt_classes[p] == cls]
        return _pick(smap, cls, hits[0], "oracle") if hits else None

    chosen = _select_positions(smap, cls, config.criterion, visited)
    n_set = len(chosen)
    if n_set == 0:
        return _pick(smap, cls, _order(smap, free, cls)[0], "fallback_empty", set_size=0)
    if strategy.measure == RANDOM_TOP_K:
        rng = _rng(strategy.seed, cls, len(visited))
        return _pick(smap, cls, chosen[rng.integers(n_set)], "random_top_k", set_size=n_set)

    scores = scores or _on_the_fly(smap)
    u = np.asarray(scores(strategy.measure, strategy.weighted_stderr, chosen), dtype=float)
    conf = smap.fused[chosen, cls]
    ids = smap.ids[chosen]
    finite = np.isfinite(u)
    if not finite.any():
        # chosen is already in confidence order
        return _pick(smap, cls, chosen[0], "fallback_all_inf", uncertainty=math.inf, set_size=n_set)
    cand = np.flatnonzero(finite)
    key = -u[cand] if strategy.prefers_high else u[cand]
    best = cand[np.lexsort((ids[cand], -conf[cand], key))[0]]
    return _pick(smap, cls, chosen[best], "measure", uncertainty=float(u[best]), set_size=n_set)


def replan(smap: SemanticMap, cls: int, config: ReplanConfig, trace: RetrievalTrace,
           scores: ScoreSource | None = None,
           succeeded: Callable[[int], bool] | None = None) -> int | None:
    """Next candidate id after a failed attempt, or None if nothing is eligible.

    ``scores`` supplies uncertainty values for a batch of candidate positions;
    by default they are computed on the fly. ``succeeded`` lets the oracle
    strategy use the caller's success test instead of class labels.
    """
    a = _replan_attempt(smap, cls, config, trace, scores, succeeded)
    return None if a is None else a.candidate_id


def retrieve(smap: SemanticMap, cls: int, config: ReplanConfig,
             succeeded: Callable[[int], bool] | None = None,
             scores: ScoreSource | None = None) -> RetrievalTrace:
    """Run the first attempt and then replan until success or attempts run out.

    Without ``succeeded`` every attempt counts as a failure and the full
    attempt budget is spent.
    """
    trace = RetrievalTrace(cls)
    cid = first_attempt(smap, cls)
    a = Attempt(cid, float(smap.fused[smap.position_of[cid], cls]))
    if config.strategy.is_uncertainty:
        a.uncertainty = uncertainty.measure_value(smap.candidate(cid), config.strategy.measure,
                                                  config.strategy.weighted_stderr)
    trace.attempts.append(a)
    while True:
        if succeeded is not None:
            trace.attempts[-1].success = bool(succeeded(trace.attempts[-1].candidate_id))
            if trace.attempts[-1].success:
                break
        if len(trace.attempts) >= config.attempts:
            break
        nxt = _replan_attempt(smap, cls, config, trace, scores, succeeded)
        if nxt is None:
            break
        trace.attempts.append(nxt)
    return trace
