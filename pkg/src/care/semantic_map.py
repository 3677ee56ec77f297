"""Pre-explored semantic map: candidates, their per-view observations, and the map file format.

A map is a class vocabulary plus a list of candidates. Each candidate is one
retrievable element (a 3D instance mask or a grid cell) observed from one or
more views; every view carries a feature vector, a fusion weight and a class
distribution. Confidence in a class is read off the weight-fused distribution.

Map files are JSON. Floats are written with ``repr`` so a save/load/save cycle
is byte-identical.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import MapFormatError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DIST_TOL = 1e-9
CACHE_TOL = 1e-6

INSTANCE = "instance"
GRID = "grid"
POINT_SET = "point_set"
GRID_CELL = "grid_cell"


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def check_distribution(probs, m: int | None = None, tol: float = DIST_TOL) -> np.ndarray:
    """Validate a class distribution and return it as a float array."""
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"distribution must be a non-empty vector, got shape {p.shape}")
    if m is not None and p.size != m:
        raise ValueError(f"distribution has {p.size} entries, vocabulary has {m}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError("distribution entries must be finite and non-negative")
    total = float(p.sum())
    if abs(total - 1.0) > tol:
        raise ValueError(f"distribution sums to {total!r}, not 1")
    return p


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ValueError("vocabulary is empty")
        if any(not isinstance(n, str) or not n for n in names):
            raise ValueError("class labels must be non-empty strings")
        if len(set(names)) != len(names):
            raise ValueError("class labels must be unique")

    @property
    def size(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(name) from None

    def resolve(self, label: str | int) -> int:
        """Class id from a label or an integer id (given as int or digit string)."""
        if isinstance(label, (int, np.integer)):
            cls = int(label)
        elif label in self.names:
            return self.names.index(label)
        elif isinstance(label, str) and label.isdigit():
            cls = int(label)
        else:
            raise KeyError(label)
        if not 0 <= cls < self.size:
            raise KeyError(label)
        return cls


@dataclass(frozen=True)
class ViewObservation:
    feature: np.ndarray
    weight: float
    dist: np.ndarray


@dataclass(frozen=True, eq=False)
class SpatialExtent:
    kind: str
    points: np.ndarray | None = None
    cell: tuple[int, int] | None = None
    world: np.ndarray | None = None

    @classmethod
    def point_set(cls, points) -> "SpatialExtent":
        pts = np.array(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ValueError("point_set needs a non-empty (N, 3) array")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise ValueError("point_set contains duplicate points")
        return cls(POINT_SET, points=_frozen(pts))

    @classmethod
    def grid_cell(cls, row: int, col: int, world) -> "SpatialExtent":
        w = np.array(world, dtype=float)
        if w.shape != (2,):
            raise ValueError("grid_cell world position must be [x, y]")
        return cls(GRID_CELL, cell=(int(row), int(col)), world=_frozen(w))

    @property
    def position(self) -> np.ndarray:
        """World position in meters: the cell position, or the point-set centroid."""
        if self.kind == GRID_CELL:
            return self.world
        return self.points.mean(axis=0)

    def __eq__(self, other):
        if not isinstance(other, SpatialExtent) or other.kind != self.kind:
            return NotImplemented
        if self.kind == POINT_SET:
            return np.array_equal(self.points, other.points)
        return self.cell == other.cell and np.array_equal(self.world, other.world)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Candidate:
    """One retrievable map element.

    ``features`` is (m_i, d), ``weights`` is (m_i,) and ``dists`` is
    (m_i, m): row j holds view j.
    """

    id: int
    features: np.ndarray
    weights: np.ndarray
    dists: np.ndarray
    extent: SpatialExtent
    gt_class: int | None = None

    def __post_init__(self):
        f = np.array(self.features, dtype=float)
        w = np.array(self.weights, dtype=float).reshape(-1)
        p = np.array(self.dists, dtype=float)
        if f.ndim != 2 or p.ndim != 2:
            raise ValueError(f"candidate {self.id}: features and dists must be 2-D")
        n_views = len(w)
        if n_views < 1:
            raise ValueError(f"candidate {self.id}: needs at least one view")
        if f.shape[0] != n_views or p.shape[0] != n_views:
            raise ValueError(f"candidate {self.id}: view count mismatch")
        if not np.all(np.isfinite(f)):
            raise ValueError(f"candidate {self.id}: non-finite feature")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError(f"candidate {self.id}: weights must be positive")
        if p.shape[1] == 0 or not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError(f"candidate {self.id}: distribution entries must be finite and non-negative")
        sums = p.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > DIST_TOL):
            raise ValueError(f"candidate {self.id}: distribution sums to {sums.tolist()!r}, not 1")
        object.__setattr__(self, "features", _frozen(f))
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "dists", _frozen(p))
        object.__setattr__(self, "id", int(self.id))
        if self.gt_class is not None:
            object.__setattr__(self, "gt_class", int(self.gt_class))

    @classmethod
    def from_views(cls, id: int, views: Sequence[ViewObservation], extent: SpatialExtent,
                   gt_class: int | None = None) -> "Candidate":
        if not views:
            raise ValueError(f"candidate {id}: needs at least one view")
        return cls(
            id=id,
            features=np.array([v.feature for v in views], dtype=float),
            weights=np.array([v.weight for v in views], dtype=float),
            dists=np.array([v.dist for v in views], dtype=float),
            extent=extent,
            gt_class=gt_class,
        )

    @property
    def n_views(self) -> int:
        return len(self.weights)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.dists.shape[1]

    @property
    def views(self) -> list[ViewObservation]:
        return [ViewObservation(f, float(w), p) for f, w, p in zip(self.features, self.weights, self.dists)]

    @cached_property
    def fused(self) -> np.ndarray:
        return _frozen(fused_distribution(self))


def fused_distribution(c: Candidate) -> np.ndarray:
    """Weight-normalised mean of the per-view class distributions."""
    return c.weights @ c.dists / c.weights.sum()


def confidence(c: Candidate, cls: int) -> float:
    fused = c.fused
    if not 0 <= cls < len(fused):
        raise ValueError(f"class id {cls} outside vocabulary of size {len(fused)}")
    return float(fused[cls])


@dataclass(frozen=True)
class ViewGroup:
    """Candidates sharing a view count, stacked for vectorised measures."""

    index: np.ndarray  # positions in SemanticMap.candidates
    features: np.ndarray  # (g, v, d)
    weights: np.ndarray  # (g, v)
    dists: np.ndarray  # (g, v, m)


@dataclass(frozen=True, eq=False)
class SemanticMap:
    vocabulary: ClassVocabulary
    candidates: tuple[Candidate, ...]
    kind: str
    feature_dim: int
    # stderr mode recorded with cached measures; None means no cache is written
    cache_weighted: bool | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if self.kind not in (INSTANCE, GRID):
            raise ValueError(f"unknown map kind {self.kind!r}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        want = POINT_SET if self.kind == INSTANCE else GRID_CELL
        m = self.vocabulary.size
        seen = set()
        for c in self.candidates:
            if c.id in seen:
                raise ValueError(f"duplicate candidate id {c.id}")
            seen.add(c.id)
            if c.extent.kind != want:
                raise ValueError(f"candidate {c.id}: {self.kind} map needs {want} extents")
            if c.feature_dim != self.feature_dim:
                raise ValueError(f"candidate {c.id}: feature dim {c.feature_dim} != {self.feature_dim}")
            if c.n_classes != m:
                raise ValueError(f"candidate {c.id}: {c.n_classes} classes, vocabulary has {m}")
            if c.gt_class is not None and not 0 <= c.gt_class < m:
                raise ValueError(f"candidate {c.id}: gt_class {c.gt_class} out of range")

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def n_classes(self) -> int:
        return self.vocabulary.size

    @cached_property
    def ids(self) -> np.ndarray:
        return _frozen(np.array([c.id for c in self.candidates], dtype=np.int64))

    @cached_property
    def position_of(self) -> dict[int, int]:
        return {c.id: i for i, c in enumerate(self.candidates)}

    def candidate(self, cid: int) -> Candidate:
        return self.candidates[self.position_of[cid]]

    @cached_property
    def fused(self) -> np.ndarray:
        """(n, m) matrix of fused distributions, row i for candidate i."""
        if not self.candidates:
            return _frozen(np.zeros((0, self.n_classes)))
        return _frozen(np.array([c.fused for c in self.candidates]))

    @cached_property
    def n_views(self) -> np.ndarray:
        return _frozen(np.array([c.n_views for c in self.candidates], dtype=np.int64))

    @cached_property
    def gt_classes(self) -> np.ndarray:
        return _frozen(np.array([-1 if c.gt_class is None else c.gt_class for c in self.candidates],
                                dtype=np.int64))

    @property
    def has_labels(self) -> bool:
        return bool(self.candidates) and all(c.gt_class is not None for c in self.candidates)

    @cached_property
    def view_groups(self) -> tuple[ViewGroup, ...]:
        groups = []
        for v in np.unique(self.n_views):
            idx = np.flatnonzero(self.n_views == v)
            cs = [self.candidates[i] for i in idx]
            groups.append(ViewGroup(
                index=_frozen(idx),
                features=_frozen(np.stack([c.features for c in cs])),
                weights=_frozen(np.stack([c.weights for c in cs])),
                dists=_frozen(np.stack([c.dists for c in cs])),
            ))
        return tuple(groups)


# --- map file format ---------------------------------------------------------


def _extent_to_json(e: SpatialExtent) -> dict:
    if e.kind == POINT_SET:
        return {POINT_SET: e.points.tolist()}
    return {GRID_CELL: {"row": e.cell[0], "col": e.cell[1], "world": e.world.tolist()}}


def _extent_from_json(obj) -> SpatialExtent:
    if not isinstance(obj, dict) or len(obj) != 1:
        raise ValueError("extent must have exactly one of point_set / grid_cell")
    if POINT_SET in obj:
        return SpatialExtent.point_set(obj[POINT_SET])
    if GRID_CELL in obj:
        g = obj[GRID_CELL]
        return SpatialExtent.grid_cell(g["row"], g["col"], g["world"])
    raise ValueError(f"unknown extent kind {next(iter(obj))!r}")


def _cached_measures(c: Candidate, weighted: bool) -> dict:
    from . import uncertainty

    return {
        "entropy": uncertainty.entropy(c.fused),
        "stderr": uncertainty.stderr_channel_avg(c, weighted=weighted),
        "pwkl": uncertainty.mean_pairwise_kl(c),
    }


def map_to_json(smap: SemanticMap) -> dict:
    doc = {
        "version": FORMAT_VERSION,
        "kind": smap.kind,
        "feature_dim": smap.feature_dim,
        "vocabulary": list(smap.vocabulary.names),
    }
    if smap.cache_weighted is not None:
        from .uncertainty import KL_EPSILON

        doc["cache_meta"] = {"std": "population", "kl_epsilon": KL_EPSILON,
                             "stderr_weighted": smap.cache_weighted}
    cands = []
    for c in smap.candidates:
        entry = {"id": c.id}
        if c.gt_class is not None:
            entry["gt_class"] = c.gt_class
        entry["extent"] = _extent_to_json(c.extent)
        entry["views"] = [
            {"weight": float(w), "feature": f.tolist(), "dist": p.tolist()}
            for f, w, p in zip(c.features, c.weights, c.dists)
        ]
        if smap.cache_weighted is not None:
            entry["cache"] = _cached_measures(c, smap.cache_weighted)
        cands.append(entry)
    doc["candidates"] = cands
    return doc


def dumps_map(smap: SemanticMap) -> str:
    return json.dumps(map_to_json(smap), separators=(",", ":")) + "\n"


def save_map(smap: SemanticMap, path) -> None:
    Path(path).write_text(dumps_map(smap), encoding="utf-8")


def _same(a: float, b: float) -> bool:
    if math.isinf(a) or math.isinf(b):
        return a == b
    return abs(a - b) <= CACHE_TOL


def map_from_json(doc) -> SemanticMap:
    if not isinstance(doc, dict):
        raise MapFormatError("map document must be an object")
    if doc.get("version") != FORMAT_VERSION:
        raise MapFormatError(f"unsupported map version {doc.get('version')!r}")
    try:
        kind = doc["kind"]
        d = int(doc["feature_dim"])
        vocab = ClassVocabulary(tuple(doc["vocabulary"]))
        raw = doc["candidates"]
    except (KeyError, TypeError, ValueError) as e:
        raise MapFormatError(f"bad map header: {e}") from None
    meta = doc.get("cache_meta")
    weighted = None if meta is None else bool(meta.get("stderr_weighted", False))

    candidates = []
    for entry in raw:
        cid = entry.get("id") if isinstance(entry, dict) else None
        try:
            views = entry["views"]
            if not views:
                raise ValueError("no views")
            feats = np.array([v["feature"] for v in views], dtype=float)
            if feats.ndim != 2 or feats.shape[1] != d:
                raise ValueError(f"feature dimension mismatch (expected {d})")
            dists = np.array([v["dist"] for v in views], dtype=float)
            if dists.ndim != 2 or dists.shape[1] != vocab.size:
                raise ValueError(f"distribution length mismatch (expected {vocab.size})")
            c = Candidate(
                id=int(cid),
                features=feats,
                weights=np.array([v["weight"] for v in views], dtype=float),
                dists=dists,
                extent=_extent_from_json(entry["extent"]),
                gt_class=entry.get("gt_class"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise MapFormatError(f"candidate {cid}: {e}") from None
        cached = entry.get("cache")
        if cached is not None and weighted is not None:
            fresh = _cached_measures(c, weighted)
            for key, value in fresh.items():
                if key in cached and not _same(float(cached[key]), value):
                    logger.warning("candidate %s: cached %s %r disagrees with recomputed %r; using recomputed",
                                   cid, key, cached[key], value)
        candidates.append(c)
    try:
        return SemanticMap(vocab, tuple(candidates), kind, d, cache_weighted=weighted)
    except ValueError as e:
        raise MapFormatError(str(e)) from None


def loads_map(text: str) -> SemanticMap:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise MapFormatError(f"not valid JSON: {e}") from None
    return map_from_json(doc)


def load_map(path) -> SemanticMap:
    return loads_map(Path(path).read_text(encoding="utf-8"))


def with_candidates(smap: SemanticMap, candidates: Iterable[Candidate]) -> SemanticMap:
    return SemanticMap(smap.vocabulary, tuple(candidates), smap.kind, smap.feature_dim,
                       cache_weighted=smap.cache_weighted)
