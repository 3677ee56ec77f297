"""Seeded synthetic semantic maps with a biased grounding model.

Each candidate has a true class ``g``. Its views see the row ``confusion[g]``
as the mean predicted distribution. Confusion mass on a *biased pair*
``(g, c)`` is view dependent: some views are fooled and report the confused
class, others see the object correctly, with the mixture averaging back to
the confusion row. ``view_noise`` scales both this fluctuation (through
``bias_view_gain``) and an honest log-normal perturbation of every view, so
``view_noise == 0`` gives perfectly consistent views.

A view's feature is the distribution-weighted mix of unit class anchors plus
isotropic Gaussian noise.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .benchmark import Benchmark, Query
from .errors import GenerationError
from .semantic_map import (
    GRID, INSTANCE, Candidate, ClassVocabulary, SemanticMap, SpatialExtent,
)

UNIFORM = "uniform"
DISTANCE_DECAY = "distance_decay"

SLOT_SIZE_M = 1.0


def _as_matrix(a) -> tuple[tuple[float, ...], ...]:
    return tuple(tuple(float(x) for x in row) for row in np.asarray(a, dtype=float))


@dataclass(frozen=True)
class GroundingModelSpec:
    confusion: tuple[tuple[float, ...], ...]
    view_noise: float = 0.0
    feature_noise_sigma: float = 0.0
    feature_dim: int = 16
    max_views: int = 5
    weight_model: str = UNIFORM
    biased_pairs: tuple[tuple[int, int], ...] = ()
    bias_view_gain: float = 10.0

    def __post_init__(self):
        conf = _as_matrix(self.confusion)
        object.__setattr__(self, "confusion", conf)
        object.__setattr__(self, "biased_pairs", tuple((int(a), int(b)) for a, b in self.biased_pairs))
        c = np.array(conf)
        m = len(c)
        if c.shape != (m, m) or m < 1:
            raise ValueError("confusion must be a square matrix")
        if np.any(c < 0) or np.any(np.abs(c.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("confusion rows must be non-negative and sum to 1")
        if self.view_noise < 0 or self.feature_noise_sigma < 0 or self.bias_view_gain < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.feature_dim < 1 or self.max_views < 1:
            raise ValueError("feature_dim and max_views must be positive")
        if self.weight_model not in (UNIFORM, DISTANCE_DECAY):
            raise ValueError(f"unknown weight model {self.weight_model!r}")
        for a, b in self.biased_pairs:
            if not (0 <= a < m and 0 <= b < m) or a == b:
                raise ValueError(f"bad biased pair {(a, b)}")

    @property
    def n_classes(self) -> int:
        return len(self.confusion)


@dataclass(frozen=True)
class SceneSpec:
    n_candidates: int = 200
    class_counts: tuple[int, ...] | None = None
    class_names: tuple[str, ...] | None = None
    views_min: int = 2
    views_max: int = 5
    single_view_rate: float = 0.1
    kind: str = INSTANCE
    room_size_m: float = 20.0
    points_per_instance: int = 16
    cell_size_m: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (INSTANCE, GRID):
            raise ValueError(f"unknown map kind {self.kind!r}")
        if not 1 <= self.views_min <= self.views_max:
            raise ValueError("need 1 <= views_min <= views_max")
        if not 0.0 <= self.single_view_rate <= 1.0:
            raise ValueError("single_view_rate must be in [0, 1]")
        if self.class_counts is not None:
            object.__setattr__(self, "class_counts", tuple(int(n) for n in self.class_counts))
            if any(n < 0 for n in self.class_counts):
                raise ValueError("class counts must be non-negative")
        if self.class_names is not None:
            object.__setattr__(self, "class_names", tuple(self.class_names))


def biased_confusion(n_classes: int, pairs=((0, 1), (2, 3), (4, 5)), bias: float = 0.6,
                     accuracy: float = 0.5) -> np.ndarray:
    """Confusion matrix where each ``(src, dst)`` pair sends ``bias`` of src's mass to dst.

    Unbiased rows keep ``accuracy`` on the true class and spread the rest
    uniformly; biased rows keep ``1 - bias`` on the true class.
    """
    m = n_classes
    c = np.full((m, m), (1.0 - accuracy) / (m - 1) if m > 1 else 0.0)
    np.fill_diagonal(c, accuracy if m > 1 else 1.0)
    for src, dst in pairs:
        c[src] = 0.0
        c[src, src] = 1.0 - bias
        c[src, dst] = bias
    return c


def bias_model(n_classes: int = 10, n_pairs: int = 3, bias: float = 0.6, accuracy: float = 0.5,
               view_noise: float = 0.1, feature_noise_sigma: float = 0.02, feature_dim: int = 16,
               **kw) -> GroundingModelSpec:
    """Grounding model with ``n_pairs`` disjoint biased class pairs (0->1, 2->3, ...)."""
    if 2 * n_pairs > n_classes:
        raise ValueError("not enough classes for the requested biased pairs")
    pairs = tuple((2 * i, 2 * i + 1) for i in range(n_pairs))
    return GroundingModelSpec(
        confusion=_as_matrix(biased_confusion(n_classes, pairs, bias, accuracy)),
        view_noise=view_noise,
        feature_noise_sigma=feature_noise_sigma,
        feature_dim=feature_dim,
        biased_pairs=pairs,
        **kw,
    )


def class_anchors(n_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Unit class anchors: orthogonal basis vectors when dim >= n_classes, else random."""
    if dim >= n_classes:
        return np.eye(n_classes, dim)
    a = rng.standard_normal((n_classes, dim))
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def _class_assignment(scene: SceneSpec, m: int, rng: np.random.Generator) -> np.ndarray:
    if scene.class_counts is not None:
        if len(scene.class_counts) != m:
            raise GenerationError(f"class_counts has {len(scene.class_counts)} entries, model has {m} classes")
        labels = np.repeat(np.arange(m), scene.class_counts)
    else:
        labels = np.arange(scene.n_candidates) % m
    rng.shuffle(labels)
    return labels


def _extents(scene: SceneSpec, n: int, rng: np.random.Generator) -> list[SpatialExtent]:
    if scene.kind == GRID:
        side = int(math.floor(scene.room_size_m / scene.cell_size_m))
        if n > side * side:
            raise GenerationError(f"{n} cells do not fit a {side}x{side} grid")
        cells = rng.choice(side * side, size=n, replace=False)
        out = []
        for cell in cells:
            r, c = divmod(int(cell), side)
            world = [(c + 0.5) * scene.cell_size_m, (r + 0.5) * scene.cell_size_m]
            out.append(SpatialExtent.grid_cell(r, c, world))
        return out

    side = int(math.floor(scene.room_size_m / SLOT_SIZE_M))
    if n > side * side:
        raise GenerationError(f"{n} instances do not fit a {scene.room_size_m} m room")
    p = scene.points_per_instance
    lattice = max(2, math.ceil(p ** (1 / 3)) + 1)
    if p > lattice ** 3:
        raise GenerationError("points_per_instance too large")
    step = SLOT_SIZE_M / lattice
    slots = rng.choice(side * side, size=n, replace=False)
    out = []
    for slot in slots:
        r, c = divmod(int(slot), side)
        idx = np.sort(rng.choice(lattice ** 3, size=p, replace=False))
        ijk = np.stack(np.unravel_index(idx, (lattice,) * 3), axis=1)
        pts = (ijk + 0.5) * step + np.array([c * SLOT_SIZE_M, r * SLOT_SIZE_M, 0.0])
        out.append(SpatialExtent.point_set(pts))
    return out


def _view_dists(g: int, n_views: int, model: GroundingModelSpec, bias_mask: np.ndarray,
                rng: np.random.Generator) -> np.ndarray:
    row = np.array(model.confusion[g])
    m = len(row)
    biased = row * bias_mask[g]
    s = biased.sum()
    swing = 2.0 * rng.random(n_views) - 1.0
    honest = rng.standard_normal((n_views, m))
    views = np.tile(row, (n_views, 1))
    if s > 0:
        # move up to min(s, row[g]) of mass between the true class and its
        # confused classes; the shift is zero-mean so the row stays the mean
        amp = min(1.0, model.bias_view_gain * model.view_noise) * min(s, row[g])
        shift = amp * swing
        views = views + shift[:, None] * (biased / s - np.eye(m)[g])
        views = np.clip(views, 0.0, None)
    if model.view_noise > 0:
        views = views * np.exp(model.view_noise * honest)
    return views / views.sum(axis=1, keepdims=True)


def generate_map(scene: SceneSpec, model: GroundingModelSpec) -> SemanticMap:
    m = model.n_classes
    rng = np.random.default_rng(scene.seed)
    names = scene.class_names or tuple(f"class_{i:02d}" for i in range(m))
    if len(names) != m:
        raise GenerationError(f"{len(names)} class names for {m} classes")
    vocab = ClassVocabulary(names)
    anchors = class_anchors(m, model.feature_dim, rng)
    labels = _class_assignment(scene, m, rng)
    n = len(labels)
    extents = _extents(scene, n, rng)
    bias_mask = np.zeros((m, m))
    for a, b in model.biased_pairs:
        bias_mask[a, b] = 1.0

    vmax = min(scene.views_max, model.max_views)
    vmin = min(max(2, scene.views_min), vmax)
    candidates = []
    for i, g in enumerate(labels):
        single = rng.random() < scene.single_view_rate or vmax == 1
        n_views = 1 if single else int(rng.integers(vmin, vmax + 1))
        dists = _view_dists(int(g), n_views, model, bias_mask, rng)
        noise = rng.standard_normal((n_views, model.feature_dim))
        feats = dists @ anchors + model.feature_noise_sigma * noise
        view_dist_m = rng.uniform(0.5, 5.0, size=n_views)
        weights = np.ones(n_views) if model.weight_model == UNIFORM else 1.0 / view_dist_m
        candidates.append(Candidate(i, feats, weights, dists, extents[i], int(g)))
    return SemanticMap(vocab, tuple(candidates), scene.kind, model.feature_dim)


def scene_hash(scene: SceneSpec, model: GroundingModelSpec) -> str:
    doc = json.dumps({"scene": asdict(scene), "model": asdict(model)}, sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def make_benchmark(scene: SceneSpec, model: GroundingModelSpec, queries_per_class: int = 1,
                   query_classes=None) -> Benchmark:
    """Map plus class-level queries; a query's ground truth is every candidate of that class."""
    smap = generate_map(scene, model)
    present = sorted(set(smap.gt_classes.tolist()))
    classes = present if query_classes is None else [int(c) for c in query_classes]
    queries = []
    for cls in classes:
        gt = tuple(int(i) for i in smap.ids[smap.gt_classes == cls])
        if not gt:
            raise GenerationError(f"query class {cls} does not appear in the map")
        queries += [Query(cls, gt)] * queries_per_class
    meta = {"seed": scene.seed, "scene_hash": scene_hash(scene, model),
            "scene": asdict(scene), "model": asdict(model)}
    return Benchmark(smap, queries, meta)


def random_map(n: int, n_classes: int = 20, feature_dim: int = 32, views=(1, 5), seed: int = 0,
               kind: str = GRID) -> SemanticMap:
    """Unstructured random map for timing: Dirichlet view distributions, Gaussian features."""
    rng = np.random.default_rng(seed)
    counts = rng.integers(views[0], views[1] + 1, size=n)
    total = int(counts.sum())
    dists = rng.dirichlet(np.ones(n_classes), size=total)
    feats = rng.standard_normal((total, feature_dim))
    weights = rng.uniform(0.2, 2.0, size=total)
    side = int(math.ceil(math.sqrt(n)))
    starts = np.concatenate([[0], np.cumsum(counts)])
    vocab = ClassVocabulary(tuple(f"class_{i:02d}" for i in range(n_classes)))
    cands = []
    for i in range(n):
        a, b = starts[i], starts[i + 1]
        r, c = divmod(i, side)
        if kind == GRID:
            ext = SpatialExtent.grid_cell(r, c, [c * 0.5, r * 0.5])
        else:
            ext = SpatialExtent.point_set([[c, r, 0.0]])
        cands.append(Candidate(i, feats[a:b], weights[a:b], dists[a:b], ext, int(rng.integers(n_classes))))
    return SemanticMap(vocab, tuple(cands), kind, feature_dim)
