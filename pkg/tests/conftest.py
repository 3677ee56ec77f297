import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from care.semantic_map import Candidate, ClassVocabulary, SemanticMap, SpatialExtent


def cell(i):
    return SpatialExtent.grid_cell(0, i, [float(i), 0.0])


def cand(cid, dists, features=None, weights=None, gt=None, extent=None):
    dists = np.atleast_2d(np.asarray(dists, dtype=float))
    n = len(dists)
    if features is None:
        features = np.zeros((n, 2))
    if weights is None:
        weights = np.ones(n)
    return Candidate(cid, features, weights, dists, extent or cell(cid), gt)


def grid_map(cands, m=None, d=None):
    m = m or cands[0].n_classes
    d = d or cands[0].feature_dim
    vocab = ClassVocabulary(tuple(f"c{i}" for i in range(m)))
    return SemanticMap(vocab, tuple(cands), "grid", d)


def random_candidate(rng, cid, m, d, max_views=5, gt=None, zeros=False):
    v = int(rng.integers(1, max_views + 1))
    dists = rng.dirichlet(np.full(m, 0.7), size=v)
    if zeros:
        dists[:, int(rng.integers(m))] = 0.0
        dists /= dists.sum(axis=1, keepdims=True)
    return Candidate(cid, rng.standard_normal((v, d)), rng.uniform(0.1, 3.0, size=v), dists, cell(cid),
                     gt if gt is not None else int(rng.integers(m)))


def random_grid_map(seed, n, m=6, d=8, max_views=5):
    rng = np.random.default_rng(seed)
    return grid_map([random_candidate(rng, i, m, d, max_views) for i in range(n)], m, d)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
