"""Single-view and multi-view uncertainty measures for map candidates.

* entropy of the fused class distribution (single view),
* channel-average feature standard error, optionally with fusion weights and
  the effective sample size (multi view),
* mean pairwise symmetrised KL divergence between per-view distributions
  (multi view).

Natural log throughout. Standard deviations use the population form. The
multi-view measures are ``inf`` for candidates observed from a single view.
"""

from __future__ import annotations

import math

import numpy as np

KL_EPSILON = 1e-10

ENTROPY = "entropy"
STDERR = "stderr"
PWKL = "pwkl"
MEASURES = (ENTROPY, STDERR, PWKL)


def entropy(dist) -> float:
    """Shannon entropy with 0 ln 0 = 0."""
    p = np.asarray(dist, dtype=float)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz))) + 0.0


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    logs = np.log(np.where(p > 0, p, 1.0))
    return -np.sum(p * logs, axis=-1) + 0.0


def smooth(p: np.ndarray, eps: float = KL_EPSILON) -> np.ndarray:
    q = np.asarray(p, dtype=float) + eps
    return q / q.sum(axis=-1, keepdims=True)


def kl_divergence(p, q, eps: float = KL_EPSILON) -> float:
    """KL(p || q) after adding ``eps`` to every entry and renormalising."""
    ps, qs = smooth(p, eps), smooth(q, eps)
    return max(0.0, float(np.sum(ps * (np.log(ps) - np.log(qs)))))


def _pairwise_sym_kl(dists: np.ndarray, eps: float) -> np.ndarray:
    """Mean symmetrised KL over view pairs; ``dists`` is (..., v, m) with v >= 2.

    Each unordered pair contributes 1/2 sum_c (p_c - q_c)(ln p_c - ln q_c),
    which equals 1/2 (KL(p||q) + KL(q||p)) and is non-negative term by term.
    """
    p = smooth(dists, eps)
    logp = np.log(p)
    v = p.shape[-2]
    j, l = np.triu_indices(v, k=1)
    pair = 0.5 * np.sum((p[..., j, :] - p[..., l, :]) * (logp[..., j, :] - logp[..., l, :]), axis=-1)
    return pair.mean(axis=-1)


def mean_pairwise_kl(c, eps: float = KL_EPSILON) -> float:
    if c.n_views == 1:
        return math.inf
    return float(_pairwise_sym_kl(c.dists, eps))


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(w.sum() ** 2 / np.sum(w * w))


def _channel_std(x: np.ndarray, w: np.ndarray | None) -> np.ndarray:
    """Per-channel population std over the view axis (-2) of ``x``.

    Values are shifted by the first view before averaging, so identical views
    give exactly zero.
    """
    y = x - x[..., :1, :]
    if w is None:
        mu = y.mean(axis=-2, keepdims=True)
        return np.sqrt(np.mean((y - mu) ** 2, axis=-2))
    wsum = w.sum(axis=-1)[..., None]
    mu = np.einsum("...v,...vd->...d", w, y)[..., None, :] / wsum[..., None]
    var = np.einsum("...v,...vd->...d", w, (y - mu) ** 2) / wsum
    return np.sqrt(var)


def stderr_channel_avg(c, weighted: bool = False) -> float:
    if c.n_views == 1:
        return math.inf
    if weighted:
        sigma = _channel_std(c.features, c.weights)
        n = effective_sample_size(c.weights)
    else:
        sigma = _channel_std(c.features, None)
        n = c.n_views
    return float(sigma.mean() / math.sqrt(n))


def measure_value(c, measure: str, weighted: bool = False) -> float:
    if measure == ENTROPY:
        return entropy(c.fused)
    if measure == STDERR:
        return stderr_channel_avg(c, weighted=weighted)
    if measure == PWKL:
        return mean_pairwise_kl(c)
    raise ValueError(f"unknown uncertainty measure {measure!r}")


def batch_measure(smap, index, measure: str, weighted: bool = False) -> np.ndarray:
    """Measure for the candidates at positions ``index`` of ``smap``, computed on the fly.

    Same definitions as the per-candidate functions, vectorised over the
    map's view-count groups.
    """
    index = np.asarray(index, dtype=np.int64)
    if measure == ENTROPY:
        return entropy_rows(smap.fused[index])
    if measure not in (STDERR, PWKL):
        raise ValueError(f"unknown uncertainty measure {measure!r}")
    out = np.empty(len(index))
    slot = np.full(len(smap), -1, dtype=np.int64)
    slot[index] = np.arange(len(index))
    for g in smap.view_groups:
        where = slot[g.index]
        sel = where >= 0
        if not sel.any():
            continue
        v = g.weights.shape[1]
        if v == 1:
            out[where[sel]] = math.inf
            continue
        if measure == PWKL:
            vals = _pairwise_sym_kl(g.dists[sel], KL_EPSILON)
        elif weighted:
            w = g.weights[sel]
            sigma = _channel_std(g.features[sel], w)
            n_eff = w.sum(axis=1) ** 2 / np.sum(w * w, axis=1)
            vals = sigma.mean(axis=1) / np.sqrt(n_eff)
        else:
            vals = _channel_std(g.features[sel], None).mean(axis=1) / math.sqrt(v)
        out[where[sel]] = vals
    return out


def all_measures(smap, weighted: bool = False) -> dict[str, np.ndarray]:
    """Every measure for every candidate, keyed by measure name."""
    idx = np.arange(len(smap))
    return {m: batch_measure(smap, idx, m, weighted) for m in MEASURES}
