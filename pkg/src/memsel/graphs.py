"""Per-class multi-structure graphs and transport-based similarity.

A class region is clustered into superpixels; each vertex holds the mean
pixel feature of its superpixel and the vertex-pair distance matrix combines
a semantic term (L2 between vertex features) and a spatial term (Euclidean
between superpixel centroids), each min-max normalized to [0, 1] over the
graph's own off-diagonal pairs. Two graphs are compared by aggregating each
vertex with exp(-distance) weights and solving an entropically regularized
optimal transport problem between the aggregated vertex sets with a cosine
cost; the transport cost maps to a similarity via exp(-tc).

Sinkhorn iterations run in the log domain so small regularization strengths
do not underflow. Pipeline use keeps the cheap settings (reg 0.1, 5
iterations); tests and self-similarity checks use the high-accuracy
reference settings (reg 0.01, 500 iterations).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRegionError
from .worlds import Sample

_MINMAX_EPS = 1e-12


@dataclass(frozen=True)
class GraphConfig:
    num_superpixels: int = 5      # vertices per graph (fewer on tiny regions)
    coord_weight: float = 0.5     # spatial weight in the clustering space
    kmeans_iters: int = 30


@dataclass(frozen=True)
class OTConfig:
    reg: float = 0.1
    iterations: int = 5


#: high-accuracy settings used by verification paths and self-similarity checks
REFERENCE_OT = OTConfig(reg=0.01, iterations=500)


@dataclass
class SuperpixelGraph:
    vertex_features: np.ndarray   # (M, feat) mean-pooled pixel features
    centroids: np.ndarray         # (M, 2) mean pixel coordinates (row, col)
    distance_matrix: np.ndarray   # (M, M) = normalized semantic + spatial
    pixel_coords: np.ndarray      # (N, 2) int coordinates of the region pixels
    assignment: np.ndarray        # (N,) superpixel index per region pixel
    class_id: int
    sample_id: int = -1

    @property
    def num_vertices(self) -> int:
        return self.vertex_features.shape[0]


@dataclass
class OTMatch:
    cost_matrix: np.ndarray
    plan: np.ndarray
    u: np.ndarray
    v: np.ndarray
    kernel: np.ndarray
    reg: float
    iterations: int
    tc: float


# ---------------------------------------------------------------------------
# superpixels: seeded k-means over (weighted coordinates, features)


def superpixels(features: np.ndarray, coords: np.ndarray, m: int, seed: int = 0,
                coord_weight: float = 0.5, iters: int = 30) -> np.ndarray:
    """Cluster region pixels into ``m`` non-empty superpixels.

    ``coords`` should be pre-scaled (the graph builder normalizes by image
    size). Empty clusters are repaired by splitting the largest cluster.
    """
    n = features.shape[0]
    if n < m:
        raise DegenerateRegionError(f"region has {n} pixels, fewer than {m} superpixels")
    if n == m:
        return np.arange(n)
    x = np.hstack([coord_weight * coords, features])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 509]))
    centers = x[_kmeanspp_init(x, m, rng)]
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        counts = np.bincount(new_assign, minlength=m)
        for empty in np.flatnonzero(counts == 0):
            big = int(counts.argmax())
            members = np.flatnonzero(new_assign == big)
            far = members[d2[members, big].argmax()]
            new_assign[far] = empty
            counts = np.bincount(new_assign, minlength=m)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for k in range(m):
            centers[k] = x[assign == k].mean(axis=0)
    return assign


def _kmeanspp_init(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(m - 1):
        total = d2.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(n), chosen)
            chosen.append(int(rng.choice(remaining)))
            continue
        probs = d2 / total
        chosen.append(int(rng.choice(n, p=probs)))
        d2 = np.minimum(d2, ((x - x[chosen[-1]]) ** 2).sum(axis=1))
    return np.asarray(chosen)


# ---------------------------------------------------------------------------
# graph construction


def _minmax_offdiag(d: np.ndarray) -> np.ndarray:
    """Min-max normalize a symmetric distance matrix over its off-diagonal
    entries; a constant matrix maps to all zeros."""
    m = d.shape[0]
    if m < 2:
        return np.zeros_like(d)
    off = ~np.eye(m, dtype=bool)
    lo, hi = d[off].min(), d[off].max()
    if hi - lo <= _MINMAX_EPS:
        return np.zeros_like(d)
    out = (d - lo) / (hi - lo)
    out[np.eye(m, dtype=bool)] = 0.0
    return out


def build_graph(sample: Sample, class_id: int, model, cfg: GraphConfig = GraphConfig(),
                seed: int = 0, features: np.ndarray | None = None) -> SuperpixelGraph:
    """Build the multi-structure graph of ``class_id``'s region in ``sample``.

    ``features`` may carry precomputed hidden activations to avoid repeated
    model passes within one stage.
    """
    mask = sample.labels == class_id
    n = int(mask.sum())
    if n == 0:
        raise ValueError(f"class {class_id} absent from sample {sample.sample_id}")
    if features is None:
        features = model.pixel_features(sample)
    coords = np.argwhere(mask).astype(np.float64)
    feats = features[mask]
    h, w = sample.labels.shape
    scale = float(max(h - 1, w - 1, 1))
    m_eff = min(cfg.num_superpixels, n)
    assign = superpixels(feats, coords / scale, m_eff, seed=seed,
                         coord_weight=cfg.coord_weight, iters=cfg.kmeans_iters)
    vf = np.stack([feats[assign == k].mean(axis=0) for k in range(m_eff)])
    cen = np.stack([coords[assign == k].mean(axis=0) for k in range(m_eff)])
    d_se = np.sqrt(np.maximum(((vf[:, None, :] - vf[None, :, :]) ** 2).sum(axis=2), 0.0))
    d_sp = np.sqrt(np.maximum(((cen[:, None, :] - cen[None, :, :]) ** 2).sum(axis=2), 0.0))
    dist = _minmax_offdiag(d_se) + _minmax_offdiag(d_sp)
    return SuperpixelGraph(vertex_features=vf, centroids=cen, distance_matrix=dist,
                           pixel_coords=np.argwhere(mask), assignment=assign,
                           class_id=class_id, sample_id=sample.sample_id)


def aggregate_vertices(graph: SuperpixelGraph) -> np.ndarray:
    """Weighted-sum vertex aggregation with weights exp(-distance)."""
    w = np.exp(-graph.distance_matrix)
    return (w @ graph.vertex_features) / w.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# entropic optimal transport


def cosine_cost(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """1 - cosine similarity; an all-zero vector is treated as cosine 0."""
    na = np.linalg.norm(fa, axis=1)
    nb = np.linalg.norm(fb, axis=1)
    denom = np.outer(na, nb)
    cos = np.zeros((fa.shape[0], fb.shape[0]))
    ok = denom > 0
    raw = fa @ fb.T
    cos[ok] = raw[ok] / denom[ok]
    return 1.0 - np.clip(cos, -1.0, 1.0)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    amax = a.max(axis=axis, keepdims=True)
    return (amax + np.log(np.exp(a - amax).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn_plan(cost: np.ndarray, reg: float, iterations: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Log-domain Sinkhorn with uniform marginals.

    Returns (plan, log_u, log_v). One iteration is a row update followed by
    a column update, so column marginals are exact on exit.
    """
    if reg <= 0:
        raise ValueError("reg must be positive")
    ma, mb = cost.shape
    log_a = -np.log(ma) * np.ones(ma)
    log_b = -np.log(mb) * np.ones(mb)
    log_k = -cost / reg
    log_u = np.zeros(ma)
    log_v = np.zeros(mb)
    for _ in range(int(iterations)):
        log_u = log_a - _logsumexp(log_k + log_v[None, :], axis=1)
        log_v = log_b - _logsumexp(log_k.T + log_u[None, :], axis=1)
    plan = np.exp(log_u[:, None] + log_k + log_v[None, :])
    return plan, log_u, log_v


def sinkhorn_tc(fa: np.ndarray, fb: np.ndarray, ot: OTConfig = OTConfig()) -> tuple[float, OTMatch]:
    """Transport cost between two aggregated vertex sets.

    Higher tc means lower similarity. The returned match carries the plan,
    scaling vectors and kernel for inspection and for the enhancement path.
    """
    if fa.size == 0 or fb.size == 0:
        raise ValueError("vertex sets must be non-empty")
    cost = cosine_cost(fa, fb)
    plan, log_u, log_v = sinkhorn_plan(cost, ot.reg, ot.iterations)
    tc = float((plan * cost).sum())
    match = OTMatch(cost_matrix=cost, plan=plan,
                    u=np.exp(log_u), v=np.exp(log_v),
                    kernel=np.exp(-cost / ot.reg), reg=ot.reg,
                    iterations=ot.iterations, tc=tc)
    return tc, match


def similarity(graph_i: SuperpixelGraph, graph_j: SuperpixelGraph,
               ot: OTConfig = OTConfig()) -> float:
    """Sim = exp(-tc), in (0, 1]; monotone decreasing in the transport cost."""
    tc, _ = sinkhorn_tc(aggregate_vertices(graph_i), aggregate_vertices(graph_j), ot)
    return float(np.exp(-tc))


# ---------------------------------------------------------------------------
# debug dump


def dump_graphs(path: str, graphs: list[SuperpixelGraph],
                matches: list[OTMatch] | None = None) -> None:
    """Write graphs (and optionally transport plans) as JSON for inspection."""
    doc = {"kind": "graph-dump", "graphs": [], "matches": []}
    for g in graphs:
        doc["graphs"].append({
            "class_id": g.class_id,
            "sample_id": g.sample_id,
            "vertex_features": g.vertex_features.tolist(),
            "centroids": g.centroids.tolist(),
            "distance_matrix": g.distance_matrix.tolist(),
        })
    for m in matches or []:
        doc["matches"].append({
            "cost_matrix": m.cost_matrix.tolist(),
            "plan": m.plan.tolist(),
            "reg": m.reg,
            "iterations": m.iterations,
            "tc": m.tc,
        })
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
