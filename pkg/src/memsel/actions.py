"""Dual-stage action space: top-L selection, gradient enhancement, memory refill.

Selection keeps the L highest-scoring candidates. Enhancement then nudges
each selected sample's pixels up the agent-score surface. The score depends
on the pixels only through the diversity component of the state, so the
gradient chain runs: agent input gradient -> exp(-tc) similarities ->
transport cost with the plan held fixed (envelope approximation) -> cosine
cost -> vertex aggregation (including the exp(-distance) weights and the
per-graph min-max normalization of the semantic distances) -> superpixel
mean pooling with a frozen assignment -> the segmenter's feature Jacobian.
Accuracy and forgetfulness components, superpixel assignments, centroids
and transport plans are treated as constants during a step; assignments are
only recomputed after all steps. Ground-truth labels are stored data and
are never modified.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantViolation
from .graphs import OTConfig, aggregate_vertices, build_graph, cosine_cost, sinkhorn_plan
from .state import StageContext, graph_seed
from .worlds import Sample

logger = logging.getLogger(__name__)

_EPS = 1e-12


@dataclass(frozen=True)
class EnhanceConfig:
    step_size: float = 0.1   # epsilon in the pixel update
    steps: int = 1
    clamp: tuple[float, float] = (0.0, 1.0)


@dataclass
class MemoryBuffer:
    capacity: int
    samples: list[Sample] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError("capacity must be >= 0")
        if len(self.samples) > self.capacity:
            raise InvariantViolation("memory exceeds its capacity")

    def __len__(self) -> int:
        return len(self.samples)


def select_top_l(scores, l: int) -> list[int]:
    """Indices of the ``l`` largest scores; ties keep the smaller index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    order = np.argsort(-scores, kind="stable")
    return [int(i) for i in order[:max(int(l), 0)]]


def update_memory(memory: MemoryBuffer, candidates: list[Sample], selected: list[int],
                  enhanced: dict[int, Sample] | None = None,
                  allowed_classes=None) -> MemoryBuffer:
    """Refill the buffer with exactly the selected (post-enhancement) samples."""
    if len(set(selected)) != len(selected):
        raise ValueError("duplicate indices in selection")
    if len(selected) > memory.capacity:
        raise InvariantViolation("selection exceeds memory capacity")
    enhanced = enhanced or {}
    allowed = None if allowed_classes is None else set(int(c) for c in allowed_classes) | {0}
    out: list[Sample] = []
    for i in selected:
        if not (0 <= i < len(candidates)):
            raise IndexError(f"selected index {i} out of range")
        s = enhanced.get(i, candidates[i])
        if i in enhanced and not np.array_equal(s.labels, candidates[i].labels):
            raise InvariantViolation("enhancement modified ground-truth labels")
        if allowed is not None and not set(np.unique(s.labels).tolist()) <= allowed:
            raise InvariantViolation(
                f"memory sample {s.sample_id} carries labels outside the seen classes")
        out.append(s.copy())
    return MemoryBuffer(capacity=memory.capacity, samples=out)


# ---------------------------------------------------------------------------
# enhancement


@dataclass
class ClassPath:
    """Frozen per-class structure used during a gradient step."""

    class_id: int
    coords: np.ndarray          # (N, 2) region pixel coordinates
    assignment: np.ndarray      # (N,) superpixel index
    counts: np.ndarray          # (M,)
    nsp: np.ndarray             # (M, M) normalized spatial distances (constant)
    support_aggs: list[np.ndarray]


@dataclass
class EnhanceInfo:
    changed: bool
    steps_applied: int
    grad_norm: float
    q_before: float
    q_after: float
    div_before: float
    div_after: float


def _normalize_offdiag(raw: np.ndarray):
    """Min-max over off-diagonal pairs; returns (normalized, lo, hi, degenerate)."""
    m = raw.shape[0]
    if m < 2:
        return np.zeros_like(raw), 0.0, 0.0, True
    off = ~np.eye(m, dtype=bool)
    lo, hi = float(raw[off].min()), float(raw[off].max())
    if hi - lo <= _EPS:
        return np.zeros_like(raw), lo, hi, True
    out = (raw - lo) / (hi - lo)
    out[np.eye(m, dtype=bool)] = 0.0
    return out, lo, hi, False


def build_class_paths(sample: Sample, model, ctx: StageContext,
                      features: np.ndarray | None = None) -> list[ClassPath]:
    """Freeze the per-class graph structure of a candidate at its current
    pixels, mirroring the state computation (same graph seeds, same own-graph
    exclusion from the support sets)."""
    paths: list[ClassPath] = []
    for cid in sample.classes():
        if cid not in ctx.support_sets:
            continue
        g = build_graph(sample, cid, model, ctx.graph_cfg,
                        seed=graph_seed(ctx.seed, sample.sample_id, cid),
                        features=features)
        m = g.num_vertices
        counts = np.bincount(g.assignment, minlength=m).astype(np.float64)
        d_sp = np.sqrt(np.maximum(
            ((g.centroids[:, None, :] - g.centroids[None, :, :]) ** 2).sum(axis=2), 0.0))
        nsp, _, _, _ = _normalize_offdiag(d_sp)
        support = ctx.support_sets[cid]
        keep = [i for i, sid in enumerate(support.sample_ids) if sid != sample.sample_id]
        aggs = [support.aggregates[i] for i in keep] if keep else list(support.aggregates)
        paths.append(ClassPath(class_id=cid, coords=g.pixel_coords, assignment=g.assignment,
                               counts=counts, nsp=nsp, support_aggs=aggs))
    return paths


def _class_forward(feats_hw: np.ndarray, path: ClassPath, ot: OTConfig,
                   frozen_plans: list[np.ndarray] | None = None):
    """Diversity of one class region under the frozen structure.

    Returns (div, cache) where the cache carries everything the backward
    pass needs."""
    region = feats_hw[path.coords[:, 0], path.coords[:, 1], :]
    m = path.counts.shape[0]
    f = np.zeros((m, region.shape[1]))
    np.add.at(f, path.assignment, region)
    f /= path.counts[:, None]
    raw = np.sqrt(np.maximum(((f[:, None, :] - f[None, :, :]) ** 2).sum(axis=2), 0.0))
    nse, lo, hi, degen = _normalize_offdiag(raw)
    dist = nse + path.nsp
    w = np.exp(-dist)
    s_row = w.sum(axis=1)
    fhat = (w @ f) / s_row[:, None]
    sims, per_support = [], []
    for i, sup in enumerate(path.support_aggs):
        cost = cosine_cost(fhat, sup)
        if frozen_plans is not None:
            plan = frozen_plans[i]
        else:
            plan, _, _ = sinkhorn_plan(cost, ot.reg, ot.iterations)
        tc = float((plan * cost).sum())
        sims.append(math.exp(-tc))
        per_support.append((cost, plan, tc))
    div = float(1.0 - np.mean(sims)) if sims else 0.0
    cache = dict(region=region, f=f, raw=raw, nse=nse, lo=lo, hi=hi, degen=degen,
                 w=w, s_row=s_row, fhat=fhat, sims=sims, per_support=per_support)
    return div, cache


def _class_backward(gdiv: float, path: ClassPath, cache: dict) -> np.ndarray:
    """Gradient of gdiv * div w.r.t. the region's pixel features."""
    f, fhat, w, s_row = cache["f"], cache["fhat"], cache["w"], cache["s_row"]
    m = f.shape[0]
    n_sup = len(path.support_aggs)
    g_fhat = np.zeros_like(fhat)
    nu = np.linalg.norm(fhat, axis=1)
    for sup, (cost, plan, tc), sim in zip(path.support_aggs, cache["per_support"], cache["sims"]):
        # d div / d tc_i = sim_i / n_sup; plan frozen: d tc / d cost = plan
        g_cost = (gdiv * sim / n_sup) * plan
        nv = np.linalg.norm(sup, axis=1)
        denom = np.outer(nu, nv)
        ok = denom > _EPS
        cos = np.zeros_like(cost)
        cos[ok] = (fhat @ sup.T)[ok] / denom[ok]
        # d cost / d fhat_a = -(sup_b/(nu_a nv_b) - cos_ab fhat_a / nu_a^2)
        scaled = np.where(ok, g_cost / np.maximum(denom, _EPS), 0.0)
        g_fhat -= scaled @ sup
        row = (np.where(ok, g_cost * cos, 0.0)).sum(axis=1)
        safe_nu2 = np.maximum(nu * nu, _EPS)
        g_fhat += (row / safe_nu2)[:, None] * fhat
    # aggregation: fhat = (w @ f) / s_row
    g_rows = g_fhat / s_row[:, None]
    g_f = w.T @ g_rows
    g_w = g_rows @ f.T - ((g_fhat * fhat).sum(axis=1) / s_row)[:, None]
    g_dist = -w * g_w
    np.fill_diagonal(g_dist, 0.0)
    # min-max normalization of the semantic distances
    if not cache["degen"]:
        raw, nse = cache["raw"], cache["nse"]
        lo, hi = cache["lo"], cache["hi"]
        r = hi - lo
        off = ~np.eye(m, dtype=bool)
        goff = np.where(off, g_dist, 0.0)
        g_raw = goff / r
        glo = float((goff * (nse - 1.0)).sum()) / r
        ghi = float(-(goff * nse).sum()) / r
        lo_mask = off & (np.abs(raw - lo) <= _EPS)
        hi_mask = off & (np.abs(raw - hi) <= _EPS)
        if lo_mask.any():
            g_raw[lo_mask] += glo / lo_mask.sum()
        if hi_mask.any():
            g_raw[hi_mask] += ghi / hi_mask.sum()
        # pairwise L2 distances back to vertex features
        diff = f[:, None, :] - f[None, :, :]
        safe = np.maximum(raw, _EPS)[:, :, None]
        unit = np.where(raw[:, :, None] > _EPS, diff / safe, 0.0)
        gsym = g_raw + g_raw.T
        g_f += (gsym[:, :, None] * unit).sum(axis=1)
    # mean pooling with frozen assignment
    g_region = g_f[path.assignment] / path.counts[path.assignment][:, None]
    return g_region


def frozen_state(pixels: np.ndarray, model, paths: list[ClassPath],
                 iou_mean: float, forget_mean: float, ot: OTConfig):
    """State under the frozen structure; returns (state 3-vector, caches)."""
    feats = model.pixel_features(pixels)
    divs, caches = [], []
    for p in paths:
        div, cache = _class_forward(feats, p, ot)
        divs.append(div)
        caches.append(cache)
    s = np.array([float(np.mean(divs)) if divs else 0.0, iou_mean, forget_mean])
    return s, caches


def enhancement_gradient(pixels: np.ndarray, model, agent, paths: list[ClassPath],
                         iou_mean: float, forget_mean: float, ot: OTConfig):
    """Pixel gradient of the agent score through the frozen-structure state.

    Returns (grad, score, div_mean)."""
    feats = model.pixel_features(pixels)
    divs, caches = [], []
    for p in paths:
        div, cache = _class_forward(feats, p, ot)
        divs.append(div)
        caches.append(cache)
    div_mean = float(np.mean(divs)) if divs else 0.0
    s = np.array([div_mean, iou_mean, forget_mean])
    q = agent.score(s)
    gs = agent.score_input_gradient(s)
    g_div_mean = float(gs[0])
    ghid = np.zeros(feats.shape)
    for p, cache in zip(paths, caches):
        g_region = _class_backward(g_div_mean / max(len(paths), 1), p, cache)
        np.add.at(ghid, (p.coords[:, 0], p.coords[:, 1]), g_region)
    grad = model.feature_vjp(pixels, ghid)
    return grad, q, div_mean


def enhance_step(pixels: np.ndarray, model, agent, paths, iou_mean, forget_mean,
                 ot: OTConfig, cfg: EnhanceConfig):
    """One gradient-ascent update on the pixels; labels are untouched."""
    grad, q, div = enhancement_gradient(pixels, model, agent, paths, iou_mean, forget_mean, ot)
    gnorm = float(np.abs(grad).max())
    if gnorm < _EPS:
        return pixels, q, div, gnorm, False
    lo, hi = cfg.clamp
    out = np.clip(pixels + cfg.step_size * grad, lo, hi)
    return out, q, div, gnorm, True


def enhance(sample: Sample, model, agent, ctx: StageContext, cfg: EnhanceConfig,
            features: np.ndarray | None = None) -> tuple[Sample, EnhanceInfo]:
    """Gradient enhancement of a selected sample (labels preserved verbatim).

    Zero gradient is a logged no-op returning the sample unchanged."""
    paths = build_class_paths(sample, model, ctx, features=features)
    cls = [p.class_id for p in paths]
    iou_mean = float(np.mean([ctx.ious.get(c, 0.0) for c in cls])) if cls else 0.0
    forget_mean = float(np.mean([ctx.forget.get(c, 0.0) for c in cls])) if cls else 0.0
    x = sample.pixels.copy()
    s0, _ = frozen_state(x, model, paths, iou_mean, forget_mean, ctx.ot)
    q_before = agent.score(s0)
    steps_applied = 0
    last_gnorm = 0.0
    for _ in range(max(cfg.steps, 1)):
        x_new, q, div, gnorm, moved = enhance_step(x, model, agent, paths, iou_mean,
                                                   forget_mean, ctx.ot, cfg)
        last_gnorm = gnorm
        if not moved:
            break
        x = x_new
        steps_applied += 1
    if steps_applied == 0:
        logger.debug("sample %d: zero enhancement gradient, returned unchanged", sample.sample_id)
        info = EnhanceInfo(changed=False, steps_applied=0, grad_norm=last_gnorm,
                           q_before=q_before, q_after=q_before,
                           div_before=float(s0[0]), div_after=float(s0[0]))
        return sample, info
    s1, _ = frozen_state(x, model, paths, iou_mean, forget_mean, ctx.ot)
    out = Sample(pixels=x, labels=sample.labels.copy(), sample_id=sample.sample_id,
                 source_stage=sample.source_stage, enhanced=True)
    info = EnhanceInfo(changed=True, steps_applied=steps_applied, grad_norm=last_gnorm,
                       q_before=q_before, q_after=agent.score(s1),
                       div_before=float(s0[0]), div_after=float(s1[0]))
    return out, info
