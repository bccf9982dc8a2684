"""Per-candidate decision features: diversity, accuracy, forgetfulness.

For each class the stage provides a support set of graphs (all memory
samples of a previous class; a seeded 10% subsample, at least two, of a
current class). Diversity of a sample is one minus its average similarity
to the class support set, so larger values mean more novel samples. The
representative set keeps the lowest-diversity tenth of the support set and
drives the class-level forgetfulness score: classes whose representatives
look like other classes' representatives are the ones replay should guard.
The three per-class groups are averaged over the classes present in a
sample and concatenated into its 3-vector state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import StateError
from .graphs import (GraphConfig, OTConfig, SuperpixelGraph, aggregate_vertices,
                     build_graph, sinkhorn_tc)
from .worlds import Sample, StageDataset

logger = logging.getLogger(__name__)

CURRENT_SUPPORT_FRACTION = 0.1
MIN_CURRENT_SUPPORT = 2
REPRESENTATIVE_FRACTION = 0.1


@dataclass
class SupportSet:
    class_id: int
    graphs: list[SuperpixelGraph]
    sample_ids: list[int]
    aggregates: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = [aggregate_vertices(g) for g in self.graphs]

    def __len__(self) -> int:
        return len(self.graphs)


@dataclass
class RepresentativeSet:
    class_id: int
    graphs: list[SuperpixelGraph]
    sample_ids: list[int]
    aggregates: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = [aggregate_vertices(g) for g in self.graphs]


@dataclass(frozen=True)
class StateVector:
    div_mean: float
    iou_mean: float
    forget_mean: float

    def as_array(self) -> np.ndarray:
        return np.array([self.div_mean, self.iou_mean, self.forget_mean])


def graph_seed(base_seed: int, sample_id: int, class_id: int) -> int:
    return int(np.random.SeedSequence([base_seed, sample_id, class_id]).generate_state(1)[0])


def _sim_to_aggregates(agg: np.ndarray, aggregates: list[np.ndarray], ot: OTConfig) -> np.ndarray:
    return np.array([math.exp(-sinkhorn_tc(agg, other, ot)[0]) for other in aggregates])


def build_support_sets(memory_samples: list[Sample], current: StageDataset, model,
                       graph_cfg: GraphConfig = GraphConfig(), seed: int = 0) -> dict[int, SupportSet]:
    """Support sets for every class appearing in memory or the current stage.

    Classes without a single sample anywhere are skipped with a warning.
    """
    sets: dict[int, SupportSet] = {}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 613]))

    def graphs_for(pool: list[Sample], cid: int) -> tuple[list[SuperpixelGraph], list[int]]:
        gs, ids = [], []
        for s in pool:
            gs.append(build_graph(s, cid, model, graph_cfg,
                                  seed=graph_seed(seed, s.sample_id, cid)))
            ids.append(s.sample_id)
        return gs, ids

    previous_classes = sorted({c for s in memory_samples for c in s.classes()})
    for cid in previous_classes:
        pool = [s for s in memory_samples if (s.labels == cid).any()]
        graphs, ids = graphs_for(pool, cid)
        sets[cid] = SupportSet(class_id=cid, graphs=graphs, sample_ids=ids)

    for cid in sorted(current.current_classes):
        pool = [s for s in current.samples if (s.labels == cid).any()]
        if not pool:
            logger.warning("class %d has no samples in stage %d; skipped", cid, current.stage_index)
            continue
        k = min(len(pool), max(MIN_CURRENT_SUPPORT,
                               math.ceil(CURRENT_SUPPORT_FRACTION * len(pool))))
        idx = np.sort(rng.choice(len(pool), size=k, replace=False))
        subset = [pool[i] for i in idx]
        graphs, ids = graphs_for(subset, cid)
        sets[cid] = SupportSet(class_id=cid, graphs=graphs, sample_ids=ids)
    return sets


def diversity(graph: SuperpixelGraph, support: SupportSet | list[SuperpixelGraph],
              ot: OTConfig = OTConfig()) -> float:
    """div = 1 - mean similarity to the support graphs, in [0, 1]."""
    if isinstance(support, SupportSet):
        aggs = support.aggregates
    else:
        aggs = [aggregate_vertices(g) for g in support]
    if not aggs:
        raise ValueError("support set is empty")
    sims = _sim_to_aggregates(aggregate_vertices(graph), aggs, ot)
    return float(1.0 - sims.mean())


def support_diversities(support: SupportSet, ot: OTConfig = OTConfig()) -> np.ndarray:
    """Diversity of each support graph against the rest of its own set."""
    n = len(support)
    if n == 1:
        return np.zeros(1)
    sim = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            tc, _ = sinkhorn_tc(support.aggregates[i], support.aggregates[j], ot)
            sim[i, j] = sim[j, i] = math.exp(-tc)
    mean_others = (sim.sum(axis=1) - 1.0) / (n - 1)
    return 1.0 - mean_others


def representative_set(support: SupportSet, diversities: np.ndarray) -> RepresentativeSet:
    """Lowest-diversity tenth of the support set (at least one graph);
    ties keep the earlier input position."""
    n = len(support)
    k = max(1, math.ceil(REPRESENTATIVE_FRACTION * n))
    order = np.argsort(diversities, kind="stable")[:k]
    return RepresentativeSet(class_id=support.class_id,
                             graphs=[support.graphs[i] for i in order],
                             sample_ids=[support.sample_ids[i] for i in order],
                             aggregates=[support.aggregates[i] for i in order])


def forgetfulness(class_id: int, rep_sets: dict[int, RepresentativeSet],
                  ot: OTConfig = OTConfig()) -> float:
    """Triple-average similarity between this class's representatives and
    every other class's representatives. Defined as 0 with a single class."""
    others = [j for j in sorted(rep_sets) if j != class_id]
    if class_id not in rep_sets:
        raise ValueError(f"no representative set for class {class_id}")
    if not others:
        return 0.0
    own = rep_sets[class_id]
    outer = []
    for agg in own.aggregates:
        per_class = []
        for j in others:
            sims = _sim_to_aggregates(agg, rep_sets[j].aggregates, ot)
            per_class.append(sims.mean())
        outer.append(np.mean(per_class))
    return float(np.mean(outer))


def forgetfulness_map(rep_sets: dict[int, RepresentativeSet],
                      ot: OTConfig = OTConfig()) -> dict[int, float]:
    return {c: forgetfulness(c, rep_sets, ot) for c in sorted(rep_sets)}


@dataclass
class StageContext:
    """Immutable per-stage inputs shared by all candidate state computations."""

    support_sets: dict[int, SupportSet]
    rep_sets: dict[int, RepresentativeSet]
    forget: dict[int, float]
    ious: dict[int, float]
    graph_cfg: GraphConfig
    ot: OTConfig
    seed: int

    @classmethod
    def build(cls, memory_samples: list[Sample], current: StageDataset, model,
              ious: dict[int, float], graph_cfg: GraphConfig = GraphConfig(),
              ot: OTConfig = OTConfig(), seed: int = 0) -> "StageContext":
        support = build_support_sets(memory_samples, current, model, graph_cfg, seed)
        reps = {c: representative_set(s, support_diversities(s, ot))
                for c, s in support.items()}
        forget = forgetfulness_map(reps, ot)
        return cls(support_sets=support, rep_sets=reps, forget=forget, ious=ious,
                   graph_cfg=graph_cfg, ot=ot, seed=seed)


def compute_state(sample: Sample, model, ctx: StageContext,
                  features: np.ndarray | None = None) -> tuple[StateVector, dict[int, dict]]:
    """State vector of one candidate plus its per-class breakdown.

    The candidate's own graph is excluded from its class support set when
    present (support sets are shared across candidates), unless it is the
    only member.
    """
    classes = [c for c in sample.classes() if c in ctx.support_sets]
    if not classes:
        raise StateError(f"sample {sample.sample_id} has no class with support data")
    details: dict[int, dict] = {}
    for cid in classes:
        g = build_graph(sample, cid, model, ctx.graph_cfg,
                        seed=graph_seed(ctx.seed, sample.sample_id, cid),
                        features=features)
        support = ctx.support_sets[cid]
        keep = [i for i, sid in enumerate(support.sample_ids) if sid != sample.sample_id]
        aggs = [support.aggregates[i] for i in keep] if keep else support.aggregates
        sims = _sim_to_aggregates(aggregate_vertices(g), aggs, ctx.ot)
        details[cid] = {
            "div": float(1.0 - sims.mean()),
            "iou": float(ctx.ious.get(cid, 0.0)),
            "forget": float(ctx.forget.get(cid, 0.0)),
        }
    state = StateVector(
        div_mean=float(np.mean([d["div"] for d in details.values()])),
        iou_mean=float(np.mean([d["iou"] for d in details.values()])),
        forget_mean=float(np.mean([d["forget"] for d in details.values()])),
    )
    return state, details
