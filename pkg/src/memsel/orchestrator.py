"""Experiment loops: agent training, policy deployment, baselines, analysis.

Agent training repeatedly fabricates fresh continual tasks from one world:
each iteration reallocates the classes into a random stage partition, splits
the data into a small training pool and a held-out reward pool, runs the
stages with the current policy selecting (and optionally enhancing) the
replay memory, collects the reward trace, and applies one TD update. The
reward after a stage is the mean IoU over all classes seen so far, measured
on the reward pool only.

Deployment runs the stages once on a full world with a frozen agent and no
reward pool. Baselines reuse the same loop with hand-crafted selection
rules and no enhancement.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .actions import EnhanceConfig, MemoryBuffer, enhance, select_top_l, update_memory
from .agent import AgentNet, Transition
from .errors import InvariantViolation, MismatchError, StateError
from .graphs import GraphConfig, OTConfig
from .segmenter import SegModel, SegmenterConfig, mean_iou
from .state import StageContext, compute_state
from .worlds import (Sample, StageDataset, StagePartition, World, make_css_view,
                     reallocate_classes, split_train_reward)

logger = logging.getLogger(__name__)

BASELINE_POLICIES = ("random", "diversity_high", "diversity_low", "nhs")


@dataclass(frozen=True)
class TrainRunConfig:
    iterations: int = 100                 # agent-training iterations
    stage_bounds: tuple[int, int] = (2, 6)
    train_fraction: float = 0.1
    memory_capacity: int = 20
    seg_epochs_train: int = 5
    seg_epochs_deploy: int = 15
    seed: int = 0
    agent_hidden: tuple[int, int] = (16, 16)
    gamma: float = 0.9
    sync_period: int = 10
    agent_lr: float = 0.1
    agent_momentum: float = 0.9
    graph: GraphConfig = GraphConfig()
    ot: OTConfig = OTConfig()
    enhance: EnhanceConfig = EnhanceConfig()
    enhance_enabled: bool = True
    segmenter: SegmenterConfig = SegmenterConfig()

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (0 < self.train_fraction < 1):
            raise ValueError("train_fraction must be in (0, 1)")
        if self.memory_capacity < 0:
            raise ValueError("memory_capacity must be >= 0")


@dataclass
class CandidateRecord:
    sample_id: int
    classes: tuple[int, ...]
    div: float
    iou: float
    forget: float
    score: float
    selected: bool


@dataclass
class StageRecord:
    stage: int
    current_classes: tuple[int, ...]
    reward: float | None
    train_iou: dict[int, float]
    candidates: list[CandidateRecord]
    selected_ids: list[int]
    selected_scores: list[float]
    enhanced_flags: list[bool]
    enhance_improved: int
    seg_losses: list[float]
    duration_s: float


@dataclass
class DeployResult:
    policy: str
    metrics: dict[str, float]
    per_class_iou: dict[int, float]
    stage_records: list[StageRecord]
    partition: StagePartition


@dataclass
class TrainResult:
    agent: AgentNet
    log: list[dict]


@dataclass
class AnalysisReport:
    class_rows: list[dict]
    sample_rows: list[dict]
    spearman_rho: float


def _seed_of(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# selection rules


def _largest_remainder_quotas(pool_sizes: dict[int, int], total: int) -> dict[int, int]:
    classes = sorted(pool_sizes)
    n = sum(pool_sizes.values())
    if n == 0 or total == 0:
        return {c: 0 for c in classes}
    raw = {c: total * pool_sizes[c] / n for c in classes}
    quota = {c: int(math.floor(raw[c])) for c in classes}
    left = total - sum(quota.values())
    by_frac = sorted(classes, key=lambda c: (-(raw[c] - quota[c]), c))
    for c in by_frac[:left]:
        quota[c] += 1
    return quota


def _baseline_select(policy: str, candidates: list[Sample], details: list[dict],
                     ious: dict[int, float], capacity: int,
                     rng: np.random.Generator) -> list[int]:
    n = len(candidates)
    want = min(capacity, n)
    if want == 0:
        return []
    if policy == "random":
        return sorted(int(i) for i in rng.choice(n, size=want, replace=False))

    pools: dict[int, list[int]] = {}
    for i, det in enumerate(details):
        for c in det:
            pools.setdefault(c, []).append(i)
    quotas = _largest_remainder_quotas({c: len(v) for c, v in pools.items()}, want)

    if policy == "nhs":
        ranked = sorted(pools, key=lambda c: (ious.get(c, 0.0), c))
        low_perf = set(ranked[:math.ceil(len(ranked) / 2)])
    elif policy in ("diversity_low", "diversity_high"):
        low_perf = None
    else:
        raise ValueError(f"unknown baseline policy {policy!r}")

    def class_key(c: int, i: int) -> float:
        d = details[i][c]["div"]
        if policy == "diversity_low":
            return d
        if policy == "diversity_high":
            return -d
        return d if c in low_perf else -d  # nhs: common for hard, diverse for easy

    picked: list[int] = []
    picked_set: set[int] = set()
    for c in sorted(pools):
        ranked_pool = sorted(pools[c], key=lambda i: (class_key(c, i), i))
        take = quotas[c]
        for i in ranked_pool:
            if take == 0:
                break
            if i in picked_set:
                continue
            picked.append(i)
            picked_set.add(i)
            take -= 1
    if len(picked) < want:
        div_mean = [float(np.mean([d["div"] for d in det.values()])) for det in details]
        order = sorted((i for i in range(n) if i not in picked_set),
                       key=lambda i: (div_mean[i] if policy == "diversity_low" else -div_mean[i], i))
        picked.extend(order[:want - len(picked)])
    return picked[:want]


# ---------------------------------------------------------------------------
# one continual stage


@dataclass
class _StageOutput:
    memory: MemoryBuffer
    record: StageRecord
    selected_states: np.ndarray  # (K, 3) states of the selected, at scoring time


def _stage_pass(model: SegModel, memory: MemoryBuffer, stage_data: StageDataset,
                seen_classes: list[int], config: TrainRunConfig, epochs: int,
                stage_seed: int, policy: str, agent: AgentNet | None,
                enhance_enabled: bool) -> _StageOutput:
    t_start = time.perf_counter()
    candidates: list[Sample] = list(memory.samples) + list(stage_data.samples)
    if not candidates:
        raise StateError(f"stage {stage_data.stage_index} has no candidates")
    model.ensure_classes(stage_data.current_classes)
    losses = model.train_stage(candidates, epochs, seed=stage_seed)
    ious = model.per_class_iou(candidates, seen_classes)

    if config.memory_capacity == 0:
        record = StageRecord(stage=stage_data.stage_index,
                             current_classes=tuple(sorted(stage_data.current_classes)),
                             reward=None, train_iou=ious, candidates=[], selected_ids=[],
                             selected_scores=[], enhanced_flags=[], enhance_improved=0,
                             seg_losses=losses, duration_s=time.perf_counter() - t_start)
        return _StageOutput(memory=memory, record=record, selected_states=np.zeros((0, 3)))

    ctx = StageContext.build(memory.samples, stage_data, model, ious,
                             config.graph, config.ot, seed=stage_seed)
    valid_idx: list[int] = []
    states: list[np.ndarray] = []
    details: list[dict] = []
    feats_by_idx: dict[int, np.ndarray] = {}
    for i, s in enumerate(candidates):
        feats = model.pixel_features(s)
        try:
            st, det = compute_state(s, model, ctx, features=feats)
        except StateError:
            logger.warning("sample %d excluded from candidacy at stage %d",
                           s.sample_id, stage_data.stage_index)
            continue
        valid_idx.append(i)
        states.append(st.as_array())
        details.append(det)
        feats_by_idx[i] = feats
    state_mat = np.vstack(states) if states else np.zeros((0, 3))

    rng = np.random.default_rng(np.random.SeedSequence([stage_seed, 47]))
    if policy == "agent":
        if agent is None:
            raise MismatchError("agent policy requires an agent")
        scores = agent.score_batch(state_mat) if len(valid_idx) else np.zeros(0)
        sel_local = select_top_l(scores, min(config.memory_capacity, len(valid_idx)))
    else:
        sel_local = _baseline_select(policy, [candidates[i] for i in valid_idx], details,
                                     ious, config.memory_capacity, rng)
        scores = np.full(len(valid_idx), np.nan)

    selected = [valid_idx[j] for j in sel_local]
    # state-excluded samples are still legal memory members when capacity allows
    target_size = min(config.memory_capacity, len(candidates))
    if len(selected) < target_size:
        extras = [i for i in range(len(candidates)) if i not in set(selected)]
        selected.extend(extras[:target_size - len(selected)])
        sel_local.extend([-1] * (target_size - len(sel_local)))

    enhanced: dict[int, Sample] = {}
    improved = 0
    if enhance_enabled and policy == "agent":
        for j, i in zip(sel_local, selected):
            if j < 0:
                continue
            out, info = enhance(candidates[i], model, agent, ctx, config.enhance,
                                features=feats_by_idx.get(i))
            if info.changed:
                enhanced[i] = out
                if info.q_after > info.q_before:
                    improved += 1

    new_memory = update_memory(memory, candidates, selected, enhanced,
                               allowed_classes=seen_classes)
    if len(new_memory) != target_size:
        raise InvariantViolation(
            f"memory size {len(new_memory)} != min(capacity, candidates) = {target_size}")

    sel_set = set(selected)
    cand_records = []
    for j, i in enumerate(valid_idx):
        det = details[j]
        cand_records.append(CandidateRecord(
            sample_id=candidates[i].sample_id,
            classes=tuple(sorted(det)),
            div=float(np.mean([d["div"] for d in det.values()])),
            iou=float(np.mean([d["iou"] for d in det.values()])),
            forget=float(np.mean([d["forget"] for d in det.values()])),
            score=float(scores[j]) if len(scores) else float("nan"),
            selected=i in sel_set))
    record = StageRecord(
        stage=stage_data.stage_index,
        current_classes=tuple(sorted(stage_data.current_classes)),
        reward=None,
        train_iou=ious,
        candidates=cand_records,
        selected_ids=[candidates[i].sample_id for i in selected],
        selected_scores=[float(scores[j]) if j >= 0 and len(scores) else float("nan")
                         for j in sel_local],
        enhanced_flags=[i in enhanced for i in selected],
        enhance_improved=improved,
        seg_losses=losses,
        duration_s=time.perf_counter() - t_start)
    sel_states = state_mat[[j for j in sel_local if j >= 0]] if len(valid_idx) else np.zeros((0, 3))
    return _StageOutput(memory=new_memory, record=record, selected_states=sel_states)


# ---------------------------------------------------------------------------
# agent training (iterated synthetic tasks over one world)


def train_agent(world: World, config: TrainRunConfig) -> TrainResult:
    config.validate()
    agent = AgentNet(hidden=config.agent_hidden, gamma=config.gamma,
                     sync_period=config.sync_period, learning_rate=config.agent_lr,
                     momentum=config.agent_momentum, seed=config.seed)
    base = StageDataset(samples=world.samples, stage_index=0,
                        current_classes=frozenset(world.classes))
    log: list[dict] = []
    for y in range(config.iterations):
        iter_seed = _seed_of(config.seed, 3001, y)
        partition = reallocate_classes(world.classes, seed=iter_seed,
                                       stage_bounds=config.stage_bounds)
        train_pool, reward_pool = split_train_reward(base, config.train_fraction, iter_seed)
        model = SegModel(world.config.feature_dim, config.segmenter, seed=iter_seed)
        memory = MemoryBuffer(capacity=config.memory_capacity)
        rewards: dict[int, float] = {}
        sel_states: dict[int, np.ndarray] = {}
        aborted = False
        for t in range(1, partition.num_stages + 1):
            stage_data = make_css_view(train_pool, partition, t)
            if not stage_data.samples:
                logger.warning("iteration %d aborted: stage %d empty", y, t)
                aborted = True
                break
            seen = partition.classes_up_to(t)
            out = _stage_pass(model, memory, stage_data, seen, config,
                              config.seg_epochs_train, _seed_of(iter_seed, t),
                              policy="agent", agent=agent,
                              enhance_enabled=config.enhance_enabled)
            memory = out.memory
            sel_states[t] = out.selected_states
            if t > 1:
                rewards[t] = mean_iou(model.per_class_iou(reward_pool.samples, seen), seen)
        if aborted:
            log.append({"iteration": y, "td_loss": float("nan"), "mean_reward": float("nan"),
                        "stages": partition.num_stages, "aborted": True})
            continue
        transitions = []
        for t in range(1, partition.num_stages):
            if len(sel_states[t]) and len(sel_states[t + 1]):
                transitions.append(Transition(stage=t, states_t=sel_states[t],
                                              states_next=sel_states[t + 1],
                                              reward=rewards[t + 1]))
        if transitions:
            loss = agent.td_step(transitions)
            agent.maybe_sync()
        else:
            loss = float("nan")
        log.append({"iteration": y, "td_loss": loss,
                    "mean_reward": float(np.mean(list(rewards.values()))) if rewards else float("nan"),
                    "stages": partition.num_stages, "aborted": False})
    return TrainResult(agent=agent, log=log)


# ---------------------------------------------------------------------------
# deployment and baselines


def _run_policy(policy: str, world: World, partition: StagePartition,
                config: TrainRunConfig, agent: AgentNet | None,
                enhance_enabled: bool) -> DeployResult:
    partition.validate()
    if set(partition.all_classes()) != set(world.classes):
        raise MismatchError("partition classes do not match the world")
    if agent is not None and agent.params["W1"].shape[0] != 3:
        raise MismatchError("agent input width must be 3")
    model = SegModel(world.config.feature_dim, config.segmenter, seed=config.seed)
    memory = MemoryBuffer(capacity=config.memory_capacity)
    records: list[StageRecord] = []
    for t in range(1, partition.num_stages + 1):
        stage_data = make_css_view(world, partition, t)
        seen = partition.classes_up_to(t)
        out = _stage_pass(model, memory, stage_data, seen, config,
                          config.seg_epochs_deploy, _seed_of(config.seed, 4001, t),
                          policy=policy, agent=agent, enhance_enabled=enhance_enabled)
        memory = out.memory
        out.record.reward = mean_iou(model.per_class_iou(world.samples, seen), seen)
        records.append(out.record)
    per_class = model.per_class_iou(world.samples, partition.all_classes())
    c1 = partition.stages[0]
    later = [c for s in partition.stages[1:] for c in s]
    metrics = {
        "initial": mean_iou(per_class, c1),
        "incremental": mean_iou(per_class, later),
        "all": mean_iou(per_class, partition.all_classes()),
    }
    return DeployResult(policy=policy, metrics=metrics, per_class_iou=per_class,
                        stage_records=records, partition=partition)


def deploy(agent: AgentNet, world: World, partition: StagePartition,
           config: TrainRunConfig) -> DeployResult:
    """Run all stages with the frozen agent selecting (and enhancing) memory."""
    name = "agent" if config.enhance_enabled else "agent_select_only"
    res = _run_policy("agent", world, partition, config, agent, config.enhance_enabled)
    res.policy = name
    return res


def run_baseline(policy: str, world: World, partition: StagePartition,
                 config: TrainRunConfig) -> DeployResult:
    """Hand-crafted selection rules; no enhancement."""
    if policy not in BASELINE_POLICIES:
        raise ValueError(f"policy must be one of {BASELINE_POLICIES}")
    return _run_policy(policy, world, partition, config, agent=None, enhance_enabled=False)


# ---------------------------------------------------------------------------
# policy analysis


def analyze_policy(result: DeployResult) -> AnalysisReport:
    """Selected-count vs class-performance table, diversity scatter rows, and
    the rank correlation between class performance and selection counts."""
    counts: dict[int, int] = {c: 0 for c in result.partition.all_classes()}
    sample_rows: list[dict] = []
    for rec in result.stage_records:
        for cand in rec.candidates:
            if cand.selected:
                for c in cand.classes:
                    counts[c] = counts.get(c, 0) + 1
            sample_rows.append({"stage": rec.stage, "sample_id": cand.sample_id,
                                "div": cand.div, "score": cand.score,
                                "selected": cand.selected})
    classes = sorted(result.per_class_iou)
    by_iou = sorted(classes, key=lambda c: (result.per_class_iou[c], c))
    rank = {c: r for r, c in enumerate(by_iou)}
    class_rows = [{"class": c, "iou": result.per_class_iou[c], "iou_rank": rank[c],
                   "selected_count": counts.get(c, 0)} for c in classes]
    ious = [result.per_class_iou[c] for c in classes]
    cnts = [counts.get(c, 0) for c in classes]
    if len(classes) < 2 or len(set(cnts)) == 1 or len(set(ious)) == 1:
        rho = 0.0
    else:
        rho = float(stats.spearmanr(ious, cnts).statistic)
        if math.isnan(rho):
            rho = 0.0
    return AnalysisReport(class_rows=class_rows, sample_rows=sample_rows, spearman_rho=rho)
