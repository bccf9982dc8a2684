"""Synthetic segmentation worlds and their slicing into continual stages.

A world is a deterministic collection of labeled images. Each class is a
parametric colored shape over a shared textured background; every sample of
class c also carries a smaller companion shape of a fixed partner class so
that images contain more than one foreground class and background semantics
shift across stages. All per-sample variation is scaled by
``intra_class_spread``: at spread 0 every sample of a class is identical.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, PartitionError

FORMAT_VERSION = 1

_SHAPE_KINDS = ("disk", "square", "diamond", "ring", "cross", "triangle")


@dataclass(frozen=True)
class WorldConfig:
    num_classes: int = 10
    image_size: tuple[int, int] = (32, 32)
    feature_dim: int = 3
    samples_per_class: int = 20
    intra_class_spread: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 4:
            raise ConfigurationError("num_classes must be >= 4")
        if min(self.image_size) < 16:
            raise ConfigurationError("image_size dimensions must be >= 16")
        if self.feature_dim < 2:
            raise ConfigurationError("feature_dim must be >= 2")
        if self.samples_per_class < 10:
            raise ConfigurationError("samples_per_class must be >= 10")
        if self.intra_class_spread < 0:
            raise ConfigurationError("intra_class_spread must be >= 0")
        if not (0 <= int(self.seed) < 2**64):
            raise ConfigurationError("seed must fit in 64 bits")


@dataclass
class Sample:
    """One labeled image: per-pixel features in [0,1] plus an id/provenance."""

    pixels: np.ndarray  # (H, W, F) float64
    labels: np.ndarray  # (H, W) int32, 0 = background
    sample_id: int
    source_stage: int = 0
    enhanced: bool = False

    def classes(self) -> list[int]:
        present = np.unique(self.labels)
        return [int(c) for c in present if c != 0]

    def copy(self) -> "Sample":
        return Sample(
            pixels=self.pixels.copy(),
            labels=self.labels.copy(),
            sample_id=self.sample_id,
            source_stage=self.source_stage,
            enhanced=self.enhanced,
        )


@dataclass(frozen=True)
class StagePartition:
    """Ordered disjoint class-id sets, one per continual stage."""

    stages: tuple[tuple[int, ...], ...]

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def classes_up_to(self, t: int) -> list[int]:
        out: list[int] = []
        for s in self.stages[:t]:
            out.extend(s)
        return out

    def all_classes(self) -> list[int]:
        return self.classes_up_to(self.num_stages)

    def validate(self) -> None:
        if self.num_stages < 1:
            raise ConfigurationError("partition needs at least one stage")
        seen: set[int] = set()
        for s in self.stages:
            if not s:
                raise ConfigurationError("empty stage in partition")
            if seen & set(s):
                raise ConfigurationError("stages are not disjoint")
            seen |= set(s)
        # First stage must hold at least half of all classes (continual
        # segmentation convention; generated partitions use strictly more).
        if 2 * len(self.stages[0]) < len(seen):
            raise ConfigurationError("first stage must hold at least half the classes")


@dataclass
class StageDataset:
    samples: list[Sample]
    stage_index: int
    current_classes: frozenset[int]


@dataclass
class World:
    config: WorldConfig
    samples: list[Sample]

    @property
    def classes(self) -> list[int]:
        return list(range(1, self.config.num_classes + 1))


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def _shape_mask(kind: str, shape: tuple[int, int], center: np.ndarray, radius: float) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - center[0]
    dx = xx - center[1]
    if kind == "disk":
        return dy * dy + dx * dx <= radius * radius
    if kind == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= radius
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= radius * radius) & (d2 >= (0.45 * radius) ** 2)
    if kind == "cross":
        arm = max(1.0, radius / 2.5)
        inside = (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
        return inside & ((np.abs(dy) <= arm) | (np.abs(dx) <= arm))
    if kind == "triangle":
        return (dy >= -radius) & (dy <= radius) & (np.abs(dx) <= 0.8 * (dy + radius) / 2.0)
    raise ValueError(f"unknown shape kind {kind!r}")


class _ClassTemplate:
    """Deterministic per-class generator parameters."""

    def __init__(self, world_seed: int, class_id: int, num_classes: int, cfg: WorldConfig):
        rng = _rng(world_seed, 101, class_id)
        self.class_id = class_id
        self.kind = _SHAPE_KINDS[(class_id - 1) % len(_SHAPE_KINDS)]
        self.center_frac = rng.uniform(0.30, 0.52, size=2)
        self.radius_frac = rng.uniform(0.16, 0.24)
        self.feature = rng.uniform(0.15, 0.85, size=cfg.feature_dim)
        self.companion_id = class_id % num_classes + 1
        self.companion_center_frac = rng.uniform(0.62, 0.78, size=2)


def _background(cfg: WorldConfig) -> np.ndarray:
    h, w = cfg.image_size
    rng = _rng(cfg.seed, 7)
    base = rng.uniform(0.40, 0.60, size=cfg.feature_dim)
    yy, xx = np.mgrid[0:h, 0:w]
    wave = 0.05 * np.sin(2 * np.pi * (xx / w + yy / h * 1.7))
    tex = rng.normal(0.0, 0.02, size=(h, w, cfg.feature_dim))
    return np.clip(base[None, None, :] + wave[:, :, None] + tex, 0.0, 1.0)


def _draw(canvas: np.ndarray, labels: np.ndarray, tpl: _ClassTemplate, rng: np.random.Generator,
          spread: float, scale: float, as_companion: bool) -> None:
    h, w = labels.shape
    span = min(h, w)
    center_frac = tpl.companion_center_frac if as_companion else tpl.center_frac
    jitter = spread * rng.uniform(-0.12, 0.12, size=2)
    center = np.clip(center_frac + jitter, 0.08, 0.92) * np.array([h - 1, w - 1])
    radius = max(2.0, tpl.radius_frac * span * scale * (1.0 + spread * rng.uniform(-0.25, 0.25)))
    feat = np.clip(tpl.feature + spread * rng.uniform(-0.12, 0.12, size=tpl.feature.shape), 0.0, 1.0)
    mask = _shape_mask(tpl.kind, (h, w), center, radius)
    canvas[mask] = feat
    labels[mask] = tpl.class_id


def generate_world(config: WorldConfig) -> World:
    """Build the full dataset: deterministic in (config, seed), fully labeled."""
    config.validate()
    templates = {c: _ClassTemplate(config.seed, c, config.num_classes, config)
                 for c in range(1, config.num_classes + 1)}
    bg = _background(config)
    h, w = config.image_size
    samples: list[Sample] = []
    sid = 0
    for c in range(1, config.num_classes + 1):
        tpl = templates[c]
        comp = templates[tpl.companion_id]
        for j in range(config.samples_per_class):
            rng = _rng(config.seed, 211, c, j)
            noise = config.intra_class_spread * rng.normal(0.0, 0.03, size=(h, w, config.feature_dim))
            canvas = np.clip(bg + noise, 0.0, 1.0)
            labels = np.zeros((h, w), dtype=np.int32)
            _draw(canvas, labels, comp, rng, config.intra_class_spread, scale=0.55, as_companion=True)
            _draw(canvas, labels, tpl, rng, config.intra_class_spread, scale=1.0, as_companion=False)
            samples.append(Sample(pixels=np.clip(canvas, 0.0, 1.0), labels=labels, sample_id=sid))
            sid += 1
    return World(config=config, samples=samples)


def _as_samples(dataset: World | StageDataset | Sequence[Sample]) -> list[Sample]:
    if isinstance(dataset, World):
        return dataset.samples
    if isinstance(dataset, StageDataset):
        return dataset.samples
    return list(dataset)


def make_css_view(dataset: World | StageDataset | Sequence[Sample], partition: StagePartition,
                  t: int) -> StageDataset:
    """Stage-t view: keep samples touching C_t, relabel all other classes to 0."""
    if not (1 <= t <= partition.num_stages):
        raise IndexError(f"stage index {t} out of range 1..{partition.num_stages}")
    current = frozenset(partition.stages[t - 1])
    out: list[Sample] = []
    for s in _as_samples(dataset):
        keep = np.isin(s.labels, list(current))
        if not keep.any():
            continue
        labels = np.where(keep, s.labels, 0).astype(np.int32)
        out.append(Sample(pixels=s.pixels.copy(), labels=labels, sample_id=s.sample_id,
                          source_stage=t, enhanced=s.enhanced))
    return StageDataset(samples=out, stage_index=t, current_classes=current)


def split_train_reward(dataset: StageDataset, train_fraction: float, seed: int,
                       max_retries: int = 100) -> tuple[StageDataset, StageDataset]:
    """Disjoint split with every current class present in both halves.

    Redraws up to ``max_retries`` times before giving up.
    """
    if not (0.0 < train_fraction < 1.0):
        raise ConfigurationError("train_fraction must be in (0, 1)")
    samples = dataset.samples
    n = len(samples)
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    if n < 2:
        raise PartitionError("cannot split fewer than 2 samples")
    required = {c for c in dataset.current_classes
                if any((s.labels == c).any() for s in samples)}
    rng = _rng(seed, 877)
    for _ in range(max_retries):
        perm = rng.permutation(n)
        train_idx = sorted(perm[:n_train].tolist())
        reward_idx = sorted(perm[n_train:].tolist())
        train = [samples[i] for i in train_idx]
        reward = [samples[i] for i in reward_idx]
        cov_train = {c for c in required if any((s.labels == c).any() for s in train)}
        cov_reward = {c for c in required if any((s.labels == c).any() for s in reward)}
        if cov_train == required and cov_reward == required:
            mk = lambda xs: StageDataset(samples=[x.copy() for x in xs],
                                         stage_index=dataset.stage_index,
                                         current_classes=dataset.current_classes)
            return mk(train), mk(reward)
    raise PartitionError(
        f"could not cover all {len(required)} classes in both splits after {max_retries} tries")


def reallocate_classes(all_classes: Iterable[int], seed: int,
                       stage_bounds: tuple[int, int] = (2, 6)) -> StagePartition:
    """Random stage partition: randomized stage count and sizes, first stage
    strictly larger than half of all classes."""
    classes = sorted(set(int(c) for c in all_classes))
    n = len(classes)
    if n < 4:
        raise ConfigurationError("need at least 4 classes to reallocate")
    tmin, tmax = stage_bounds
    if tmin < 2:
        raise ConfigurationError("stage bounds must allow at least 2 stages")
    min_first = n // 2 + 1
    feasible_tmax = min(tmax, 1 + (n - min_first))
    if feasible_tmax < tmin:
        feasible_tmax = tmin
    rng = _rng(seed, 331)
    t = int(rng.integers(tmin, feasible_tmax + 1))
    first = int(rng.integers(min_first, n - (t - 1) + 1))
    rest = n - first
    # random composition of `rest` into t-1 positive parts
    if t - 1 > 0:
        cuts = np.sort(rng.choice(np.arange(1, rest), size=t - 2, replace=False)) if t > 2 else np.array([], dtype=int)
        bounds = np.concatenate([[0], cuts, [rest]])
        sizes = np.diff(bounds).astype(int).tolist()
    else:
        sizes = []
    order = rng.permutation(classes)
    stages: list[tuple[int, ...]] = []
    pos = 0
    for size in [first] + sizes:
        stages.append(tuple(sorted(int(c) for c in order[pos:pos + size])))
        pos += size
    part = StagePartition(stages=tuple(stages))
    part.validate()
    return part


# ---------------------------------------------------------------------------
# serialization: JSON with base64-encoded raw array blocks


def _encode_array(a: np.ndarray) -> dict:
    return {
        "dtype": str(a.dtype),
        "shape": list(a.shape),
        "data": base64.b64encode(np.ascontiguousarray(a).tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def _sample_to_dict(s: Sample) -> dict:
    return {
        "sample_id": s.sample_id,
        "source_stage": s.source_stage,
        "enhanced": s.enhanced,
        "pixels": _encode_array(s.pixels),
        "labels": _encode_array(s.labels),
    }


def _sample_from_dict(d: dict) -> Sample:
    return Sample(
        pixels=_decode_array(d["pixels"]),
        labels=_decode_array(d["labels"]),
        sample_id=int(d["sample_id"]),
        source_stage=int(d["source_stage"]),
        enhanced=bool(d["enhanced"]),
    )


def save_world(world: World, path: str) -> None:
    doc = {
        "kind": "world",
        "format_version": FORMAT_VERSION,
        "config": {
            "num_classes": world.config.num_classes,
            "image_size": list(world.config.image_size),
            "feature_dim": world.config.feature_dim,
            "samples_per_class": world.config.samples_per_class,
            "intra_class_spread": world.config.intra_class_spread,
            "seed": world.config.seed,
        },
        "samples": [_sample_to_dict(s) for s in world.samples],
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))


def load_world(path: str) -> World:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("kind") != "world":
        raise ConfigurationError(f"{path} is not a world file")
    c = doc["config"]
    cfg = WorldConfig(
        num_classes=int(c["num_classes"]),
        image_size=tuple(int(v) for v in c["image_size"]),
        feature_dim=int(c["feature_dim"]),
        samples_per_class=int(c["samples_per_class"]),
        intra_class_spread=float(c["intra_class_spread"]),
        seed=int(c["seed"]),
    )
    samples = [_sample_from_dict(d) for d in doc["samples"]]
    return World(config=cfg, samples=samples)


def save_partition(partition: StagePartition, path: str) -> None:
    doc = {"kind": "partition", "format_version": FORMAT_VERSION,
           "stages": [list(s) for s in partition.stages]}
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))


def load_partition(path: str) -> StagePartition:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("kind") != "partition":
        raise ConfigurationError(f"{path} is not a partition file")
    part = StagePartition(stages=tuple(tuple(int(c) for c in s) for s in doc["stages"]))
    part.validate()
    return part
