"""Reference pools and the anchor-dependent positivity criterion.

A pool holds M feature vectors, one randomly sampled patch per image. The
task-agnostic pool is built once from backbone features and frozen; the
task-specific pool is rebuilt on a schedule from the momentum head's output
so the criterion tracks the representation being learned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import heads
from .tensorcore import RngStream, pairwise_cosine

TASK_AGNOSTIC = "task-agnostic"
TASK_SPECIFIC = "task-specific"


@dataclass
class ReferencePool:
    entries: np.ndarray  # (M, d)
    flavor: str
    built_at_iteration: int = 0

    def __post_init__(self):
        if self.entries.ndim != 2 or self.entries.shape[0] < 1:
            raise ValueError(f"pool entries must be a non-empty matrix, got {self.entries.shape}")
        if not np.isfinite(self.entries).all():
            raise ValueError("pool entries contain non-finite values")
        if (np.abs(self.entries).sum(axis=1) == 0).any():
            raise ValueError("pool entries contain a zero row")
        if self.flavor == TASK_AGNOSTIC:
            self.entries.setflags(write=False)  # frozen for the whole run

    @property
    def size(self) -> int:
        return self.entries.shape[0]


@dataclass
class RenewalSchedule:
    period: int = 100  # iterations between task-specific pool rebuilds

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("renewal period must be >= 1")

    def due(self, iteration: int) -> bool:
        return iteration % self.period == 0

    def count_over(self, total_iterations: int) -> int:
        return -(-total_iterations // self.period)  # ceil


def _sample_one_patch_per_image(shards: list, m: int, rng: RngStream):
    if len(shards) < m:
        raise ValueError(f"need at least {m} images to build a pool, got {len(shards)}")
    gen = rng.generator()
    image_idx = gen.choice(len(shards), size=m, replace=False)
    rows = []
    for i in image_idx:
        shard = shards[int(i)]
        rows.append((int(i), int(gen.integers(shard.num_patches))))
    return rows


def build_task_agnostic_pool(shards: list, m: int, rng: RngStream) -> ReferencePool:
    """Sample one backbone patch feature from each of M distinct images; frozen thereafter."""
    picks = _sample_one_patch_per_image(shards, m, rng)
    entries = np.stack([shards[i].view_a[p] for i, p in picks], axis=0).copy()
    return ReferencePool(entries=entries, flavor=TASK_AGNOSTIC, built_at_iteration=0)


def renew_task_specific_pool(
    shards: list,
    momentum_params: "heads.MomentumParameters",
    m: int,
    rng: RngStream,
    iteration: int = 0,
) -> ReferencePool:
    """Rebuild the task-specific pool through the momentum segmentation head.

    A fresh random image subset is drawn on every renewal; entries live in
    the head's output space (dimension K).
    """
    picks = _sample_one_patch_per_image(shards, m, rng)
    feats = np.stack([shards[i].view_a[p] for i, p in picks], axis=0)
    entries, _ = heads.seg_forward(feats, momentum_params)
    return ReferencePool(entries=entries.copy(), flavor=TASK_SPECIFIC, built_at_iteration=iteration)


def criterion(anchor: np.ndarray, pool: ReferencePool) -> float:
    """Positivity threshold for one anchor: max cosine similarity to any pool entry."""
    sims = pairwise_cosine(np.asarray(anchor).reshape(1, -1), pool.entries)
    return float(sims.max())


def criterion_all(features: np.ndarray, pool: ReferencePool) -> np.ndarray:
    """Vectorized criterion for a whole feature block; one threshold per row."""
    if features.shape[1] != pool.entries.shape[1]:
        raise ValueError(
            f"anchor dimension {features.shape[1]} does not match pool dimension {pool.entries.shape[1]}"
        )
    return pairwise_cosine(features, pool.entries).max(axis=1)
