"""Hidden-positive discovery: global mining, negative sampling, local selection/mixing.

Global mining compares every pair of anchors in the flat mini-batch against
an anchor-dependent criterion (max cosine similarity to the reference pool)
and keeps strictly-greater pairs; with symmetrization on, a pair is kept if
either direction passes, so j in P_i iff i in P_j by construction.

Local selection keeps the anchor's surrounding window members whose
attention score strictly exceeds the mean of the anchor's full attention
row; the kept features are mixed into one vector whose backward pass
distributes gradient to each contributor in proportion sigma * t_j / |I|.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .refpool import ReferencePool, criterion_all
from .shardio import MiniBatch, PatchShard
from .tensorcore import RngStream, pairwise_cosine


@dataclass
class GlobalPositiveSets:
    """Per-anchor positive/negative flat index lists; task-specific side optional."""

    pos_ag: list
    neg_ag: list
    pos_sp: list | None = None
    neg_sp: list | None = None

    @property
    def num_anchors(self) -> int:
        return len(self.pos_ag)


def mine_positives(features: np.ndarray, pool: ReferencePool, symmetric: bool = True) -> list:
    """Shared mining core over any feature space with a matching pool."""
    n = features.shape[0]
    if n < 2:
        raise ValueError("mining needs at least 2 anchors")
    sims = pairwise_cosine(features, features)
    sims = 0.5 * (sims + sims.T)  # exact symmetry so i/j comparisons agree bitwise
    crit = criterion_all(features, pool)
    keep = sims > crit[:, None]
    if symmetric:
        keep = keep | (sims > crit[None, :])
    np.fill_diagonal(keep, False)
    return [np.flatnonzero(row) for row in keep]


def mine_global(features: np.ndarray, pool: ReferencePool, symmetric: bool = True) -> list:
    """Task-agnostic GHP over backbone features against the frozen pool."""
    return mine_positives(features, pool, symmetric=symmetric)


def mine_task_specific(momentum_feats: np.ndarray, pool: ReferencePool, symmetric: bool = True) -> list:
    """Task-specific GHP over momentum-head features against the renewable pool."""
    return mine_positives(momentum_feats, pool, symmetric=symmetric)


def sample_negatives(anchor: int, positives: np.ndarray, n: int, rho: float, rng: RngStream) -> np.ndarray:
    """Uniform sample (without replacement) of ceil(rho% of the remaining indices).

    Remaining = all flat indices minus the anchor and its positives. An empty
    remaining set yields an empty list; the objective then skips the anchor
    if it also has no positives.
    """
    if not 0 < rho <= 100:
        raise ValueError("rho must lie in (0, 100]")
    mask = np.ones(n, dtype=bool)
    mask[anchor] = False
    mask[np.asarray(positives, dtype=np.int64)] = False
    remaining = np.flatnonzero(mask)
    if remaining.size == 0:
        return remaining
    k = math.ceil(rho / 100.0 * remaining.size)
    return np.sort(rng.generator().choice(remaining, size=k, replace=False))


def sample_negatives_all(pos_lists: list, n: int, rho: float, rng: RngStream) -> list:
    """Per-anchor negative draws for a whole batch.

    Draws one random-key matrix from the stream and takes, per anchor, the
    remaining indices with the smallest keys in its own row: a uniform
    without-replacement sample whose outcome depends only on the anchor's
    row, so results are independent of scheduling order exactly like
    per-anchor child streams, at a fraction of the cost.
    """
    if not 0 < rho <= 100:
        raise ValueError("rho must lie in (0, 100]")
    keys = rng.generator().random((len(pos_lists), n))
    out = []
    for i, pos in enumerate(pos_lists):
        mask = np.ones(n, dtype=bool)
        mask[i] = False
        if len(pos):
            mask[np.asarray(pos, dtype=np.int64)] = False
        remaining = np.flatnonzero(mask)
        if remaining.size == 0:
            out.append(remaining)
            continue
        k = math.ceil(rho / 100.0 * remaining.size)
        row = keys[i, remaining]
        out.append(np.sort(remaining[np.argpartition(row, k - 1)[:k]]))
    return out


@dataclass
class LocalPositiveSelection:
    """Attention-gated neighbors of one anchor, in flat batch index space."""

    anchor: int
    indices: np.ndarray  # kept window members (may include the anchor itself)
    weights: np.ndarray  # attention scores t_j aligned with indices
    radius: int

    @property
    def size(self) -> int:
        return self.indices.size


def window_indices(patch: int, grid_h: int, grid_w: int, radius: int) -> np.ndarray:
    """Chebyshev ball of the given radius around a patch, clipped at borders."""
    r, c = divmod(patch, grid_w)
    rows = np.arange(max(0, r - radius), min(grid_h, r + radius + 1))
    cols = np.arange(max(0, c - radius), min(grid_w, c + radius + 1))
    return (rows[:, None] * grid_w + cols[None, :]).ravel()


def select_local(patch: int, att_row: np.ndarray, grid_h: int, grid_w: int, radius: int) -> tuple:
    """Keep window members whose score strictly exceeds the full-row mean.

    Returns (indices, weights) in the shard's own patch index space; an empty
    selection is legal and simply contributes no mixed term.
    """
    thresh = float(att_row.mean())  # mean over the full row, not just the window
    window = window_indices(patch, grid_h, grid_w, radius)
    kept = window[att_row[window] > thresh]
    return kept, att_row[kept]


def select_local_shard(shard: PatchShard, radius: int) -> list:
    """Per-patch local selections for one shard (cacheable: depends on attention only)."""
    return [
        select_local(p, shard.attention[p], shard.grid_h, shard.grid_w, radius)
        for p in range(shard.num_patches)
    ]


def select_local_batch(batch: MiniBatch, radius: int, shard_cache: dict | None = None) -> list:
    """Flat-index LocalPositiveSelection per anchor; empty selections included.

    shard_cache maps id(shard) -> select_local_shard output so attention-only
    work is done once per shard per run.
    """
    selections = []
    for b, shard in enumerate(batch.shards):
        if shard_cache is not None:
            per_patch = shard_cache.get(id(shard))
            if per_patch is None:
                per_patch = select_local_shard(shard, radius)
                shard_cache[id(shard)] = per_patch
        else:
            per_patch = select_local_shard(shard, radius)
        offset = int(batch.shard_offsets[b])
        for p, (idx, wts) in enumerate(per_patch):
            selections.append(
                LocalPositiveSelection(
                    anchor=offset + p,
                    indices=idx + offset,
                    weights=wts,
                    radius=radius,
                )
            )
    return selections


def mix_weights(selection: LocalPositiveSelection, sigma: float) -> np.ndarray:
    """Forward/backward coefficients sigma * t_j / |I| for each kept member."""
    return sigma * selection.weights / selection.size


def mix_local(seg_feats: np.ndarray, selection: LocalPositiveSelection, sigma: float = 1.0) -> tuple:
    """Weighted mix of the selected neighbors' segmentation features.

    Returns (mixed vector, per-member weights); the backward pass must give
    each contributing row exactly weight * (gradient of the mixed vector).
    """
    if selection.size < 1:
        raise ValueError(f"anchor {selection.anchor} has an empty local selection")
    w = mix_weights(selection, sigma)
    return w @ seg_feats[selection.indices], w


def _flatten_selections(selections: list, sigma: float):
    sizes = np.asarray([sel.size for sel in selections], dtype=np.int64)
    members = np.concatenate([sel.indices for sel in selections])
    weights = np.concatenate([mix_weights(sel, sigma) for sel in selections])
    owners = np.repeat(np.arange(len(selections)), sizes)
    return members, weights, owners


def mix_local_batch(seg_feats: np.ndarray, selections: list, sigma: float = 1.0) -> np.ndarray:
    """Stacked mix_local over non-empty selections; row order follows the input list."""
    out = np.zeros((len(selections), seg_feats.shape[1]), dtype=seg_feats.dtype)
    if not selections:
        return out
    members, weights, owners = _flatten_selections(selections, sigma)
    np.add.at(out, owners, weights.astype(seg_feats.dtype)[:, None] * seg_feats[members])
    return out


def distribute_mixed_grad(d_mixed: np.ndarray, selections: list, sigma: float, n: int) -> np.ndarray:
    """Route mixed-vector gradients back to the contributing feature rows.

    d_mixed has one row per selection (same order); the result is (n, K) with
    row j accumulating sigma * t_j / |I_i| times d_mixed_i over every
    selection i that kept j.
    """
    out = np.zeros((n, d_mixed.shape[1]), dtype=d_mixed.dtype)
    if not selections:
        return out
    members, weights, owners = _flatten_selections(selections, sigma)
    np.add.at(out, members, weights.astype(d_mixed.dtype)[:, None] * d_mixed[owners])
    return out
