"""HPFS shard format, mini-batch assembly, and the synthetic dataset generator.

HPFS v1 byte layout (all integers and floats little-endian):

    offset  size        field
    0       4           magic "HPFS"
    4       4 (u32)     format version = 1
    8       4 (u32)     grid height H
    12      4 (u32)     grid width W
    16      4 (u32)     feature channels C
    20      1 (u8)      has_labels flag (0 or 1)
    21      4 (u32)     num_classes (0 when has_labels = 0)
    25      HW*C*4      view_a, float32 row-major (HW rows, C cols)
    ...     HW*C*4      view_b, float32 row-major
    ...     HW*HW*4     attention, float32 row-major (row i = anchor i)
    ...     HW*4        labels, int32 (present only when has_labels = 1;
                        -1 marks an unlabeled patch)

Attention rows are head-averaged post-softmax scores and must sum to 1
within 1e-4. Labels ride inside shards but are consumed only by evaluation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorcore import RngStream, matrix, row_normalize, softmax

MAGIC = b"HPFS"
VERSION = 1
UNLABELED = -1
ATTENTION_ROW_TOL = 1e-4

# Sharpness of the synthetic attention rows (softmax of scaled feature
# similarity); chosen so same-class patches sit clearly above the row mean.
_ATTENTION_SHARPNESS = 4.0


class ShardError(Exception):
    """Base class for shard format failures."""


class BadMagicError(ShardError):
    pass


class TruncatedShardError(ShardError):
    pass


class ShardInvariantError(ShardError):
    pass


@dataclass
class PatchShard:
    """One image's precomputed patch features (two augmented views) and attention."""

    grid_h: int
    grid_w: int
    view_a: np.ndarray  # (H*W, C) float32
    view_b: np.ndarray  # (H*W, C) float32
    attention: np.ndarray  # (H*W, H*W) float32, row i = anchor i over all patches
    labels: np.ndarray | None = None  # (H*W,) int32, -1 = unlabeled
    num_classes: int = 0

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def feat_dim(self) -> int:
        return self.view_a.shape[1]

    def validate(self) -> None:
        hw = self.num_patches
        if self.grid_h < 1 or self.grid_w < 1:
            raise ShardInvariantError(f"invalid grid {self.grid_h}x{self.grid_w}")
        for name, arr, cols in (
            ("view_a", self.view_a, None),
            ("view_b", self.view_b, self.view_a.shape[1]),
            ("attention", self.attention, hw),
        ):
            if arr.ndim != 2 or arr.shape[0] != hw:
                raise ShardInvariantError(f"{name} must have {hw} rows, got shape {arr.shape}")
            if cols is not None and arr.shape[1] != cols:
                raise ShardInvariantError(f"{name} must have {cols} cols, got shape {arr.shape}")
            if not np.isfinite(arr).all():
                raise ShardInvariantError(f"{name} contains non-finite entries")
        row_sums = self.attention.sum(axis=1)
        bad = np.flatnonzero(np.abs(row_sums - 1.0) > ATTENTION_ROW_TOL)
        if bad.size:
            i = int(bad[0])
            raise ShardInvariantError(
                f"attention row {i} sums to {float(row_sums[i]):.6f}, expected 1 within {ATTENTION_ROW_TOL}"
            )
        if self.labels is not None:
            if self.labels.shape != (hw,):
                raise ShardInvariantError(f"labels must have shape ({hw},), got {self.labels.shape}")
            if self.num_classes < 1:
                raise ShardInvariantError("labeled shard needs num_classes >= 1")
            out = np.flatnonzero((self.labels != UNLABELED) & ((self.labels < 0) | (self.labels >= self.num_classes)))
            if out.size:
                i = int(out[0])
                raise ShardInvariantError(
                    f"label {int(self.labels[i])} at patch {i} outside [0, {self.num_classes})"
                )


def write_shard(shard: PatchShard, path) -> None:
    """Serialize a shard to HPFS v1; invariant violations are refused before any write."""
    shard.validate()
    has_labels = shard.labels is not None
    header = MAGIC + struct.pack(
        "<IIIIBI",
        VERSION,
        shard.grid_h,
        shard.grid_w,
        shard.feat_dim,
        1 if has_labels else 0,
        shard.num_classes if has_labels else 0,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(shard.view_a, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(shard.view_b, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(shard.attention, dtype="<f4").tobytes())
        if has_labels:
            f.write(np.ascontiguousarray(shard.labels, dtype="<i4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedShardError(f"truncated file while reading {what} ({len(buf)}/{n} bytes)")
    return buf


def read_shard(path) -> PatchShard:
    """Exact inverse of write_shard; validates magic, version, and shard invariants."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, h, w, c, has_labels, num_classes = struct.unpack("<IIIIBI", _read_exact(f, 21, "header"))
        if version != VERSION:
            raise ShardInvariantError(f"unsupported HPFS version {version}")
        hw = h * w
        view_a = np.frombuffer(_read_exact(f, hw * c * 4, "view_a"), dtype="<f4").reshape(hw, c)
        view_b = np.frombuffer(_read_exact(f, hw * c * 4, "view_b"), dtype="<f4").reshape(hw, c)
        attention = np.frombuffer(_read_exact(f, hw * hw * 4, "attention"), dtype="<f4").reshape(hw, hw)
        labels = None
        if has_labels:
            labels = np.frombuffer(_read_exact(f, hw * 4, "labels"), dtype="<i4").copy()
        extra = f.read(1)
        if extra:
            raise ShardInvariantError("trailing bytes after the final section")
    shard = PatchShard(
        grid_h=int(h),
        grid_w=int(w),
        view_a=view_a.copy(),
        view_b=view_b.copy(),
        attention=attention.copy(),
        labels=labels,
        num_classes=int(num_classes),
    )
    shard.validate()
    return shard


def load_dataset(directory) -> list[PatchShard]:
    """Read every *.hpfs file in a directory, sorted by name for determinism."""
    paths = sorted(Path(directory).glob("*.hpfs"))
    if not paths:
        raise FileNotFoundError(f"no *.hpfs shards found in {directory}")
    shards = [read_shard(p) for p in paths]
    dims = {s.feat_dim for s in shards}
    if len(dims) > 1:
        raise ShardInvariantError(f"shards disagree on feature dim: {sorted(dims)}")
    return shards


@dataclass
class MiniBatch:
    """B shards flattened into contiguous feature matrices.

    Flat index = shard_offsets[b] + patch index within shard b; origin maps
    the flat index back to its (shard, patch) pair.
    """

    shards: list
    feats_a: np.ndarray  # (sum HW, C)
    feats_b: np.ndarray  # (sum HW, C)
    shard_offsets: np.ndarray  # (B,) start row of each shard
    origin: np.ndarray  # (sum HW, 2) columns: shard index within batch, patch index

    @property
    def num_anchors(self) -> int:
        return self.feats_a.shape[0]


def _assemble(shards: list) -> MiniBatch:
    offsets = np.cumsum([0] + [s.num_patches for s in shards[:-1]])
    origin = np.concatenate(
        [np.stack([np.full(s.num_patches, b), np.arange(s.num_patches)], axis=1) for b, s in enumerate(shards)]
    )
    return MiniBatch(
        shards=list(shards),
        feats_a=np.concatenate([s.view_a for s in shards], axis=0),
        feats_b=np.concatenate([s.view_b for s in shards], axis=0),
        shard_offsets=np.asarray(offsets, dtype=np.int64),
        origin=origin.astype(np.int64),
    )


def make_batches(dataset: list, batch_size: int, rng: RngStream) -> list:
    """One epoch of mini-batches under a seeded shuffle.

    Positive mining needs cross-image candidates, so batch_size must be >= 2
    and a final partial batch is kept only when it still holds >= 2 shards.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 (mining needs cross-image candidates)")
    order = rng.generator().permutation(len(dataset))
    batches = []
    for start in range(0, len(dataset), batch_size):
        chunk = order[start : start + batch_size]
        if chunk.size < 2:
            continue
        batches.append(_assemble([dataset[i] for i in chunk]))
    if not batches:
        raise ValueError(f"empty epoch: {len(dataset)} shard(s) cannot form a batch of >= 2 images")
    return batches


@dataclass
class SyntheticSpec:
    """Desk-scale stand-in dataset: Gaussian class clusters on a patch grid."""

    num_classes: int
    feat_dim: int
    grid_h: int
    grid_w: int
    num_images: int
    separation: float = 5.0  # distance of class centers from the origin
    noise: float = 1.0  # within-class feature noise
    jitter: float = 0.1  # view_b = view_a + jitter * gaussian
    seed: int = 0

    def validate(self) -> None:
        if self.separation <= 0:
            raise ValueError("separation must be > 0")
        if self.noise < 0 or self.jitter < 0:
            raise ValueError("noise and jitter must be >= 0")
        if min(self.num_classes, self.feat_dim, self.grid_h, self.grid_w, self.num_images) < 1:
            raise ValueError("counts must be >= 1")


def generate_synthetic(spec: SyntheticSpec) -> list:
    """Generate labeled shards with spatially coherent class regions.

    Class centers are unit-normalized random directions scaled by
    spec.separation; each image gets a Voronoi label map over the grid so
    local windows are dominated by one class, mirroring real segmentation.
    Attention rows are softmax over scaled feature similarity, which puts
    same-class neighbors above the row mean.
    """
    spec.validate()
    rng = RngStream(spec.seed, "synthetic")
    gen = rng.generator()
    centers = row_normalize(gen.standard_normal((spec.num_classes, spec.feat_dim))) * spec.separation

    ys, xs = np.meshgrid(np.arange(spec.grid_h), np.arange(spec.grid_w), indexing="ij")
    coords = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)

    shards = []
    for _ in range(spec.num_images):
        seeds_y = gen.uniform(0, spec.grid_h, size=spec.num_classes)
        seeds_x = gen.uniform(0, spec.grid_w, size=spec.num_classes)
        d2 = (coords[:, 0:1] - seeds_y[None, :]) ** 2 + (coords[:, 1:2] - seeds_x[None, :]) ** 2
        labels = np.argmin(d2, axis=1).astype(np.int32)

        view_a = centers[labels] + spec.noise * gen.standard_normal((labels.size, spec.feat_dim))
        view_b = view_a + spec.jitter * gen.standard_normal(view_a.shape)
        sims = row_normalize(view_a) @ row_normalize(view_a).T
        attention = softmax(_ATTENTION_SHARPNESS * sims, axis=1)

        shard = PatchShard(
            grid_h=spec.grid_h,
            grid_w=spec.grid_w,
            view_a=matrix(view_a),
            view_b=matrix(view_b),
            attention=matrix(attention),
            labels=labels,
            num_classes=spec.num_classes,
        )
        shard.validate()
        shards.append(shard)
    return shards
