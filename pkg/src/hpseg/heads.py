"""Trainable head stack: segmentation MLP, projection head, momentum copy, AdamW.

All forward passes return a cache holding exactly what the matching backward
pass needs; gradients are dicts keyed by parameter block name so the
optimizer stays generic. Everything runs in the dtype of the parameters
(float32 for training, float64 for finite-difference checks).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .tensorcore import DegenerateInputError, RngStream

SEG_BLOCKS = ("seg_w1", "seg_b1", "seg_w2", "seg_b2")
PROJ_BLOCKS = ("proj_w", "proj_b")
ALL_BLOCKS = SEG_BLOCKS + PROJ_BLOCKS


@dataclass
class HeadParameters:
    seg_w1: np.ndarray  # (K_h, C)
    seg_b1: np.ndarray  # (K_h,)
    seg_w2: np.ndarray  # (K, K_h)
    seg_b2: np.ndarray  # (K,)
    proj_w: np.ndarray  # (K, K)
    proj_b: np.ndarray  # (K,)

    def blocks(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "HeadParameters":
        return HeadParameters(**{k: v.copy() for k, v in self.blocks().items()})

    def astype(self, dtype) -> "HeadParameters":
        return HeadParameters(**{k: v.astype(dtype) for k, v in self.blocks().items()})

    @property
    def feat_dim(self) -> int:
        return self.seg_w1.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.seg_w2.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.seg_w1.shape[0]


@dataclass
class MomentumParameters:
    """EMA mirror of the segmentation-head blocks; never receives gradient."""

    seg_w1: np.ndarray
    seg_b1: np.ndarray
    seg_w2: np.ndarray
    seg_b2: np.ndarray
    coefficient: float = 0.99

    @classmethod
    def from_head(cls, params: HeadParameters, coefficient: float = 0.99) -> "MomentumParameters":
        if not 0.0 < coefficient < 1.0:
            raise ValueError("momentum coefficient must lie in (0, 1)")
        return cls(
            seg_w1=params.seg_w1.copy(),
            seg_b1=params.seg_b1.copy(),
            seg_w2=params.seg_w2.copy(),
            seg_b2=params.seg_b2.copy(),
            coefficient=coefficient,
        )

    def blocks(self) -> dict:
        return {name: getattr(self, name) for name in SEG_BLOCKS}


def init_head_parameters(
    feat_dim: int,
    embed_dim: int,
    rng: RngStream,
    hidden_dim: int | None = None,
    dtype=np.float32,
) -> HeadParameters:
    """Seeded uniform init in +-sqrt(1/fan_in); hidden width defaults to embed_dim."""
    hidden_dim = embed_dim if hidden_dim is None else hidden_dim
    gen = rng.generator()

    def unif(shape, fan_in):
        bound = np.sqrt(1.0 / fan_in)
        return gen.uniform(-bound, bound, size=shape).astype(dtype)

    return HeadParameters(
        seg_w1=unif((hidden_dim, feat_dim), feat_dim),
        seg_b1=unif((hidden_dim,), feat_dim),
        seg_w2=unif((embed_dim, hidden_dim), hidden_dim),
        seg_b2=unif((embed_dim,), hidden_dim),
        proj_w=unif((embed_dim, embed_dim), embed_dim),
        proj_b=unif((embed_dim,), embed_dim),
    )


@dataclass
class SegCache:
    inputs: np.ndarray
    pre_act: np.ndarray  # W1 x + b1 before the ReLU


def seg_forward(feats: np.ndarray, params) -> tuple:
    """Two-layer ReLU MLP: s = W2 relu(W1 f + b1) + b2 rowwise.

    Accepts HeadParameters or MomentumParameters (anything carrying the four
    seg blocks).
    """
    if feats.shape[1] != params.seg_w1.shape[1]:
        raise ValueError(f"feature dim {feats.shape[1]} does not match head input {params.seg_w1.shape[1]}")
    pre = feats @ params.seg_w1.T + params.seg_b1
    s = np.maximum(pre, 0) @ params.seg_w2.T + params.seg_b2
    return s, SegCache(inputs=feats, pre_act=pre)


def seg_backward(d_s: np.ndarray, cache: SegCache, params) -> dict:
    act = np.maximum(cache.pre_act, 0)
    d_act = d_s @ params.seg_w2
    d_pre = d_act * (cache.pre_act > 0)
    return {
        "seg_w1": d_pre.T @ cache.inputs,
        "seg_b1": d_pre.sum(axis=0),
        "seg_w2": d_s.T @ act,
        "seg_b2": d_s.sum(axis=0),
    }


@dataclass
class ProjCache:
    inputs: np.ndarray
    z: np.ndarray
    norms: np.ndarray  # pre-normalization row norms


def proj_forward(s: np.ndarray, params: HeadParameters) -> tuple:
    """Linear layer followed by row L2 normalization; output rows are unit vectors."""
    y = s @ params.proj_w.T + params.proj_b
    norms = np.sqrt(np.sum(np.square(y), axis=1))
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DegenerateInputError(f"projection of row {int(zero[0])} is the zero vector")
    z = y / norms[:, None]
    return z, ProjCache(inputs=s, z=z, norms=norms)


def proj_backward(d_z: np.ndarray, cache: ProjCache, params: HeadParameters) -> tuple:
    # d/dy of y/|y| applied rowwise: (d_z - (d_z . z) z) / |y|
    inner = np.sum(d_z * cache.z, axis=1, keepdims=True)
    d_y = (d_z - inner * cache.z) / cache.norms[:, None]
    grads = {"proj_w": d_y.T @ cache.inputs, "proj_b": d_y.sum(axis=0)}
    return grads, d_y @ params.proj_w


def momentum_update(source: HeadParameters, target: MomentumParameters) -> None:
    """EMA step: theta' <- m theta' + (1 - m) theta, elementwise in place."""
    m = target.coefficient
    for name in SEG_BLOCKS:
        tgt = getattr(target, name)
        tgt *= m
        tgt += (1.0 - m) * getattr(source, name)


@dataclass
class OptimizerState:
    lr: float = 5e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    moments1: dict = field(default_factory=dict)
    moments2: dict = field(default_factory=dict)


def init_optimizer(params: dict, lr: float = 5e-4, weight_decay: float = 0.1, **kwargs) -> OptimizerState:
    state = OptimizerState(lr=lr, weight_decay=weight_decay, **kwargs)
    for name, arr in params.items():
        state.moments1[name] = np.zeros_like(arr)
        state.moments2[name] = np.zeros_like(arr)
    return state


def adamw_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """Decoupled-weight-decay Adam with bias correction, in place.

    Decay applies to weight matrices (2-D blocks) only, never to biases.
    Non-finite gradients abort with the offending block named.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter block '{name}'")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.moments1[name]
        v = state.moments2[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        if state.weight_decay and p.ndim >= 2:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# HPCK checkpoint container: magic, version, named scalars, named arrays.
# Layout (little-endian): "HPCK", u32 version=1, u32 #scalars,
#   each scalar: u16 name length, name utf-8, u8 kind (0=int, 1=float), 8 bytes value;
# u32 #arrays, each array: u16 name length, name, u8 dtype (0=f32, 1=f64, 2=i64),
#   u8 ndim, u32 dims..., raw row-major data.
# ---------------------------------------------------------------------------

HPCK_MAGIC = b"HPCK"
HPCK_VERSION = 1
_DTYPE_CODES = {0: "<f4", 1: "<f8", 2: "<i8"}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(Exception):
    pass


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_hpck(path, scalars: dict, arrays: dict) -> None:
    with open(path, "wb") as f:
        f.write(HPCK_MAGIC + struct.pack("<I", HPCK_VERSION))
        f.write(struct.pack("<I", len(scalars)))
        for name in sorted(scalars):
            value = scalars[name]
            f.write(_pack_name(name))
            if isinstance(value, (int, np.integer)):
                f.write(struct.pack("<Bq", 0, int(value)))
            else:
                f.write(struct.pack("<Bd", 1, float(value)))
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            if arr.dtype not in _CODE_FOR:
                raise CheckpointError(f"unsupported array dtype {arr.dtype} for '{name}'")
            f.write(_pack_name(name))
            f.write(struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_hpck(path) -> tuple:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != HPCK_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != HPCK_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        scalars = {}
        (n_scalars,) = struct.unpack("<I", _read_exact(f, 4, "scalar count"))
        for _ in range(n_scalars):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (kind,) = struct.unpack("<B", _read_exact(f, 1, "scalar kind"))
            if kind == 0:
                (scalars[name],) = struct.unpack("<q", _read_exact(f, 8, name))
            else:
                (scalars[name],) = struct.unpack("<d", _read_exact(f, 8, name))
        arrays = {}
        (n_arrays,) = struct.unpack("<I", _read_exact(f, 4, "array count"))
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            code, ndim = struct.unpack("<BB", _read_exact(f, 2, "array header"))
            dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "array dims"))
            dtype = np.dtype(_DTYPE_CODES[code])
            count = int(np.prod(dims)) if ndim else 1
            data = _read_exact(f, count * dtype.itemsize, name)
            arrays[name] = np.frombuffer(data, dtype=dtype).reshape(dims).copy()
    return scalars, arrays
