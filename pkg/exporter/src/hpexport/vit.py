"""Minimal numpy ViT forward pass with last-layer attention extraction.

Inference only. Weights load from an .npz file with the documented key
names; without a weights file the backbone falls back to a seeded
deterministic initialization, which keeps the export pipeline (format,
determinism, attention normalization) fully testable while real checkpoints
are obtained manually and converted to .npz.

npz key layout (row-major, float32):
    cls_token                (1, dim)
    pos_embed                (1 + base_grid^2, dim)   optional; sinusoidal fallback
    patch_embed.weight       (dim, patch*patch*3)     pixels flattened channel-last
    patch_embed.bias         (dim,)
    blocks.{i}.norm1.weight/.bias            (dim,)
    blocks.{i}.attn.qkv.weight               (3*dim, dim)
    blocks.{i}.attn.qkv.bias                 (3*dim,)
    blocks.{i}.attn.proj.weight              (dim, dim)
    blocks.{i}.attn.proj.bias                (dim,)
    blocks.{i}.norm2.weight/.bias            (dim,)
    blocks.{i}.mlp.fc1.weight                (hidden, dim)
    blocks.{i}.mlp.fc1.bias                  (hidden,)
    blocks.{i}.mlp.fc2.weight                (dim, hidden)
    blocks.{i}.mlp.fc2.bias                  (dim,)
    norm.weight/.bias                        (dim,)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import derive_generator


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    patch: int
    dim: int
    depth: int
    heads: int
    mlp_ratio: float = 4.0


BACKBONES = {
    "vit-small-8": BackboneSpec("vit-small-8", patch=8, dim=384, depth=12, heads=6),
    "vit-small-16": BackboneSpec("vit-small-16", patch=16, dim=384, depth=12, heads=6),
    "vit-base-8": BackboneSpec("vit-base-8", patch=8, dim=768, depth=12, heads=12),
    # desk-scale backbone for pipeline tests
    "vit-tiny-4": BackboneSpec("vit-tiny-4", patch=4, dim=32, depth=2, heads=2),
}


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def _layernorm(x, weight, bias, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * weight + bias


def _softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def sincos_pos_embed(grid_h: int, grid_w: int, dim: int, scale: float = 0.02) -> np.ndarray:
    """2-D sinusoidal positional embedding for the patch tokens, small scale.

    The scale keeps token differences modest relative to content, matching
    the magnitude of learned embeddings in pretrained checkpoints.
    """
    quarter = dim // 4
    omega = 1.0 / (10000 ** (np.arange(quarter) / max(quarter, 1)))
    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    out = np.zeros((grid_h * grid_w, dim), dtype=np.float32)
    for offset, coords in ((0, ys.ravel()), (2 * quarter, xs.ravel())):
        angles = coords[:, None] * omega[None, :]
        out[:, offset : offset + quarter] = np.sin(angles)
        out[:, offset + quarter : offset + 2 * quarter] = np.cos(angles)
    return scale * out


class VisionTransformer:
    """Frozen ViT producing patch features and head-averaged attention rows."""

    def __init__(self, spec: BackboneSpec, weights: dict | None = None, seed: int = 0):
        self.spec = spec
        self.params = dict(weights) if weights is not None else self._random_init(seed)
        self._check_shapes()

    @classmethod
    def from_name(cls, name: str, weights_path=None, seed: int = 0):
        if name not in BACKBONES:
            raise ValueError(f"unknown backbone {name!r} (choose from {sorted(BACKBONES)})")
        weights = None
        if weights_path is not None:
            with np.load(weights_path) as blob:
                weights = {k: blob[k].astype(np.float32) for k in blob.files}
        return cls(BACKBONES[name], weights=weights, seed=seed)

    def _random_init(self, seed: int) -> dict:
        s = self.spec
        gen = derive_generator(seed, f"vit-init/{s.name}")
        hidden = int(s.dim * s.mlp_ratio)

        def normal(shape, std=0.02):
            return (std * gen.standard_normal(shape)).astype(np.float32)

        params = {
            "cls_token": normal((1, s.dim)),
            "patch_embed.weight": normal((s.dim, s.patch * s.patch * 3)),
            "patch_embed.bias": np.zeros(s.dim, dtype=np.float32),
            "norm.weight": np.ones(s.dim, dtype=np.float32),
            "norm.bias": np.zeros(s.dim, dtype=np.float32),
        }
        for i in range(s.depth):
            p = f"blocks.{i}."
            params[p + "norm1.weight"] = np.ones(s.dim, dtype=np.float32)
            params[p + "norm1.bias"] = np.zeros(s.dim, dtype=np.float32)
            params[p + "attn.qkv.weight"] = normal((3 * s.dim, s.dim))
            params[p + "attn.qkv.bias"] = np.zeros(3 * s.dim, dtype=np.float32)
            params[p + "attn.proj.weight"] = normal((s.dim, s.dim))
            params[p + "attn.proj.bias"] = np.zeros(s.dim, dtype=np.float32)
            params[p + "norm2.weight"] = np.ones(s.dim, dtype=np.float32)
            params[p + "norm2.bias"] = np.zeros(s.dim, dtype=np.float32)
            params[p + "mlp.fc1.weight"] = normal((hidden, s.dim))
            params[p + "mlp.fc1.bias"] = np.zeros(hidden, dtype=np.float32)
            params[p + "mlp.fc2.weight"] = normal((s.dim, hidden))
            params[p + "mlp.fc2.bias"] = np.zeros(s.dim, dtype=np.float32)
        return params

    def _check_shapes(self):
        s = self.spec
        if self.params["patch_embed.weight"].shape != (s.dim, s.patch * s.patch * 3):
            raise ValueError("patch_embed.weight does not match the backbone spec")
        for i in range(s.depth):
            if f"blocks.{i}.attn.qkv.weight" not in self.params:
                raise ValueError(f"weights are missing block {i}")

    def _pos_embed(self, grid_h: int, grid_w: int) -> np.ndarray:
        learned = self.params.get("pos_embed")
        if learned is None:
            return sincos_pos_embed(grid_h, grid_w, self.spec.dim)
        patch_pos = learned[1:]  # row 0 belongs to the CLS token
        base = int(round(np.sqrt(patch_pos.shape[0])))
        grid = patch_pos.reshape(base, base, -1)
        # nearest-neighbor grid interpolation to the target size
        rows = np.clip((np.arange(grid_h) * base / grid_h).astype(int), 0, base - 1)
        cols = np.clip((np.arange(grid_w) * base / grid_w).astype(int), 0, base - 1)
        return grid[rows][:, cols].reshape(grid_h * grid_w, -1)

    def forward(self, patches: np.ndarray, grid_h: int, grid_w: int):
        """Run the transformer on flattened patch pixels.

        patches: (H*W, patch*patch*3) float32. Returns (features (H*W, dim),
        attention (H*W, H*W)): final-layer patch tokens and the last
        self-attention layer's patch-to-patch rows, averaged over heads and
        renormalized to sum to 1.
        """
        s = self.spec
        n = patches.shape[0]
        if n != grid_h * grid_w:
            raise ValueError(f"{n} patches do not fill a {grid_h}x{grid_w} grid")
        x = patches @ self.params["patch_embed.weight"].T + self.params["patch_embed.bias"]
        cls_pos = np.zeros((1, s.dim), dtype=np.float32)
        if "pos_embed" in self.params:
            cls_pos = self.params["pos_embed"][:1]
        x = np.concatenate([self.params["cls_token"] + cls_pos, x + self._pos_embed(grid_h, grid_w)], axis=0)

        dh = s.dim // s.heads
        last_attention = None
        for i in range(s.depth):
            p = f"blocks.{i}."
            h = _layernorm(x, self.params[p + "norm1.weight"], self.params[p + "norm1.bias"])
            qkv = h @ self.params[p + "attn.qkv.weight"].T + self.params[p + "attn.qkv.bias"]
            q, k, v = (
                qkv[:, j * s.dim : (j + 1) * s.dim].reshape(-1, s.heads, dh).transpose(1, 0, 2)
                for j in range(3)
            )
            attn = _softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dh), axis=-1)  # (heads, N+1, N+1)
            if i == s.depth - 1:
                last_attention = attn
            ctx = (attn @ v).transpose(1, 0, 2).reshape(-1, s.dim)
            x = x + ctx @ self.params[p + "attn.proj.weight"].T + self.params[p + "attn.proj.bias"]
            h2 = _layernorm(x, self.params[p + "norm2.weight"], self.params[p + "norm2.bias"])
            mlp = _gelu(h2 @ self.params[p + "mlp.fc1.weight"].T + self.params[p + "mlp.fc1.bias"])
            x = x + mlp @ self.params[p + "mlp.fc2.weight"].T + self.params[p + "mlp.fc2.bias"]

        x = _layernorm(x, self.params["norm.weight"], self.params["norm.bias"])
        features = x[1:].astype(np.float32)
        # patch-query rows over patch keys, heads averaged, rows renormalized
        rows = last_attention.mean(axis=0)[1:, 1:]
        rows = rows / rows.sum(axis=1, keepdims=True)
        return features, rows.astype(np.float32)
