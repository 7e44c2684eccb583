"""Export job: images -> HPFS shards.

Per image: decode, center-crop to a multiple of the patch size, produce two
photometrically augmented views, run the frozen backbone on each view for
patch features, take the attention rows from the first view's pass, pool the
optional label map to the patch grid by majority vote, and write one shard.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import photometric_view
from .hpfs import UNLABELED, write_shard_file
from .vit import BACKBONES, VisionTransformer

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class ExportJob:
    image_dir: str
    backbone: str
    out_dir: str
    label_dir: str | None = None
    weights_path: str | None = None
    seed: int = 0

    def validate(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r} (choose from {sorted(BACKBONES)})")
        if not Path(self.image_dir).is_dir():
            raise FileNotFoundError(f"image directory {self.image_dir} not found")


def list_images(directory) -> list:
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not paths:
        raise FileNotFoundError(f"no images found in {directory}")
    return paths


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def center_crop_to_multiple(arr: np.ndarray, patch: int) -> np.ndarray:
    h, w = arr.shape[:2]
    ch, cw = (h // patch) * patch, (w // patch) * patch
    if ch < patch or cw < patch:
        raise ValueError(f"image {h}x{w} smaller than one {patch}px patch")
    top, left = (h - ch) // 2, (w - cw) // 2
    return arr[top : top + ch, left : left + cw]


def patchify(view: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, 3) -> (grid_h * grid_w, patch*patch*3), channel-last pixel order."""
    h, w = view.shape[:2]
    gh, gw = h // patch, w // patch
    tiles = view.reshape(gh, patch, gw, patch, 3).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(gh * gw, patch * patch * 3)


def pool_labels(label_map: np.ndarray, patch: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Majority label per patch cell; 255 pixels are unlabeled and ignored.

    Only observed class ids are emitted; a cell with no labeled pixel gets
    the unlabeled sentinel. Ties break toward the smallest id.
    """
    out = np.full(grid_h * grid_w, UNLABELED, dtype=np.int32)
    for r in range(grid_h):
        for c in range(grid_w):
            cell = label_map[r * patch : (r + 1) * patch, c * patch : (c + 1) * patch].ravel()
            cell = cell[cell != 255]
            if cell.size:
                counts = np.bincount(cell)
                out[r * grid_w + c] = int(counts.argmax())
    return out


def _crop_label_map(label_map: np.ndarray, patch: int) -> np.ndarray:
    h, w = label_map.shape
    ch, cw = (h // patch) * patch, (w // patch) * patch
    top, left = (h - ch) // 2, (w - cw) // 2
    return label_map[top : top + ch, left : left + cw]


def export(job: ExportJob) -> list:
    """Write one shard per image; returns the shard paths."""
    job.validate()
    backbone = VisionTransformer.from_name(job.backbone, weights_path=job.weights_path, seed=job.seed)
    if job.weights_path is None:
        log.warning(
            "backbone %s running with seeded random weights (no --weights given); "
            "features are pipeline stand-ins, not pretrained representations",
            job.backbone,
        )
    patch = backbone.spec.patch
    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    images = list_images(job.image_dir)
    pooled_labels = {}
    num_classes = 0
    if job.label_dir is not None:
        for path in images:
            label_path = Path(job.label_dir) / (path.stem + ".png")
            if not label_path.exists():
                raise FileNotFoundError(f"no label map for {path.name} at {label_path}")
            with Image.open(label_path) as lm:
                label_map = np.asarray(lm.convert("L"), dtype=np.int64)
            cropped = _crop_label_map(label_map, patch)
            pooled = pool_labels(cropped, patch, cropped.shape[0] // patch, cropped.shape[1] // patch)
            pooled_labels[path.name] = pooled
            labeled = pooled[pooled != UNLABELED]
            if labeled.size:
                num_classes = max(num_classes, int(labeled.max()) + 1)

    written = []
    for path in images:
        img = center_crop_to_multiple(load_image(path), patch)
        grid_h, grid_w = img.shape[0] // patch, img.shape[1] // patch

        views = []
        for view_idx in ("a", "b"):
            view = photometric_view(img, job.seed, f"{path.name}/view-{view_idx}")
            normalized = (view - IMAGENET_MEAN) / IMAGENET_STD
            views.append(patchify(normalized, patch))
        if views[0].shape != views[1].shape:
            log.error("grid mismatch between views for %s; skipping", path.name)
            continue

        feats_a, attention = backbone.forward(views[0], grid_h, grid_w)
        feats_b, _ = backbone.forward(views[1], grid_h, grid_w)

        labels = pooled_labels.get(path.name)
        out_path = out_dir / (path.stem + ".hpfs")
        write_shard_file(
            out_path, grid_h, grid_w, feats_a, feats_b, attention,
            labels=labels, num_classes=num_classes if labels is not None else 0,
        )
        written.append(out_path)
        log.info("exported %s -> %s (%dx%d grid, C=%d)", path.name, out_path.name, grid_h, grid_w, feats_a.shape[1])
    return written
