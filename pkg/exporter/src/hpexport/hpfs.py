"""HPFS v1 writer, byte-compatible with the training engine's reader.

Layout (little-endian): magic "HPFS", version u32 = 1, H u32, W u32, C u32,
has_labels u8, num_classes u32; then view_a (HW x C f32), view_b
(HW x C f32), attention (HW x HW f32), labels (HW i32, only when flagged;
-1 marks an unlabeled patch). Attention rows must sum to 1 within 1e-4.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"HPFS"
VERSION = 1
UNLABELED = -1
ATTENTION_ROW_TOL = 1e-4


def write_shard_file(path, grid_h, grid_w, view_a, view_b, attention, labels=None, num_classes=0):
    hw = grid_h * grid_w
    view_a = np.ascontiguousarray(view_a, dtype="<f4")
    view_b = np.ascontiguousarray(view_b, dtype="<f4")
    attention = np.ascontiguousarray(attention, dtype="<f4")
    if view_a.shape != view_b.shape or view_a.shape[0] != hw or attention.shape != (hw, hw):
        raise ValueError(
            f"inconsistent shard sections: views {view_a.shape}/{view_b.shape}, "
            f"attention {attention.shape}, grid {grid_h}x{grid_w}"
        )
    row_sums = attention.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > ATTENTION_ROW_TOL:
        raise ValueError("attention rows must sum to 1 within 1e-4")
    has_labels = labels is not None
    if has_labels:
        labels = np.ascontiguousarray(labels, dtype="<i4")
        if labels.shape != (hw,):
            raise ValueError(f"labels must have shape ({hw},)")
        valid = labels[labels != UNLABELED]
        if valid.size and (valid.min() < 0 or valid.max() >= num_classes):
            raise ValueError("labels outside [0, num_classes)")
    header = MAGIC + struct.pack(
        "<IIIIBI", VERSION, grid_h, grid_w, view_a.shape[1],
        1 if has_labels else 0, num_classes if has_labels else 0,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(view_a.tobytes())
        f.write(view_b.tobytes())
        f.write(attention.tobytes())
        if has_labels:
            f.write(labels.tobytes())
