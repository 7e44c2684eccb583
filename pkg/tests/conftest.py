import numpy as np
import pytest

from hpseg import shardio, tensorcore


def random_shard(gen, grid_h=2, grid_w=2, feat_dim=6, num_classes=0, att_scale=4.0):
    """Random shard with valid softmax attention; labels only when num_classes > 0."""
    hw = grid_h * grid_w
    view_a = gen.normal(size=(hw, feat_dim))
    view_b = view_a + 0.1 * gen.normal(size=(hw, feat_dim))
    sims = tensorcore.row_normalize(view_a) @ tensorcore.row_normalize(view_a).T
    attention = tensorcore.softmax(att_scale * sims, axis=1)
    labels = gen.integers(0, num_classes, size=hw).astype(np.int32) if num_classes else None
    return shardio.PatchShard(
        grid_h=grid_h,
        grid_w=grid_w,
        view_a=view_a.astype(np.float32),
        view_b=view_b.astype(np.float32),
        attention=attention.astype(np.float32),
        labels=labels,
        num_classes=num_classes,
    )


@pytest.fixture
def gen():
    return np.random.default_rng(1234)
