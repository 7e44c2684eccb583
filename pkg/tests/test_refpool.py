import numpy as np
import pytest

from conftest import random_shard
from hpseg import heads
from hpseg.refpool import (
    ReferencePool,
    RenewalSchedule,
    TASK_AGNOSTIC,
    TASK_SPECIFIC,
    build_task_agnostic_pool,
    criterion,
    criterion_all,
    renew_task_specific_pool,
)
from hpseg.tensorcore import RngStream, cosine_sim


def shard_set(n, gen, feat_dim=6):
    return [random_shard(gen, grid_h=2, grid_w=2, feat_dim=feat_dim) for _ in range(n)]


def identity_momentum(dim):
    eye = np.eye(dim, dtype=np.float32)
    zero = np.zeros(dim, dtype=np.float32)
    return heads.MomentumParameters(seg_w1=eye.copy(), seg_b1=zero.copy(),
                                    seg_w2=eye.copy(), seg_b2=zero.copy())


def test_pool_uses_every_image_when_m_equals_dataset(gen):
    shards = shard_set(5, gen)
    pool = build_task_agnostic_pool(shards, 5, RngStream(0, "pool"))
    # every entry matches exactly one row of exactly one image, each image once
    used = []
    for entry in pool.entries:
        hits = [i for i, s in enumerate(shards) if any(np.array_equal(entry, row) for row in s.view_a)]
        assert len(hits) == 1
        used.append(hits[0])
    assert sorted(used) == [0, 1, 2, 3, 4]


def test_pool_deterministic(gen):
    shards = shard_set(6, gen)
    a = build_task_agnostic_pool(shards, 4, RngStream(3, "pool"))
    b = build_task_agnostic_pool(shards, 4, RngStream(3, "pool"))
    np.testing.assert_array_equal(a.entries, b.entries)


def test_pool_rows_are_dataset_rows(gen):
    shards = shard_set(8, gen)
    pool = build_task_agnostic_pool(shards, 6, RngStream(1, "pool"))
    all_rows = np.concatenate([s.view_a for s in shards])
    for entry in pool.entries:
        assert any(np.array_equal(entry, row) for row in all_rows)


def test_pool_too_few_images(gen):
    with pytest.raises(ValueError, match="at least 4"):
        build_task_agnostic_pool(shard_set(3, gen), 4, RngStream(0))


def test_task_agnostic_pool_frozen(gen):
    pool = build_task_agnostic_pool(shard_set(4, gen), 3, RngStream(0))
    assert pool.flavor == TASK_AGNOSTIC
    with pytest.raises(ValueError):
        pool.entries[0, 0] = 5.0


def test_renew_identity_head_returns_raw_features(gen):
    shards = []
    for _ in range(4):
        s = random_shard(gen, feat_dim=6)
        s.view_a = np.abs(s.view_a)  # ReLU of nonneg input is the identity
        shards.append(s)
    pool = renew_task_specific_pool(shards, identity_momentum(6), 3, RngStream(2, "sp"), iteration=7)
    assert pool.flavor == TASK_SPECIFIC
    assert pool.built_at_iteration == 7
    all_rows = np.concatenate([s.view_a for s in shards])
    for entry in pool.entries:
        assert any(np.allclose(entry, row, atol=1e-6) for row in all_rows)


def test_renewal_schedule_arithmetic():
    sched = RenewalSchedule(period=100)
    due = [t for t in range(250) if sched.due(t)]
    assert due == [0, 100, 200]
    assert sched.count_over(250) == 3
    assert sched.count_over(300) == 3
    with pytest.raises(ValueError):
        RenewalSchedule(period=0)


def test_renewed_pool_changes_after_momentum_update(gen):
    shards = shard_set(5, gen)
    params = heads.init_head_parameters(6, 6, RngStream(0, "init"))
    momentum = heads.MomentumParameters.from_head(params, coefficient=0.5)
    before = renew_task_specific_pool(shards, momentum, 4, RngStream(1, "sp"), iteration=0)
    moved = params.copy()
    for arr in moved.blocks().values():
        arr += 1.0
    heads.momentum_update(moved, momentum)
    after = renew_task_specific_pool(shards, momentum, 4, RngStream(1, "sp"), iteration=100)
    assert not np.allclose(before.entries, after.entries)


def test_criterion_examples():
    pool = ReferencePool(np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32), TASK_SPECIFIC)
    assert criterion(np.array([1.0, 0.0]), pool) == pytest.approx(1.0)
    diag = np.array([1.0, 1.0]) / np.sqrt(2)
    assert criterion(diag, pool) == pytest.approx(1.0 / np.sqrt(2), abs=1e-6)


def test_criterion_matches_loop_oracle(gen):
    entries = gen.normal(size=(64, 5)).astype(np.float32)
    pool = ReferencePool(entries, TASK_SPECIFIC)
    anchor = gen.normal(size=5)
    want = max(cosine_sim(anchor, q) for q in entries)
    assert criterion(anchor, pool) == pytest.approx(want, abs=1e-6)


def test_criterion_all_matches_single(gen):
    entries = gen.normal(size=(16, 4)).astype(np.float32)
    pool = ReferencePool(entries, TASK_SPECIFIC)
    feats = gen.normal(size=(9, 4)).astype(np.float32)
    got = criterion_all(feats, pool)
    want = [criterion(f, pool) for f in feats]
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_criterion_scale_invariant(gen):
    entries = gen.normal(size=(8, 4))
    pool = ReferencePool(entries, TASK_SPECIFIC)
    anchor = gen.normal(size=4)
    assert criterion(anchor, pool) == pytest.approx(criterion(3.7 * anchor, pool), abs=1e-6)


def test_criterion_is_one_for_pool_member(gen):
    entries = gen.normal(size=(8, 4)).astype(np.float32)
    pool = ReferencePool(entries, TASK_SPECIFIC)
    assert criterion(entries[3], pool) == pytest.approx(1.0, abs=1e-6)


def test_criterion_dimension_mismatch(gen):
    pool = ReferencePool(gen.normal(size=(4, 5)), TASK_SPECIFIC)
    with pytest.raises(ValueError):
        criterion_all(gen.normal(size=(2, 3)), pool)


def test_pool_rejects_zero_rows_and_empty():
    with pytest.raises(ValueError):
        ReferencePool(np.zeros((3, 4)), TASK_SPECIFIC)
    with pytest.raises(ValueError):
        ReferencePool(np.zeros((0, 4)), TASK_SPECIFIC)
