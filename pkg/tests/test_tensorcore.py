import numpy as np
import pytest

from hpseg.tensorcore import (
    DegenerateInputError,
    RngStream,
    cosine_sim,
    matrix,
    pairwise_cosine,
    row_normalize,
    softmax,
)


def test_cosine_identical_unit_vectors():
    assert cosine_sim([1.0, 0.0], [1.0, 0.0]) == pytest.approx(1.0)


def test_cosine_orthogonal():
    assert cosine_sim([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0)


def test_cosine_hand_computed():
    # (3*4 + 4*3) / (5 * 5) = 24/25
    assert cosine_sim([3.0, 4.0], [4.0, 3.0]) == pytest.approx(24.0 / 25.0)


def test_cosine_zero_vector_rejected():
    with pytest.raises(DegenerateInputError):
        cosine_sim([0.0, 0.0], [1.0, 0.0])


def test_cosine_dimension_mismatch():
    with pytest.raises(ValueError):
        cosine_sim([1.0, 0.0], [1.0, 0.0, 0.0])


def test_cosine_clamped_to_unit_interval():
    v = np.full(300, 0.1, dtype=np.float32)
    assert -1.0 <= cosine_sim(v, v) <= 1.0
    assert -1.0 <= cosine_sim(v, -v) <= 1.0


def test_row_normalize_hand_case():
    out = row_normalize(np.array([[3.0, 4.0]]))
    np.testing.assert_allclose(out, [[0.6, 0.8]], atol=1e-7)


def test_row_normalize_identity_unchanged():
    eye = np.eye(3)
    np.testing.assert_array_equal(row_normalize(eye), eye)


def test_row_normalize_unit_norms_random(gen):
    m = gen.normal(size=(5, 8)).astype(np.float32)
    norms = np.linalg.norm(row_normalize(m), axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-6)


def test_row_normalize_idempotent(gen):
    m = gen.normal(size=(6, 5)).astype(np.float32)
    once = row_normalize(m)
    twice = row_normalize(once)
    np.testing.assert_allclose(once, twice, atol=1e-6)


def test_row_normalize_zero_row_names_index():
    m = np.array([[1.0, 2.0], [0.0, 0.0], [3.0, 4.0]])
    with pytest.raises(DegenerateInputError, match="row 1"):
        row_normalize(m)


def test_pairwise_identity():
    eye = np.eye(2)
    np.testing.assert_allclose(pairwise_cosine(eye, eye), eye, atol=1e-7)


def test_pairwise_single_row_self():
    a = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_allclose(pairwise_cosine(a, a), [[1.0]], atol=1e-6)


def test_pairwise_matches_loop_oracle(gen):
    a = gen.normal(size=(4, 3))
    b = gen.normal(size=(5, 3))
    got = pairwise_cosine(a, b)
    want = np.array([[cosine_sim(a[i], b[j]) for j in range(5)] for i in range(4)])
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_pairwise_self_symmetric_unit_diagonal(gen):
    a = gen.normal(size=(7, 4)).astype(np.float32)
    s = pairwise_cosine(a, a)
    np.testing.assert_allclose(s, s.T, atol=1e-6)
    np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-6)


def test_pairwise_dimension_mismatch(gen):
    with pytest.raises(ValueError):
        pairwise_cosine(gen.normal(size=(2, 3)), gen.normal(size=(2, 4)))


def test_matrix_rejects_nan_and_shape():
    with pytest.raises(ValueError):
        matrix([[1.0, np.nan]])
    with pytest.raises(ValueError):
        matrix([[1.0, np.inf]])
    with pytest.raises(ValueError):
        matrix([1.0, 2.0])


def test_softmax_rows_sum_to_one(gen):
    p = softmax(gen.normal(size=(5, 9)), axis=1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert (p > 0).all()


def test_rng_stream_reproducible():
    a = RngStream(42, "negatives").generator().integers(0, 1 << 30, size=8)
    b = RngStream(42, "negatives").generator().integers(0, 1 << 30, size=8)
    np.testing.assert_array_equal(a, b)


def test_rng_stream_distinct_ids_differ():
    a = RngStream(42, "pool-sample").generator().integers(0, 1 << 30, size=8)
    b = RngStream(42, "negatives").generator().integers(0, 1 << 30, size=8)
    assert not np.array_equal(a, b)


def test_rng_child_streams_deterministic_and_independent():
    root = RngStream(7)
    c1 = root.child("a").child("b")
    c2 = root.child("a").child("b")
    assert c1 == c2
    draws1 = c1.generator().random(4)
    draws2 = c2.generator().random(4)
    np.testing.assert_array_equal(draws1, draws2)
    assert not np.array_equal(draws1, root.child("a").child("c").generator().random(4))
