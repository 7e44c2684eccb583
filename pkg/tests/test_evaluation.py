import itertools

import numpy as np
import pytest

from hpseg.evaluation import (
    METRIC_COLUMNS,
    apply_matching,
    build_confusion,
    cluster_probe,
    cluster_probe_result,
    format_metric_record,
    hungarian_match,
    linear_probe,
    metrics,
    write_metrics_csv,
)
from hpseg.tensorcore import RngStream, row_normalize


def brute_force_match(confusion):
    n = confusion.shape[0]
    best, best_perm = -1, None
    for perm in itertools.permutations(range(n)):
        score = sum(confusion[i, perm[i]] for i in range(n))
        if score > best:
            best, best_perm = score, perm
    return best, best_perm


def matched_count(confusion, perm):
    return sum(confusion[i, perm[i]] for i in range(len(perm)))


def test_hungarian_diagonal_identity():
    perm = hungarian_match(np.diag([5, 5]))
    assert perm == [0, 1]
    assert matched_count(np.diag([5, 5]), perm) == 10


def test_hungarian_hand_case():
    # enumerate both permutations: identity scores 3, swap scores 7
    confusion = np.array([[2, 3], [4, 1]])
    perm = hungarian_match(confusion)
    assert perm == [1, 0]
    matched = apply_matching(confusion, perm)
    result = metrics(matched, matching=perm)
    assert result.accuracy == pytest.approx(0.7)


def test_hungarian_matches_brute_force(gen):
    for _ in range(30):
        confusion = gen.integers(0, 50, size=(5, 5))
        perm = hungarian_match(confusion)
        best, _ = brute_force_match(confusion)
        assert matched_count(confusion, perm) == best


def test_hungarian_non_square_rejected(gen):
    with pytest.raises(ValueError):
        hungarian_match(gen.integers(0, 5, size=(3, 4)))


def test_matching_beats_random_permutations(gen):
    confusion = gen.integers(0, 30, size=(6, 6))
    perm = hungarian_match(confusion)
    best = matched_count(confusion, perm)
    for _ in range(50):
        other = gen.permutation(6)
        assert matched_count(confusion, other) <= best


def test_metrics_perfect_diagonal():
    result = metrics(np.diag([4, 6, 2]))
    assert result.accuracy == 1.0
    assert result.mean_iou == 1.0


def test_metrics_hand_computed():
    # per class: TP=3, FP=1, FN=1 -> IoU 3/5
    result = metrics(np.array([[3, 1], [1, 3]]))
    assert result.accuracy == pytest.approx(0.75)
    assert result.per_class_iou == [pytest.approx(0.6), pytest.approx(0.6)]
    assert result.mean_iou == pytest.approx(0.6)


def test_metrics_absent_class_excluded():
    m = np.array([[5, 0, 0], [1, 4, 0], [0, 0, 0]])  # class 2 absent from ground truth
    result = metrics(m)
    assert result.per_class_iou[2] is None
    assert result.mean_iou == pytest.approx(np.mean([5 / 6, 4 / 5]))


def test_metrics_empty_confusion_rejected():
    with pytest.raises(ValueError):
        metrics(np.zeros((3, 3)))


def test_metrics_invariant_to_simultaneous_permutation(gen):
    m = gen.integers(0, 20, size=(4, 4))
    perm = gen.permutation(4)
    permuted = m[np.ix_(perm, perm)]
    a, b = metrics(m), metrics(permuted)
    assert a.accuracy == pytest.approx(b.accuracy)
    assert a.mean_iou == pytest.approx(b.mean_iou)


def test_build_confusion_skips_sentinel():
    pred = np.array([0, 1, 1, 0])
    labels = np.array([0, 1, -1, 1])
    confusion = build_confusion(pred, labels, 2)
    assert confusion.sum() == 3
    assert confusion[0, 0] == 1 and confusion[1, 1] == 1 and confusion[0, 1] == 1


def test_build_confusion_label_out_of_range():
    with pytest.raises(ValueError):
        build_confusion(np.array([0]), np.array([5]), 2)


def test_cluster_probe_recovers_orthogonal_directions():
    dirs = np.eye(3)
    feats = np.repeat(dirs, 20, axis=0) + 0.01 * np.random.default_rng(0).normal(size=(60, 3))
    labels = np.repeat(np.arange(3), 20)
    result = cluster_probe_result(feats, labels, 3, RngStream(0, "probe"), steps=200)
    assert result.accuracy == 1.0


def test_cluster_probe_single_cluster():
    feats = np.random.default_rng(0).normal(size=(10, 4))
    _, assign = cluster_probe(feats, 1, RngStream(0))
    assert (assign == 0).all()


def test_cluster_probe_needs_enough_samples():
    with pytest.raises(ValueError):
        cluster_probe(np.ones((2, 3)), 3, RngStream(0))


def lloyd_assignments(x, k, seed, iters=50, restarts=8):
    # plain Lloyd's iterations on unit-normalized features, best of restarts
    xn = row_normalize(x)
    best_inertia, best_assign = np.inf, None
    for r in range(restarts):
        g = np.random.default_rng(seed + r)
        centers = xn[g.choice(len(xn), size=k, replace=False)]
        assign = None
        for _ in range(iters):
            d2 = ((xn[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            assign = d2.argmin(axis=1)
            for c in range(k):
                pts = xn[assign == c]
                if len(pts):
                    centers[c] = pts.mean(axis=0)
        inertia = float(d2[np.arange(len(xn)), assign].sum())
        if inertia < best_inertia:
            best_inertia, best_assign = inertia, assign
    return best_assign


def test_cluster_probe_agrees_with_lloyd_oracle():
    g = np.random.default_rng(2)
    centers = row_normalize(g.normal(size=(4, 8))) * 6.0
    labels = np.repeat(np.arange(4), 50)
    feats = centers[labels] + 0.4 * g.normal(size=(200, 8))
    _, assign = cluster_probe(feats, 4, RngStream(1, "probe"))
    oracle = lloyd_assignments(feats, 4, seed=3)
    confusion = build_confusion(assign, oracle, 4)
    perm = hungarian_match(confusion)
    agreement = matched_count(confusion, perm) / 200
    assert agreement >= 0.99


def test_cluster_probe_scale_invariant(gen):
    feats = gen.normal(size=(40, 5))
    scales = gen.uniform(0.5, 3.0, size=(40, 1))
    _, a = cluster_probe(feats, 3, RngStream(7, "p"), steps=100)
    _, b = cluster_probe(feats * scales, 3, RngStream(7, "p"), steps=100)
    np.testing.assert_array_equal(a, b)


def test_linear_probe_separable():
    g = np.random.default_rng(0)
    centers = np.array([[4.0, 0.0, 0.0], [0.0, 4.0, 0.0]])
    labels = np.repeat([0, 1], 40)
    feats = centers[labels] + 0.2 * g.normal(size=(80, 3))
    result, losses = linear_probe(feats[::2], labels[::2], feats[1::2], labels[1::2],
                                  2, epochs=120)
    assert result.accuracy == 1.0
    # convex problem: loss decreases monotonically over the first 10 epochs
    assert all(b < a for a, b in zip(losses[:10], losses[1:11]))


def test_linear_probe_chance_level_on_shuffled_labels():
    g = np.random.default_rng(5)
    accs = []
    for seed in range(5):
        feats = g.normal(size=(400, 8))
        labels = np.tile(np.arange(4), 100)
        result, _ = linear_probe(feats[:300], labels[:300], feats[300:], labels[300:],
                                 4, epochs=60)
        accs.append(result.accuracy)
    assert abs(float(np.mean(accs)) - 0.25) <= 0.05


def test_linear_probe_label_out_of_range(gen):
    with pytest.raises(ValueError):
        linear_probe(gen.normal(size=(4, 3)), np.array([0, 1, 2, 9]),
                     gen.normal(size=(2, 3)), np.array([0, 1]), 3)


def test_metrics_csv_schema(tmp_path):
    rows = [
        {"iteration": 10, "unsup_acc": 0.5, "unsup_miou": 0.25, "linear_acc": 0.75, "linear_miou": 0.5},
        {"iteration": 20, "unsup_acc": 0.9, "unsup_miou": 0.8, "linear_acc": 0.95, "linear_miou": 0.9},
    ]
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, rows)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert lines[1] == "10,0.500000,0.250000,0.750000,0.500000"
    record = format_metric_record(rows[0])
    assert record.startswith("iteration=10 ") and "unsup_acc=0.500000" in record
