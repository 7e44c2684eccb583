"""Representation quality probes: cosine cluster probe with Hungarian matching,
supervised linear probe, and Acc/mIoU metrics over patch labels.

Evaluation consumes segmentation features (the head output s, not the
projection z) and the ground-truth labels carried by shards; patches labeled
with the unlabeled sentinel are excluded from every confusion count.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import heads
from .tensorcore import RngStream, row_normalize


@dataclass
class ProbeResult:
    accuracy: float
    mean_iou: float
    per_class_iou: list  # None for classes absent from the ground truth
    matching: list | None = None  # cluster -> class permutation (cluster probe only)


def build_confusion(predicted, labels, num_classes: int) -> np.ndarray:
    """Counts[pred, gt] over labeled patches; sentinel-labeled patches are skipped."""
    predicted = np.asarray(predicted, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    keep = labels >= 0
    if (labels[keep] >= num_classes).any():
        bad = int(labels[keep].max())
        raise ValueError(f"label {bad} outside [0, {num_classes})")
    flat = predicted[keep] * num_classes + labels[keep]
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def hungarian_match(confusion: np.ndarray) -> list:
    """Optimal cluster -> class assignment maximizing the matched count.

    Potentials-based O(n^3) assignment on the negated counts; exact for
    integer inputs (float64 arithmetic stays exact below 2^53).
    """
    c = np.asarray(confusion)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {c.shape}")
    n = c.shape[0]
    cost = -c.astype(np.float64)
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match_row = [0] * (n + 1)  # column j -> row (1-based, 0 = free)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        match_row[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match_row[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1][j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match_row[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_row[j0] = match_row[j1]
            j0 = j1
    perm = [0] * n
    for j in range(1, n + 1):
        if match_row[j]:
            perm[match_row[j] - 1] = j - 1
    return perm


def apply_matching(confusion: np.ndarray, perm: list) -> np.ndarray:
    """Reorder rows so row index c holds the cluster assigned to class c."""
    out = np.zeros_like(confusion)
    for cluster, cls in enumerate(perm):
        out[cls] = confusion[cluster]
    return out


def metrics(matched_confusion: np.ndarray, matching: list | None = None) -> ProbeResult:
    """Accuracy and mean IoU of a matched confusion matrix.

    IoU_c = TP / (TP + FP + FN); classes with no ground-truth patches are
    excluded from the mean.
    """
    m = np.asarray(matched_confusion, dtype=np.float64)
    total = m.sum()
    if total == 0:
        raise ValueError("confusion matrix is empty (no labeled patches)")
    accuracy = float(np.trace(m) / total)
    per_class = []
    ious = []
    for c in range(m.shape[0]):
        tp = m[c, c]
        fp = m[c].sum() - tp
        fn = m[:, c].sum() - tp
        if m[:, c].sum() == 0:  # class absent from ground truth
            per_class.append(None)
            continue
        iou = float(tp / (tp + fp + fn)) if (tp + fp + fn) > 0 else 0.0
        per_class.append(iou)
        ious.append(iou)
    return ProbeResult(
        accuracy=accuracy,
        mean_iou=float(np.mean(ious)) if ious else 0.0,
        per_class_iou=per_class,
        matching=matching,
    )


def _seed_centroids(xn, num_classes, gen):
    # k-means++ seeding with squared cosine-distance weighting
    chosen = [int(gen.integers(len(xn)))]
    best_sim = xn @ xn[chosen[0]]
    for _ in range(num_classes - 1):
        d2 = np.square(np.clip(1.0 - best_sim, 0.0, None))
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(len(xn), 1.0 / len(xn))
        nxt = int(gen.choice(len(xn), p=probs))
        chosen.append(nxt)
        best_sim = np.maximum(best_sim, xn @ xn[nxt])
    return xn[chosen].copy()


def _refine_centroids(xn, centroids, lr, steps):
    n = len(xn)
    cents = {"centroids": centroids}
    opt = heads.init_optimizer(cents, lr=lr, weight_decay=0.0)
    for _ in range(steps):
        c = cents["centroids"]
        norms = np.sqrt(np.sum(c * c, axis=1, keepdims=True))
        cn = c / norms
        sims = xn @ cn.T
        assign = sims.argmax(axis=1)
        counts = np.bincount(assign, minlength=len(c))
        if (counts == 0).any():
            # restart dead centroids at the most isolated point
            loneliest = sims.max(axis=1).argmin()
            for k in np.flatnonzero(counts == 0):
                c[k] = xn[loneliest]
                opt.moments1["centroids"][k] = 0.0
                opt.moments2["centroids"][k] = 0.0
            continue
        # minimize -mean cosine to the assigned centroid
        d_cn = np.zeros_like(cn)
        np.add.at(d_cn, assign, -xn / n)
        inner = np.sum(d_cn * cn, axis=1, keepdims=True)
        d_c = (d_cn - inner * cn) / norms
        heads.adamw_step(cents, {"centroids": d_c}, opt)
    c = cents["centroids"]
    cn = c / np.sqrt(np.sum(c * c, axis=1, keepdims=True))
    sims = xn @ cn.T
    assign = sims.argmax(axis=1)
    objective = float(np.mean(sims[np.arange(n), assign]))
    return cn, assign, objective


def cluster_probe(features, num_classes: int, rng: RngStream, lr: float = 0.005, steps: int = 500, restarts: int = 4):
    """Learn unit-norm centroids maximizing mean cosine similarity to assignments.

    Alternates hard argmax-cosine assignment with Adam updates of the raw
    centroid parameters (k-means++-style seeding, fixed step budget). Runs a
    few seeded restarts and keeps the best objective, the usual guard
    against split/merge local minima. Returns (unit centroids, assignments).
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < num_classes:
        raise ValueError(f"need at least {num_classes} samples, got {n}")
    xn = row_normalize(x)
    best = None
    for r in range(restarts):
        gen = rng.child(f"restart-{r}").generator()
        seeds = _seed_centroids(xn, num_classes, gen)
        cn, assign, objective = _refine_centroids(xn, seeds, lr, steps)
        if best is None or objective > best[2]:
            best = (cn, assign, objective)
    return best[0], best[1]


def cluster_probe_result(features, labels, num_classes: int, rng: RngStream, lr: float = 0.005, steps: int = 500) -> ProbeResult:
    """Cluster probe scored against labels through Hungarian matching."""
    _, assign = cluster_probe(features, num_classes, rng, lr=lr, steps=steps)
    confusion = build_confusion(assign, labels, num_classes)
    perm = hungarian_match(confusion)
    return metrics(apply_matching(confusion, perm), matching=perm)


def linear_probe(
    train_feats,
    train_labels,
    test_feats,
    test_labels,
    num_classes: int,
    lr: float = 0.001,
    epochs: int = 100,
):
    """Single linear layer on frozen features, softmax cross-entropy, Adam.

    Full-batch updates, one per epoch, fully deterministic. Returns
    (ProbeResult on the held-out split, per-epoch loss history); identity
    matching by definition.
    """
    x = np.asarray(train_feats, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.int64)
    keep = y >= 0
    x, y = x[keep], y[keep]
    if x.shape[0] == 0:
        raise ValueError("no labeled training patches")
    if y.max() >= num_classes:
        raise ValueError(f"label {int(y.max())} outside [0, {num_classes})")

    # zero init: the probe is convex, so this is the deterministic optimum
    # of "no information" and keeps early epochs monotone
    params = {
        "w": np.zeros((num_classes, x.shape[1])),
        "b": np.zeros(num_classes),
    }
    opt = heads.init_optimizer(params, lr=lr, weight_decay=0.0)
    n = x.shape[0]
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), y] = 1.0

    losses = []
    for _ in range(epochs):
        logits = x @ params["w"].T + params["b"]
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)
        losses.append(float(-np.mean(np.log(p[np.arange(n), y] + 1e-300))))
        d_logits = (p - onehot) / n
        heads.adamw_step(params, {"w": d_logits.T @ x, "b": d_logits.sum(axis=0)}, opt)

    test_x = np.asarray(test_feats, dtype=np.float64)
    pred = (test_x @ params["w"].T + params["b"]).argmax(axis=1)
    confusion = build_confusion(pred, test_labels, num_classes)
    return metrics(confusion, matching=None), losses


METRIC_COLUMNS = ("iteration", "unsup_acc", "unsup_miou", "linear_acc", "linear_miou")


def write_metrics_csv(path, rows: list) -> None:
    """CSV summary with the fixed schema; one row per evaluation point."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow(
                [int(row["iteration"])]
                + [f"{float(row[k]):.6f}" for k in METRIC_COLUMNS[1:]]
            )


def format_metric_record(row: dict) -> str:
    """One line-delimited record per evaluation, for logs."""
    return " ".join(f"{k}={row[k]:.6f}" if k != "iteration" else f"{k}={int(row[k])}" for k in METRIC_COLUMNS)
