"""Losses and their analytic gradients.

All contrastive terms share one masked multi-positive core: for anchor u and
candidate set D = N u P,

    L(u, P, N) = -(1/|P|) sum_{p in P} log( exp(u.z_p / tau) / sum_{d in D} exp(u.z_d / tau) )

computed with max-subtraction. Projected rows are unit vectors, so the
similarity inside the loss is a plain dot product; the normalization
Jacobian is applied later by the projection backward pass.

Per-term batch reduction is the mean over contributing anchors: an anchor
with no positives contributes nothing to that flavor's terms, an anchor with
an empty local selection skips only the mixed terms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import heads, mining

log = logging.getLogger(__name__)

TERMS = ("phi_ag", "psi_ag", "phi_sp", "psi_sp", "reg")

GRAD_PROP = "grad_prop"
LOSS_PROP = "loss_prop"


class ZeroPositivesError(ValueError):
    """Anchor has no positives; the caller must skip it."""


@dataclass
class LossSchedule:
    total_iterations: int
    tau: float = 0.5
    alpha: float = 0.05  # consistency-regularizer weight, constant
    shape: str = "linear"  # "linear" | "cosine" ramp of the task-specific weight

    def __post_init__(self):
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.shape not in ("linear", "cosine"):
            raise ValueError(f"unknown schedule shape {self.shape!r}")

    def lambda_at(self, iteration: int) -> float:
        """Task-specific weight ramping 0 -> 1 over [0, total_iterations]."""
        frac = min(max(iteration / self.total_iterations, 0.0), 1.0)
        if self.shape == "cosine":
            return 0.5 * (1.0 - np.cos(np.pi * frac))
        return frac


@dataclass
class LossBreakdown:
    phi_ag: float
    psi_ag: float
    phi_sp: float
    psi_sp: float
    regularizer: float
    total: float
    anchors_used: int
    anchors_skipped_zero_positive: int
    lam: float
    alpha: float


def _index_masks(index_lists: list, n: int) -> np.ndarray:
    mask = np.zeros((len(index_lists), n), dtype=bool)
    lengths = [len(idx) for idx in index_lists]
    if any(lengths):
        rows = np.repeat(np.arange(len(index_lists)), lengths)
        cols = np.concatenate([np.asarray(idx, dtype=np.int64) for idx in index_lists if len(idx)])
        mask[rows, cols] = True
    return mask


def _masked_contrastive(anchors, targets, pos_mask, neg_mask, tau, weights, logits=None):
    """Weighted-sum multi-positive loss over masked candidates.

    anchors: (m, K) anchor rows; targets: (n, K) candidate rows; masks: (m, n).
    weights scales each anchor's loss AND its gradient (zero weight rows cost
    nothing). `logits` may be passed precomputed when several flavors share
    the same anchor/target pair. Stays in the anchors' dtype throughout.
    Returns (weighted total, per-row raw loss, d_anchors, d_targets).
    """
    dtype = anchors.dtype
    cand = pos_mask | neg_mask
    if logits is None:
        logits = (anchors @ targets.T) / tau
    row_max = np.max(logits, axis=1, where=cand, initial=-np.inf)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0).astype(dtype)  # rows w/o candidates
    expd = np.exp(logits - row_max[:, None])
    expd *= cand
    denom = expd.sum(axis=1)
    denom_safe = np.where(denom > 0, denom, 1.0)
    pcnt = pos_mask.sum(axis=1)
    pcnt_safe = np.maximum(pcnt, 1).astype(dtype)
    pos_f = pos_mask.astype(dtype)

    per_row = np.log(denom_safe) + row_max - np.einsum("ij,ij->i", logits, pos_f) / pcnt_safe
    per_row = np.where(pcnt > 0, per_row, dtype.type(0))

    # d_logits = (softmax - pos/|P|) * w, built with two fused scalings
    d_logits = expd * (weights / denom_safe)[:, None]
    d_logits -= pos_f * (weights / pcnt_safe)[:, None]
    d_anchors = d_logits @ targets / tau
    d_targets = d_logits.T @ anchors / tau
    return float(weights @ per_row), per_row, d_anchors, d_targets


def contrastive_multi(z_anchor, z_batch, positives, negatives, tau):
    """Multi-positive loss for one anchor; gradients for the anchor and batch rows.

    The denominator runs over N u P exactly; the anchor itself must not
    appear in either set. Raises ZeroPositivesError when P is empty.
    """
    positives = np.asarray(positives, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64)
    if positives.size == 0:
        raise ZeroPositivesError("anchor has no positives and must be skipped")
    if np.intersect1d(positives, negatives).size:
        raise ValueError("positive and negative sets overlap")
    n = z_batch.shape[0]
    pos = _index_masks([positives], n)
    neg = _index_masks([negatives], n)
    total, _, d_anchor, d_batch = _masked_contrastive(
        np.asarray(z_anchor).reshape(1, -1), z_batch, pos, neg, tau, np.ones(1, dtype=z_batch.dtype)
    )
    return total, d_anchor[0], d_batch


def self_contrastive(anchor: int, z_batch, z_pair, tau):
    """Single-positive loss: the augmented counterpart against all other batch rows.

    Candidates are every other row of z_batch plus the counterpart itself
    (which is also the positive). Returns (loss, d_anchor_row, d_batch, d_pair).
    """
    n = z_batch.shape[0]
    if n < 2:
        raise ValueError("self-contrastive loss needs a batch of size >= 2")
    u = np.asarray(z_batch[anchor])
    others = np.concatenate([np.arange(anchor), np.arange(anchor + 1, n)])
    cand = np.concatenate([z_batch[others], np.asarray(z_pair).reshape(1, -1)], axis=0)
    logits = cand @ u / tau
    m = logits.max()
    e = np.exp(logits - m)
    q = e / e.sum()
    loss = float(np.log(e.sum()) + m - logits[-1])
    d_logits = q.copy()
    d_logits[-1] -= 1.0
    d_u = (d_logits @ cand) / tau
    d_batch = np.zeros_like(z_batch)
    d_batch[others] = d_logits[:-1, None] * u[None, :] / tau
    d_batch[anchor] = d_u
    d_pair = d_logits[-1] * u / tau
    return loss, d_u, d_batch, d_pair


def self_contrastive_batch(z_a, z_b, tau):
    """Mean single-positive loss over all anchors (ablation baseline mode).

    For each anchor i the positive is its view-b counterpart; candidates are
    the other view-a rows plus that counterpart.
    """
    n = z_a.shape[0]
    if n < 2:
        raise ValueError("self-contrastive loss needs a batch of size >= 2")
    logits_aa = (z_a @ z_a.T) / tau
    pos_logit = np.sum(z_a * z_b, axis=1) / tau
    cand = np.ones((n, n), dtype=bool)
    np.fill_diagonal(cand, False)
    stacked = np.concatenate([np.where(cand, logits_aa, -np.inf), pos_logit[:, None]], axis=1)
    row_max = stacked.max(axis=1)
    e = np.exp(stacked - row_max[:, None])
    e[:, :n][~cand] = 0.0
    denom = e.sum(axis=1)
    loss = float(np.mean(np.log(denom) + row_max - pos_logit))

    q = e / denom[:, None]
    w = 1.0 / n
    d_aa = q[:, :n] * w  # anchor-row i, target-row j (j != i)
    d_pos = (q[:, n] - 1.0) * w
    d_za = (d_aa @ z_a + d_pos[:, None] * z_b) / tau + (d_aa.T @ z_a) / tau
    d_zb = d_pos[:, None] * z_a / tau
    return loss, d_za, d_zb


def regularizer(z_a, z_b):
    """Mean squared Euclidean distance between the two views' projected rows."""
    if z_a.shape != z_b.shape:
        raise ValueError(f"view shapes differ: {z_a.shape} vs {z_b.shape}")
    diff = z_a - z_b
    n = z_a.shape[0]
    loss = float(np.sum(diff * diff) / n)
    d_za = 2.0 * diff / n
    return loss, d_za, -d_za


def _zero_grads(params: heads.HeadParameters) -> dict:
    return {name: np.zeros_like(arr) for name, arr in params.blocks().items()}


def _accumulate(into: dict, new: dict, scale: float = 1.0) -> None:
    for name, g in new.items():
        into[name] += scale * g


def total_loss(
    feats_a,
    feats_b,
    params: heads.HeadParameters,
    sets: mining.GlobalPositiveSets,
    selections: list | None,
    schedule: LossSchedule,
    iteration: int,
    sigma: float = 1.0,
    include: tuple = TERMS,
    mode: str = GRAD_PROP,
):
    """Composite loss with the full parameter gradient.

    Per anchor: the plain terms use z_i = Z(S(f_i)); the mixed terms use
    z_mix_i = Z(s_mix_i) in grad-prop mode, or one reweighted loss per kept
    neighbor in loss-prop mode. The task-specific pair is weighted by the
    ramp value at `iteration` and the regularizer by schedule.alpha.

    `include` limits which terms are evaluated (ablations, per-term gradient
    checks); terms whose inputs are absent are dropped regardless.
    """
    include = set(include)
    if sets.pos_sp is None:
        include -= {"phi_sp", "psi_sp"}
    if selections is None:
        include -= {"psi_ag", "psi_sp"}
    if feats_b is None:
        include -= {"reg"}

    lam = schedule.lambda_at(iteration)
    tau = schedule.tau
    n = feats_a.shape[0]

    s_a, seg_cache_a = heads.seg_forward(feats_a, params)
    z_a, proj_cache_a = heads.proj_forward(s_a, params)
    dz_a = np.zeros_like(z_a)

    values = dict.fromkeys(TERMS, 0.0)
    grads = _zero_grads(params)

    pos_masks = {}
    neg_masks = {}
    if include & {"phi_ag", "psi_ag"}:
        pos_masks["ag"] = _index_masks(sets.pos_ag, n)
        neg_masks["ag"] = _index_masks(sets.neg_ag, n)
    if include & {"phi_sp", "psi_sp"}:
        pos_masks["sp"] = _index_masks(sets.pos_sp, n)
        neg_masks["sp"] = _index_masks(sets.neg_sp, n)

    def term_weights(pos_mask, rows=None):
        """1/(number of contributing anchors) on contributing rows, else 0."""
        counts = pos_mask.sum(axis=1) if rows is None else pos_mask[rows].sum(axis=1)
        contrib = counts > 0
        total_c = int(contrib.sum())
        w = np.zeros(contrib.shape[0], dtype=z_a.dtype)
        if total_c:
            w[contrib] = 1.0 / total_c
        return w, total_c

    # Plain contrastive terms on z_i.
    logits_aa = None
    for flavor, term, coeff in (("ag", "phi_ag", 1.0), ("sp", "phi_sp", lam)):
        if term not in include:
            continue
        w, total_c = term_weights(pos_masks[flavor])
        if total_c == 0:
            continue
        if logits_aa is None:
            logits_aa = (z_a @ z_a.T) / tau
        value, _, d_anchor, d_targets = _masked_contrastive(
            z_a, z_a, pos_masks[flavor], neg_masks[flavor], tau, w, logits=logits_aa
        )
        values[term] = value
        if coeff:
            dz_a += coeff * (d_anchor + d_targets)

    # Mixed terms on the attention-gated neighborhood.
    psi_terms = [t for t in ("psi_ag", "psi_sp") if t in include]
    dz_mix = None
    mix_sels = []
    proj_cache_mix = None
    if psi_terms:
        mix_sels = [sel for sel in selections if sel.size > 0]
    if psi_terms and mix_sels:
        anchor_rows = np.asarray([sel.anchor for sel in mix_sels], dtype=np.int64)
        if mode == GRAD_PROP:
            s_mix = mining.mix_local_batch(s_a, mix_sels, sigma)
            z_mix, proj_cache_mix = heads.proj_forward(s_mix, params)
            dz_mix = np.zeros_like(z_mix)
            logits_mix = None
            for flavor, term, coeff in (("ag", "psi_ag", 1.0), ("sp", "psi_sp", lam)):
                if term not in include:
                    continue
                pos = pos_masks[flavor][anchor_rows]
                neg = neg_masks[flavor][anchor_rows]
                w, total_c = term_weights(pos_masks[flavor], rows=anchor_rows)
                if total_c == 0:
                    continue
                if logits_mix is None:
                    logits_mix = (z_mix @ z_a.T) / tau
                value, _, d_anchor, d_targets = _masked_contrastive(
                    z_mix, z_a, pos, neg, tau, w, logits=logits_mix
                )
                values[term] = value
                if coeff:
                    dz_mix += coeff * d_anchor
                    dz_a += coeff * d_targets
        elif mode == LOSS_PROP:
            # Each kept neighbor j gets the anchor's own loss at weight
            # sigma * t_j / |I_i|; no feature mixing happens.
            owner = np.concatenate([np.full(sel.size, k) for k, sel in enumerate(mix_sels)])
            member = np.concatenate([sel.indices for sel in mix_sels])
            member_w = np.concatenate([mining.mix_weights(sel, sigma) for sel in mix_sels])
            owner_anchor = anchor_rows[owner]
            logits_exp = None
            for flavor, term, coeff in (("ag", "psi_ag", 1.0), ("sp", "psi_sp", lam)):
                if term not in include:
                    continue
                pos = pos_masks[flavor][owner_anchor]
                neg = neg_masks[flavor][owner_anchor]
                w_anchor, total_c = term_weights(pos_masks[flavor], rows=anchor_rows)
                if total_c == 0:
                    continue
                if logits_exp is None:
                    logits_exp = (z_a[member] @ z_a.T) / tau
                w = member_w.astype(z_a.dtype) * w_anchor[owner]
                value, _, d_anchor, d_targets = _masked_contrastive(
                    z_a[member], z_a, pos, neg, tau, w, logits=logits_exp
                )
                values[term] = value
                if coeff:
                    np.add.at(dz_a, member, coeff * d_anchor)
                    dz_a += coeff * d_targets
        else:
            raise ValueError(f"unknown propagation mode {mode!r}")

    # Consistency regularizer over the two augmented views.
    seg_cache_b = proj_cache_b = None
    dz_b = None
    if "reg" in include:
        s_b, seg_cache_b = heads.seg_forward(feats_b, params)
        z_b, proj_cache_b = heads.proj_forward(s_b, params)
        value, d_za_r, d_zb_r = regularizer(z_a, z_b)
        values["reg"] = value
        if schedule.alpha:
            dz_a += schedule.alpha * d_za_r
            dz_b = schedule.alpha * d_zb_r
        else:
            dz_b = np.zeros_like(z_b)

    # Backward through the heads.
    d_s_a = np.zeros_like(s_a)
    if dz_mix is not None:
        proj_grads_mix, d_s_mix = heads.proj_backward(dz_mix, proj_cache_mix, params)
        _accumulate(grads, proj_grads_mix)
        d_s_a += mining.distribute_mixed_grad(d_s_mix, mix_sels, sigma, n)
    proj_grads_a, d_s_direct = heads.proj_backward(dz_a, proj_cache_a, params)
    _accumulate(grads, proj_grads_a)
    d_s_a += d_s_direct
    _accumulate(grads, heads.seg_backward(d_s_a, seg_cache_a, params))
    if dz_b is not None:
        proj_grads_b, d_s_b = heads.proj_backward(dz_b, proj_cache_b, params)
        _accumulate(grads, proj_grads_b)
        _accumulate(grads, heads.seg_backward(d_s_b, seg_cache_b, params))

    ag_empty = (
        pos_masks["ag"].sum(axis=1) == 0
        if "ag" in pos_masks
        else np.ones(n, dtype=bool)
    )
    sp_empty = (
        pos_masks["sp"].sum(axis=1) == 0
        if "sp" in pos_masks
        else np.ones(n, dtype=bool)
    )
    skipped = int(np.sum(ag_empty & sp_empty))

    total = (
        values["phi_ag"]
        + values["psi_ag"]
        + lam * (values["phi_sp"] + values["psi_sp"])
        + schedule.alpha * values["reg"]
    )
    breakdown = LossBreakdown(
        phi_ag=values["phi_ag"],
        psi_ag=values["psi_ag"],
        phi_sp=values["phi_sp"],
        psi_sp=values["psi_sp"],
        regularizer=values["reg"],
        total=total,
        anchors_used=n - skipped,
        anchors_skipped_zero_positive=skipped,
        lam=lam,
        alpha=schedule.alpha,
    )
    if breakdown.anchors_used == 0 and "reg" not in include:
        log.warning("iteration %d: every anchor skipped (zero positives); zero-gradient step", iteration)
    return breakdown, grads


def loss_propagation_alternative(
    feats_a,
    feats_b,
    params: heads.HeadParameters,
    sets: mining.GlobalPositiveSets,
    selections: list | None,
    schedule: LossSchedule,
    iteration: int,
    sigma: float = 1.0,
    include: tuple = TERMS,
):
    """Neighbor-loss variant: every kept neighbor re-runs the anchor's loss.

    Matches total_loss when all selections are empty; costs more time and
    memory because the candidate matrices grow by the neighborhood factor.
    """
    return total_loss(
        feats_a,
        feats_b,
        params,
        sets,
        selections,
        schedule,
        iteration,
        sigma=sigma,
        include=include,
        mode=LOSS_PROP,
    )
