"""Scored segments, proposal generation, pseudo labels and the instance loss."""

import math
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .model import CE_EPS


class ScoredSegment(NamedTuple):
    start: int
    end: int
    label: int
    score: float


def _arr(x):
    return x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=float)


def softmax_np(P):
    z = P - P.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def runs_above(values, threshold):
    """Maximal runs [s, e) where values >= threshold."""
    on = np.concatenate([[False], np.asarray(values) >= threshold, [False]])
    edges = np.flatnonzero(on[1:] != on[:-1])
    return list(zip(edges[0::2].tolist(), edges[1::2].tolist()))


def extract_segments(outputs, classes, thresholds):
    """Threshold the foreground attention and score every run for each class.

    A run's confidence for class c is the mean over the run of
    softmax(P)[t, c] * A_fg[t]. Segments from all thresholds are pooled.
    """
    thresholds = list(thresholds)
    if not thresholds:
        raise ContractError("extract_segments needs at least one threshold")
    probs = softmax_np(_arr(outputs.P))
    fg = _arr(outputs.A)[:, 0]
    weighted = probs * fg[:, None]
    csum = np.concatenate([np.zeros((1, probs.shape[1])), np.cumsum(weighted, axis=0)])
    segs = []
    for th in thresholds:
        for s, e in runs_above(fg, th):
            for c in classes:
                q = (csum[e, c - 1] - csum[s, c - 1]) / (e - s)
                segs.append(ScoredSegment(s, e, int(c), float(q)))
    return segs


def rank_key(seg):
    return (-seg.score, seg.start, seg.end)


def generate_proposals(segments, gt_classes, alpha, delta, T):
    """Per class: keep the top-K segments whose scores sum to at most
    alpha of the class total (K >= 1), then widen each by delta of its length."""
    if not 0 < alpha <= 1:
        raise ContractError(f"alpha must lie in (0, 1], got {alpha}")
    if delta < 0:
        raise ContractError(f"delta must be >= 0, got {delta}")
    proposals = []
    for c in sorted(gt_classes):
        segs = sorted((s for s in segments if s.label == c), key=rank_key)
        if not segs:
            continue
        cum = np.cumsum([s.score for s in segs])
        q_sum = cum[-1]
        K = max(1, int(np.searchsorted(cum, alpha * q_sum, side="right")))
        for seg in segs[:K]:
            d = seg.end - seg.start
            s = max(0, math.floor(seg.start - delta * d + 1e-9))
            e = min(T, math.ceil(seg.end + delta * d - 1e-9))
            prop = (int(s), int(e), int(c))
            if prop not in proposals:
                proposals.append(prop)
    return proposals


def select_count(scores, alpha):
    """The K chosen from descending ``scores``; exposed for testing."""
    cum = np.cumsum(sorted(scores, reverse=True))
    return max(1, int(np.searchsorted(cum, alpha * cum[-1], side="right")))


def build_pseudo_labels(proposals, T, C):
    """T x (C+1) targets: proposal classes inside proposals, background elsewhere,
    each row l1-normalised."""
    Q = np.zeros((T, C + 1))
    for s, e, c in proposals:
        Q[s:e, c - 1] = 1.0
    empty = Q[:, :C].sum(axis=1) == 0
    Q[empty, C] = 1.0
    return Q / Q.sum(axis=1, keepdims=True)


def pseudo_instance_loss(P, Q, U, beta):
    """mean_t [ exp(-U_t) * CE(Q_t, softmax(P_t)) + beta * U_t ]."""
    Q = np.asarray(Q, dtype=float)
    if P.shape != Q.shape or U.shape != (P.shape[0],):
        raise ContractError(f"shape mismatch: P {P.shape}, Q {Q.shape}, U {U.shape}")
    logp = ad.log(ad.softmax(P, axis=1), CE_EPS)
    ce = ad.mul(ad.sum(ad.mul(logp, Q), axis=1), -1.0)
    per_row = ad.add(ad.mul(ad.exp(ad.mul(U, -1.0)), ce), ad.mul(U, beta))
    return ad.mean(per_row)


def proposal_gt_iou(proposals, gt_segments):
    """Mean over GT segments of the best same-class IoU with any proposal."""
    from .evaluation import temporal_iou

    if not gt_segments:
        return float("nan")
    best = []
    for gs, ge, gc in gt_segments:
        ious = [temporal_iou((s, e), (gs, ge)) for s, e, c in proposals if c == gc]
        best.append(max(ious, default=0.0))
    return float(np.mean(best))
