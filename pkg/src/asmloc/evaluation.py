"""Test-time inference and detection metrics (t-IoU, NMS, AP, mAP@IoU)."""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import EvalConfig
from .errors import ContractError
from .model import TrainedModel, forward, video_probs
from .proposals import extract_segments, generate_proposals, rank_key


def temporal_iou(a, b):
    (s1, e1), (s2, e2) = a[:2], b[:2]
    if e1 <= s1 or e2 <= s2:
        raise ContractError(f"zero-length interval in temporal_iou: {a}, {b}")
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    return inter / ((e1 - s1) + (e2 - s2) - inter)


def nms(segments, t_iou):
    """Class-wise greedy suppression; output ordered by (class, rank)."""
    if not 0 < t_iou < 1:
        raise ContractError(f"t_iou must lie in (0, 1), got {t_iou}")
    keep = []
    for c in sorted({s.label for s in segments}):
        pending = sorted((s for s in segments if s.label == c), key=rank_key)
        while pending:
            best = pending.pop(0)
            keep.append(best)
            pending = [s for s in pending if temporal_iou(best, s) < t_iou]
    return keep


# ---------------------------------------------------------------- AP / mAP

def average_precision(predictions, gt, cls, iou_threshold, counted=None):
    """Non-interpolated AP for one class.

    predictions: (video_id, ScoredSegment) pairs; ranked by score with a
    stable sort, so callers control tie order.
    gt: video_id -> list of (start, end, class).
    counted: optional predicate on a GT triple. GT failing it still takes
    part in matching, but predictions matched to it are dropped rather than
    scored, and it is left out of the recall denominator.
    Returns nan when the class has no counted GT.
    """
    gts = {v: [g for g in segs if g[2] == cls] for v, segs in gt.items()}
    n_gt = sum(1 for segs in gts.values() for g in segs if counted is None or counted(g))
    if n_gt == 0:
        return float("nan")
    preds = sorted((p for p in predictions if p[1].label == cls), key=lambda p: -p[1].score)
    used = {v: [False] * len(segs) for v, segs in gts.items()}
    tp = fp = 0
    total = 0.0
    for vid, seg in preds:
        cands = gts.get(vid, [])
        best_j, best_iou = -1, -1.0
        for j, g in enumerate(cands):
            if used[vid][j]:
                continue
            iou = temporal_iou((seg.start, seg.end), g)
            if iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0 and best_iou >= iou_threshold:
            used[vid][best_j] = True
            if counted is not None and not counted(cands[best_j]):
                continue
            tp += 1
            total += tp / (tp + fp)
        else:
            fp += 1
    return total / n_gt


def _pairs(detections, video_order):
    return [(v, s) for v in video_order for s in sorted(detections.get(v, []), key=rank_key)]


def map_table(detections, gt, iou_thresholds, num_classes, counted=None):
    """(thresholds x classes) AP table and the per-threshold mAP over classes with GT."""
    order = list(gt)
    pairs = _pairs(detections, order)
    ap = np.full((len(iou_thresholds), num_classes), np.nan)
    for i, th in enumerate(iou_thresholds):
        for c in range(1, num_classes + 1):
            ap[i, c - 1] = average_precision(pairs, gt, c, th, counted)
    with np.errstate(all="ignore"):
        present = ~np.all(np.isnan(ap), axis=0)
        mAP = ap[:, present].mean(axis=1) if present.any() else np.zeros(len(iou_thresholds))
    return ap, mAP


@dataclass
class DetectionResult:
    detections: dict
    iou_thresholds: list
    ap: np.ndarray
    mAP: np.ndarray
    average_mAP: float
    bucket_mAP: dict = field(default_factory=dict)

    def to_dict(self):
        def clean(x):
            return None if isinstance(x, float) and math.isnan(x) else x
        return {
            "iou_thresholds": list(self.iou_thresholds),
            "mAP": [float(m) for m in self.mAP],
            "average_mAP": float(self.average_mAP),
            "bucket_mAP": {k: clean(float(v)) for k, v in self.bucket_mAP.items()},
            "ap": [[clean(float(a)) for a in row] for row in self.ap],
        }

    def write(self, out_dir, stem="results", dump_detections=False):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=1))
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            names = list(self.bucket_mAP)
            w.writerow(["iou", "mAP"] + [f"bucket_{n}" for n in names])
            for th, m in zip(self.iou_thresholds, self.mAP):
                w.writerow([th, m] + [self.bucket_mAP[n] for n in names])
            w.writerow(["avg", self.average_mAP] + [self.bucket_mAP[n] for n in names])
        if dump_detections:
            det = {v: [[s.start, s.end, s.label, s.score] for s in segs]
                   for v, segs in self.detections.items()}
            (out_dir / f"{stem}_detections.json").write_text(json.dumps(det))


def compute_metrics(detections, gt, num_classes, eval_cfg: EvalConfig, snippet_duration=0.64):
    th = list(eval_cfg.iou_thresholds)
    ap, mAP = map_table(detections, gt, th, num_classes)
    buckets = {}
    for name, lo, hi in eval_cfg.buckets:
        def counted(g, lo=lo, hi=hi):
            d = (g[1] - g[0]) * snippet_duration
            return lo < d <= hi
        if not any(counted(g) for segs in gt.values() for g in segs):
            buckets[name] = float("nan")
            continue
        _, bm = map_table(detections, gt, th, num_classes, counted)
        buckets[name] = float(np.mean(bm))
    return DetectionResult(detections, th, ap, mAP, float(np.mean(mAP)), buckets)


# ---------------------------------------------------------------- inference

def predicted_classes(p_fg, threshold):
    C = len(p_fg) - 1
    cls = [c + 1 for c in range(C) if p_fg[c] >= threshold]
    return cls or [int(np.argmax(p_fg[:C])) + 1]


class _Outputs:
    def __init__(self, P, A):
        self.P, self.A = P, A


def outputs_on_original(params, cfg, features, proposals, use_dss):
    """Forward pass whose P and A are mapped back onto the original snippets
    when DSS resampled the input. Returns ``(forward, outputs)``."""
    fw = forward(params, cfg, features, proposals, use_dss=use_dss)
    P, A = fw.outputs.P.data, fw.outputs.A.data
    if fw.plan is not None:
        P, A = fw.plan.back_to_original(P), fw.plan.back_to_original(A)
    return fw, _Outputs(P, A)


def proposals_from(params, cfg, features, prev, classes, eval_cfg):
    """Selected proposals on the original timeline; ``classes=None`` picks them
    from the video-level probabilities."""
    fw, out = outputs_on_original(params, cfg, features, prev, cfg.dss_for_proposals)
    if classes is None:
        p_fg, _ = video_probs(fw.outputs, cfg)
        classes = predicted_classes(p_fg.data, eval_cfg.class_threshold)
    segs = nms(extract_segments(out, classes, eval_cfg.attention_thresholds), eval_cfg.nms_iou)
    return generate_proposals(segs, classes, cfg.alpha, cfg.delta, features.shape[0])


def predict_video(model: TrainedModel, features, eval_cfg: EvalConfig, return_proposals=False):
    """Detections for one video (after NMS), in original snippet indices."""
    cfg = model.cfg
    proposals = None
    if model.refinements > 0:
        proposals = proposals_from(model.bootstrap, cfg, features, None, None, eval_cfg)
        for _ in range(model.refinements - 1):
            proposals = proposals_from(model.params, cfg, features, proposals, None, eval_cfg)
    fw, out = outputs_on_original(model.params, cfg, features, proposals, use_dss=True)
    p_fg, _ = video_probs(fw.outputs, cfg)
    classes = predicted_classes(p_fg.data, eval_cfg.class_threshold)
    segs = nms(extract_segments(out, classes, eval_cfg.attention_thresholds), eval_cfg.nms_iou)
    return (segs, proposals) if return_proposals else segs


def evaluate(model: TrainedModel, videos, eval_cfg: EvalConfig, snippet_duration=0.64):
    """Full inference over ``videos`` then the mAP tables."""
    gt = {}
    for v in videos:
        if v.gt_segments is None:
            raise ContractError(f"video {v.id!r} has no ground-truth segments")
        gt[v.id] = list(v.gt_segments)
    detections = {v.id: predict_video(model, v.features, eval_cfg) for v in videos}
    return compute_metrics(detections, gt, model.cfg.C, eval_cfg, snippet_duration)
