"""Evaluation metrics: PCK, threshold-averaged position accuracy, region
similarity J, boundary accuracy F, and flow endpoint error.

Two aggregation modes are supported and always recorded, because published
protocols differ: "all-points" pools every visible point before taking the
fraction, "per-video-mean" scores each video first and averages the video
scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

DELTA_THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)


@dataclass
class EvalReport:
    name: str
    value: float
    mode: str = "all-points"  # or "per-video-mean"
    unit: str = "fraction"  # or "px"
    per_video: dict[str, float] = field(default_factory=dict)


@dataclass
class VideoTracks:
    """Aligned predictions and ground truth for one video.

    pred/gt: (N, T, 2) positions, visible: (N, T) bool, scale: per-frame
    scale A (the PCK threshold is alpha * sqrt(A)); scalar scales broadcast.
    """

    pred: np.ndarray
    gt: np.ndarray
    visible: np.ndarray
    scale: np.ndarray | float = 1.0
    name: str = ""


def _check_video(video: VideoTracks) -> None:
    if video.pred.shape != video.gt.shape or video.pred.shape[:2] != video.visible.shape:
        raise ValueError("track arrays misaligned")


def _distances(video: VideoTracks) -> np.ndarray:
    return np.linalg.norm(video.pred.astype(np.float64) - video.gt.astype(np.float64), axis=-1)


def _aggregate(hits_per_video, vis_per_video, mode, names):
    per_video = {}
    for name, hits, vis in zip(names, hits_per_video, vis_per_video):
        per_video[name] = float(hits.sum() / vis.sum()) if vis.sum() else float("nan")
    if mode == "per-video-mean":
        vals = [v for v in per_video.values() if not np.isnan(v)]
        value = float(np.mean(vals))
    elif mode == "all-points":
        total_hits = sum(h.sum() for h in hits_per_video)
        total_vis = sum(v.sum() for v in vis_per_video)
        value = float(total_hits / total_vis)
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    return value, per_video


def pck(videos: list[VideoTracks], alpha: float, mode: str = "all-points") -> EvalReport:
    """Fraction of visible points within alpha * sqrt(A) of the ground truth."""
    hits, viss, names = [], [], []
    for i, video in enumerate(videos):
        _check_video(video)
        scale = np.broadcast_to(np.asarray(video.scale, dtype=np.float64), (video.pred.shape[1],))
        if (scale <= 0).any():
            raise ValueError("PCK scale A must be positive")
        thresh = alpha * np.sqrt(scale)[None, :]
        d = _distances(video)
        hits.append(((d <= thresh) & video.visible).astype(np.float64))
        viss.append(video.visible.astype(np.float64))
        names.append(video.name or f"video{i}")
    if sum(v.sum() for v in viss) == 0:
        raise ValueError("no visible points to score")
    value, per_video = _aggregate(hits, viss, mode, names)
    return EvalReport(f"pck@{alpha:g}", value, mode, "fraction", per_video)


def delta_avg(
    videos: list[VideoTracks],
    thresholds: tuple[float, ...] = DELTA_THRESHOLDS,
    mode: str = "all-points",
) -> EvalReport:
    """Mean over pixel thresholds of the visible-point accuracy."""
    if sum(int(v.visible.sum()) for v in videos) == 0:
        raise ValueError("no visible points to score")
    per_thresh = []
    for thr in thresholds:
        hits, viss, names = [], [], []
        for i, video in enumerate(videos):
            _check_video(video)
            d = _distances(video)
            hits.append(((d <= thr) & video.visible).astype(np.float64))
            viss.append(video.visible.astype(np.float64))
            names.append(video.name or f"video{i}")
        per_thresh.append(_aggregate(hits, viss, mode, names))
    value = float(np.mean([v for v, _ in per_thresh]))
    per_video = {
        name: float(np.mean([pt[1][name] for pt in per_thresh]))
        for name in per_thresh[0][1]
    }
    return EvalReport("delta_avg", value, mode, "fraction", per_video)


def _binary_iou(gt: np.ndarray, pred: np.ndarray) -> float:
    gt = gt.astype(bool)
    pred = pred.astype(bool)
    union = np.logical_or(gt, pred).sum()
    if union == 0:
        return 1.0  # both empty
    return float(np.logical_and(gt, pred).sum() / union)


def _object_classes(gt_masks: np.ndarray) -> np.ndarray:
    classes = np.unique(gt_masks)
    return classes[classes > 0]


def jaccard(pred_masks: list[np.ndarray], gt_masks: list[np.ndarray]) -> EvalReport:
    """Mean IoU over objects and frames; empty-vs-empty counts as 1.0."""
    per_video = {}
    scores = []
    for i, (pred, gt) in enumerate(zip(pred_masks, gt_masks)):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError("mask shapes differ")
        vals = []
        for cls in _object_classes(gt) if _object_classes(gt).size else np.array([1]):
            for t in range(gt.shape[0]):
                vals.append(_binary_iou(gt[t] == cls, pred[t] == cls))
        per_video[f"video{i}"] = float(np.mean(vals))
        scores.extend(vals)
    return EvalReport("jaccard", float(np.mean(scores)), "per-video-mean", "fraction", per_video)


def _boundary(mask: np.ndarray) -> np.ndarray:
    mask = mask.astype(bool)
    eroded = ndimage.binary_erosion(mask, structure=np.ones((3, 3)), border_value=0)
    return mask & ~eroded


def _disk(radius: int) -> np.ndarray:
    if radius < 1:
        return np.ones((1, 1), dtype=bool)
    ys, xs = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return ys * ys + xs * xs <= radius * radius


def _boundary_f_single(pred: np.ndarray, gt: np.ndarray, tolerance: int) -> float:
    pb = _boundary(pred)
    gb = _boundary(gt)
    if pb.sum() == 0 and gb.sum() == 0:
        return 1.0
    if pb.sum() == 0 or gb.sum() == 0:
        return 0.0
    disk = _disk(tolerance)
    gb_dil = ndimage.binary_dilation(gb, structure=disk)
    pb_dil = ndimage.binary_dilation(pb, structure=disk)
    precision = (pb & gb_dil).sum() / pb.sum()
    recall = (gb & pb_dil).sum() / gb.sum()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def boundary_f(
    pred_masks: list[np.ndarray], gt_masks: list[np.ndarray], tolerance: int = 2
) -> EvalReport:
    """Boundary F-measure with dilation-based matching within `tolerance` px."""
    per_video = {}
    scores = []
    for i, (pred, gt) in enumerate(zip(pred_masks, gt_masks)):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError("mask shapes differ")
        vals = []
        for cls in _object_classes(gt) if _object_classes(gt).size else np.array([1]):
            for t in range(gt.shape[0]):
                vals.append(_boundary_f_single(pred[t] == cls, gt[t] == cls, tolerance))
        per_video[f"video{i}"] = float(np.mean(vals))
        scores.extend(vals)
    return EvalReport("boundary_f", float(np.mean(scores)), "per-video-mean", "fraction", per_video)


def epe(pred_flow: np.ndarray, gt_flow: np.ndarray, valid_mask: np.ndarray) -> float:
    """Mean Euclidean endpoint error over valid pixels."""
    pred = np.asarray(pred_flow, dtype=np.float64)
    gt = np.asarray(gt_flow, dtype=np.float64)
    valid = np.asarray(valid_mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape[:2] != valid.shape:
        raise ValueError("flow/mask shapes differ")
    if not valid.any():
        raise ValueError("empty validity mask")
    err = np.linalg.norm(pred - gt, axis=-1)
    return float(err[valid].mean())


def write_report_table(path: str, reports: list[EvalReport]) -> None:
    """Tab-delimited table, one metric per line."""
    lines = ["metric\tvalue\tmode\tunit"]
    for rep in reports:
        lines.append(f"{rep.name}\t{rep.value:.6f}\t{rep.mode}\t{rep.unit}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_report_kv(path: str, reports: list[EvalReport]) -> None:
    """Machine-readable key=value summary (per-video entries included)."""
    lines = []
    for rep in reports:
        key = rep.name.replace(" ", "_")
        lines.append(f"{key}={rep.value:.6f}")
        lines.append(f"{key}.mode={rep.mode}")
        for video, val in rep.per_video.items():
            lines.append(f"{key}.{video}={val:.6f}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
