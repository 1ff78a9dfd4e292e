"""Recurrent label propagation: point tracking and mask propagation.

Labels live on reference frames (first frame plus the previous m
predictions). For each target pixel we correlate against every reference,
keep the top-k window weights, renormalize, and transport the reference
labels; the per-reference results are averaged. Point positions are read
out by a local soft-argmax over the transported heatmap.

Coordinates are (u, v) = (row, column) in image pixels; feature-grid cell
(y, x) sits at image position ((y + 0.5) * s - 0.5, (x + 0.5) * s - 0.5)
for encoder stride s.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correspondence import (
    MappingConfig,
    correlation_probs,
    local_correlation,
    occlusion_mask,
    window_offsets,
)
from .encoder import EncoderParams, FeatureMap, encode


@dataclass
class TrackProtocol:
    memory: int = 1  # previous predictions kept as references
    topk: int = 10
    heat_sigma: float = 1.0  # feature px, initial query heatmaps
    readout_radius: int = 3  # local window for soft-argmax readout


@dataclass
class PointTrack:
    point_id: int
    positions: np.ndarray  # (T, 2) image px, (u, v) = (row, col)
    visible: np.ndarray  # (T,) bool


@dataclass
class LabelVolume:
    """Per-pixel label channels at feature resolution; (H, W, K)."""

    data: np.ndarray

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def image_to_feature(coords: np.ndarray, stride: int) -> np.ndarray:
    return (np.asarray(coords, dtype=np.float64) + 0.5) / stride - 0.5


def feature_to_image(coords: np.ndarray, stride: int) -> np.ndarray:
    return (np.asarray(coords, dtype=np.float64) + 0.5) * stride - 0.5


def propagate(
    refs: list[tuple[FeatureMap, LabelVolume]],
    feat_t: FeatureMap,
    cfg: MappingConfig,
    topk: int,
) -> LabelVolume:
    """Transport reference labels to the target frame.

    With topk equal to the full window this is exactly the weighted window
    sum of reference labels under the target->reference correlation.
    """
    if not refs:
        raise ValueError("propagate needs at least one reference")
    if topk < 1:
        raise ValueError("topk must be >= 1")
    h, w = feat_t.height, feat_t.width
    r = cfg.r
    n = (2 * r + 1) ** 2
    k_eff = min(topk, n)
    offs = window_offsets(r)
    acc = None
    for feat_ref, labels in refs:
        if (feat_ref.height, feat_ref.width) != (h, w):
            raise ValueError("reference and target extents differ")
        probs = correlation_probs(feat_t.values.data, feat_ref.values.data, r, cfg.tau)
        flat = probs.reshape(h * w, n)
        if k_eff < n:
            idx = np.argpartition(flat, n - k_eff, axis=1)[:, n - k_eff :]
        else:
            idx = np.broadcast_to(np.arange(n), (h * w, n)).copy()
        weights = np.take_along_axis(flat, idx, axis=1)
        weights = weights / weights.sum(axis=1, keepdims=True)
        lp = np.pad(labels.data, ((r, r), (r, r), (0, 0)))
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        base = ys.reshape(-1, 1), xs.reshape(-1, 1)
        ky = base[0] + offs[idx, 0] + r
        kx = base[1] + offs[idx, 1] + r
        gathered = lp[ky, kx]  # (HW, k_eff, K)
        out = (weights[:, :, None] * gathered).sum(axis=1).reshape(h, w, -1)
        acc = out if acc is None else acc + out
    return LabelVolume((acc / len(refs)).astype(np.float32))


def _query_heatmaps(queries_feat: np.ndarray, h: int, w: int, sigma: float) -> LabelVolume:
    ys = np.arange(h, dtype=np.float32)[:, None]
    xs = np.arange(w, dtype=np.float32)[None, :]
    maps = []
    for qy, qx in queries_feat:
        d2 = (ys - qy) ** 2 + (xs - qx) ** 2
        heat = np.exp(-d2 / (2.0 * sigma * sigma))
        maps.append(heat / max(heat.sum(), 1e-12))
    return LabelVolume(np.stack(maps, axis=-1).astype(np.float32))


def _readout(heat: np.ndarray, radius: int) -> tuple[float, float]:
    """Soft-argmax in a window around the peak; sub-pixel feature coords."""
    h, w = heat.shape
    peak = np.unravel_index(int(heat.argmax()), heat.shape)
    y0, y1 = max(0, peak[0] - radius), min(h, peak[0] + radius + 1)
    x0, x1 = max(0, peak[1] - radius), min(w, peak[1] + radius + 1)
    win = heat[y0:y1, x0:x1].astype(np.float64)
    total = win.sum()
    if total <= 0:
        return float(peak[0]), float(peak[1])
    ys = np.arange(y0, y1, dtype=np.float64)[:, None]
    xs = np.arange(x0, x1, dtype=np.float64)[None, :]
    return float((win * ys).sum() / total), float((win * xs).sum() / total)


def track_points(
    params: EncoderParams,
    clip: list[np.ndarray],
    queries: np.ndarray,
    cfg: MappingConfig,
    protocol: TrackProtocol | None = None,
) -> list[PointTrack]:
    """Propagate frame-0 query points through the clip.

    Visibility of frame t comes from the forward-backward check between
    frames t-1 and t evaluated at the previous position.
    """
    if not clip:
        raise ValueError("track_points needs a non-empty clip")
    protocol = protocol or TrackProtocol()
    stride = params.stride
    feats = [encode(params, frame) for frame in clip]
    h, w = feats[0].height, feats[0].width
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    q_feat = image_to_feature(queries, stride)
    labels0 = _query_heatmaps(q_feat, h, w, protocol.heat_sigma)

    num = len(queries)
    tcount = len(clip)
    positions = np.zeros((tcount, num, 2), dtype=np.float64)
    visible = np.ones((tcount, num), dtype=bool)
    positions[0] = queries
    history: list[tuple[FeatureMap, LabelVolume]] = []
    prev_labels = labels0
    prev_pos_feat = q_feat.copy()
    for t in range(1, tcount):
        refs = [(feats[0], labels0)] + history[-protocol.memory :]
        transported = propagate(refs, feats[t], cfg, protocol.topk)
        occ = occlusion_mask(
            local_correlation(feats[t - 1], feats[t], cfg),
            local_correlation(feats[t], feats[t - 1], cfg),
        ).flags
        pos_feat = np.empty((num, 2), dtype=np.float64)
        for i in range(num):
            pos_feat[i] = _readout(transported.data[:, :, i], protocol.readout_radius)
            py = int(np.clip(np.rint(prev_pos_feat[i, 0]), 0, h - 1))
            px = int(np.clip(np.rint(prev_pos_feat[i, 1]), 0, w - 1))
            visible[t, i] = bool(occ[py, px])
        positions[t] = feature_to_image(pos_feat, stride)
        history.append((feats[t], transported))
        history = history[-protocol.memory :]
        prev_labels = transported
        prev_pos_feat = pos_feat
    return [
        PointTrack(i, positions[:, i].astype(np.float32), visible[:, i]) for i in range(num)
    ]


def propagate_mask(
    params: EncoderParams,
    clip: list[np.ndarray],
    mask0: np.ndarray,
    cfg: MappingConfig,
    protocol: TrackProtocol | None = None,
    num_classes: int | None = None,
) -> list[np.ndarray]:
    """Propagate a first-frame class mask; returns per-frame masks at image
    resolution (nearest-neighbour upsampling of the feature-grid argmax)."""
    if not clip:
        raise ValueError("propagate_mask needs a non-empty clip")
    protocol = protocol or TrackProtocol()
    stride = params.stride
    mask0 = np.asarray(mask0)
    classes = num_classes if num_classes is not None else int(mask0.max()) + 1
    if int(mask0.max()) + 1 > classes:
        raise ValueError("mask contains more classes than declared")
    feats = [encode(params, frame) for frame in clip]
    h, w = feats[0].height, feats[0].width
    off = stride // 2
    small = mask0[off::stride, off::stride][:h, :w]
    onehot = np.zeros((h, w, classes), dtype=np.float32)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    onehot[ys, xs, small] = 1.0
    labels0 = LabelVolume(onehot)

    out = [mask0.astype(np.int32)]
    history: list[tuple[FeatureMap, LabelVolume]] = []
    for t in range(1, len(clip)):
        refs = [(feats[0], labels0)] + history[-protocol.memory :]
        transported = propagate(refs, feats[t], cfg, protocol.topk)
        hard = transported.data.argmax(axis=-1).astype(np.int32)
        up = np.repeat(np.repeat(hard, stride, axis=0), stride, axis=1)
        out.append(up[: mask0.shape[0], : mask0.shape[1]])
        history.append((feats[t], transported))
        history = history[-protocol.memory :]
    return out


def write_tracks(path: str, tracks: list[PointTrack]) -> None:
    """Text lines: frame,point_id,u,v,visible."""
    lines = []
    for track in tracks:
        for t in range(track.positions.shape[0]):
            u, v = track.positions[t]
            lines.append(f"{t},{track.point_id},{u:.3f},{v:.3f},{int(track.visible[t])}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_tracks(path: str) -> list[PointTrack]:
    rows: dict[int, list[tuple[int, float, float, bool]]] = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            frame, pid, u, v, vis = line.split(",")
            rows.setdefault(int(pid), []).append((int(frame), float(u), float(v), vis == "1"))
    tracks = []
    for pid in sorted(rows):
        entries = sorted(rows[pid])
        pos = np.array([[u, v] for _, u, v, _ in entries], dtype=np.float32)
        vis = np.array([v for _, _, _, v in entries], dtype=bool)
        tracks.append(PointTrack(pid, pos, vis))
    return tracks
