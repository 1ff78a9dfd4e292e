"""Local-correlation probabilistic mapping between feature maps.

For each query pixel i the map holds a discrete distribution over the
(2r+1)^2 window offsets (du, dv), du/dv in [-r, r], laid out row-major
(channel k = (du+r)*(2r+1) + (dv+r); du indexes rows/axis 0). Offsets
whose key i+(du,dv) falls outside the image carry probability exactly 0;
the remaining entries are a softmax of feature dot products at
temperature tau.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import FeatureMap
from .numerics import Tensor, emit
from .numerics.tensorfile import save_tensor


@dataclass
class MappingConfig:
    r: int = 6
    tau: float = 1.0

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("window radius r must be >= 1")
        if self.tau <= 0:
            raise ValueError("temperature tau must be > 0")

    @property
    def window(self) -> int:
        return (2 * self.r + 1) ** 2


def window_offsets(r: int) -> np.ndarray:
    """(n, 2) int array of (du, dv) offsets in row-major window order."""
    side = 2 * r + 1
    du, dv = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    return np.stack([du.reshape(side * side), dv.reshape(side * side)], axis=1)


_VALID_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def window_validity(height: int, width: int, r: int) -> np.ndarray:
    """(H, W, n) bool mask: True where key i+(du,dv) lies inside the image."""
    key = (height, width, r)
    cached = _VALID_CACHE.get(key)
    if cached is not None:
        return cached
    offs = window_offsets(r)
    ys = np.arange(height)[:, None, None]
    xs = np.arange(width)[None, :, None]
    ky = ys + offs[None, None, :, 0]
    kx = xs + offs[None, None, :, 1]
    valid = (ky >= 0) & (ky < height) & (kx >= 0) & (kx < width)
    _VALID_CACHE[key] = valid
    return valid


@dataclass
class ProbMap:
    """Per-pixel window distribution; probs has shape (H, W, (2r+1)^2)."""

    probs: Tensor
    r: int
    valid: np.ndarray

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    @property
    def window(self) -> int:
        return self.probs.shape[2]


@dataclass
class FlowField:
    """Per-pixel displacement (du, dv) in feature-grid pixels; (H, W, 2)."""

    vectors: np.ndarray

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


@dataclass
class OcclusionMask:
    """1 = forward-backward cycle-consistent (kept in losses), 0 = occluded."""

    flags: np.ndarray


def correlation_probs(f1: np.ndarray, f2: np.ndarray, r: int, tau: float) -> np.ndarray:
    """Plain-array forward pass shared by the taped op and inference."""
    h, w, _ = f1.shape
    n = (2 * r + 1) ** 2
    valid = window_validity(h, w, r)
    f2p = np.pad(f2, ((r, r), (r, r), (0, 0)))
    logits = np.empty((h, w, n), dtype=np.float32)
    k = 0
    inv_tau = np.float32(1.0 / tau)
    for du in range(-r, r + 1):
        for dv in range(-r, r + 1):
            sl = f2p[r + du : r + du + h, r + dv : r + dv + w]
            logits[:, :, k] = np.einsum("yxc,yxc->yx", f1, sl) * inv_tau
            k += 1
    logits[~valid] = -np.inf
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def local_correlation(feat1: FeatureMap, feat2: FeatureMap, cfg: MappingConfig) -> ProbMap:
    """Probabilistic mapping from feat1 queries to feat2 keys (fused primitive)."""
    if feat1.values.shape != feat2.values.shape:
        raise ValueError(
            f"feature extents differ: {feat1.values.shape} vs {feat2.values.shape}"
        )
    f1t, f2t = feat1.values, feat2.values
    h, w, _ = f1t.shape
    r = cfg.r
    valid = window_validity(h, w, r)
    probs = correlation_probs(f1t.data, f2t.data, r, cfg.tau)
    inv_tau = np.float32(1.0 / cfg.tau)

    def bwd(g):
        # softmax backward; invalid offsets have p=0 so their dlogits vanish
        dot = (g * probs).sum(axis=-1, keepdims=True)
        dlogits = probs * (g - dot) * inv_tau
        f2p = np.pad(f2t.data, ((r, r), (r, r), (0, 0)))
        df1 = np.zeros_like(f1t.data)
        df2p = np.zeros_like(f2p)
        k = 0
        for du in range(-r, r + 1):
            for dv in range(-r, r + 1):
                dl = dlogits[:, :, k, None]
                df1 += dl * f2p[r + du : r + du + h, r + dv : r + dv + w]
                df2p[r + du : r + du + h, r + dv : r + dv + w] += dl * f1t.data
                k += 1
        return df1, df2p[r : r + h, r : r + w].copy()

    out = emit(probs, (f1t, f2t), bwd)
    return ProbMap(out, r, valid)


def argmax_flow(pmap: ProbMap) -> FlowField:
    """Offset of the per-pixel maximum; ties go to the smallest window index."""
    offs = window_offsets(pmap.r).astype(np.float32)
    idx = pmap.probs.data.argmax(axis=-1)
    return FlowField(offs[idx])


def soft_argmax_flow(pmap: ProbMap) -> FlowField:
    """Expected offset under each per-pixel distribution (sub-pixel)."""
    offs = window_offsets(pmap.r).astype(np.float32)
    vec = pmap.probs.data @ offs
    return FlowField(vec.astype(np.float32))


def occlusion_mask(p12: ProbMap, p21: ProbMap) -> OcclusionMask:
    """Forward-backward check: flag 1 iff argmax tracking returns to the pixel."""
    if (p12.height, p12.width) != (p21.height, p21.width):
        raise ValueError("probability maps cover different extents")
    h, w = p12.height, p12.width
    fwd = argmax_flow(p12).vectors.astype(np.int64)
    bwdf = argmax_flow(p21).vectors.astype(np.int64)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    jy = ys + fwd[:, :, 0]
    jx = xs + fwd[:, :, 1]
    # a well-formed map never tracks outside the image; treat it as a
    # violated cycle if a hand-built one does
    inside = (jy >= 0) & (jy < h) & (jx >= 0) & (jx < w)
    jyc = np.clip(jy, 0, h - 1)
    jxc = np.clip(jx, 0, w - 1)
    ky = jyc + bwdf[jyc, jxc, 0]
    kx = jxc + bwdf[jyc, jxc, 1]
    flags = (inside & (ky == ys) & (kx == xs)).astype(np.uint8)
    return OcclusionMask(flags)


def export_probmap(path: str, pmap: ProbMap) -> None:
    """CPXT tensor plus a text sidecar recording r and the channel layout."""
    save_tensor(path, pmap.probs.data)
    side = 2 * pmap.r + 1
    lines = [
        f"r\t{pmap.r}",
        f"window\t{side}x{side}",
        "channel_order\trow-major (du,dv); k = (du+r)*(2r+1) + (dv+r); du along axis 0",
    ]
    with open(path + ".meta", "w") as f:
        f.write("\n".join(lines) + "\n")
