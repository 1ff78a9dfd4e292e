"""Training objectives: KL supervision (dirac / gaussian / soft labels),
occlusion-masked reconstruction, the adversarial domain loss behind a
gradient-reversal layer, and their equal-weight total.

Label distributions are plain arrays (no gradients flow into them); the
probability maps they supervise are taped tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correspondence import MappingConfig, FlowField, ProbMap, window_offsets, window_validity
from .encoder import EncoderParams, encode
from .numerics import Tensor, emit, ops


@dataclass
class LabelDist:
    """Supervision distribution over the correlation window.

    probs rows of invalid pixels are all-zero; `valid` marks pixels whose
    supervision is usable (in local range, inside the image, not occluded).
    """

    probs: np.ndarray
    valid: np.ndarray
    r: int

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]


@dataclass
class DiscriminatorParams:
    layers: list  # ConvLayer-compatible (weight, bias, stride)

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out


@dataclass
class LossReport:
    kl: float = 0.0
    rec: float = 0.0
    adv: float = 0.0
    kl_pixels: int = 0
    rec_pixels: int = 0

    @property
    def total(self) -> float:
        return self.kl + self.rec + self.adv


def _base_validity(flow: np.ndarray, r: int, occluded: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Shared filtering: in local range, rounded target inside the image,
    and not occluded according to the ground-truth covered map."""
    h, w, _ = flow.shape
    target = np.rint(flow).astype(np.int64)
    in_range = (np.abs(flow[:, :, 0]) <= r) & (np.abs(flow[:, :, 1]) <= r)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    jy = ys + target[:, :, 0]
    jx = xs + target[:, :, 1]
    in_image = (jy >= 0) & (jy < h) & (jx >= 0) & (jx < w)
    valid = in_range & in_image
    if occluded is not None:
        valid &= ~occluded.astype(bool)
    return valid, target


def dirac_label(flow: FlowField, cfg: MappingConfig, occluded: np.ndarray | None = None) -> LabelDist:
    """One-hot label at the window offset nearest the ground-truth motion.

    Rounding is nearest-integer (half to even). Pixels whose motion leaves
    the local range or the image, or that are occluded, are marked invalid.
    """
    vec = flow.vectors
    h, w, _ = vec.shape
    r = cfg.r
    side = 2 * r + 1
    valid, target = _base_validity(vec, r, occluded)
    du = np.clip(target[:, :, 0], -r, r)
    dv = np.clip(target[:, :, 1], -r, r)
    chan = (du + r) * side + (dv + r)
    probs = np.zeros((h, w, side * side), dtype=np.float32)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sel = valid
    probs[ys[sel], xs[sel], chan[sel]] = 1.0
    return LabelDist(probs, valid, r)


def gaussian_label(
    flow: FlowField,
    sigma: tuple[float, float],
    cfg: MappingConfig,
    occluded: np.ndarray | None = None,
) -> LabelDist:
    """Separable gaussian centred on the ground-truth target, renormalized
    over the in-image window offsets (computed in log space so tiny sigmas
    degrade gracefully toward the dirac label)."""
    su, sv = float(sigma[0]), float(sigma[1])
    if su <= 0 or sv <= 0:
        raise ValueError("gaussian label sigmas must be positive")
    vec = flow.vectors
    h, w, _ = vec.shape
    r = cfg.r
    valid, _ = _base_validity(vec, r, occluded)
    offs = window_offsets(r).astype(np.float32)
    in_image = window_validity(h, w, r)
    # log density at each offset, centred on the (possibly sub-pixel) flow
    dy = offs[None, None, :, 0] - vec[:, :, 0:1]
    dx = offs[None, None, :, 1] - vec[:, :, 1:2]
    loglik = -0.5 * (dy / su) ** 2 - 0.5 * (dx / sv) ** 2
    loglik = np.where(in_image, loglik, -np.inf)
    m = loglik.max(axis=-1, keepdims=True)
    e = np.exp(loglik - m)
    probs = (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)
    probs[~valid] = 0.0
    return LabelDist(probs, valid, r)


def soft_label(
    theta_self: EncoderParams,
    frame2: np.ndarray,
    flow: FlowField,
    cfg: MappingConfig,
    occluded: np.ndarray | None = None,
    bilinear: bool = False,
) -> LabelDist:
    """Self-similarity label: the frozen labeler's feature at the motion
    target j = i + G(i) is compared against the window around i in the same
    feature map, then softmax-normalized at temperature tau.

    The query feature is a nearest-grid sample of j by default; set
    ``bilinear=True`` for a four-neighbour blend when flows are sub-pixel.
    """
    fbar = encode(theta_self, frame2).values.data
    return soft_label_from_features(fbar, flow, cfg, occluded, bilinear)


def soft_label_from_features(
    fbar: np.ndarray,
    flow: FlowField,
    cfg: MappingConfig,
    occluded: np.ndarray | None = None,
    bilinear: bool = False,
) -> LabelDist:
    """soft_label on an already-computed labeler feature map."""
    h, w, _ = fbar.shape
    vec = flow.vectors
    if vec.shape[:2] != (h, w):
        raise ValueError("flow extents do not match the labeler feature grid")
    r = cfg.r
    valid, target = _base_validity(vec, r, occluded)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    if bilinear:
        jy = np.clip(ys + vec[:, :, 0], 0, h - 1)
        jx = np.clip(xs + vec[:, :, 1], 0, w - 1)
        y0 = np.floor(jy).astype(np.int64)
        x0 = np.floor(jx).astype(np.int64)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        fy = (jy - y0)[..., None].astype(np.float32)
        fx = (jx - x0)[..., None].astype(np.float32)
        fq = (
            fbar[y0, x0] * (1 - fy) * (1 - fx)
            + fbar[y0, x1] * (1 - fy) * fx
            + fbar[y1, x0] * fy * (1 - fx)
            + fbar[y1, x1] * fy * fx
        )
    else:
        jy = np.clip(ys + target[:, :, 0], 0, h - 1)
        jx = np.clip(xs + target[:, :, 1], 0, w - 1)
        fq = fbar[jy, jx]
    n = (2 * r + 1) ** 2
    in_image = window_validity(h, w, r)
    fbp = np.pad(fbar, ((r, r), (r, r), (0, 0)))
    logits = np.empty((h, w, n), dtype=np.float32)
    k = 0
    inv_tau = np.float32(1.0 / cfg.tau)
    for du in range(-r, r + 1):
        for dv in range(-r, r + 1):
            sl = fbp[r + du : r + du + h, r + dv : r + dv + w]
            logits[:, :, k] = np.einsum("yxc,yxc->yx", fq, sl) * inv_tau
            k += 1
    logits[~in_image] = -np.inf
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    probs = (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)
    probs[~valid] = 0.0
    return LabelDist(probs, valid, r)


def kl_supervision_loss(pmap: ProbMap, label: LabelDist) -> Tensor:
    """Mean over valid pixels of KL(label || predicted window distribution).

    0*log 0 is treated as 0; label mass only sits on offsets where the
    prediction is strictly positive (in-image), so log P is finite there.
    """
    if (pmap.height, pmap.width, pmap.r) != (label.height, label.width, label.r):
        raise ValueError("probability map and label shapes differ")
    n_valid = int(label.valid.sum())
    if n_valid == 0:
        raise ValueError("no valid supervision pixels")
    l = label.probs
    support = l > 0
    p = pmap.probs
    pdata = np.where(support, p.data, 1.0)
    ldata = np.where(support, l, 1.0)
    per = (ldata * (np.log(ldata) - np.log(pdata))).sum(dtype=np.float64)
    loss = np.float32(per / n_valid)
    coeff = np.where(support, -l, 0.0).astype(np.float32) / np.float32(n_valid)

    def bwd(g):
        return (g * coeff / np.maximum(p.data, 1e-30),)

    return emit(loss, (p,), bwd)


def reconstruct(pmap: ProbMap, image2) -> Tensor:
    """Weighted window sum: I_rec(i) = sum_k P(k|i) * I2(i + offset_k).

    image2 must already be at the probability-map resolution. Out-of-image
    offsets carry zero probability and therefore contribute nothing.
    """
    img = image2 if isinstance(image2, Tensor) else Tensor(image2)
    h, w = pmap.height, pmap.width
    if img.shape[0] != h or img.shape[1] != w:
        raise ValueError("image extents do not match the probability map")
    r = pmap.r
    p = pmap.probs
    ip = np.pad(img.data, ((r, r), (r, r), (0, 0)))
    out = np.zeros_like(img.data)
    k = 0
    for du in range(-r, r + 1):
        for dv in range(-r, r + 1):
            out += p.data[:, :, k, None] * ip[r + du : r + du + h, r + dv : r + dv + w]
            k += 1

    def bwd(g):
        dp = np.empty_like(p.data)
        dip = np.zeros_like(ip)
        k = 0
        for du in range(-r, r + 1):
            for dv in range(-r, r + 1):
                sl = ip[r + du : r + du + h, r + dv : r + dv + w]
                dp[:, :, k] = (g * sl).sum(axis=-1)
                dip[r + du : r + du + h, r + dv : r + dv + w] += p.data[:, :, k, None] * g
                k += 1
        return dp, dip[r : r + h, r : r + w].copy()

    return emit(out, (p, img), bwd)


def reconstruction_loss(i_rec: Tensor, i1, occ) -> Tensor:
    """L1 distance over cycle-consistent pixels, averaged per pixel-channel."""
    target = i1 if isinstance(i1, Tensor) else Tensor(i1)
    flags = occ.flags if hasattr(occ, "flags") else np.asarray(occ)
    if i_rec.shape != target.shape:
        raise ValueError("reconstruction extents differ")
    if flags.shape != i_rec.shape[:2]:
        raise ValueError("occlusion mask extents differ")
    count = int(flags.sum())
    if count == 0:
        raise ValueError("occlusion mask excludes every pixel")
    channels = i_rec.shape[2]
    mask = flags.astype(np.float32)[:, :, None]
    diff = (i_rec.data - target.data) * mask
    denom = np.float32(count * channels)
    loss = np.float32(np.abs(diff).sum(dtype=np.float64) / denom)

    def bwd(g):
        s = np.sign(diff) * (g / denom)
        return s.astype(np.float32), (-s).astype(np.float32)

    return emit(loss, (i_rec, target), bwd)


def init_discriminator(seed: int, in_channels: int, widths: tuple[int, ...] = (32, 32)) -> DiscriminatorParams:
    """Small strided conv net mapping window distributions to one logit."""
    from .encoder import ConvLayer  # shared layer container

    rng = np.random.default_rng(np.random.PCG64(seed))
    layers = []
    cin = in_channels
    for cout in tuple(widths) + (1,):
        bound = 1.0 / np.sqrt(9 * cin)
        w = rng.uniform(-bound, bound, size=(3, 3, cin, cout)).astype(np.float32)
        b = rng.uniform(-bound, bound, size=(cout,)).astype(np.float32)
        layers.append(ConvLayer(Tensor(w, True), Tensor(b, True), 2))
        cin = cout
    return DiscriminatorParams(layers)


def discriminator_prob(disc: DiscriminatorParams, probs: Tensor) -> Tensor:
    """D(P) in (0, 1): strided convs, global mean pool, sigmoid."""
    x = probs
    last = len(disc.layers) - 1
    for i, layer in enumerate(disc.layers):
        x = ops.conv2d(x, layer.weight, layer.bias, stride=layer.stride, padding=1)
        if i < last:
            x = ops.relu(x)
    pooled = ops.tmean(x)
    return ops.clamp(ops.sigmoid(pooled), 1e-6, 1.0 - 1e-6)


def adversarial_losses(
    disc: DiscriminatorParams,
    p_synthetic: ProbMap,
    p_real: ProbMap,
    lam: float,
) -> tuple[float, Tensor]:
    """Domain loss -[log D(P_real) + log(1 - D(P_synthetic))].

    The returned tensor routes both maps through grad-reverse(lam), so a
    single backward pass trains the discriminator normally while pushing
    the encoder toward domain confusion. The float is the same value for
    reporting.
    """
    if lam < 0:
        raise ValueError("grad-reverse strength lam must be >= 0")
    d_real = discriminator_prob(disc, ops.grad_reverse(p_real.probs, lam))
    d_syn = discriminator_prob(disc, ops.grad_reverse(p_synthetic.probs, lam))
    one_minus = ops.add(ops.scale(d_syn, -1.0), Tensor(1.0))
    path = ops.scale(ops.add(ops.log(d_real), ops.log(one_minus)), -1.0)
    return float(path.data), path


def total_loss(terms: list[Tensor]) -> Tensor:
    """Unweighted sum of the enabled objective terms."""
    if not terms:
        raise ValueError("total_loss needs at least one term")
    acc = terms[0]
    for t in terms[1:]:
        acc = ops.add(acc, t)
    return acc
