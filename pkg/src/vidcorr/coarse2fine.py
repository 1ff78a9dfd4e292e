"""Coarse-to-fine probabilistic mapping: attention-enhanced coarse
features, coarse local correlation, and a learned 1x1-conv + pixel-shuffle
up-sampler whose output is renormalized into a valid fine probability map.
The student is trained by KL distillation against the fine-grained teacher.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correspondence import MappingConfig, ProbMap, local_correlation, window_validity
from .encoder import EncoderArch, EncoderParams, FeatureMap, arch_for_stride, encode, init_params
from .encoder import from_named_tensors as encoder_from_named
from .encoder import to_named_tensors as encoder_to_named
from .numerics import Tensor, ops
from .numerics.tensorfile import load_checkpoint, save_checkpoint


@dataclass
class AttentionParams:
    """Single-head self + cross attention weights, shared by both maps."""

    self_q: Tensor
    self_k: Tensor
    self_v: Tensor
    self_o: Tensor
    cross_q: Tensor
    cross_k: Tensor
    cross_v: Tensor
    cross_o: Tensor
    pe_base: float = 10000.0

    def parameters(self) -> list[Tensor]:
        return [
            self.self_q,
            self.self_k,
            self.self_v,
            self.self_o,
            self.cross_q,
            self.cross_k,
            self.cross_v,
            self.cross_o,
        ]


def init_attention(seed: int, channels: int, requires_grad: bool = True) -> AttentionParams:
    """Projections are fan-in uniform; output projections start at zero so
    the block is the identity at initialization."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    bound = 1.0 / np.sqrt(channels)

    def proj():
        return Tensor(rng.uniform(-bound, bound, size=(channels, channels)).astype(np.float32), requires_grad)

    def zero():
        return Tensor(np.zeros((channels, channels), dtype=np.float32), requires_grad)

    return AttentionParams(proj(), proj(), proj(), zero(), proj(), proj(), proj(), zero())


def sinusoidal_pe(height: int, width: int, channels: int, base: float = 10000.0) -> np.ndarray:
    """2-D sinusoidal positional encoding, (H*W, C); first half encodes the
    row coordinate, second half the column."""
    half = channels // 2

    def encode_axis(positions: np.ndarray, dims: int) -> np.ndarray:
        pairs = max(dims // 2, 1)
        freqs = base ** (-np.arange(pairs) / pairs)
        args = positions[:, None] * freqs[None, :]
        enc = np.zeros((positions.size, dims), dtype=np.float32)
        enc[:, 0 : 2 * pairs : 2] = np.sin(args)[:, :pairs]
        enc[:, 1 : 2 * pairs : 2] = np.cos(args)[:, :pairs]
        return enc

    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    ey = encode_axis(ys.reshape(-1).astype(np.float64), half)
    ex = encode_axis(xs.reshape(-1).astype(np.float64), channels - half)
    return np.concatenate([ey, ex], axis=1).astype(np.float32)


def attend(q: Tensor, k: Tensor, v: Tensor, scale: float) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; returns (values, weights)."""
    logits = ops.scale(ops.matmul(q, ops.transpose(k, (1, 0))), scale)
    attn = ops.softmax(logits, axis=-1)
    return ops.matmul(attn, v), attn


def enhance(
    feat1: FeatureMap, feat2: FeatureMap, params: AttentionParams
) -> tuple[FeatureMap, FeatureMap]:
    """Self-attention within each map, then cross-attention between them,
    both residual, with positional encoding added to queries and keys."""
    if feat1.values.shape != feat2.values.shape:
        raise ValueError("coarse feature extents differ")
    h, w, c = feat1.values.shape
    pe = Tensor(sinusoidal_pe(h, w, c, params.pe_base))
    scale = 1.0 / np.sqrt(c)

    def self_block(x: Tensor) -> Tensor:
        xp = ops.add(x, pe)
        q = ops.matmul(xp, params.self_q)
        k = ops.matmul(xp, params.self_k)
        v = ops.matmul(x, params.self_v)
        out, _ = attend(q, k, v, scale)
        return ops.add(x, ops.matmul(out, params.self_o))

    def cross_block(x: Tensor, other: Tensor) -> Tensor:
        q = ops.matmul(ops.add(x, pe), params.cross_q)
        k = ops.matmul(ops.add(other, pe), params.cross_k)
        v = ops.matmul(other, params.cross_v)
        out, _ = attend(q, k, v, scale)
        return ops.add(x, ops.matmul(out, params.cross_o))

    x1 = ops.reshape(feat1.values, (h * w, c))
    x2 = ops.reshape(feat2.values, (h * w, c))
    s1 = self_block(x1)
    s2 = self_block(x2)
    o1 = cross_block(s1, s2)
    o2 = cross_block(s2, s1)
    out1 = FeatureMap(ops.reshape(o1, (h, w, c)), feat1.stride)
    out2 = FeatureMap(ops.reshape(o2, (h, w, c)), feat2.stride)
    return out1, out2


def coarse_map(feat1: FeatureMap, feat2: FeatureMap, cfg: MappingConfig) -> ProbMap:
    """Local correlation at the coarse radius (identical contract)."""
    return local_correlation(feat1, feat2, cfg)


@dataclass
class UpsamplerParams:
    weight: Tensor  # ((2*r_coarse+1)^2, u^2 * (2*r_fine+1)^2)
    bias: Tensor
    factor: int
    r_coarse: int
    r_fine: int

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def _check_coverage(r_coarse: int, r_fine: int, factor: int) -> None:
    if factor * r_coarse < r_fine:
        raise ValueError(
            f"coarse window does not cover the fine window: u*r_coarse = "
            f"{factor * r_coarse} < r_fine = {r_fine}"
        )


def init_upsampler(
    seed: int, r_coarse: int, r_fine: int, factor: int, requires_grad: bool = True
) -> UpsamplerParams:
    _check_coverage(r_coarse, r_fine, factor)
    cin = (2 * r_coarse + 1) ** 2
    cout = factor * factor * (2 * r_fine + 1) ** 2
    rng = np.random.default_rng(np.random.PCG64(seed))
    bound = 1.0 / np.sqrt(cin)
    w = rng.uniform(-bound, bound, size=(cin, cout)).astype(np.float32)
    b = rng.uniform(-bound, bound, size=(cout,)).astype(np.float32)
    return UpsamplerParams(Tensor(w, requires_grad), Tensor(b, requires_grad), factor, r_coarse, r_fine)


def identity_upsampler(
    r_coarse: int, r_fine: int, factor: int, alpha: float = 30.0, beta: float = 1.0
) -> UpsamplerParams:
    """Initializer that copies each fine offset's nearest coarse logit, with
    a small bonus at exact multiples so argmax_flow(upsampled) equals
    factor * argmax_flow(coarse), nearest-filled over each u x u block."""
    _check_coverage(r_coarse, r_fine, factor)
    side_c = 2 * r_coarse + 1
    side_f = 2 * r_fine + 1
    cin = side_c * side_c
    nf = side_f * side_f
    cout = factor * factor * nf
    w = np.zeros((cin, cout), dtype=np.float32)
    for fu in range(-r_fine, r_fine + 1):
        for fv in range(-r_fine, r_fine + 1):
            cu = int(np.clip(np.rint(fu / factor), -r_coarse, r_coarse))
            cv = int(np.clip(np.rint(fv / factor), -r_coarse, r_coarse))
            cidx = (cu + r_coarse) * side_c + (cv + r_coarse)
            fidx = (fu + r_fine) * side_f + (fv + r_fine)
            for sub in range(factor * factor):
                w[cidx, sub * nf + fidx] = alpha
            if fu % factor == 0 and fv % factor == 0:
                eidx = (fu // factor + r_coarse) * side_c + (fv // factor + r_coarse)
                for sub in range(factor * factor):
                    w[eidx, sub * nf + fidx] += beta
    bias = np.zeros((cout,), dtype=np.float32)
    return UpsamplerParams(Tensor(w), Tensor(bias), factor, r_coarse, r_fine)


def upsample_map(coarse: ProbMap, params: UpsamplerParams) -> ProbMap:
    """1x1 conv, pixel-shuffle by u, then per-pixel renormalization over the
    valid fine window, yielding a well-formed fine-resolution map."""
    if coarse.r != params.r_coarse:
        raise ValueError("coarse map radius does not match the up-sampler")
    cin = coarse.window
    if params.weight.shape[0] != cin:
        raise ValueError("up-sampler channel mismatch")
    hc, wc = coarse.height, coarse.width
    u = params.factor
    nf = (2 * params.r_fine + 1) ** 2
    flat = ops.reshape(coarse.probs, (hc * wc, cin))
    mixed = ops.add(ops.matmul(flat, params.weight), params.bias)
    grid = ops.reshape(mixed, (hc, wc, u * u * nf))
    shuffled = ops.pixel_shuffle(grid, u)
    valid = window_validity(hc * u, wc * u, params.r_fine)
    probs = ops.masked_softmax(shuffled, valid)
    return ProbMap(probs, params.r_fine, valid)


def distill_loss(student: ProbMap, teacher: ProbMap) -> Tensor:
    """KL(teacher || student) averaged over all pixels; the teacher map is
    treated as the label and must come from a frozen forward pass."""
    from .losses import LabelDist, kl_supervision_loss

    if (student.height, student.width, student.r) != (teacher.height, teacher.width, teacher.r):
        raise ValueError("student/teacher extents differ")
    label = LabelDist(
        teacher.probs.data,
        np.ones((teacher.height, teacher.width), dtype=bool),
        teacher.r,
    )
    return kl_supervision_loss(student, label)


@dataclass
class StudentParams:
    encoder: EncoderParams
    attention: AttentionParams
    upsampler: UpsamplerParams

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.attention.parameters() + self.upsampler.parameters()


def init_student(
    seed: int,
    coarse_stride: int = 8,
    channels: tuple[int, ...] = (16, 32, 32, 32),
    r_coarse: int = 3,
    r_fine: int = 6,
    factor: int = 4,
) -> StudentParams:
    enc = init_params(seed, arch_for_stride(coarse_stride, channels))
    attn = init_attention(seed + 1, channels[-1])
    up = init_upsampler(seed + 2, r_coarse, r_fine, factor)
    return StudentParams(enc, attn, up)


def student_forward(
    student: StudentParams, frame1, frame2, tau: float = 1.0
) -> ProbMap:
    """Full coarse-to-fine pass from raw frames to a fine probability map."""
    f1 = encode(student.encoder, frame1)
    f2 = encode(student.encoder, frame2)
    e1, e2 = enhance(f1, f2, student.attention)
    pc = coarse_map(e1, e2, MappingConfig(r=student.upsampler.r_coarse, tau=tau))
    return upsample_map(pc, student.upsampler)


def save_student(path: str, student: StudentParams) -> None:
    tensors, meta = encoder_to_named(student.encoder, prefix="cenc")
    attn = student.attention
    for name, t in [
        ("attn.self_q", attn.self_q),
        ("attn.self_k", attn.self_k),
        ("attn.self_v", attn.self_v),
        ("attn.self_o", attn.self_o),
        ("attn.cross_q", attn.cross_q),
        ("attn.cross_k", attn.cross_k),
        ("attn.cross_v", attn.cross_v),
        ("attn.cross_o", attn.cross_o),
    ]:
        tensors[name] = t.data
    tensors["up.weight"] = student.upsampler.weight.data
    tensors["up.bias"] = student.upsampler.bias.data
    meta["up.factor"] = str(student.upsampler.factor)
    meta["up.r_coarse"] = str(student.upsampler.r_coarse)
    meta["up.r_fine"] = str(student.upsampler.r_fine)
    meta["attn.pe_base"] = repr(attn.pe_base)
    save_checkpoint(path, tensors, meta)


def load_student(path: str, requires_grad: bool = False) -> StudentParams:
    tensors, meta = load_checkpoint(path)
    enc = encoder_from_named(tensors, meta, prefix="cenc", requires_grad=requires_grad)
    attn = AttentionParams(
        *[
            Tensor(tensors[f"attn.{k}"], requires_grad)
            for k in ("self_q", "self_k", "self_v", "self_o", "cross_q", "cross_k", "cross_v", "cross_o")
        ],
        pe_base=float(meta.get("attn.pe_base", "10000.0")),
    )
    up = UpsamplerParams(
        Tensor(tensors["up.weight"], requires_grad),
        Tensor(tensors["up.bias"], requires_grad),
        int(meta["up.factor"]),
        int(meta["up.r_coarse"]),
        int(meta["up.r_fine"]),
    )
    return StudentParams(enc, attn, up)
