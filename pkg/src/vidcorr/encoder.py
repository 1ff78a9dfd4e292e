"""Convolutional feature extractor producing dense per-pixel embeddings.

The desk-scale trunk is four 3x3 conv layers with ReLU in between; the
overall stride is the product of per-layer strides. Output pixel vectors
are L2-normalized by default so dot-product correlation behaves like
cosine similarity (disable with ``normalize=False``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor, ops
from .numerics.tensorfile import load_checkpoint, save_checkpoint

_STRIDE_PLANS = {1: (1, 1, 1, 1), 2: (2, 1, 1, 1), 4: (2, 2, 1, 1), 8: (2, 2, 2, 1)}


@dataclass
class EncoderArch:
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 32, 32)
    strides: tuple[int, ...] = (2, 1, 1, 1)
    kernel: int = 3
    normalize: bool = True

    @property
    def out_stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def out_channels(self) -> int:
        return self.channels[-1]


def arch_for_stride(stride: int, channels: tuple[int, ...] = (16, 32, 32, 32)) -> EncoderArch:
    if stride not in _STRIDE_PLANS:
        raise ValueError(f"stride must be one of {sorted(_STRIDE_PLANS)}, got {stride}")
    return EncoderArch(channels=channels, strides=_STRIDE_PLANS[stride])


@dataclass
class ConvLayer:
    weight: Tensor  # (kh, kw, cin, cout)
    bias: Tensor  # (cout,)
    stride: int


@dataclass
class EncoderParams:
    layers: list[ConvLayer]
    stride: int
    channels: int
    normalize: bool = True

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def freeze(self) -> "EncoderParams":
        """Copy with requires_grad=False everywhere (for the soft labeler)."""
        layers = [
            ConvLayer(Tensor(l.weight.data.copy()), Tensor(l.bias.data.copy()), l.stride)
            for l in self.layers
        ]
        return EncoderParams(layers, self.stride, self.channels, self.normalize)


@dataclass
class FeatureMap:
    """Dense per-pixel embeddings; values has shape (H, W, C)."""

    values: Tensor
    stride: int = 1

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def init_params(seed: int, arch: EncoderArch | None = None, requires_grad: bool = True) -> EncoderParams:
    """Fan-in-scaled uniform init, deterministic per seed."""
    arch = arch or EncoderArch()
    rng = np.random.default_rng(np.random.PCG64(seed))
    layers = []
    cin = arch.in_channels
    k = arch.kernel
    for cout, stride in zip(arch.channels, arch.strides):
        bound = 1.0 / np.sqrt(k * k * cin)
        w = rng.uniform(-bound, bound, size=(k, k, cin, cout)).astype(np.float32)
        b = rng.uniform(-bound, bound, size=(cout,)).astype(np.float32)
        layers.append(ConvLayer(Tensor(w, requires_grad), Tensor(b, requires_grad), stride))
        cin = cout
    return EncoderParams(layers, arch.out_stride, arch.out_channels, arch.normalize)


def encode(params: EncoderParams, frame) -> FeatureMap:
    """Run the conv trunk on an (h, w, 3) frame; h, w must divide the stride."""
    x = frame if isinstance(frame, Tensor) else Tensor(frame)
    h, w = x.shape[0], x.shape[1]
    if h % params.stride or w % params.stride:
        raise ValueError(f"frame extents {h}x{w} not divisible by stride {params.stride}")
    for i, layer in enumerate(params.layers):
        pad = layer.weight.shape[0] // 2
        x = ops.conv2d(x, layer.weight, layer.bias, stride=layer.stride, padding=pad)
        if i + 1 < len(params.layers):
            x = ops.relu(x)
    if params.normalize:
        x = ops.l2_normalize(x, axis=-1)
    return FeatureMap(x, stride=params.stride)


def to_named_tensors(params: EncoderParams, prefix: str = "enc") -> tuple[dict[str, np.ndarray], dict[str, str]]:
    tensors: dict[str, np.ndarray] = {}
    for i, layer in enumerate(params.layers):
        tensors[f"{prefix}.{i}.weight"] = layer.weight.data
        tensors[f"{prefix}.{i}.bias"] = layer.bias.data
    meta = {
        f"{prefix}.strides": ",".join(str(l.stride) for l in params.layers),
        f"{prefix}.normalize": "1" if params.normalize else "0",
    }
    return tensors, meta


def from_named_tensors(
    tensors: dict[str, np.ndarray],
    meta: dict[str, str],
    prefix: str = "enc",
    requires_grad: bool = False,
) -> EncoderParams:
    strides = [int(s) for s in meta[f"{prefix}.strides"].split(",")]
    normalize = meta.get(f"{prefix}.normalize", "1") == "1"
    layers = []
    for i, stride in enumerate(strides):
        w = tensors[f"{prefix}.{i}.weight"]
        b = tensors[f"{prefix}.{i}.bias"]
        layers.append(ConvLayer(Tensor(w, requires_grad), Tensor(b, requires_grad), stride))
    total = int(np.prod(strides))
    return EncoderParams(layers, total, layers[-1].weight.shape[3], normalize)


def save_encoder(path: str, params: EncoderParams) -> None:
    tensors, meta = to_named_tensors(params)
    save_checkpoint(path, tensors, meta)


def load_encoder(path: str, requires_grad: bool = False) -> EncoderParams:
    tensors, meta = load_checkpoint(path)
    return from_named_tensors(tensors, meta, requires_grad=requires_grad)
