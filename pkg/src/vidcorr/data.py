"""Procedural video pairs/clips with ground-truth flow, plus data plumbing:
Lab conversion, channel dropout, netpbm image IO, and the CPXF flow format.

Scenes are a textured background under layered textured sprites, each
rigidly translated between frames. The flow field is composited by layer
order; `covered` marks frame-1 pixels whose correspondent is hidden by a
higher layer or leaves the frame. The "real" stream uses the same scenes
with photometric jitter and withholds the labels, giving the adversarial
discriminator an actual distribution shift while keeping the pipeline
self-contained.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, replace

import numpy as np

from .correspondence import FlowField


@dataclass
class GeneratorConfig:
    size: int = 64
    sprite_count: tuple[int, int] = (2, 4)
    sprite_size: tuple[int, int] = (12, 26)
    max_disp: float = 8.0
    integer_disp: bool = True
    texture: str = "noise"  # "noise" | "gradient"
    texture_scale: int = 5
    frame_noise: float = 0.02
    brightness_jitter: float = 0.0
    background_moves: bool = True
    gap: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.max_disp > self.size / 4:
            raise ValueError("max_disp must be <= image size / 4")
        if self.texture not in ("noise", "gradient"):
            raise ValueError(f"unknown texture mode {self.texture!r}")


@dataclass
class VideoPair:
    frame1: np.ndarray
    frame2: np.ndarray
    domain: str  # "synthetic" | "real"
    gt_flow: FlowField | None = None
    covered: np.ndarray | None = None


@dataclass
class Clip:
    """Frames plus (for the synthetic domain) per-step flow and layer maps."""

    frames: list[np.ndarray]
    flows: list[FlowField] | None = None
    covered: list[np.ndarray] | None = None
    layers: list[np.ndarray] | None = None
    velocities: np.ndarray | None = None  # (num_layers, 2), row 0 = background


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.PCG64(seed))


def _texture(rng: np.random.Generator, h: int, w: int, cfg: GeneratorConfig) -> np.ndarray:
    if cfg.texture == "gradient":
        ys = np.linspace(0, 1, h, dtype=np.float32)[:, None, None]
        xs = np.linspace(0, 1, w, dtype=np.float32)[None, :, None]
        a = rng.uniform(-1, 1, size=3).astype(np.float32)
        b = rng.uniform(-1, 1, size=3).astype(np.float32)
        c = rng.uniform(0.2, 0.8, size=3).astype(np.float32)
        tex = c + 0.5 * a * ys + 0.5 * b * xs
        return np.clip(tex, 0.0, 1.0)
    s = max(1, cfg.texture_scale)
    hh, ww = -(-h // s), -(-w // s)
    coarse = rng.uniform(0.0, 1.0, size=(hh, ww, 3)).astype(np.float32)
    tex = np.repeat(np.repeat(coarse, s, axis=0), s, axis=1)[:h, :w]
    # mild smoothing keeps single-pixel matching non-trivial
    tex = 0.5 * tex + 0.25 * (np.roll(tex, 1, axis=0) + np.roll(tex, 1, axis=1))
    return np.clip(tex, 0.0, 1.0)


def _sprite_mask(rng: np.random.Generator, sh: int, sw: int) -> np.ndarray:
    if rng.random() < 0.5:
        return np.ones((sh, sw), dtype=bool)
    ys = (np.arange(sh)[:, None] - (sh - 1) / 2) / (sh / 2)
    xs = (np.arange(sw)[None, :] - (sw - 1) / 2) / (sw / 2)
    return ys * ys + xs * xs <= 1.0


@dataclass
class _Scene:
    bg: np.ndarray  # oversized background texture
    margin: int
    sprites: list[tuple[np.ndarray, np.ndarray]]  # (mask, texture)
    positions: np.ndarray  # (k, 2) float, frame-1 top-left corners
    velocities: np.ndarray  # (k+1, 2); row 0 is the background


def _sample_scene(cfg: GeneratorConfig, rng: np.random.Generator) -> _Scene:
    size = cfg.size
    margin = int(np.ceil(cfg.max_disp)) * 4 + 2
    bg = _texture(rng, size + 2 * margin, size + 2 * margin, cfg)
    count = int(rng.integers(cfg.sprite_count[0], cfg.sprite_count[1] + 1))
    sprites = []
    positions = []
    for _ in range(count):
        sh = int(rng.integers(cfg.sprite_size[0], cfg.sprite_size[1] + 1))
        sw = int(rng.integers(cfg.sprite_size[0], cfg.sprite_size[1] + 1))
        sprites.append((_sprite_mask(rng, sh, sw), _texture(rng, sh, sw, cfg)))
        positions.append(
            [
                rng.uniform(-sh / 3, size - 2 * sh / 3),
                rng.uniform(-sw / 3, size - 2 * sw / 3),
            ]
        )

    def draw_disp():
        if cfg.integer_disp:
            lim = int(cfg.max_disp)
            return rng.integers(-lim, lim + 1, size=2).astype(np.float64)
        return rng.uniform(-cfg.max_disp, cfg.max_disp, size=2)

    vels = [draw_disp() if cfg.background_moves else np.zeros(2)]
    for _ in range(count):
        vels.append(draw_disp())
    return _Scene(bg, margin, sprites, np.asarray(positions, dtype=np.float64), np.asarray(vels))


def _render(scene: _Scene, cfg: GeneratorConfig, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Compose frame t; returns (image, layer map). Layer 0 is background."""
    size = cfg.size
    m = scene.margin
    bg_shift = np.rint(scene.velocities[0] * t).astype(np.int64)
    y0 = m - bg_shift[0]
    x0 = m - bg_shift[1]
    img = scene.bg[y0 : y0 + size, x0 : x0 + size].copy()
    layers = np.zeros((size, size), dtype=np.int32)
    for idx, (mask, tex) in enumerate(scene.sprites, start=1):
        pos = scene.positions[idx - 1] + scene.velocities[idx] * t
        py, px = int(np.rint(pos[0])), int(np.rint(pos[1]))
        sh, sw = mask.shape
        ys, ye = max(0, py), min(size, py + sh)
        xs, xe = max(0, px), min(size, px + sw)
        if ys >= ye or xs >= xe:
            continue
        sub = mask[ys - py : ye - py, xs - px : xe - px]
        img[ys:ye, xs:xe][sub] = tex[ys - py : ye - py, xs - px : xe - px][sub]
        layers[ys:ye, xs:xe][sub] = idx
    return img, layers


def _flow_and_covered(
    lay1: np.ndarray, lay2: np.ndarray, velocities: np.ndarray, step: int = 1
) -> tuple[FlowField, np.ndarray]:
    size = lay1.shape[0]
    disp = velocities * step
    flow = disp[lay1].astype(np.float32)
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    ty = ys + np.rint(flow[:, :, 0]).astype(np.int64)
    tx = xs + np.rint(flow[:, :, 1]).astype(np.int64)
    oob = (ty < 0) | (ty >= size) | (tx < 0) | (tx >= size)
    tyc = np.clip(ty, 0, size - 1)
    txc = np.clip(tx, 0, size - 1)
    covered = oob | (lay2[tyc, txc] != lay1)
    return FlowField(flow), covered


def _photometric(img: np.ndarray, cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    out = img
    if cfg.brightness_jitter > 0:
        j = cfg.brightness_jitter
        gain = rng.uniform(1.0 - j, 1.0 + j)
        offset = rng.uniform(-j / 2, j / 2)
        out = out * gain + offset
    if cfg.frame_noise > 0:
        out = out + rng.normal(0.0, cfg.frame_noise, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def gen_pair(cfg: GeneratorConfig, rng: np.random.Generator, domain: str = "synthetic") -> VideoPair:
    """One frame pair; ground truth is attached only for the synthetic domain."""
    scene = _sample_scene(cfg, rng)
    img1, lay1 = _render(scene, cfg, 0)
    img2, lay2 = _render(scene, cfg, cfg.gap)
    frame1 = _photometric(img1, cfg, rng)
    frame2 = _photometric(img2, cfg, rng)
    if domain != "synthetic":
        return VideoPair(frame1, frame2, domain)
    flow, covered = _flow_and_covered(lay1, lay2, scene.velocities, cfg.gap)
    return VideoPair(frame1, frame2, "synthetic", flow, covered)


def gen_clip(
    cfg: GeneratorConfig, rng: np.random.Generator, length: int, domain: str = "synthetic"
) -> Clip:
    """Constant-velocity clip; per-step flow/covered/layers for synthetic."""
    scene = _sample_scene(cfg, rng)
    frames = []
    layer_maps = []
    for t in range(length):
        img, lay = _render(scene, cfg, t)
        frames.append(_photometric(img, cfg, rng))
        layer_maps.append(lay)
    if domain != "synthetic":
        return Clip(frames)
    flows = []
    covered = []
    for t in range(length - 1):
        fl, cov = _flow_and_covered(layer_maps[t], layer_maps[t + 1], scene.velocities, 1)
        flows.append(fl)
        covered.append(cov)
    return Clip(frames, flows, covered, layer_maps, scene.velocities)


def clip_gt_tracks(clip: Clip, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth tracks for frame-0 query pixels (N, 2) -> (T, N, 2), (T, N).

    A point rides its frame-0 layer; it is visible while inside the frame
    and not covered by a higher layer.
    """
    if clip.layers is None:
        raise ValueError("ground-truth tracks need a synthetic clip")
    size = clip.frames[0].shape[0]
    q = np.asarray(queries, dtype=np.float64)
    lay0 = clip.layers[0]
    own = lay0[np.clip(q[:, 0].astype(np.int64), 0, size - 1), np.clip(q[:, 1].astype(np.int64), 0, size - 1)]
    vel = clip.velocities[own]
    tcount = len(clip.frames)
    pos = np.stack([q + vel * t for t in range(tcount)], axis=0)
    vis = np.zeros((tcount, len(q)), dtype=bool)
    for t in range(tcount):
        py = np.rint(pos[t, :, 0]).astype(np.int64)
        px = np.rint(pos[t, :, 1]).astype(np.int64)
        inside = (py >= 0) & (py < size) & (px >= 0) & (px < size)
        pyc, pxc = np.clip(py, 0, size - 1), np.clip(px, 0, size - 1)
        vis[t] = inside & (clip.layers[t][pyc, pxc] == own)
    return pos.astype(np.float32), vis


# ---------------------------------------------------------------------------
# colour space and dropout

_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE = np.array([0.95047, 1.0, 1.08883])
_DELTA = 6.0 / 29.0


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """sRGB [0,1] -> CIE Lab (D65), rescaled to L/100, (a+128)/256, (b+128)/256."""
    img = np.asarray(image, dtype=np.float64)
    if img.min() < -1e-5 or img.max() > 1 + 1e-5:
        raise ValueError("rgb_to_lab expects values in [0, 1]")
    img = np.clip(img, 0.0, 1.0)
    linear = np.where(img <= 0.04045, img / 12.92, ((img + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _SRGB_TO_XYZ.T / _WHITE
    f = np.where(xyz > _DELTA**3, np.cbrt(xyz), xyz / (3 * _DELTA**2) + 4.0 / 29.0)
    lum = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    out = np.stack([lum / 100.0, (a + 128.0) / 256.0, (b + 128.0) / 256.0], axis=-1)
    return out.astype(np.float32)


def lab_to_rgb(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    lum = img[..., 0] * 100.0
    a = img[..., 1] * 256.0 - 128.0
    b = img[..., 2] * 256.0 - 128.0
    fy = (lum + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    xyz = np.where(f > _DELTA, f**3, 3 * _DELTA**2 * (f - 4.0 / 29.0)) * _WHITE
    linear = xyz @ np.linalg.inv(_SRGB_TO_XYZ).T
    srgb = np.where(
        linear <= 0.0031308, linear * 12.92, 1.055 * np.clip(linear, 0, None) ** (1 / 2.4) - 0.055
    )
    return np.clip(srgb, 0.0, 1.0).astype(np.float32)


def channel_dropout(image: np.ndarray, rng: np.random.Generator, p: float) -> np.ndarray:
    """Zero each colour channel independently with probability p."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must satisfy 0 <= p < 1")
    out = np.array(image, dtype=np.float32, copy=True)
    for c in range(out.shape[-1]):
        if rng.random() < p:
            out[..., c] = 0.0
    return out


# ---------------------------------------------------------------------------
# file formats

def _read_pnm_header(f) -> tuple[bytes, int, int, int]:
    magic = f.read(2)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported netpbm magic {magic!r}")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise ValueError("truncated netpbm header")
        text = line.split(b"#", 1)[0]
        fields.extend(int(tok) for tok in text.split())
    width, height, maxval = fields[:3]
    if maxval != 255:
        raise ValueError("only maxval 255 netpbm files are supported")
    return magic, width, height, maxval


def write_ppm(path: str, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, _ = _read_pnm_header(f)
        if magic != b"P6":
            raise ValueError("expected a P6 (colour) file")
        raw = f.read(h * w * 3)
    if len(raw) != h * w * 3:
        raise ValueError(f"truncated PPM payload in {path}")
    return (np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3) / 255.0).astype(np.float32)


def write_pgm(path: str, values: np.ndarray) -> None:
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        arr = np.rint(np.clip(arr, 0, 255)).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(arr.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, _ = _read_pnm_header(f)
        if magic != b"P5":
            raise ValueError("expected a P5 (grayscale) file")
        raw = f.read(h * w)
    if len(raw) != h * w:
        raise ValueError(f"truncated PGM payload in {path}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


FLOW_MAGIC = b"CPXF"


def write_flow(path: str, flow: FlowField) -> None:
    vec = np.ascontiguousarray(flow.vectors, dtype="<f4")
    h, w, _ = vec.shape
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(np.array([h, w], dtype="<u4").tobytes())
        f.write(vec.tobytes())


def read_flow(path: str) -> FlowField:
    with open(path, "rb") as f:
        if f.read(4) != FLOW_MAGIC:
            raise ValueError(f"bad flow magic in {path}")
        h, w = np.frombuffer(f.read(8), dtype="<u4")
        raw = f.read(int(h) * int(w) * 8)
    vec = np.frombuffer(raw, dtype="<f4").reshape(int(h), int(w), 2)
    return FlowField(vec.astype(np.float32))


_FRAME_RE = re.compile(r"\.(ppm|pgm)$", re.IGNORECASE)


def load_clip(dir_path: str) -> list[np.ndarray]:
    """Frames from a directory of numbered PPM/PGM files, in filename order."""
    names = sorted(n for n in os.listdir(dir_path) if _FRAME_RE.search(n))
    if not names:
        raise ValueError(f"no PPM/PGM frames found in {dir_path}")
    frames = []
    for name in names:
        path = os.path.join(dir_path, name)
        if name.lower().endswith(".ppm"):
            frames.append(read_ppm(path))
        else:
            gray = (read_pgm(path) / 255.0).astype(np.float32)
            frames.append(np.repeat(gray[:, :, None], 3, axis=2))
    extents = {f.shape[:2] for f in frames}
    if len(extents) != 1:
        raise ValueError(f"frames in {dir_path} have inconsistent extents: {sorted(extents)}")
    return frames


def jittered(cfg: GeneratorConfig, jitter: float = 0.25, noise: float | None = None) -> GeneratorConfig:
    """Config for the unlabeled 'real' stream: photometric shift on top of
    the synthetic scene statistics."""
    return replace(
        cfg,
        brightness_jitter=jitter,
        frame_noise=cfg.frame_noise if noise is None else noise,
    )
