import numpy as np
import pytest

from vidcorr.correspondence import FlowField
from vidcorr.data import (
    Clip,
    GeneratorConfig,
    channel_dropout,
    clip_gt_tracks,
    gen_clip,
    gen_pair,
    jittered,
    lab_to_rgb,
    load_clip,
    make_rng,
    read_flow,
    read_pgm,
    read_ppm,
    rgb_to_lab,
    write_flow,
    write_pgm,
    write_ppm,
)


def quiet_config(**kw):
    base = dict(size=64, frame_noise=0.0, brightness_jitter=0.0, seed=0)
    base.update(kw)
    return GeneratorConfig(**base)


def warp_error(pair):
    """Nearest-warp check: frame2 warped by gt_flow matches frame1 where
    the pixel is not covered."""
    size = pair.frame1.shape[0]
    flow = np.rint(pair.gt_flow.vectors).astype(np.int64)
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    ty = np.clip(ys + flow[:, :, 0], 0, size - 1)
    tx = np.clip(xs + flow[:, :, 1], 0, size - 1)
    warped = pair.frame2[ty, tx]
    good = ~pair.covered
    return float(np.abs(warped[good] - pair.frame1[good]).mean())


class TestGenerator:
    def test_zero_displacement(self):
        cfg = quiet_config(max_disp=0.0, background_moves=False)
        # max_disp 0 forces integer draws in {0}
        pair = gen_pair(cfg, make_rng(4))
        assert np.all(pair.gt_flow.vectors == 0)
        assert not pair.covered.any()
        np.testing.assert_array_equal(pair.frame1, pair.frame2)

    def test_single_sprite_shift(self):
        cfg = quiet_config(
            sprite_count=(1, 1), sprite_size=(16, 16), max_disp=3.0, background_moves=False
        )
        rng = make_rng(11)
        pair = gen_pair(cfg, rng)
        moving = np.abs(pair.gt_flow.vectors).sum(axis=-1) > 0
        # background is static so motion exists only on the sprite
        if moving.any():
            flows = pair.gt_flow.vectors[moving]
            assert len(np.unique(flows, axis=0)) == 1
        # covered pixels are exactly where warping fails
        assert warp_error(pair) <= 1e-3

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4, 5, 6, 7])
    def test_warp_identity_every_seed(self, seed):
        cfg = quiet_config()
        pair = gen_pair(cfg, make_rng(seed))
        assert warp_error(pair) <= 1e-3

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_covered_subset_of_cycle_failures(self, seed):
        # tracking a covered pixel forward then backward cannot return home
        cfg = quiet_config()
        rng = make_rng(seed)
        pair = gen_pair(cfg, rng)
        size = cfg.size
        fwd = np.rint(pair.gt_flow.vectors).astype(np.int64)
        # ground-truth backward flow via a reversed pair of the same scene is
        # not exposed; use correspondence structure instead: a covered pixel's
        # target is claimed by a different layer, so the inverse map cannot
        # send it back. Check covered pixels map onto pixels whose own flow
        # does not return them.
        ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        ty = ys + fwd[:, :, 0]
        tx = xs + fwd[:, :, 1]
        inside = (ty >= 0) & (ty < size) & (tx >= 0) & (tx < size)
        cov_in = pair.covered & inside
        tyc = np.clip(ty, 0, size - 1)
        txc = np.clip(tx, 0, size - 1)
        # the flow of the pixel occupying the target differs from ours there
        same_flow = (fwd[tyc, txc] == fwd).all(axis=-1)
        assert not (cov_in & same_flow & ~pair.covered).any()

    def test_same_seed_identical_stream(self):
        cfg = quiet_config(frame_noise=0.02)
        a = [gen_pair(cfg, make_rng(100 + i)) for i in range(3)]
        b = [gen_pair(cfg, make_rng(100 + i)) for i in range(3)]
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa.frame1, pb.frame1)
            np.testing.assert_array_equal(pa.frame2, pb.frame2)
            np.testing.assert_array_equal(pa.gt_flow.vectors, pb.gt_flow.vectors)

    def test_real_domain_withholds_labels(self):
        cfg = jittered(quiet_config(), jitter=0.3)
        pair = gen_pair(cfg, make_rng(0), domain="real")
        assert pair.domain == "real"
        assert pair.gt_flow is None and pair.covered is None

    def test_max_disp_validated(self):
        with pytest.raises(ValueError):
            GeneratorConfig(size=64, max_disp=20.0)


class TestClips:
    def test_constant_velocity_tracks(self):
        cfg = quiet_config(sprite_count=(1, 2), max_disp=2.0)
        clip = gen_clip(cfg, make_rng(3), length=5)
        assert len(clip.frames) == 5 and len(clip.flows) == 4
        queries = np.argwhere(clip.layers[0] > 0)[:5].astype(np.float64)
        pos, vis = clip_gt_tracks(clip, queries)
        # constant velocity: consecutive differences repeat
        steps = np.diff(pos, axis=0)
        for t in range(1, steps.shape[0]):
            np.testing.assert_allclose(steps[t], steps[0], atol=1e-6)
        assert vis[0].all()

    def test_static_clip(self):
        cfg = quiet_config(max_disp=0.0, background_moves=False)
        clip = gen_clip(cfg, make_rng(9), length=3)
        np.testing.assert_array_equal(clip.frames[0], clip.frames[2])


class TestColor:
    def test_white(self):
        lab = rgb_to_lab(np.ones((1, 1, 3)))
        lum = lab[0, 0, 0] * 100.0
        a = lab[0, 0, 1] * 256.0 - 128.0
        b = lab[0, 0, 2] * 256.0 - 128.0
        assert abs(lum - 100.0) < 1e-3
        assert abs(a) < 0.5 and abs(b) < 0.5

    def test_black(self):
        lab = rgb_to_lab(np.zeros((1, 1, 3)))
        lum = lab[0, 0, 0] * 100.0
        a = lab[0, 0, 1] * 256.0 - 128.0
        b = lab[0, 0, 2] * 256.0 - 128.0
        assert abs(lum) < 1e-3 and abs(a) < 0.5 and abs(b) < 0.5

    def test_roundtrip(self):
        rng = np.random.default_rng(0)
        img = rng.random((16, 16, 3)).astype(np.float32)
        back = lab_to_rgb(rgb_to_lab(img))
        assert np.abs(back - img).max() < 1e-3

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            rgb_to_lab(np.full((2, 2, 3), 1.5))


class TestDropout:
    def test_p_zero_identity(self):
        img = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
        out = channel_dropout(img, make_rng(1), 0.0)
        np.testing.assert_array_equal(out, img)

    def test_high_p_zeroes_most(self):
        rng = make_rng(2)
        zeroed = 0
        for _ in range(200):
            out = channel_dropout(np.ones((2, 2, 3), np.float32), rng, 0.99)
            zeroed += int((out == 0).all(axis=(0, 1)).sum())
        assert zeroed > 0.95 * 200 * 3

    def test_seeded_reproducible(self):
        img = np.random.default_rng(3).random((4, 4, 3)).astype(np.float32)
        a = channel_dropout(img, make_rng(7), 0.5)
        b = channel_dropout(img, make_rng(7), 0.5)
        np.testing.assert_array_equal(a, b)

    def test_bad_p(self):
        with pytest.raises(ValueError):
            channel_dropout(np.ones((2, 2, 3)), make_rng(0), 1.0)


class TestFileFormats:
    def test_ppm_roundtrip(self, tmp_path):
        img = np.random.default_rng(0).random((6, 5, 3)).astype(np.float32)
        path = str(tmp_path / "x.ppm")
        write_ppm(path, img)
        back = read_ppm(path)
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6

    def test_pgm_roundtrip(self, tmp_path):
        arr = (np.arange(20).reshape(4, 5) * 12).astype(np.uint8)
        path = str(tmp_path / "x.pgm")
        write_pgm(path, arr)
        np.testing.assert_array_equal(read_pgm(path), arr)

    def test_flow_roundtrip(self, tmp_path):
        vec = np.random.default_rng(1).normal(size=(4, 6, 2)).astype(np.float32)
        path = str(tmp_path / "f.cpxf")
        write_flow(path, FlowField(vec))
        back = read_flow(path)
        np.testing.assert_array_equal(back.vectors, vec)
        with open(path, "rb") as f:
            assert f.read(4) == b"CPXF"

    def test_load_clip(self, tmp_path):
        for i in range(3):
            write_ppm(str(tmp_path / f"frame_{i:03d}.ppm"), np.full((4, 4, 3), i / 4))
        frames = load_clip(str(tmp_path))
        assert len(frames) == 3
        assert frames[1].mean() > frames[0].mean()

    def test_load_clip_mixed_extents(self, tmp_path):
        write_ppm(str(tmp_path / "a.ppm"), np.zeros((4, 4, 3)))
        write_ppm(str(tmp_path / "b.ppm"), np.zeros((5, 4, 3)))
        with pytest.raises(ValueError):
            load_clip(str(tmp_path))

    def test_load_clip_empty(self, tmp_path):
        with pytest.raises(ValueError):
            load_clip(str(tmp_path))
