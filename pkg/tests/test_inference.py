import numpy as np
import pytest

from vidcorr.correspondence import MappingConfig, window_offsets, window_validity
from vidcorr.encoder import FeatureMap, arch_for_stride, init_params
from vidcorr.inference import (
    LabelVolume,
    PointTrack,
    TrackProtocol,
    feature_to_image,
    image_to_feature,
    propagate,
    propagate_mask,
    read_tracks,
    track_points,
    write_tracks,
)
from vidcorr.numerics import Tensor


def distinctive_fmap(h, w, c, seed=0):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(h, w, c)).astype(np.float32)
    f /= np.linalg.norm(f, axis=-1, keepdims=True)
    return FeatureMap(Tensor(f))


class TestPropagate:
    def test_identity_transport(self):
        feat = distinctive_fmap(10, 10, 16)
        labels = LabelVolume(np.random.default_rng(1).random((10, 10, 3)).astype(np.float32))
        cfg = MappingConfig(r=2, tau=0.01)
        out = propagate([(feat, labels)], feat, cfg, topk=1)
        np.testing.assert_allclose(out.data, labels.data, atol=1e-4)

    def test_uniform_labels_stay_uniform(self):
        ref = distinctive_fmap(8, 8, 8, seed=2)
        tgt = distinctive_fmap(8, 8, 8, seed=3)
        labels = LabelVolume(np.full((8, 8, 2), 0.5, dtype=np.float32))
        out = propagate([(ref, labels)], tgt, MappingConfig(r=2), topk=5)
        np.testing.assert_allclose(out.data, 0.5, atol=1e-5)

    def test_full_topk_equals_weighted_window_sum(self):
        rng = np.random.default_rng(4)
        ref = distinctive_fmap(7, 7, 6, seed=5)
        tgt = distinctive_fmap(7, 7, 6, seed=6)
        labels = rng.random((7, 7, 2)).astype(np.float32)
        cfg = MappingConfig(r=2, tau=0.5)
        n = (2 * cfg.r + 1) ** 2
        out = propagate([(ref, LabelVolume(labels))], tgt, cfg, topk=n)
        # direct weighted sum under the target->reference correlation
        from vidcorr.correspondence import correlation_probs

        probs = correlation_probs(tgt.values.data, ref.values.data, cfg.r, cfg.tau)
        offs = window_offsets(cfg.r)
        lp = np.pad(labels, ((2, 2), (2, 2), (0, 0)))
        ref_sum = np.zeros_like(labels)
        for k, (du, dv) in enumerate(offs):
            ref_sum += probs[:, :, k, None] * lp[2 + du : 9 + du, 2 + dv : 9 + dv]
        np.testing.assert_allclose(out.data, ref_sum, atol=1e-5)

    def test_convexity_bounds(self):
        ref = distinctive_fmap(8, 8, 8, seed=7)
        tgt = distinctive_fmap(8, 8, 8, seed=8)
        labels = np.random.default_rng(9).random((8, 8, 1)).astype(np.float32)
        out = propagate([(ref, LabelVolume(labels))], tgt, MappingConfig(r=2), topk=6)
        assert out.data.min() >= labels.min() - 1e-6
        assert out.data.max() <= labels.max() + 1e-6

    def test_requires_references_and_topk(self):
        feat = distinctive_fmap(6, 6, 4)
        with pytest.raises(ValueError):
            propagate([], feat, MappingConfig(r=1), topk=3)
        with pytest.raises(ValueError):
            propagate([(feat, LabelVolume(np.zeros((6, 6, 1), np.float32)))], feat, MappingConfig(r=1), topk=0)


class TestTrackPoints:
    def make_static_clip(self, size=32, frames=4, seed=0):
        rng = np.random.default_rng(seed)
        frame = rng.random((size, size, 3)).astype(np.float32)
        return [frame.copy() for _ in range(frames)]

    def test_static_clip_stays_put(self):
        # sharp temperature so untrained features (overlapping receptive
        # fields make neighbours similar) transport near-identity
        clip = self.make_static_clip()
        params = init_params(0, arch_for_stride(2))
        queries = np.array([[16.0, 16.0], [10.0, 20.0], [22.0, 8.0]])
        cfg = MappingConfig(r=3, tau=0.02)
        tracks = track_points(params, clip, queries, cfg, TrackProtocol(topk=5))
        for track, q in zip(tracks, queries):
            for t in range(len(clip)):
                assert np.abs(track.positions[t] - q).max() <= 0.5
            assert track.visible.all()

    def test_empty_clip_rejected(self):
        params = init_params(0)
        with pytest.raises(ValueError):
            track_points(params, [], np.zeros((1, 2)), MappingConfig(r=2))

    def test_coordinate_mapping_roundtrip(self):
        pts = np.array([[3.0, 5.0], [0.0, 0.0], [31.0, 17.0]])
        back = feature_to_image(image_to_feature(pts, 2), 2)
        np.testing.assert_allclose(back, pts, atol=1e-9)


class TestPropagateMask:
    def test_static_clip_keeps_mask(self):
        rng = np.random.default_rng(1)
        frame = rng.random((32, 32, 3)).astype(np.float32)
        clip = [frame.copy() for _ in range(3)]
        params = init_params(0, arch_for_stride(2))
        mask0 = np.zeros((32, 32), dtype=np.int32)
        mask0[8:20, 10:24] = 1
        cfg = MappingConfig(r=3, tau=0.01)
        masks = propagate_mask(params, clip, mask0, cfg, TrackProtocol(topk=5))
        assert len(masks) == 3
        # identical frames transport the feature-grid mask unchanged; the
        # round trip through the grid quantizes to stride-sized blocks
        small = mask0[1::2, 1::2]
        for m in masks[1:]:
            np.testing.assert_array_equal(m[1::2, 1::2], small)

    def test_background_only_mask(self):
        rng = np.random.default_rng(2)
        frame = rng.random((16, 16, 3)).astype(np.float32)
        clip = [frame.copy() for _ in range(3)]
        params = init_params(0, arch_for_stride(2))
        masks = propagate_mask(params, clip, np.zeros((16, 16), np.int32), MappingConfig(r=2), num_classes=2)
        for m in masks:
            assert (m == 0).all()

    def test_class_overflow_rejected(self):
        params = init_params(0)
        frame = np.zeros((16, 16, 3), np.float32)
        mask = np.full((16, 16), 5, np.int32)
        with pytest.raises(ValueError):
            propagate_mask(params, [frame], mask, MappingConfig(r=2), num_classes=3)


class TestTrackIO:
    def test_roundtrip(self, tmp_path):
        tracks = [
            PointTrack(0, np.array([[1.0, 2.0], [3.5, 4.25]], np.float32), np.array([True, False])),
            PointTrack(3, np.array([[0.0, 0.0], [9.0, 9.0]], np.float32), np.array([True, True])),
        ]
        path = str(tmp_path / "tracks.txt")
        write_tracks(path, tracks)
        with open(path) as f:
            first = f.readline().strip()
        assert first == "0,0,1.000,2.000,1"
        back = read_tracks(path)
        assert [t.point_id for t in back] == [0, 3]
        np.testing.assert_allclose(back[0].positions, tracks[0].positions, atol=1e-3)
        np.testing.assert_array_equal(back[0].visible, tracks[0].visible)
