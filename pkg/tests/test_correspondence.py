import numpy as np
import pytest

from conftest import check_gradients
from vidcorr.correspondence import (
    MappingConfig,
    ProbMap,
    argmax_flow,
    export_probmap,
    local_correlation,
    occlusion_mask,
    soft_argmax_flow,
    window_offsets,
    window_validity,
)
from vidcorr.encoder import FeatureMap
from vidcorr.numerics import Tensor, ops
from vidcorr.numerics.tensorfile import load_tensor


def naive_local_correlation(f1: np.ndarray, f2: np.ndarray, r: int, tau: float) -> np.ndarray:
    """Reference O(H*W*(2r+1)^2*C) double loop, kept deliberately dumb."""
    h, w, _ = f1.shape
    side = 2 * r + 1
    out = np.zeros((h, w, side * side), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            logits = np.full(side * side, -np.inf)
            for du in range(-r, r + 1):
                for dv in range(-r, r + 1):
                    ky, kx = y + du, x + dv
                    if 0 <= ky < h and 0 <= kx < w:
                        k = (du + r) * side + (dv + r)
                        logits[k] = float(np.dot(f1[y, x], f2[ky, kx])) / tau
            m = logits.max()
            e = np.exp(logits - m)
            out[y, x] = e / e.sum()
    return out.astype(np.float32)


def distinctive_features(h, w, c, seed=0):
    """Unit-norm features that are near-orthogonal across pixels."""
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(h, w, c)).astype(np.float32)
    f /= np.linalg.norm(f, axis=-1, keepdims=True)
    return f


def fmap(arr, stride=1):
    return FeatureMap(Tensor(arr), stride)


def hand_probmap(h, w, r, offset):
    """Probability 1 at a fixed (du, dv) everywhere."""
    side = 2 * r + 1
    probs = np.zeros((h, w, side * side), dtype=np.float32)
    k = (offset[0] + r) * side + (offset[1] + r)
    probs[:, :, k] = 1.0
    return ProbMap(Tensor(probs), r, window_validity(h, w, r))


class TestLocalCorrelation:
    def test_identical_frames_zero_argmax(self):
        f = distinctive_features(12, 12, 16)
        pmap = local_correlation(fmap(f), fmap(f), MappingConfig(r=3, tau=0.07))
        flow = argmax_flow(pmap).vectors
        interior = flow[3:-3, 3:-3]
        assert np.all(interior == 0)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        f1 = rng.normal(size=(9, 11, 8)).astype(np.float32)
        f2 = rng.normal(size=(9, 11, 8)).astype(np.float32)
        pmap = local_correlation(fmap(f1), fmap(f2), MappingConfig(r=2, tau=1.0))
        np.testing.assert_allclose(pmap.probs.data.sum(axis=-1), 1.0, atol=1e-5)
        assert (pmap.probs.data[~pmap.valid] == 0).all()

    def test_matches_naive_reference(self):
        rng = np.random.default_rng(2)
        f1 = rng.normal(size=(16, 16, 8)).astype(np.float32)
        f2 = rng.normal(size=(16, 16, 8)).astype(np.float32)
        pmap = local_correlation(fmap(f1), fmap(f2), MappingConfig(r=3, tau=1.0))
        ref = naive_local_correlation(f1, f2, 3, 1.0)
        assert np.abs(pmap.probs.data - ref).max() < 1e-5

    @pytest.mark.parametrize("r", [1, 3, 6])
    def test_oracle_equivalence_radii(self, r):
        rng = np.random.default_rng(10 + r)
        h, w, c = 10, 13, 5
        f1 = rng.normal(size=(h, w, c)).astype(np.float32)
        f2 = rng.normal(size=(h, w, c)).astype(np.float32)
        pmap = local_correlation(fmap(f1), fmap(f2), MappingConfig(r=r, tau=0.5))
        ref = naive_local_correlation(f1, f2, r, 0.5)
        assert np.abs(pmap.probs.data - ref).max() < 1e-5

    def test_extent_mismatch(self):
        with pytest.raises(ValueError):
            local_correlation(
                fmap(np.zeros((4, 4, 2), np.float32)),
                fmap(np.zeros((4, 5, 2), np.float32)),
                MappingConfig(r=1),
            )

    def test_temperature_monotonicity(self):
        rng = np.random.default_rng(3)
        f1 = rng.normal(size=(8, 8, 6)).astype(np.float32)
        f2 = rng.normal(size=(8, 8, 6)).astype(np.float32)
        maxima = []
        for tau in (2.0, 1.0, 0.5, 0.1):
            p = local_correlation(fmap(f1), fmap(f2), MappingConfig(r=2, tau=tau))
            maxima.append(p.probs.data.max(axis=-1))
        for lo, hi in zip(maxima, maxima[1:]):
            assert (hi >= lo - 1e-6).all()

    def test_channel_permutation_invariance(self):
        rng = np.random.default_rng(4)
        f1 = rng.normal(size=(7, 7, 8)).astype(np.float32)
        f2 = rng.normal(size=(7, 7, 8)).astype(np.float32)
        perm = rng.permutation(8)
        a = local_correlation(fmap(f1), fmap(f2), MappingConfig(r=2))
        b = local_correlation(fmap(f1[:, :, perm]), fmap(f2[:, :, perm]), MappingConfig(r=2))
        np.testing.assert_allclose(a.probs.data, b.probs.data, atol=1e-6)

    def test_gradient_through_correlation(self):
        rng = np.random.default_rng(5)
        f1 = Tensor(rng.normal(size=(5, 5, 4)).astype(np.float32), requires_grad=True)
        f2 = Tensor(rng.normal(size=(5, 5, 4)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 5, 9)).astype(np.float32))

        def build():
            p = local_correlation(FeatureMap(f1), FeatureMap(f2), MappingConfig(r=1, tau=0.7))
            return ops.tsum(ops.mul(p.probs, w))

        check_gradients(build, [f1, f2], h=1e-2, tol=1e-3)


class TestFlowReadout:
    def test_argmax_on_hand_built(self):
        pmap = hand_probmap(5, 5, 3, (2, -1))
        flow = argmax_flow(pmap).vectors
        assert np.all(flow[:, :, 0] == 2) and np.all(flow[:, :, 1] == -1)

    def test_soft_argmax_point_mass(self):
        pmap = hand_probmap(4, 4, 3, (2, -1))
        vec = soft_argmax_flow(pmap).vectors
        np.testing.assert_allclose(vec[:, :, 0], 2.0, atol=1e-6)
        np.testing.assert_allclose(vec[:, :, 1], -1.0, atol=1e-6)

    def test_soft_argmax_uniform_is_zero(self):
        h = w = 5
        r = 2
        n = (2 * r + 1) ** 2
        probs = np.full((h, w, n), 1.0 / n, dtype=np.float32)
        pmap = ProbMap(Tensor(probs), r, window_validity(h, w, r))
        vec = soft_argmax_flow(pmap).vectors
        np.testing.assert_allclose(vec, 0.0, atol=1e-6)

    def test_soft_argmax_linearity(self):
        h = w = 3
        r = 2
        side = 2 * r + 1
        probs = np.zeros((h, w, side * side), dtype=np.float32)
        probs[:, :, (0 + r) * side + (0 + r)] = 0.5
        probs[:, :, (2 + r) * side + (0 + r)] = 0.5
        pmap = ProbMap(Tensor(probs), r, window_validity(h, w, r))
        vec = soft_argmax_flow(pmap).vectors
        np.testing.assert_allclose(vec[:, :, 0], 1.0, atol=1e-6)
        np.testing.assert_allclose(vec[:, :, 1], 0.0, atol=1e-6)


class TestOcclusion:
    def test_identical_frames_all_consistent(self):
        f = distinctive_features(10, 10, 12, seed=6)
        cfg = MappingConfig(r=2, tau=0.07)
        p12 = local_correlation(fmap(f), fmap(f), cfg)
        occ = occlusion_mask(p12, p12).flags
        assert occ[2:-2, 2:-2].all()

    def test_constructed_violation(self):
        # i -> (0,1) everywhere forward; backward also (0,1): cycle broken
        p12 = hand_probmap(4, 4, 1, (0, 1))
        p21 = hand_probmap(4, 4, 1, (0, 1))
        occ = occlusion_mask(p12, p21).flags
        assert not occ.any()

    def test_inverse_flows_consistent(self):
        p12 = hand_probmap(6, 6, 2, (1, 0))
        p21 = hand_probmap(6, 6, 2, (-1, 0))
        occ = occlusion_mask(p12, p21).flags
        # rows whose forward target exists and returns are consistent
        assert occ[:-1].all()


def test_window_offsets_row_major():
    offs = window_offsets(1)
    np.testing.assert_array_equal(
        offs,
        [[-1, -1], [-1, 0], [-1, 1], [0, -1], [0, 0], [0, 1], [1, -1], [1, 0], [1, 1]],
    )


def test_export_probmap(tmp_path):
    f = distinctive_features(6, 6, 4, seed=8)
    pmap = local_correlation(fmap(f), fmap(f), MappingConfig(r=2))
    path = str(tmp_path / "p.cpxt")
    export_probmap(path, pmap)
    back = load_tensor(path)
    np.testing.assert_array_equal(back, pmap.probs.data)
    meta = open(path + ".meta").read()
    assert "r\t2" in meta and "row-major" in meta


def test_mapping_config_validation():
    with pytest.raises(ValueError):
        MappingConfig(r=0)
    with pytest.raises(ValueError):
        MappingConfig(r=3, tau=0.0)
