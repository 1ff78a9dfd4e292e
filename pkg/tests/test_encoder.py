import numpy as np
import pytest

from vidcorr.encoder import (
    EncoderArch,
    arch_for_stride,
    encode,
    init_params,
    load_encoder,
    save_encoder,
)
from vidcorr.numerics import Tape, backward, ops


def test_output_shape_stride2():
    params = init_params(0, arch_for_stride(2, (16, 32, 32, 16)))
    feat = encode(params, np.zeros((32, 32, 3), np.float32))
    assert (feat.height, feat.width, feat.channels) == (16, 16, 16)
    assert feat.stride == 2


def test_output_shape_stride8():
    params = init_params(0, arch_for_stride(8))
    feat = encode(params, np.zeros((64, 64, 3), np.float32))
    assert (feat.height, feat.width, feat.channels) == (8, 8, 32)


def test_unit_norm_outputs():
    params = init_params(3, arch_for_stride(2))
    frame = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    feat = encode(params, frame)
    norms = np.linalg.norm(feat.values.data, axis=-1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-5)


def test_indivisible_extents_rejected():
    params = init_params(0, arch_for_stride(2))
    with pytest.raises(ValueError):
        encode(params, np.zeros((33, 32, 3), np.float32))


def test_init_deterministic_and_seed_sensitive():
    a = init_params(5)
    b = init_params(5)
    c = init_params(6)
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)
    assert any(
        not np.array_equal(pa.data, pc.data)
        for pa, pc in zip(a.parameters(), c.parameters())
    )


def test_forward_on_zeros_finite():
    params = init_params(1)
    feat = encode(params, np.zeros((16, 16, 3), np.float32))
    assert np.isfinite(feat.values.data).all()


def test_translation_covariance_interior():
    # shifting the input by s pixels shifts the feature grid by one cell
    params = init_params(2, arch_for_stride(2))
    rng = np.random.default_rng(4)
    big = rng.random((70, 70, 3)).astype(np.float32)
    f_a = encode(params, big[0:64, 0:64]).values.data
    f_b = encode(params, big[2:66, 2:66]).values.data
    margin = 4
    inner_a = f_a[1 + margin : 32 - margin, 1 + margin : 32 - margin]
    inner_b = f_b[margin : 31 - margin, margin : 31 - margin]
    np.testing.assert_allclose(inner_a, inner_b, atol=1e-4)


def test_frozen_labeler_receives_no_gradient():
    params = init_params(0, arch_for_stride(2))
    frozen = params.freeze()
    assert all(not p.requires_grad for p in frozen.parameters())
    frame = np.random.default_rng(1).random((16, 16, 3)).astype(np.float32)
    with Tape() as tape:
        loss = ops.tsum(encode(frozen, frame).values)
    backward(tape, loss)
    assert all(p.grad is None for p in frozen.parameters())


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(9, arch_for_stride(4, (8, 8, 8, 8)))
    path = str(tmp_path / "enc.ckpt")
    save_encoder(path, params)
    back = load_encoder(path)
    assert back.stride == params.stride
    assert back.normalize == params.normalize
    frame = np.random.default_rng(2).random((16, 16, 3)).astype(np.float32)
    np.testing.assert_array_equal(
        encode(params, frame).values.data, encode(back, frame).values.data
    )


def test_bad_stride_plan():
    with pytest.raises(ValueError):
        arch_for_stride(3)
