"""Round-trip, linearity, and isometry checks for the latent codec."""

import numpy as np
import pytest

from tvp.codec import CodecConfig, LatentCodec
from tvp.nn import ConfigError


def _video(rng, n=2, hw=32, dtype=np.float32):
    return (rng.uniform(-1, 1, size=(n, 3, hw, hw))).astype(dtype)


def test_identity_codec_passes_pixels_through():
    codec = LatentCodec(CodecConfig(patch=1, mixing="identity"))
    v = _video(np.random.default_rng(0), n=1, hw=4)
    assert np.array_equal(codec.encode(v), v)


def test_zero_video_zero_latents():
    codec = LatentCodec(CodecConfig(patch=4, seed=1))
    z = codec.encode(np.zeros((2, 3, 32, 32), dtype=np.float32))
    assert np.all(z == 0.0)
    assert np.all(codec.decode(z) == 0.0)


def test_latent_shape_arithmetic():
    codec = LatentCodec(CodecConfig(patch=4, seed=0))
    z = codec.encode(np.zeros((1, 3, 32, 32), dtype=np.float32))
    assert z.shape == (1, 48, 8, 8)


def test_round_trip_f32_within_1e5():
    codec = LatentCodec(CodecConfig(patch=4, seed=2))
    v = _video(np.random.default_rng(1))
    back = codec.decode(codec.encode(v))
    assert np.max(np.abs(back - v)) < 1e-5


def test_round_trip_f64_machine_exact():
    codec = LatentCodec(CodecConfig(patch=4, seed=3))
    v = _video(np.random.default_rng(2), dtype=np.float64)
    back = codec.decode(codec.encode(v))
    assert np.max(np.abs(back - v)) < 1e-12


def test_encode_is_linear():
    codec = LatentCodec(CodecConfig(patch=4, seed=4))
    rng = np.random.default_rng(3)
    v1, v2 = _video(rng), _video(rng)
    a, b = 0.7, -1.3
    lhs = codec.encode(a * v1 + b * v2)
    rhs = a * codec.encode(v1) + b * codec.encode(v2)
    assert np.max(np.abs(lhs - rhs)) < 1e-5


def test_norm_preservation():
    codec = LatentCodec(CodecConfig(patch=4, seed=5))
    for seed in range(5):
        v = _video(np.random.default_rng(seed))
        z = codec.encode(v)
        nv, nz = np.linalg.norm(v), np.linalg.norm(z)
        assert abs(nv - nz) / nv < 1e-4


def test_same_seed_same_matrix():
    a = LatentCodec(CodecConfig(patch=4, seed=6))
    b = LatentCodec(CodecConfig(patch=4, seed=6))
    assert np.array_equal(a.mix, b.mix)
    c = LatentCodec(CodecConfig(patch=4, seed=7))
    assert not np.array_equal(a.mix, c.mix)


def test_indivisible_extents_rejected():
    codec = LatentCodec(CodecConfig(patch=4))
    with pytest.raises(ConfigError, match="divisible"):
        codec.encode(np.zeros((1, 3, 30, 32), dtype=np.float32))


def test_decode_shape_mismatch_rejected():
    from tvp.nn import ShapeError
    codec = LatentCodec(CodecConfig(patch=4, seed=0))
    with pytest.raises(ShapeError, match="latents"):
        codec.decode(np.zeros((1, 20, 8, 8), dtype=np.float32))
