"""GIF89a writer tests, decoded back through an independent reader (PIL)."""

import numpy as np
import pytest
from PIL import Image

from tvp import gifenc


def _solid_video(rgb, n=3, hw=16):
    v = np.zeros((n, 3, hw, hw), dtype=np.float32)
    for c in range(3):
        v[:, c] = rgb[c]
    return v


class TestPalette:
    def test_palette_shape_and_content(self):
        pal = gifenc.build_palette()
        assert pal.shape == (256, 3)
        # 216-cube corners present
        assert [0, 0, 0] in pal.tolist()
        assert [255, 255, 255] in pal.tolist()
        # grayscale ramp occupies the tail
        tail = pal[216:]
        assert np.all(tail[:, 0] == tail[:, 1]) and np.all(tail[:, 1] == tail[:, 2])

    def test_quantize_exact_for_cube_colors(self):
        frame = np.zeros((2, 2, 3), dtype=np.uint8)
        frame[..., 0] = 255
        idx = gifenc.quantize(frame)
        assert np.all(gifenc.PALETTE[idx] == [255, 0, 0])

    def test_quantization_bound_26(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            rgb = rng.integers(0, 256, size=3)
            frame = np.full((1, 1, 3), rgb, dtype=np.uint8)
            mapped = gifenc.PALETTE[gifenc.quantize(frame)][0, 0]
            assert np.max(np.abs(mapped.astype(int) - rgb.astype(int))) <= 26


class TestGifFile:
    def test_single_frame_valid(self, tmp_path):
        path = tmp_path / "one.gif"
        gifenc.write_gif(path, _solid_video((0.2, 0.4, 0.6), n=1))
        with Image.open(path) as im:
            assert im.format == "GIF"
            assert im.n_frames == 1

    def test_frame_count_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        video = rng.uniform(0, 1, size=(8, 3, 16, 16)).astype(np.float32)
        path = tmp_path / "clip.gif"
        gifenc.write_gif(path, video, fps=5)
        with Image.open(path) as im:
            assert im.n_frames == 8

    def test_decoded_pixels_match_quantized(self, tmp_path):
        rng = np.random.default_rng(2)
        video = rng.uniform(0, 1, size=(2, 3, 12, 12)).astype(np.float32)
        path = tmp_path / "clip.gif"
        gifenc.write_gif(path, video)
        expected = gifenc.PALETTE[gifenc.quantize(gifenc.to_display_u8(video)[0])]
        with Image.open(path) as im:
            got = np.asarray(im.convert("RGB"))
        assert np.array_equal(got, expected)

    def test_solid_red_maps_to_palette_red(self, tmp_path):
        path = tmp_path / "red.gif"
        gifenc.write_gif(path, _solid_video((1.0, 0.0, 0.0)))
        with Image.open(path) as im:
            got = np.asarray(im.convert("RGB"))
        assert np.max(np.abs(got.astype(int) - np.array([255, 0, 0]))) <= 26
        assert np.array_equal(got[0, 0], [255, 0, 0])

    def test_negative_values_clip_to_black(self, tmp_path):
        path = tmp_path / "neg.gif"
        gifenc.write_gif(path, _solid_video((-0.5, -0.5, -0.5)))
        with Image.open(path) as im:
            got = np.asarray(im.convert("RGB"))
        assert np.all(got == 0)

    def test_delay_from_fps(self, tmp_path):
        path = tmp_path / "clip.gif"
        gifenc.write_gif(path, _solid_video((0.5, 0.5, 0.5), n=2), fps=4)
        with Image.open(path) as im:
            assert im.info["duration"] == 250

    def test_header_magic(self, tmp_path):
        path = tmp_path / "clip.gif"
        gifenc.write_gif(path, _solid_video((0, 1, 0), n=1))
        assert path.read_bytes()[:6] == b"GIF89a"

    def test_empty_video_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            gifenc.write_gif(tmp_path / "x.gif", np.zeros((0, 3, 4, 4)))


class TestLZW:
    def test_long_stream_with_table_reset_decodes(self, tmp_path):
        # enough distinct phrases to force a 4096-entry table reset
        rng = np.random.default_rng(3)
        video = rng.uniform(0, 1, size=(1, 3, 64, 64)).astype(np.float32)
        path = tmp_path / "big.gif"
        gifenc.write_gif(path, video)
        expected = gifenc.PALETTE[gifenc.quantize(gifenc.to_display_u8(video)[0])]
        with Image.open(path) as im:
            got = np.asarray(im.convert("RGB"))
        assert np.array_equal(got, expected)
