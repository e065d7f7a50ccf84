"""Format round trips, decode hardening, patch geometry, trail encoding."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmsc.billiards import BilliardWorld, Ball, rasterize
from cmsc.formats import (
    FormatError,
    PatchSample,
    check_architecture,
    cut_context,
    encode_trail,
    extract_patch_samples,
    load_checkpoint,
    read_bseq,
    save_checkpoint,
    write_bseq,
)
from cmsc.model import CmscConfig, build_model
from cmsc.tensor import SeededRng


class TestBseq:
    def test_float_round_trip_bitwise(self):
        rng = np.random.default_rng(0)
        frames = rng.random((5, 12, 9)).astype(np.float32)
        data = write_bseq(frames, dtype=1)
        out = read_bseq(data)
        assert out.tobytes() == frames.tobytes()
        assert write_bseq(out, dtype=1) == data

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_round_trip_random(self, seed):
        frames = np.random.default_rng(seed).random((3, 6, 6)).astype(np.float32)
        np.testing.assert_array_equal(read_bseq(write_bseq(frames)), frames)

    def test_header_layout(self):
        frames = np.zeros((10, 96, 96), dtype=np.float32)
        data = write_bseq(frames, dtype=1)
        assert len(data) == 18 + 10 * 96 * 96 * 4
        assert data[:4] == b"BSEQ"
        assert data[4] == 1
        assert data[17] == 1

    def test_u8_quantization(self):
        frames = np.array([[[0.0, 1.0, 0.5]]], dtype=np.float32)
        out = read_bseq(write_bseq(frames, dtype=0))
        np.testing.assert_allclose(out, [[[0.0, 1.0, 128 / 255]]])

    def test_binary_frames_exact_in_u8(self):
        img = rasterize(BilliardWorld(32, (Ball(16.0, 16.0, 1.0, 0.0, 6.0),)))
        frames = np.stack([img, img])
        np.testing.assert_array_equal(read_bseq(write_bseq(frames, dtype=0)), frames)

    def test_truncated_payload_rejected(self):
        data = write_bseq(np.zeros((2, 4, 4), dtype=np.float32))
        with pytest.raises(FormatError):
            read_bseq(data[:-3])

    def test_bad_magic_rejected(self):
        data = bytearray(write_bseq(np.zeros((1, 2, 2), dtype=np.float32)))
        data[0] = ord(b"X")
        with pytest.raises(FormatError):
            read_bseq(bytes(data))

    def test_bad_version_rejected(self):
        data = bytearray(write_bseq(np.zeros((1, 2, 2), dtype=np.float32)))
        data[4] = 9
        with pytest.raises(FormatError):
            read_bseq(bytes(data))

    def test_out_of_range_values_rejected(self):
        with pytest.raises(FormatError):
            write_bseq(np.full((1, 2, 2), 1.5, dtype=np.float32))


class TestCheckpoint:
    CFG = CmscConfig(n_levels=2, patch=8, context=24, n_input_frames=2,
                     filters=(4, 6, 8, 6, 4))

    def test_round_trip_bitwise(self):
        params = build_model(self.CFG, SeededRng(1))
        data = save_checkpoint(params, self.CFG, step=17)
        loaded, config, step = load_checkpoint(data)
        assert config == self.CFG
        assert step == 17
        assert save_checkpoint(loaded, config, step=step) == data
        for k in params:
            np.testing.assert_array_equal(loaded[k].data, params[k].data)

    def test_architecture_mismatch_names_parameter(self):
        params = build_model(self.CFG, SeededRng(2))
        other = CmscConfig(n_levels=2, patch=8, context=24, n_input_frames=2,
                           filters=(5, 6, 8, 6, 4))
        with pytest.raises(FormatError, match="conv1.weight"):
            check_architecture(params, other)

    def test_matching_architecture_accepted(self):
        params = build_model(self.CFG, SeededRng(3))
        check_architecture(params, self.CFG)

    def test_corrupt_header_rejected(self):
        data = bytearray(save_checkpoint(build_model(self.CFG, SeededRng(4)), self.CFG))
        data[14] = 0xFF  # scribble into the JSON
        with pytest.raises(FormatError):
            load_checkpoint(bytes(data))

    def test_bad_magic_rejected(self):
        data = save_checkpoint(build_model(self.CFG, SeededRng(5)), self.CFG)
        with pytest.raises(FormatError):
            load_checkpoint(b"NOTCKPT!" + data[8:])

    def test_truncated_payload_rejected(self):
        data = save_checkpoint(build_model(self.CFG, SeededRng(6)), self.CFG)
        with pytest.raises(FormatError):
            load_checkpoint(data[:-10])


class TestPatchSamples:
    def test_grid_count_96(self):
        frames = np.zeros((6, 96, 96), dtype=np.float32)
        samples = extract_patch_samples(frames, patch=32, n_frames=4, context=96)
        # (6 - 4) time steps x 3x3 grid cells
        assert len(samples) == 2 * 9

    def test_sample_count_formula(self):
        rng = np.random.default_rng(1)
        for L, side, patch in [(8, 64, 16), (5, 32, 16), (12, 48, 16)]:
            frames = rng.random((L, side, side)).astype(np.float32)
            n = 4
            samples = extract_patch_samples(frames, patch, n, 3 * patch)
            assert len(samples) == (L - n) * (side // patch) ** 2

    def test_short_sequence_gives_nothing(self):
        frames = np.zeros((4, 32, 32), dtype=np.float32)
        assert extract_patch_samples(frames, 16, 4, 48) == []

    def test_corner_context_zero_fill_fraction(self):
        frames = np.ones((5, 96, 96), dtype=np.float32)
        samples = extract_patch_samples(frames, 32, 4, 96)
        corner = next(s for s in samples if (s.row, s.col) == (0, 0))
        window = corner.inputs[0]
        zero_fraction = (window == 0).mean()
        assert zero_fraction == pytest.approx(5 / 9)

    def test_window_centered_on_target(self):
        rng = np.random.default_rng(2)
        frames = rng.random((6, 64, 64)).astype(np.float32)
        samples = extract_patch_samples(frames, 16, 4, 48)
        s = next(x for x in samples if (x.row, x.col) == (1, 2) and x.t == 4)
        np.testing.assert_array_equal(
            s.inputs[-1][16:32, 16:32], frames[4, 16:32, 32:48]
        )
        np.testing.assert_array_equal(s.target, frames[5, 16:32, 32:48])
        np.testing.assert_array_equal(
            s.target_context[16:32, 16:32], frames[5, 16:32, 32:48]
        )

    def test_no_context_window_equals_patch(self):
        frames = np.random.default_rng(3).random((5, 32, 32)).astype(np.float32)
        samples = extract_patch_samples(frames, 16, 4, 16)
        for s in samples:
            np.testing.assert_array_equal(
                s.inputs[-1], frames[s.t, s.row * 16:(s.row + 1) * 16, s.col * 16:(s.col + 1) * 16]
            )

    def test_indivisible_frame_rejected(self):
        with pytest.raises(FormatError):
            extract_patch_samples(np.zeros((5, 30, 30), dtype=np.float32), 16, 4, 48)

    def test_cut_context_matches_manual_pad(self):
        frame = np.arange(16.0, dtype=np.float32).reshape(4, 4)
        win = cut_context(frame, 0, 0, patch=2, context=6)
        padded = np.pad(frame, 2)
        np.testing.assert_array_equal(win, padded[0:6, 0:6])


class TestTrail:
    def test_single_frame_identity(self):
        frame = np.random.default_rng(4).random((5, 7)).astype(np.float32)
        data = encode_trail([frame])
        header, _, rest = data.partition(b"\n")
        assert header == b"P5"
        dims, _, rest = rest.partition(b"\n")
        assert dims == b"7 5"
        maxval, _, payload = rest.partition(b"\n")
        assert maxval == b"255"
        np.testing.assert_array_equal(
            np.frombuffer(payload, dtype=np.uint8).reshape(5, 7),
            np.round(frame * 255).astype(np.uint8),
        )

    def test_two_disjoint_rings_both_present(self):
        a = rasterize(BilliardWorld(64, (Ball(16.0, 16.0, 1.0, 0.0, 6.0),)))
        b = rasterize(BilliardWorld(64, (Ball(48.0, 48.0, 1.0, 0.0, 6.0),)))
        data = encode_trail([a, b])
        payload = data.split(b"\n", 3)[3]
        img = np.frombuffer(payload, dtype=np.uint8).reshape(64, 64)
        merged = np.maximum(a, b)
        np.testing.assert_array_equal(img > 0, merged > 0)

    def test_trail_of_moving_ball_exceeds_single_frame(self):
        frames = []
        for t in range(30):
            frames.append(rasterize(BilliardWorld(64, (Ball(10.0 + t, 32.0, 1.0, 0.0, 6.0),))))
        payload = encode_trail(frames).split(b"\n", 3)[3]
        trail_count = int((np.frombuffer(payload, dtype=np.uint8) > 0).sum())
        single_counts = [int((f > 0).sum()) for f in frames]
        assert trail_count > max(single_counts)

    def test_mixed_sizes_rejected(self):
        with pytest.raises(FormatError):
            encode_trail([np.zeros((4, 4)), np.zeros((5, 5))])

    def test_empty_rejected(self):
        with pytest.raises(FormatError):
            encode_trail([])
