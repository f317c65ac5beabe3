"""Voxel-grid accumulation, normalization, and EVT1/VGF1 round trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evdistill.events import (
    EVENT_DTYPE,
    EventWindow,
    FileFormatError,
    VoxelGrid,
    accumulate_voxel_grid,
    events_array,
    normalize_voxel_grid,
    read_events,
    read_voxel_grid,
    write_events,
    write_voxel_grid,
)
from tests.oracles import bilinear_kernel_weights, brute_force_voxel_grid, random_window


def single_event_window(x, y, p, t_off, t0=0, dt=80_000, w=8, h=8):
    return EventWindow(events_array([(x, y, p, t0 + t_off)]), t0, dt, w, h)


class TestAccumulate:
    def test_single_event_on_bin_center(self):
        # t - t0 = dt/2 with 5 bins lands exactly on t* = 2
        win = single_event_window(3, 2, +1, t_off=40_000)
        grid = accumulate_voxel_grid(win, bins=5)
        expected = np.zeros((5, 8, 8), dtype=np.float32)
        expected[2, 2, 3] = 1.0
        np.testing.assert_array_equal(grid.values, expected)

    def test_empty_window_is_zero(self):
        win = EventWindow(events_array([]), 0, 1000, 4, 4)
        grid = accumulate_voxel_grid(win, bins=5)
        assert not grid.values.any()

    def test_single_event_split_between_bins(self):
        # t - t0 = 3*dt/8 with 5 bins gives t* = 1.5: weight 0.5 in bins 1 and 2
        win = single_event_window(5, 1, +1, t_off=30_000)
        grid = accumulate_voxel_grid(win, bins=5)
        assert grid.values[1, 1, 5] == np.float32(0.5)
        assert grid.values[2, 1, 5] == np.float32(0.5)
        assert np.count_nonzero(grid.values) == 2

    def test_matches_brute_force_exactly_on_1000_events(self):
        rng = np.random.default_rng(7)
        win = random_window(rng, 1000)
        fast = accumulate_voxel_grid(win, bins=5)
        slow = brute_force_voxel_grid(win, bins=5)
        np.testing.assert_array_equal(fast.values, slow.values)

    @pytest.mark.parametrize("bins", [1, 2, 3, 5, 10])
    def test_matches_brute_force_across_bin_counts(self, bins):
        rng = np.random.default_rng(bins)
        win = random_window(rng, 257)
        np.testing.assert_array_equal(
            accumulate_voxel_grid(win, bins).values,
            brute_force_voxel_grid(win, bins).values,
        )

    def test_kernel_weights_sum_to_one(self):
        rng = np.random.default_rng(3)
        t0, dt, bins = 500, 77_777, 6
        for t_off in rng.integers(0, 77_777, 200):
            weights = bilinear_kernel_weights(t0 + int(t_off), t0, dt, bins)
            total = np.float32(0.0)
            for w in weights.values():
                total = np.float32(total + np.float32(w))
            assert abs(total - 1.0) <= np.spacing(np.float32(1.0))

    def test_polarity_antisymmetry_is_exact(self):
        rng = np.random.default_rng(11)
        win = random_window(rng, 400)
        flipped = win.events.copy()
        flipped["p"] = -flipped["p"]
        win2 = EventWindow(flipped, win.t0, win.dt, win.sensor_w, win.sensor_h)
        np.testing.assert_array_equal(
            accumulate_voxel_grid(win, 5).values, -accumulate_voxel_grid(win2, 5).values
        )

    def test_window_additivity_within_float_tolerance(self):
        rng = np.random.default_rng(13)
        win = random_window(rng, 600)
        a = EventWindow(win.events[:300], win.t0, win.dt, win.sensor_w, win.sensor_h)
        b = EventWindow(win.events[300:], win.t0, win.dt, win.sensor_w, win.sensor_h)
        whole = accumulate_voxel_grid(win, 5).values
        parts = accumulate_voxel_grid(a, 5).values + accumulate_voxel_grid(b, 5).values
        np.testing.assert_allclose(whole, parts, rtol=1e-5, atol=1e-6)

    def test_rejects_out_of_bounds_event(self):
        with pytest.raises(ValueError, match="bounds"):
            single_event_window(9, 0, 1, t_off=10, w=8, h=8)

    def test_rejects_event_outside_window(self):
        with pytest.raises(ValueError, match="window"):
            EventWindow(events_array([(0, 0, 1, 80_000)]), 0, 80_000, 8, 8)

    def test_rejects_bad_polarity(self):
        with pytest.raises(ValueError, match="polarity"):
            EventWindow(events_array([(0, 0, 0, 10)]), 0, 80_000, 8, 8)

    def test_rejects_unsorted_events(self):
        with pytest.raises(ValueError, match="sorted"):
            EventWindow(events_array([(0, 0, 1, 50), (0, 0, 1, 40)]), 0, 100, 8, 8)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 9_999), st.integers(2, 8), st.sampled_from([-1, 1]))
    def test_one_event_mass_conservation(self, t_off, bins, p):
        win = single_event_window(0, 0, p, t_off=t_off, dt=10_000)
        grid = accumulate_voxel_grid(win, bins)
        assert abs(grid.values.sum() - p) < 1e-6


class TestNormalize:
    def test_boundary_and_midpoint_are_exact(self):
        vals = np.array([[[-5.0, 0.0, 5.0]]], dtype=np.float32)
        grid = VoxelGrid(1, 1, 3, vals, normalized=False)
        out = normalize_voxel_grid(grid, clip=5.0)
        np.testing.assert_array_equal(out.values, [[[0.0, 0.5, 1.0]]])
        assert out.normalized

    def test_clipping_saturates(self):
        grid = VoxelGrid(1, 1, 1, np.array([[[7.5]]], np.float32), normalized=False)
        assert normalize_voxel_grid(grid, clip=5.0).values[0, 0, 0] == 1.0

    def test_output_range(self):
        rng = np.random.default_rng(17)
        win = random_window(rng, 500, width=6, height=6)
        out = normalize_voxel_grid(accumulate_voxel_grid(win, 4), clip=2.0)
        out.validate()
        assert out.values.min() >= 0.0 and out.values.max() <= 1.0

    def test_rejects_nonpositive_clip(self):
        grid = VoxelGrid(1, 1, 1, np.zeros((1, 1, 1), np.float32), normalized=False)
        with pytest.raises(ValueError):
            normalize_voxel_grid(grid, clip=0.0)

    def test_rejects_double_normalization(self):
        grid = VoxelGrid(1, 1, 1, np.zeros((1, 1, 1), np.float32), normalized=True)
        with pytest.raises(ValueError):
            normalize_voxel_grid(grid, clip=1.0)


class TestEvt1:
    def test_round_trip_identity(self, tmp_path):
        rng = np.random.default_rng(23)
        win = random_window(rng, 1000, width=640, height=480)
        path = tmp_path / "a.evt1"
        write_events(path, 640, 480, win.events)
        header, back = read_events(path)
        assert header.width == 640 and header.height == 480 and header.count == 1000
        np.testing.assert_array_equal(back, win.events)

    def test_bad_magic_fails_at_offset_zero(self, tmp_path):
        path = tmp_path / "bad.evt1"
        path.write_bytes(b"XXXX" + b"\0" * 20)
        with pytest.raises(FileFormatError) as err:
            read_events(path)
        assert err.value.offset == 0

    def test_zero_event_file(self, tmp_path):
        path = tmp_path / "empty.evt1"
        write_events(path, 32, 32, events_array([]))
        header, back = read_events(path)
        assert header.count == 0 and len(back) == 0

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.evt1"
        write_events(path, 8, 8, events_array([(0, 0, 1, 5), (1, 1, -1, 9)]))
        raw = path.read_bytes()
        path.write_bytes(raw[:-7])
        with pytest.raises(FileFormatError, match="truncated"):
            read_events(path)

    def test_nonmonotone_timestamps_rejected(self, tmp_path):
        ev = np.zeros(2, dtype=EVENT_DTYPE)
        ev["p"] = 1
        ev["t"] = [100, 50]
        path = tmp_path / "nonmono.evt1"
        write_events(path, 8, 8, ev)
        with pytest.raises(FileFormatError, match="nonmonotone") as err:
            read_events(path)
        assert err.value.offset == 24 + 16


class TestVgf1:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(29)
        vals = rng.standard_normal((5, 8, 8)).astype(np.float32)
        grid = VoxelGrid(5, 8, 8, vals, normalized=False)
        path = tmp_path / "g.vgf1"
        write_voxel_grid(path, grid)
        back = read_voxel_grid(path)
        assert back.values.tobytes() == vals.tobytes()
        assert (back.bins, back.height, back.width) == (5, 8, 8)

    def test_normalized_flag_round_trips(self, tmp_path):
        grid = VoxelGrid(1, 2, 2, np.full((1, 2, 2), 0.5, np.float32), normalized=True)
        path = tmp_path / "n.vgf1"
        write_voxel_grid(path, grid)
        assert read_voxel_grid(path).normalized is True

    def test_truncated_payload_rejected(self, tmp_path):
        grid = VoxelGrid(2, 3, 3, np.zeros((2, 3, 3), np.float32), normalized=False)
        path = tmp_path / "t.vgf1"
        write_voxel_grid(path, grid)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FileFormatError, match="payload length"):
            read_voxel_grid(path)
