"""Byte-for-byte parity harness between the fast encoder CLI and the reference.

Generates random event streams, asks the external encoder for a normalized
voxel grid over a random query window, recomputes the same grid with the
in-process reference pipeline, and compares the VGF1 payloads bitwise.
"""

from __future__ import annotations

import os
import subprocess
import tempfile

import numpy as np

from .events import (
    EVENT_DTYPE,
    EventWindow,
    accumulate_voxel_grid,
    normalize_voxel_grid,
    write_events,
    write_voxel_grid,
)


def random_stream(rng: np.random.Generator, width: int, height: int, count: int, t_max: int):
    ev = np.zeros(count, dtype=EVENT_DTYPE)
    ev["x"] = rng.integers(0, width, count)
    ev["y"] = rng.integers(0, height, count)
    ev["p"] = rng.choice([-1, 1], count)
    ev["t"] = np.sort(rng.integers(0, t_max, count))
    return ev


def reference_vgf1_bytes(events, width, height, t_end, dt, bins, clip, tmp_dir) -> bytes:
    t0 = t_end - dt
    t = events["t"].astype(np.int64)
    window_events = events[(t >= t0) & (t < t_end)]
    window = EventWindow(window_events.copy(), t0, dt, width, height)
    grid = normalize_voxel_grid(accumulate_voxel_grid(window, bins), clip)
    path = os.path.join(tmp_dir, "reference.vgf1")
    write_voxel_grid(path, grid)
    with open(path, "rb") as f:
        return f.read()


def run_encode_check(encoder_bin, cfg, streams: int = 100, seed: int = 0) -> list[int]:
    """Run the parity suite; prints one pass/fail line per stream.

    Returns the indices of failing streams (empty list means full parity).
    """
    failures = []
    rng = np.random.default_rng(seed)
    with tempfile.TemporaryDirectory() as tmp:
        for k in range(streams):
            width = int(rng.integers(8, 64))
            height = int(rng.integers(8, 64))
            count = int(rng.integers(0, 5000))
            dt = int(rng.integers(10_000, 120_000))
            t_end = dt + int(rng.integers(0, 200_000))
            bins = int(rng.integers(1, 12))
            clip = float(rng.uniform(0.5, 8.0))
            events = random_stream(rng, width, height, count, t_end + 50_000)

            evt_path = os.path.join(tmp, f"s{k}.evt1")
            out_path = os.path.join(tmp, f"s{k}.vgf1")
            write_events(evt_path, width, height, events)
            cmd = [
                str(encoder_bin),
                "--input", evt_path,
                "--output", out_path,
                "--t-end", str(t_end),
                "--dt", str(dt),
                "--bins", str(bins),
                "--clip", repr(clip),
            ]
            proc = subprocess.run(cmd, capture_output=True, text=True)
            if proc.returncode != 0:
                print(f"stream {k:03d}: FAIL (encoder exit {proc.returncode}: {proc.stderr.strip()})")
                failures.append(k)
                continue
            with open(out_path, "rb") as f:
                got = f.read()
            want = reference_vgf1_bytes(events, width, height, t_end, dt, bins, clip, tmp)
            if got == want:
                print(f"stream {k:03d}: PASS ({count} events, bins={bins})")
            else:
                print(f"stream {k:03d}: FAIL (byte mismatch)")
                failures.append(k)
    print(f"encode-check: {streams - len(failures)}/{streams} streams bit-exact")
    return failures
