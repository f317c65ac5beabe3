"""Event records, time windows, voxel-grid accumulation, and binary file IO.

Events are kept in a numpy structured array whose layout matches the EVT1
record on disk, so file IO is zero-copy.  The voxel-grid accumulation is the
reference implementation that any alternative encoder must reproduce
byte-for-byte; the arithmetic contract is:

* per event, the temporal coordinate is ``t* = (B - 1) * (t - t0) / dt``,
* kernel weights for the two straddled bins are computed from the exact
  integer remainder ``r = ((B - 1) * (t - t0)) mod dt`` as ``(dt - r) / dt``
  and ``r / dt`` in 64-bit float (each a single correctly rounded division),
* each signed contribution is cast to float32 and added into the grid in
  strict event order, left bin before right bin, with float32 adds.

The integer-remainder form makes the weights invariant under shifting the
window start by whole bin durations, which is what lets a rolling encoder
reuse accumulated bin planes without breaking bit-exactness.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

EVENT_DTYPE = np.dtype(
    [
        ("x", "<u2"),
        ("y", "<u2"),
        ("p", "<i2"),
        ("reserved", "<u2"),
        ("t", "<u8"),
    ]
)

EVT1_MAGIC = b"EVT1"
VGF1_MAGIC = b"VGF1"
_EVT1_HEADER = struct.Struct("<4sIIIQ")
_VGF1_HEADER = struct.Struct("<4sIIIIB3x")


class FileFormatError(ValueError):
    """Malformed EVT1/VGF1 payload; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class Event(NamedTuple):
    """A single polarity event: pixel location, polarity ±1, microsecond time."""

    x: int
    y: int
    p: int
    t: int


def events_array(events) -> np.ndarray:
    """Pack an iterable of (x, y, p, t) tuples into the structured dtype."""
    arr = np.zeros(len(events), dtype=EVENT_DTYPE)
    if len(events):
        ev = [(e[0], e[1], e[2], e[3]) for e in events]
        xs, ys, ps, ts = zip(*ev)
        arr["x"], arr["y"], arr["p"], arr["t"] = xs, ys, ps, ts
    return arr


@dataclass
class EventWindow:
    """Events of one half-open time window ``[t0, t0 + dt)``.

    ``events`` is an EVENT_DTYPE array sorted nondecreasing in t (ties keep
    their construction order).  Validation is eager: constructing a window
    with out-of-bounds coordinates, bad polarities, or out-of-window
    timestamps raises ValueError.
    """

    events: np.ndarray
    t0: int
    dt: int
    sensor_w: int
    sensor_h: int

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"window duration must be positive, got {self.dt}")
        ev = self.events
        if ev.dtype != EVENT_DTYPE:
            ev = events_array(ev)
            self.events = ev
        if len(ev) == 0:
            return
        if not np.all(np.isin(ev["p"], (-1, 1))):
            raise ValueError("polarity must be -1 or +1")
        if np.any(ev["x"] >= self.sensor_w) or np.any(ev["y"] >= self.sensor_h):
            raise ValueError("event outside sensor bounds")
        t = ev["t"].astype(np.int64)
        if np.any(t < self.t0) or np.any(t >= self.t0 + self.dt):
            raise ValueError(
                f"event timestamp outside window [{self.t0}, {self.t0 + self.dt})"
            )
        if np.any(np.diff(t) < 0):
            raise ValueError("events must be sorted nondecreasing in t")

    def __len__(self) -> int:
        return len(self.events)


@dataclass
class VoxelGrid:
    """B x H x W float32 accumulation of an event window."""

    bins: int
    height: int
    width: int
    values: np.ndarray
    normalized: bool

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.shape != (self.bins, self.height, self.width):
            raise ValueError(
                f"values shape {self.values.shape} does not match "
                f"({self.bins}, {self.height}, {self.width})"
            )

    def validate(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise ValueError("voxel grid contains non-finite values")
        if self.normalized and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ValueError("normalized grid has values outside [0, 1]")


def accumulate_voxel_grid(window: EventWindow, bins: int) -> VoxelGrid:
    """Accumulate a window into an unnormalized B x H x W voxel grid.

    Each event spreads its polarity over the at-most-two bins straddling
    ``t* = (bins - 1) * (t - t0) / dt`` with bilinear weights that sum to 1.
    Accumulation order (event order, left bin then right bin, float32 adds)
    is part of the contract: alternative encoders must match it bit-exactly.
    """
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    h, w = window.sensor_h, window.sensor_w
    flat = np.zeros(bins * h * w, dtype=np.float32)
    ev = window.events
    if len(ev) == 0:
        return VoxelGrid(bins, h, w, flat.reshape(bins, h, w), normalized=False)

    dt = int(window.dt)
    n = (bins - 1) * (ev["t"].astype(np.int64) - window.t0)
    b = n // dt
    r = n - b * dt
    # exact integer numerators -> one correctly rounded f64 division each
    w_left = (dt - r).astype(np.float64) / float(dt)
    w_right = r.astype(np.float64) / float(dt)
    pol = ev["p"].astype(np.float64)
    vals_left = (pol * w_left).astype(np.float32)
    vals_right = (pol * w_right).astype(np.float32)

    cell = ev["y"].astype(np.int64) * w + ev["x"].astype(np.int64)
    idx_left = b * (h * w) + cell
    right_ok = b + 1 < bins
    # out-of-range right bins are redirected to cell 0 with a +0.0 value,
    # which is a bitwise no-op, so one interleaved add keeps event order
    idx_right = np.where(right_ok, (b + 1) * (h * w) + cell, 0)
    vals_right = np.where(right_ok, vals_right, np.float32(0.0))

    idx = np.empty(2 * len(ev), dtype=np.int64)
    vals = np.empty(2 * len(ev), dtype=np.float32)
    idx[0::2], idx[1::2] = idx_left, idx_right
    vals[0::2], vals[1::2] = vals_left, vals_right
    np.add.at(flat, idx, vals)
    return VoxelGrid(bins, h, w, flat.reshape(bins, h, w), normalized=False)


def normalize_voxel_grid(grid: VoxelGrid, clip: float) -> VoxelGrid:
    """Clip to [-clip, clip] and map affinely to [0, 1]; zero maps to 0.5."""
    if clip <= 0:
        raise ValueError(f"clip must be positive, got {clip}")
    if grid.normalized:
        raise ValueError("grid is already normalized")
    c = np.float32(clip)
    two_c = np.float32(2.0) * c
    clipped = np.clip(grid.values, -c, c)
    out = (clipped + c) / two_c
    return VoxelGrid(grid.bins, grid.height, grid.width, out, normalized=True)


class Evt1Header(NamedTuple):
    width: int
    height: int
    count: int


def write_events(path, width: int, height: int, events: np.ndarray) -> None:
    """Write an EVT1 file: 24-byte header followed by 16-byte event records."""
    ev = events if events.dtype == EVENT_DTYPE else events_array(events)
    header = _EVT1_HEADER.pack(EVT1_MAGIC, 1, width, height, len(ev))
    with open(path, "wb") as f:
        f.write(header)
        f.write(ev.tobytes())


def read_events(path) -> tuple[Evt1Header, np.ndarray]:
    """Read an EVT1 file, validating magic, version, size, and monotone t."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _EVT1_HEADER.size:
        raise FileFormatError("truncated EVT1 header", len(raw))
    magic, version, width, height, count = _EVT1_HEADER.unpack_from(raw, 0)
    if magic != EVT1_MAGIC:
        raise FileFormatError(f"bad magic {magic!r}", 0)
    if version != 1:
        raise FileFormatError(f"unsupported EVT1 version {version}", 4)
    need = _EVT1_HEADER.size + count * EVENT_DTYPE.itemsize
    if len(raw) < need:
        raise FileFormatError(
            f"truncated EVT1 payload: need {need} bytes, have {len(raw)}", len(raw)
        )
    ev = np.frombuffer(raw, dtype=EVENT_DTYPE, count=count, offset=_EVT1_HEADER.size)
    ev = ev.copy()  # decouple from the read buffer
    t = ev["t"].astype(np.int64)
    if len(ev) and np.any(np.diff(t) < 0):
        bad = int(np.flatnonzero(np.diff(t) < 0)[0]) + 1
        raise FileFormatError(
            f"nonmonotone timestamp at record {bad}",
            _EVT1_HEADER.size + bad * EVENT_DTYPE.itemsize,
        )
    if len(ev) and not np.all(np.isin(ev["p"], (-1, 1))):
        bad = int(np.flatnonzero(~np.isin(ev["p"], (-1, 1)))[0])
        raise FileFormatError(
            f"bad polarity at record {bad}",
            _EVT1_HEADER.size + bad * EVENT_DTYPE.itemsize,
        )
    return Evt1Header(width, height, count), ev


def write_voxel_grid(path, grid: VoxelGrid) -> None:
    """Write a VGF1 file: 24-byte header then B*H*W little-endian float32."""
    header = _VGF1_HEADER.pack(
        VGF1_MAGIC, 1, grid.bins, grid.height, grid.width, int(grid.normalized)
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(grid.values.astype("<f4", copy=False).tobytes())


def read_voxel_grid(path) -> VoxelGrid:
    """Read a VGF1 file; the float32 payload round-trips bit-exactly."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _VGF1_HEADER.size:
        raise FileFormatError("truncated VGF1 header", len(raw))
    magic, version, bins, height, width, normalized = _VGF1_HEADER.unpack_from(raw, 0)
    if magic != VGF1_MAGIC:
        raise FileFormatError(f"bad magic {magic!r}", 0)
    if version != 1:
        raise FileFormatError(f"unsupported VGF1 version {version}", 4)
    need = _VGF1_HEADER.size + bins * height * width * 4
    if len(raw) != need:
        raise FileFormatError(
            f"VGF1 payload length {len(raw) - _VGF1_HEADER.size} does not match "
            f"{bins}x{height}x{width} float32",
            min(len(raw), need),
        )
    values = np.frombuffer(raw, dtype="<f4", offset=_VGF1_HEADER.size).copy()
    return VoxelGrid(
        bins, height, width, values.reshape(bins, height, width), bool(normalized)
    )
