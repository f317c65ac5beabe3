"""Procedural paired-modality dataset: moving shapes, frames, events, labels.

Each sample is one time window: a scene of moving antialiased shapes over a
low-frequency background, rendered at 1 kHz sub-frames.  A log-intensity
threshold model turns consecutive sub-frames into polarity events, which are
accumulated into a normalized voxel grid.  The grayscale frame at the window
end, the voxel grid, and the bounding boxes at the window end form one
aligned (teacher-input, student-input, labels) triple.

Sample generation is deterministic: sample ``id`` under dataset seed ``s``
draws everything from a counter-based Philox stream keyed by ``(s, id)``,
so datasets are reproducible byte-for-byte and generation could proceed in
any order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .events import (
    EVENT_DTYPE,
    EventWindow,
    VoxelGrid,
    accumulate_voxel_grid,
    normalize_voxel_grid,
    read_events,
    read_voxel_grid,
    write_events,
    write_voxel_grid,
)

CATEGORY_NAMES = ("disk", "box", "triangle")
NUM_CATEGORIES = len(CATEGORY_NAMES)

LOG_EPS = 1e-3
SUBFRAME_US = 1000  # event simulation clock, 1 kHz


@dataclass
class SceneObject:
    """One moving shape; ``center`` is its position at the scene reference time."""

    category: int
    center: tuple[float, float]
    half_extent: tuple[float, float]
    velocity: tuple[float, float]  # pixels / second
    intensity: float


@dataclass
class Scene:
    width: int
    height: int
    objects: list[SceneObject]
    bg_params: np.ndarray  # rows of (amp, fx, fy, phase)
    t_ref: int  # microseconds; object centers are defined at this time
    _bg_cache: np.ndarray | None = field(default=None, repr=False)

    def background(self) -> np.ndarray:
        if self._bg_cache is None:
            ys, xs = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
            bg = np.full((self.height, self.width), 0.5)
            for amp, fx, fy, phase in self.bg_params:
                bg += amp * np.sin(
                    2 * np.pi * (fx * xs / self.width + fy * ys / self.height + phase)
                )
            self._bg_cache = np.clip(bg, 0.35, 0.65)
        return self._bg_cache


def _coverage(obj: SceneObject, cx: float, cy: float, xs, ys) -> np.ndarray:
    """Antialiased coverage in [0, 1] with a one-pixel soft edge."""
    hx, hy = obj.half_extent
    if obj.category == 0:  # disk, radius hx
        r = np.hypot(xs - cx, ys - cy)
        return np.clip(hx - r + 0.5, 0.0, 1.0)
    if obj.category == 1:  # axis-aligned box
        cov_x = np.clip(hx - np.abs(xs - cx) + 0.5, 0.0, 1.0)
        cov_y = np.clip(hy - np.abs(ys - cy) + 0.5, 0.0, 1.0)
        return cov_x * cov_y
    # isoceles triangle, apex up: intersection of three half planes
    ax, ay = cx, cy - hy
    bx, by = cx - hx, cy + hy
    qx, qy = cx + hx, cy + hy
    cov = np.ones_like(xs)
    for (x1, y1), (x2, y2) in (((ax, ay), (bx, by)), ((bx, by), (qx, qy)), ((qx, qy), (ax, ay))):
        # inward distance to the edge line (vertices wind counterclockwise)
        nx, ny = (y2 - y1), -(x2 - x1)
        norm = np.hypot(nx, ny)
        d = ((xs - x1) * nx + (ys - y1) * ny) / norm
        cov = cov * np.clip(d + 0.5, 0.0, 1.0)
    return cov


def render_frame(scene: Scene, t_us: int) -> np.ndarray:
    """Render the scene at time t as an H x W float32 image in [0, 1]."""
    frame = scene.background().copy()
    dt_s = (t_us - scene.t_ref) / 1e6
    for obj in scene.objects:
        cx = obj.center[0] + obj.velocity[0] * dt_s
        cy = obj.center[1] + obj.velocity[1] * dt_s
        hx, hy = obj.half_extent
        x0 = max(int(np.floor(cx - hx - 2)), 0)
        x1 = min(int(np.ceil(cx + hx + 2)) + 1, scene.width)
        y0 = max(int(np.floor(cy - hy - 2)), 0)
        y1 = min(int(np.ceil(cy + hy + 2)) + 1, scene.height)
        if x0 >= x1 or y0 >= y1:
            continue  # fully outside: not drawn
        ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
        cov = _coverage(obj, cx, cy, xs, ys)
        patch = frame[y0:y1, x0:x1]
        frame[y0:y1, x0:x1] = patch * (1.0 - cov) + obj.intensity * cov
    return frame.astype(np.float32)


class EventSimulator:
    """Log-intensity threshold model with per-pixel residual state.

    A pixel emits ``floor(|d| / theta)`` events of polarity ``sign(d)`` per
    frame pair, where d is measured against the pixel's reference log
    intensity; the reference then advances by the emitted quanta so residual
    contrast below threshold carries over to later pairs.
    """

    def __init__(self, frame0: np.ndarray, theta: float):
        if theta <= 0:
            raise ValueError(f"theta must be positive, got {theta}")
        self.theta = float(theta)
        self.ref_log = np.log(frame0.astype(np.float64) + LOG_EPS)

    def step(self, frame: np.ndarray, t_prev: int, t_curr: int) -> np.ndarray:
        if frame.shape != self.ref_log.shape:
            raise ValueError(
                f"frame shape {frame.shape} does not match {self.ref_log.shape}"
            )
        if t_curr <= t_prev:
            raise ValueError("t_curr must be after t_prev")
        d = np.log(frame.astype(np.float64) + LOG_EPS) - self.ref_log
        counts = np.floor(np.abs(d) / self.theta).astype(np.int64)
        pol = np.where(d >= 0, 1, -1).astype(np.int64)
        self.ref_log += pol * counts * self.theta
        total = int(counts.sum())
        if total == 0:
            return np.zeros(0, dtype=EVENT_DTYPE)

        h, w = frame.shape
        flat_counts = counts.ravel()
        active = np.flatnonzero(flat_counts)
        n_pix = np.repeat(flat_counts[active], flat_counts[active])
        pix = np.repeat(active, flat_counts[active])
        starts = np.cumsum(flat_counts[active]) - flat_counts[active]
        j = np.arange(total) - np.repeat(starts, flat_counts[active]) + 1
        # event j of n sits at t_prev + ceil(j * delta / n): inside (t_prev, t_curr]
        delta = t_curr - t_prev
        t = t_prev + (j * delta + n_pix - 1) // n_pix

        ev = np.zeros(total, dtype=EVENT_DTYPE)
        ev["x"] = (pix % w).astype(np.uint16)
        ev["y"] = (pix // w).astype(np.uint16)
        ev["p"] = pol.ravel()[pix].astype(np.int16)
        ev["t"] = t.astype(np.uint64)
        order = np.lexsort((j, ev["x"], ev["y"], ev["t"]))
        return ev[order]


def simulate_events(i_prev, i_curr, theta: float, t_prev: int, t_curr: int) -> np.ndarray:
    """Single-pair event simulation (fresh reference state from ``i_prev``)."""
    sim = EventSimulator(np.asarray(i_prev), theta)
    return sim.step(np.asarray(i_curr), t_prev, t_curr)


@dataclass
class LabeledSample:
    """Aligned grayscale frame, voxel grid, and box labels of one window."""

    gray: np.ndarray  # H x W float32 in [0, 1]
    voxel: VoxelGrid  # normalized
    boxes: np.ndarray  # L x 4 float32 (cx, cy, w, h) in pixels
    categories: np.ndarray  # L int64
    sample_id: int
    seed: int

    def validate(self) -> None:
        h, w = self.gray.shape
        if self.gray.min() < 0.0 or self.gray.max() > 1.0:
            raise ValueError("gray values outside [0, 1]")
        self.voxel.validate()
        if not self.voxel.normalized:
            raise ValueError("sample voxel grid must be normalized")
        if (self.voxel.height, self.voxel.width) != (h, w):
            raise ValueError("gray and voxel shapes disagree")
        if len(self.boxes) != len(self.categories):
            raise ValueError("boxes and categories length mismatch")
        for cx, cy, bw, bh in self.boxes:
            if bw <= 0 or bh <= 0:
                raise ValueError("box with nonpositive size")
            if cx - bw / 2 < -1e-3 or cx + bw / 2 > w + 1e-3:
                raise ValueError("box outside image bounds")
            if cy - bh / 2 < -1e-3 or cy + bh / 2 > h + 1e-3:
                raise ValueError("box outside image bounds")


def _sample_rng(seed: int, sample_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, sample_id]))


def _sample_scene(rng: np.random.Generator, cfg) -> Scene:
    size = cfg.image_size
    max_half = 14.0
    if 2 * max_half + 4 >= size:
        raise ValueError(f"image_size {size} too small for the object size range")
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    bg = np.stack(
        [
            rng.uniform(0.04, 0.08, 2),
            rng.uniform(0.5, 2.0, 2),
            rng.uniform(0.5, 2.0, 2),
            rng.uniform(0.0, 1.0, 2),
        ],
        axis=1,
    )
    objects = []
    for _ in range(n_obj):
        category = int(rng.integers(0, NUM_CATEGORIES))
        if category == 0:
            r = rng.uniform(3.0, 9.0)
            half = (r, r)
        else:
            hx = rng.uniform(3.0, max_half)
            hy = float(np.clip(hx * rng.uniform(0.6, 1.67), 3.0, max_half))
            half = (hx, hy)
        margin = max(half) + 1.0
        center = (
            rng.uniform(margin, size - margin),
            rng.uniform(margin, size - margin),
        )
        speed = rng.uniform(30.0, 220.0)
        angle = rng.uniform(0.0, 2 * np.pi)
        velocity = (speed * np.cos(angle), speed * np.sin(angle))
        # dark-or-bright intensities keep >= 0.17 contrast to the background band
        if rng.random() < 0.5:
            intensity = rng.uniform(0.02, 0.18)
        else:
            intensity = rng.uniform(0.82, 0.98)
        objects.append(SceneObject(category, center, half, velocity, intensity))
    return Scene(size, size, objects, bg, t_ref=cfg.dt_us)


def _label_boxes(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    boxes, cats = [], []
    for obj in scene.objects:
        cx, cy = obj.center
        hx, hy = obj.half_extent
        x0, x1 = max(cx - hx, 0.0), min(cx + hx, float(scene.width))
        y0, y1 = max(cy - hy, 0.0), min(cy + hy, float(scene.height))
        if x1 - x0 < 2.0 or y1 - y0 < 2.0:
            continue  # fully or almost fully outside: not labeled
        boxes.append(((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0))
        cats.append(obj.category)
    if not boxes:
        return np.zeros((0, 4), np.float32), np.zeros(0, np.int64)
    return np.asarray(boxes, np.float32), np.asarray(cats, np.int64)


def generate_sample(cfg, seed: int, sample_id: int) -> tuple[LabeledSample, EventWindow]:
    rng = _sample_rng(seed, sample_id)
    scene = _sample_scene(rng, cfg)
    t0, t_end = 0, cfg.dt_us

    times = list(range(t0, t_end + 1, SUBFRAME_US))
    if times[-1] != t_end:
        times.append(t_end)
    sim = EventSimulator(render_frame(scene, times[0]), cfg.theta)
    chunks = []
    for t_prev, t_curr in zip(times[:-1], times[1:]):
        chunks.append(sim.step(render_frame(scene, t_curr), t_prev, t_curr))
    events = np.concatenate(chunks) if chunks else np.zeros(0, dtype=EVENT_DTYPE)
    # the window is half open; the final sub-frame boundary lands on t_end
    events = events[events["t"] < np.uint64(t_end)]
    order = np.argsort(events["t"], kind="stable")
    window = EventWindow(events[order], t0, cfg.dt_us, scene.width, scene.height)

    voxel = normalize_voxel_grid(accumulate_voxel_grid(window, cfg.bins), cfg.clip)
    boxes, cats = _label_boxes(scene)
    sample = LabeledSample(
        gray=render_frame(scene, t_end),
        voxel=voxel,
        boxes=boxes,
        categories=cats,
        sample_id=sample_id,
        seed=seed,
    )
    return sample, window


def generate_dataset(cfg, seed: int, count: int, start_id: int = 0):
    """Yield (LabeledSample, EventWindow) pairs for ids [start_id, start_id+count)."""
    for sample_id in range(start_id, start_id + count):
        yield generate_sample(cfg, seed, sample_id)


def apply_augmentation(sample: LabeledSample, flip: bool, gain: float, contrast: float) -> LabeledSample:
    """Deterministic core of augment_pair; both modalities get the same draw.

    The grayscale image takes the brightness gain multiplicatively and the
    contrast gain about the 0.5 midpoint; the voxel grid takes both about its
    0.5 midpoint (its zero-accumulation level).  Results are re-clipped.
    """
    gray, voxel, boxes = sample.gray, sample.voxel.values, sample.boxes.copy()
    if flip:
        gray = gray[:, ::-1].copy()
        voxel = voxel[:, :, ::-1].copy()
        if len(boxes):
            boxes[:, 0] = sample.gray.shape[1] - boxes[:, 0]
    if gain != 1.0 or contrast != 1.0:
        gray = np.clip(gain * gray, 0.0, 1.0)
        gray = np.clip(0.5 + contrast * (gray - 0.5), 0.0, 1.0)
        voxel = np.clip(0.5 + (gain * contrast) * (voxel - 0.5), 0.0, 1.0)
    vg = VoxelGrid(sample.voxel.bins, sample.voxel.height, sample.voxel.width,
                   voxel, normalized=True)
    return LabeledSample(gray.astype(np.float32), vg, boxes,
                         sample.categories.copy(), sample.sample_id, sample.seed)


def augment_pair(sample: LabeledSample, rng: np.random.Generator) -> LabeledSample:
    """Horizontal flip with p=0.5 plus joint brightness/contrast jitter."""
    flip = bool(rng.random() < 0.5)
    gain = float(rng.uniform(0.9, 1.1))
    contrast = float(rng.uniform(0.9, 1.1))
    return apply_augmentation(sample, flip, gain, contrast)


# --- dataset directory layout -------------------------------------------------

def write_pgm(path, image01: np.ndarray) -> None:
    """8-bit binary PGM (P5)."""
    data = np.floor(np.clip(image01, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P5" or fields[3] != b"255":
        raise ValueError(f"unsupported PGM header {fields}")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=pos)
    return (data.reshape(h, w).astype(np.float32)) / 255.0


def save_dataset(cfg, data_dir) -> None:
    """Generate and write the train and val splits under ``data_dir``."""
    samples_dir = os.path.join(data_dir, "samples")
    os.makedirs(samples_dir, exist_ok=True)
    manifest = []
    total = cfg.train_samples + cfg.val_samples
    for sample_id in range(total):
        sample, window = generate_sample(cfg, cfg.data_seed, sample_id)
        sample.validate()
        stem = os.path.join(samples_dir, f"{sample_id:05d}")
        write_pgm(stem + ".gray.pgm", sample.gray)
        write_events(stem + ".evt1", window.sensor_w, window.sensor_h, window.events)
        write_voxel_grid(stem + ".vgf1", sample.voxel)
        with open(stem + ".labels.tsv", "w") as f:
            for (cx, cy, w, h), cat in zip(sample.boxes, sample.categories):
                f.write(f"{cat}\t{cx:.4f}\t{cy:.4f}\t{w:.4f}\t{h:.4f}\n")
        split = "train" if sample_id < cfg.train_samples else "val"
        manifest.append(f"{sample_id:05d}\t{split}\n")
    with open(os.path.join(data_dir, "manifest.tsv"), "w") as f:
        f.writelines(manifest)


def load_dataset(data_dir, split: str) -> list[LabeledSample]:
    manifest_path = os.path.join(data_dir, "manifest.tsv")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    samples = []
    with open(manifest_path) as f:
        for line in f:
            sid, sp = line.split()
            if sp != split:
                continue
            stem = os.path.join(data_dir, "samples", sid)
            gray = read_pgm(stem + ".gray.pgm")
            voxel = read_voxel_grid(stem + ".vgf1")
            boxes, cats = [], []
            with open(stem + ".labels.tsv") as lf:
                for row in lf:
                    cat, cx, cy, w, h = row.split("\t")
                    boxes.append((float(cx), float(cy), float(w), float(h)))
                    cats.append(int(cat))
            samples.append(
                LabeledSample(
                    gray=gray,
                    voxel=voxel,
                    boxes=np.asarray(boxes, np.float32).reshape(-1, 4),
                    categories=np.asarray(cats, np.int64),
                    sample_id=int(sid),
                    seed=-1,
                )
            )
    if not samples:
        raise ValueError(f"split {split!r} is empty in {data_dir}")
    return samples
