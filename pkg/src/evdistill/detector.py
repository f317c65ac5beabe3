"""Tiny anchor-free center-based detector with a three-level feature pyramid.

One architecture serves both modalities: the grayscale teacher uses a
1-channel stem, the voxel student a B-channel stem, and everything after the
stem is shape-identical.  The pyramid levels (strides 8/16/32, shared channel
count D) are both the detection head's input and the distillation substrate.

Detection follows the center-heatmap recipe: per-level K-category heatmaps
with Gaussian-splatted targets and a penalty-reduced focal loss, plus L1 on
center offsets and stride-normalized box sizes at the positive cells.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .metrics import Detection, iou

STRIDES = (8, 16, 32)
BACKBONE_WIDTHS = (16, 32, 64, 64)
# objects are assigned to one pyramid level by their longest side
LEVEL_SIZE_LIMITS = (16.0, 40.0)
SIZE_LOSS_WEIGHT = 1.0
FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(8, channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = _gn(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _gn(channels)

    def forward(self, x):
        y = self.norm2(self.conv2(F.relu(self.norm1(self.conv1(x)))))
        return F.relu(x + y)


class Detector(nn.Module):
    """Backbone (4 stages) + FPN (strides 8/16/32) + shared center head."""

    def __init__(self, in_channels: int, feat_dim: int = 64, num_categories: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.feat_dim = feat_dim
        self.num_categories = num_categories

        stages = []
        prev = in_channels
        for width in BACKBONE_WIDTHS:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, width, 3, stride=2, padding=1),
                    _gn(width),
                    nn.ReLU(),
                    ResidualBlock(width),
                    ResidualBlock(width),
                )
            )
            prev = width
        self.stages = nn.ModuleList(stages)

        self.lateral3 = nn.Conv2d(BACKBONE_WIDTHS[2], feat_dim, 1)
        self.lateral4 = nn.Conv2d(BACKBONE_WIDTHS[3], feat_dim, 1)
        self.fpn_out3 = nn.Conv2d(feat_dim, feat_dim, 3, padding=1)
        self.fpn_out4 = nn.Conv2d(feat_dim, feat_dim, 3, padding=1)
        self.fpn_out5 = nn.Conv2d(feat_dim, feat_dim, 3, stride=2, padding=1)

        self.head = nn.Sequential(
            nn.Conv2d(feat_dim, feat_dim, 3, padding=1),
            _gn(feat_dim),
            nn.ReLU(),
            nn.Conv2d(feat_dim, feat_dim, 3, padding=1),
            _gn(feat_dim),
            nn.ReLU(),
        )
        self.heatmap = nn.Conv2d(feat_dim, num_categories, 1)
        self.offset = nn.Conv2d(feat_dim, 2, 1)
        self.size = nn.Conv2d(feat_dim, 2, 1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.zeros_(m.bias)
        nn.init.constant_(self.heatmap.bias, -2.19)  # sigmoid prior ~0.1

    def forward(self, x) -> tuple[list, list]:
        """Return ([P3, P4, P5], per-level dicts of hm/off/size maps)."""
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} input channels, got {x.shape[1]}"
            )
        feats = []
        c = x
        for stage in self.stages:
            c = stage(c)
            feats.append(c)
        p4 = self.lateral4(feats[3])
        p3 = self.lateral3(feats[2]) + F.interpolate(p4, scale_factor=2, mode="nearest")
        fpn = [self.fpn_out3(p3), self.fpn_out4(p4), self.fpn_out5(p4)]
        outputs = []
        for level in fpn:
            h = self.head(level)
            outputs.append(
                {"hm": self.heatmap(h), "off": self.offset(h), "size": self.size(h)}
            )
        return fpn, outputs


def assign_level(w: float, h: float) -> int:
    side = max(w, h)
    if side < LEVEL_SIZE_LIMITS[0]:
        return 0
    if side < LEVEL_SIZE_LIMITS[1]:
        return 1
    return 2


def gaussian_radius(w: float, h: float, stride: int) -> int:
    return max(1, int(round(0.35 * max(w, h) / stride)))


def render_targets(boxes, categories, image_size: int, num_categories: int):
    """Per-level heatmap / offset / size targets for one sample.

    Returns a list over levels of dicts with ``hm`` (K,H,W), ``pos`` (N,2)
    cell indices, ``off`` (N,2), ``size`` (N,2) stride-normalized targets.
    """
    targets = []
    for stride in STRIDES:
        side = (image_size + stride - 1) // stride
        targets.append(
            {
                "hm": np.zeros((num_categories, side, side), np.float32),
                "pos": [],
                "off": [],
                "size": [],
            }
        )
    for (cx, cy, w, h), cat in zip(np.atleast_2d(boxes), np.atleast_1d(categories)):
        lvl = assign_level(w, h)
        stride = STRIDES[lvl]
        t = targets[lvl]
        side = t["hm"].shape[1]
        gx, gy = cx / stride, cy / stride
        ix = min(int(gx), side - 1)
        iy = min(int(gy), side - 1)
        radius = gaussian_radius(w, h, stride)
        sigma = (2 * radius + 1) / 6.0
        y0, y1 = max(iy - radius, 0), min(iy + radius + 1, side)
        x0, x1 = max(ix - radius, 0), min(ix + radius + 1, side)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        splat = np.exp(-((xs - ix) ** 2 + (ys - iy) ** 2) / (2 * sigma**2))
        hm = t["hm"][int(cat)]
        hm[y0:y1, x0:x1] = np.maximum(hm[y0:y1, x0:x1], splat)
        hm[iy, ix] = 1.0
        t["pos"].append((iy, ix))
        t["off"].append((gx - ix, gy - iy))
        t["size"].append((w / stride, h / stride))
    for t in targets:
        t["pos"] = np.asarray(t["pos"], np.int64).reshape(-1, 2)
        t["off"] = np.asarray(t["off"], np.float32).reshape(-1, 2)
        t["size"] = np.asarray(t["size"], np.float32).reshape(-1, 2)
    return targets


def detection_loss(outputs: list, targets: list) -> torch.Tensor:
    """Penalty-reduced focal on heatmaps + L1 on offset/size at positives.

    ``outputs`` and ``targets`` are per-level lists for ONE sample (no batch
    dimension in the targets); batch code averages per-sample losses.
    """
    device = outputs[0]["hm"].device
    dtype = outputs[0]["hm"].dtype
    focal = outputs[0]["hm"].new_zeros(())
    l1_off = outputs[0]["hm"].new_zeros(())
    l1_size = outputs[0]["hm"].new_zeros(())
    n_pos = 0
    for out, tgt in zip(outputs, targets):
        logits = out["hm"]
        if logits.dim() == 4:
            logits = logits[0]
        hm = torch.as_tensor(tgt["hm"], device=device, dtype=dtype)
        pos_mask = hm == 1.0
        log_p = F.logsigmoid(logits)
        log_not_p = F.logsigmoid(-logits)
        p = torch.sigmoid(logits)
        pos_term = -((1 - p) ** FOCAL_ALPHA) * log_p
        neg_term = -((1 - hm) ** FOCAL_BETA) * (p**FOCAL_ALPHA) * log_not_p
        focal = focal + torch.where(pos_mask, pos_term, neg_term).sum()
        if len(tgt["pos"]):
            off = out["off"][0] if out["off"].dim() == 4 else out["off"]
            size = out["size"][0] if out["size"].dim() == 4 else out["size"]
            iy = torch.as_tensor(tgt["pos"][:, 0], device=device)
            ix = torch.as_tensor(tgt["pos"][:, 1], device=device)
            off_t = torch.as_tensor(tgt["off"], device=device, dtype=dtype)
            size_t = torch.as_tensor(tgt["size"], device=device, dtype=dtype)
            l1_off = l1_off + (off[:, iy, ix].T - off_t).abs().mean(dim=1).sum()
            l1_size = l1_size + (size[:, iy, ix].T - size_t).abs().mean(dim=1).sum()
            n_pos += len(tgt["pos"])
    norm = max(n_pos, 1)
    return focal / norm + l1_off / norm + SIZE_LOSS_WEIGHT * l1_size / norm


def decode_detections(
    outputs: list,
    score_thresh: float = 0.05,
    nms_iou: float = 0.6,
    topk: int = 100,
) -> list[Detection]:
    """Local-maximum peaks -> boxes, then per-category greedy NMS."""
    candidates = []
    with torch.no_grad():
        for out, stride in zip(outputs, STRIDES):
            hm = torch.sigmoid(out["hm"][0] if out["hm"].dim() == 4 else out["hm"])
            off = out["off"][0] if out["off"].dim() == 4 else out["off"]
            size = out["size"][0] if out["size"].dim() == 4 else out["size"]
            peak = hm == F.max_pool2d(hm[None], 3, stride=1, padding=1)[0]
            keep = peak & (hm >= score_thresh)
            for cat, ys, xs in zip(*torch.nonzero(keep, as_tuple=True)):
                cat, ys, xs = int(cat), int(ys), int(xs)
                cx = (xs + float(off[0, ys, xs])) * stride
                cy = (ys + float(off[1, ys, xs])) * stride
                w = max(float(size[0, ys, xs]) * stride, 1e-3)
                h = max(float(size[1, ys, xs]) * stride, 1e-3)
                candidates.append(Detection((cx, cy, w, h), cat, float(hm[cat, ys, xs])))
    candidates.sort(key=lambda d: -d.score)
    candidates = candidates[:topk]
    kept: list[Detection] = []
    for det in candidates:
        clash = any(
            k.category == det.category and iou(k.box, det.box) > nms_iou for k in kept
        )
        if not clash:
            kept.append(det)
    return kept


class EmaState:
    """Exponential moving average over a module's parameters."""

    def __init__(self, module: nn.Module, decay: float):
        if not 0.0 <= decay <= 1.0:
            raise ValueError(f"decay must be in [0, 1], got {decay}")
        self.decay = decay
        self.shadow = {
            name: p.detach().clone() for name, p in module.named_parameters()
        }

    @torch.no_grad()
    def update(self, module: nn.Module) -> None:
        for name, p in module.named_parameters():
            self.shadow[name].mul_(self.decay).add_(p.detach(), alpha=1 - self.decay)

    @torch.no_grad()
    def copy_to(self, module: nn.Module) -> None:
        for name, p in module.named_parameters():
            p.copy_(self.shadow[name])


# --- checkpoint format ---------------------------------------------------------
#
# A checkpoint is a numpy .npz archive: one float32 little-endian array per
# parameter (names straight from state_dict, EMA shadow arrays under
# "ema/<name>") plus a "__meta__" entry holding a UTF-8 JSON blob with the
# architecture and bookkeeping fields.


def save_checkpoint(
    path,
    model: Detector,
    meta: dict,
    ema: EmaState | None = None,
    extra_modules: dict | None = None,
) -> None:
    arrays = {
        name: t.detach().cpu().numpy().astype("<f4")
        for name, t in model.state_dict().items()
    }
    if ema is not None:
        for name, t in ema.shadow.items():
            arrays["ema/" + name] = t.cpu().numpy().astype("<f4")
        meta = dict(meta, ema_decay=ema.decay)
    for prefix, module in (extra_modules or {}).items():
        for name, t in module.state_dict().items():
            arrays[f"{prefix}/{name}"] = t.detach().cpu().numpy().astype("<f4")
    meta = dict(
        meta,
        in_channels=model.in_channels,
        feat_dim=model.feat_dim,
        num_categories=model.num_categories,
    )
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple[Detector, dict, dict | None]:
    """Return (model, meta, ema_shadow-or-None); the model gets raw weights."""
    with np.load(path) as archive:
        arrays = {name: archive[name] for name in archive.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    model = Detector(meta["in_channels"], meta["feat_dim"], meta["num_categories"])
    ema_arrays = {
        name[4:]: torch.from_numpy(arr.copy())
        for name, arr in arrays.items()
        if name.startswith("ema/")
    }
    state = {
        name: torch.from_numpy(arr.copy())
        for name, arr in arrays.items()
        if "/" not in name
    }
    model.load_state_dict(state)
    return model, meta, ema_arrays or None
