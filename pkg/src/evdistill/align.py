"""Pixel-feature alignment: coarse aligner, per-object masking, masked loss.

The student's pyramid features first pass a two-conv coarse aligner into the
teacher's feature space.  Each object's (gradient-detached) student attention
column then masks the aligned map, a three-conv fine aligner refines every
masked map, and the squared residual to the teacher feature is averaged
under the (detached) teacher attention mask:

    loss = sum_i sum_{pixels, channels} (fine(masked_i) - F_teacher)^2 * A_i
           / sum_i sum_pixels A_i

The mask is spatial and broadcast over channels, so the denominator carries
no channel factor.  Teacher features and both attention maps are constants
for differentiation; gradients flow only through the student features and
the two aligners.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

MASS_FLOOR = 1e-8


class CoarseAligner(nn.Module):
    """conv3x3 / relu / conv3x3, spatial size preserving."""

    def __init__(self, feat_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(feat_dim, feat_dim, 3, padding=1)
        self.conv2 = nn.Conv2d(feat_dim, feat_dim, 3, padding=1)

    def forward(self, x):
        return self.conv2(F.relu(self.conv1(x)))


class FineAligner(nn.Module):
    """conv3x3 / relu / conv3x3 / relu / conv3x3, spatial size preserving."""

    def __init__(self, feat_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(feat_dim, feat_dim, 3, padding=1)
        self.conv2 = nn.Conv2d(feat_dim, feat_dim, 3, padding=1)
        self.conv3 = nn.Conv2d(feat_dim, feat_dim, 3, padding=1)

    def forward(self, x):
        return self.conv3(F.relu(self.conv2(F.relu(self.conv1(x)))))


def attention_masks(attn: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """(HW, L) attention -> detached per-object masks (L, 1, H, W)."""
    return attn.detach().T.reshape(-1, 1, height, width)


def mask_student_features(student_aligned: torch.Tensor, student_attn: torch.Tensor) -> torch.Tensor:
    """Per-object student maps: detached attention times the aligned features.

    ``student_aligned`` is (D, H, W); ``student_attn`` is (HW, L).  Returns
    (L, D, H, W).  No gradient reaches the attention through this product.
    """
    d, h, w = student_aligned.shape
    masks = attention_masks(student_attn, h, w)
    return masks * student_aligned[None]


def attn_alignment_loss(
    masked_student: torch.Tensor,
    teacher_level: torch.Tensor,
    teacher_attn: torch.Tensor,
    fine: FineAligner,
) -> torch.Tensor:
    """Teacher-attention-weighted squared error of fine-aligned object maps."""
    if masked_student.shape[0] == 0:
        return teacher_level.new_zeros(())
    d, h, w = teacher_level.shape
    teacher_masks = attention_masks(teacher_attn, h, w)  # (L, 1, H, W)
    residual = (fine(masked_student) - teacher_level.detach()[None]) ** 2
    numerator = (residual * teacher_masks).sum()
    denominator = teacher_masks.sum()
    if denominator < MASS_FLOOR:
        return teacher_level.new_zeros(())
    return numerator / denominator


def masked_alignment_batch(
    student_aligned: torch.Tensor,
    teacher_level: torch.Tensor,
    student_attn: torch.Tensor,
    teacher_attn: torch.Tensor,
    fine: FineAligner,
) -> torch.Tensor:
    """Per-sample alignment losses for a batch sharing one object count.

    ``student_aligned``/``teacher_level`` are (N, D, H, W); the attention
    maps are (N, HW, L).  Returns (N,) of per-sample losses; equivalent to
    looping mask_student_features + attn_alignment_loss per sample, but with
    a single fine-aligner pass over all N*L masked maps.
    """
    n, d, h, w = student_aligned.shape
    n_obj = student_attn.shape[-1]
    if n_obj == 0:
        return student_aligned.new_zeros(n)
    masks_s = student_attn.detach().transpose(1, 2).reshape(n, n_obj, 1, h, w)
    masks_t = teacher_attn.detach().transpose(1, 2).reshape(n, n_obj, 1, h, w)
    masked = (masks_s * student_aligned[:, None]).reshape(n * n_obj, d, h, w)
    refined = fine(masked).reshape(n, n_obj, d, h, w)
    residual = (refined - teacher_level.detach()[:, None]) ** 2
    numerator = (residual * masks_t).sum(dim=(1, 2, 3, 4))
    denominator = masks_t.sum(dim=(1, 2, 3, 4))
    safe = denominator.clamp_min(MASS_FLOOR)
    return torch.where(denominator < MASS_FLOOR, torch.zeros_like(safe), numerator / safe)


def full_region_loss(student_aligned, teacher_level) -> torch.Tensor:
    """Ablation: plain mean squared error over the whole level."""
    return ((student_aligned - teacher_level.detach()) ** 2).mean()


def fg_region_loss(student_aligned, teacher_level, boxes, stride: int) -> torch.Tensor:
    """Ablation: mean squared error restricted to ground-truth box cells."""
    d, h, w = teacher_level.shape
    mask = torch.zeros(1, h, w, dtype=student_aligned.dtype, device=student_aligned.device)
    for cx, cy, bw, bh in boxes:
        x0 = int(max((cx - bw / 2) / stride, 0))
        x1 = int(min((cx + bw / 2) / stride + 1, w))
        y0 = int(max((cy - bh / 2) / stride, 0))
        y1 = int(min((cy + bh / 2) / stride + 1, h))
        mask[0, y0:y1, x0:x1] = 1.0
    total = mask.sum()
    if total < 1.0:
        return student_aligned.new_zeros(())
    residual = (student_aligned - teacher_level.detach()) ** 2
    return (residual * mask).sum() / (total * d)
