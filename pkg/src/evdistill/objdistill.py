"""Object-level distillation losses and the auxiliary supervision head.

Teacher-side quantities are detached inside each loss, so the contracts
(teacher slots and teacher affinity receive no gradient) hold by
construction.  The auxiliary loss is the exception: it exists to train the
slot-attention parameters and the auxiliary head through the TEACHER slots,
keeping slots informative instead of collapsing.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

NORM_FLOOR = 1e-8


def slot_feature_loss(student_slots: torch.Tensor, teacher_slots: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between paired slots; teacher detached."""
    if student_slots.shape[-2] == 0:
        return student_slots.new_zeros(())
    return (student_slots - teacher_slots.detach()).abs().mean()


def affinity(slots: torch.Tensor) -> torch.Tensor:
    """(L, D) slots -> (L, L) cosine-similarity matrix, norms floored.

    The diagonal is pinned to exactly 1 (a slot is perfectly similar to
    itself); this is the constant the float dot product only approximates,
    and it carries zero gradient either way.
    """
    norms = slots.norm(dim=-1, keepdim=True).clamp_min(NORM_FLOOR)
    unit = slots / norms
    sim = unit @ unit.transpose(-1, -2)
    eye = torch.eye(sim.shape[-1], dtype=sim.dtype, device=sim.device)
    return sim * (1.0 - eye) + eye


def relation_loss(student_affinity: torch.Tensor, teacher_affinity: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all affinity entries; teacher detached."""
    if student_affinity.shape[-1] == 0:
        return student_affinity.new_zeros(())
    return ((student_affinity - teacher_affinity.detach()) ** 2).mean()


class AuxHead(nn.Module):
    """Two-layer perceptron from one slot to K category logits + 2 sizes."""

    def __init__(self, feat_dim: int, num_categories: int):
        super().__init__()
        self.num_categories = num_categories
        self.hidden = nn.Linear(feat_dim, feat_dim)
        self.out = nn.Linear(feat_dim, num_categories + 2)

    def forward(self, slots: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        y = self.out(F.relu(self.hidden(slots)))
        return y[..., : self.num_categories], y[..., self.num_categories :]


def aux_loss(
    head: AuxHead,
    teacher_slots: torch.Tensor,
    categories: torch.Tensor,
    size_targets: torch.Tensor,
    beta: float,
) -> torch.Tensor:
    """One-vs-all BCE on categories plus beta-weighted L1 on normalized sizes.

    ``size_targets`` is (L, 2) of (w / image_w, h / image_h).  Gradients flow
    into the head AND into the slots (by design); callers must ensure the
    slots came from detached backbone features.

    Batched inputs (N, L, ...) give the mean of the per-sample losses.
    """
    if teacher_slots.shape[-2] == 0:
        return teacher_slots.new_zeros(())
    logits, sizes = head(teacher_slots)
    onehot = F.one_hot(categories.long(), head.num_categories).to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, onehot, reduction="none")
    bce_term = bce.sum(dim=-1).mean(dim=-1)  # sum over categories, mean over slots
    l1_term = (sizes - size_targets.to(sizes.dtype)).abs().mean(dim=-1).mean(dim=-1)
    return (bce_term + beta * l1_term).mean()
