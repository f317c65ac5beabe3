"""Random problem instances for the gradient checks.

Each sampler returns both the differentiable pieces and a closure-friendly
set of tensors; the matching ``*_scalar`` helpers build ``(scalar, kinks)``
pairs where ``kinks`` collects every breakpoint argument (relu inputs, L1
residuals) so the finite-difference oracle can skip breakpoint crossings.
"""

from __future__ import annotations

import torch

from evdistill.align import CoarseAligner, FineAligner, attn_alignment_loss, mask_student_features
from evdistill.detector import detection_loss, render_targets
from evdistill.objdistill import AuxHead, affinity, aux_loss, relation_loss, slot_feature_loss


KINK_CLEARANCE = 0.03  # min |breakpoint argument|, >> finite-difference step


def sample_alignment_instance(seed: int, d=8, h=4, w=4, n_obj=3):
    # relu breakpoint arguments must dwarf the finite-difference step for
    # the oracle to apply: scale features and weights up, then reject draws
    # where any breakpoint argument sits near zero
    for attempt in range(200):
        g = torch.Generator().manual_seed(seed * 1000 + attempt)
        torch.manual_seed(seed * 1000 + attempt)
        coarse = CoarseAligner(d).double()
        fine = FineAligner(d).double()
        with torch.no_grad():
            for m in list(coarse.modules()) + list(fine.modules()):
                if isinstance(m, torch.nn.Conv2d):
                    m.weight.mul_(4.0)
        student = (8.0 * torch.randn(d, h, w, generator=g, dtype=torch.float64)).requires_grad_(True)
        teacher = 8.0 * torch.randn(d, h, w, generator=g, dtype=torch.float64)
        attn_s = torch.rand(h * w, n_obj, generator=g, dtype=torch.float64) + 0.05
        attn_t = torch.rand(h * w, n_obj, generator=g, dtype=torch.float64) + 0.05
        with torch.no_grad():
            _, kinks = alignment_scalar(coarse, fine, student, attn_s, attn_t, teacher)
        if float(kinks.abs().min()) > KINK_CLEARANCE:
            return coarse, fine, student, attn_s, attn_t, teacher
    raise RuntimeError("no clear alignment instance found")


def alignment_scalar(coarse, fine, student, attn_s, attn_t, teacher):
    pre1 = coarse.conv1(student[None])
    aligned = coarse.conv2(torch.relu(pre1))[0]
    masked = mask_student_features(aligned, attn_s)
    f1 = fine.conv1(masked)
    f2 = fine.conv2(torch.relu(f1))
    refined = fine.conv3(torch.relu(f2))
    teacher_masks = attn_t.detach().T.reshape(-1, 1, *teacher.shape[1:])
    residual = (refined - teacher.detach()[None]) ** 2
    loss = (residual * teacher_masks).sum() / teacher_masks.sum()
    kinks = torch.cat([pre1.reshape(-1), f1.reshape(-1), f2.reshape(-1)])
    return loss, kinks.detach()


def sample_slot_pair(seed: int, n_obj=3, d=8):
    g = torch.Generator().manual_seed(seed)
    qs = torch.randn(n_obj, d, generator=g, dtype=torch.float64).requires_grad_(True)
    qt = torch.randn(n_obj, d, generator=g, dtype=torch.float64)
    return qs, qt


def slot_feature_scalar(qs, qt):
    return slot_feature_loss(qs, qt), (qs - qt).reshape(-1).detach()


def relation_scalar(qs, qt):
    return relation_loss(affinity(qs), affinity(qt)), None


def sample_aux_instance(seed: int, n_obj=3, d=8, k=3):
    for attempt in range(200):
        torch.manual_seed(seed * 1000 + attempt)
        g = torch.Generator().manual_seed(seed * 1000 + attempt)
        head = AuxHead(d, k).double()
        slots = torch.randn(n_obj, d, generator=g, dtype=torch.float64).requires_grad_(True)
        cats = torch.randint(0, k, (n_obj,), generator=g)
        sizes = torch.rand(n_obj, 2, generator=g, dtype=torch.float64)
        with torch.no_grad():
            _, kinks = aux_scalar(head, slots, cats, sizes)
        if float(kinks.abs().min()) > KINK_CLEARANCE:
            return head, slots, cats, sizes
    raise RuntimeError("no clear aux instance found")


def aux_scalar(head, slots, cats, sizes, beta=50.0):
    loss = aux_loss(head, slots, cats, sizes, beta)
    with torch.no_grad():
        pre = head.hidden(slots)
        _, pred_sizes = head(slots)
    kinks = torch.cat([pre.reshape(-1), (pred_sizes - sizes).reshape(-1)])
    return loss, kinks


def sample_detection_instance(seed: int, image_size=32, k=3, n_obj=3):
    """Head outputs for the 3 levels of a 32-pixel image (HW=16 at stride 8)."""
    g = torch.Generator().manual_seed(seed)
    boxes = torch.stack(
        [
            torch.rand(n_obj, generator=g) * 20 + 6,
            torch.rand(n_obj, generator=g) * 20 + 6,
            torch.rand(n_obj, generator=g) * 8 + 4,
            torch.rand(n_obj, generator=g) * 8 + 4,
        ],
        dim=1,
    ).double()
    cats = torch.randint(0, k, (n_obj,), generator=g)
    targets = render_targets(boxes.numpy(), cats.numpy(), image_size, k)
    outputs = []
    for side in (4, 2, 1):
        outputs.append(
            {
                "hm": torch.randn(k, side, side, generator=g, dtype=torch.float64)
                .requires_grad_(True),
                "off": torch.rand(2, side, side, generator=g, dtype=torch.float64)
                .requires_grad_(True),
                "size": (torch.rand(2, side, side, generator=g, dtype=torch.float64) * 4)
                .requires_grad_(True),
            }
        )
    return outputs, targets


def detection_scalar(outputs, targets):
    loss = detection_loss(outputs, targets)
    kinks = []
    with torch.no_grad():
        for out, tgt in zip(outputs, targets):
            if len(tgt["pos"]):
                iy, ix = tgt["pos"][:, 0], tgt["pos"][:, 1]
                kinks.append(
                    (out["off"][:, iy, ix].T - torch.as_tensor(tgt["off"]).double()).reshape(-1)
                )
                kinks.append(
                    (out["size"][:, iy, ix].T - torch.as_tensor(tgt["size"]).double()).reshape(-1)
                )
    return loss, torch.cat(kinks) if kinks else None
