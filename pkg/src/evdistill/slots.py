"""Iterative object-centric slot refinement over a pyramid feature level.

One slot per ground-truth object, initialized from the feature at the object
center and refined for T steps.  Each step projects layer-normalized slots
and pixels to queries/keys/values, softmaxes the scaled dot-product logits
over the SLOT dimension (slots compete for pixels), renormalizes each slot's
attention over pixels to form a weighted mean of values, and feeds that
update through a gated recurrent cell.

Shapes follow torch convention: slots are (L, D) rows, attention is (HW, L),
pixels are flattened row-major so cell (y, x) sits at index y * W + x.  A
batched form with a shared object count L per batch item is supported
throughout: slots (N, L, D), attention (N, HW, L).

One parameter set serves both modalities; the teacher and student branches
differ only in which feature maps they feed in.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

ATTENTION_MASS_FLOOR = 1e-8


class SlotAttention(nn.Module):
    def __init__(self, feat_dim: int):
        super().__init__()
        d = feat_dim
        self.feat_dim = d
        self.norm_inputs = nn.LayerNorm(d)
        self.norm_slots = nn.LayerNorm(d)
        self.proj_q = nn.Linear(d, d, bias=False)
        self.proj_k = nn.Linear(d, d, bias=False)
        self.proj_v = nn.Linear(d, d, bias=False)
        self.pos_proj = nn.Linear(4, d)
        # gated recurrent cell: per gate one input matrix, one state matrix, one bias
        self.gate_w = nn.Parameter(torch.empty(3, d, d))
        self.gate_u = nn.Parameter(torch.empty(3, d, d))
        self.gate_b = nn.Parameter(torch.zeros(3, d))
        for k in range(3):
            nn.init.xavier_uniform_(self.gate_w[k])
            nn.init.orthogonal_(self.gate_u[k])

    def positional_embed(self, level: torch.Tensor) -> torch.Tensor:
        """(N, D, H, W) -> (N, HW, D): layer norm plus projected coordinates."""
        squeeze = level.dim() == 3
        if squeeze:
            level = level[None]
        n, d, h, w = level.shape
        flat = level.permute(0, 2, 3, 1).reshape(n, h * w, d)
        ys, xs = torch.meshgrid(
            torch.arange(h, dtype=level.dtype, device=level.device),
            torch.arange(w, dtype=level.dtype, device=level.device),
            indexing="ij",
        )
        coords = torch.stack(
            [xs / w, ys / h, 1.0 - xs / w, 1.0 - ys / h], dim=-1
        ).reshape(h * w, 4)
        out = self.norm_inputs(flat) + self.pos_proj(coords)
        return out[0] if squeeze else out

    def _gru(self, update: torch.Tensor, state: torch.Tensor) -> torch.Tensor:
        d = self.feat_dim
        from_update = update @ self.gate_w.reshape(3 * d, d).T
        from_state = state @ self.gate_u[:2].reshape(2 * d, d).T
        z = torch.sigmoid(from_update[..., :d] + from_state[..., :d] + self.gate_b[0])
        r = torch.sigmoid(from_update[..., d : 2 * d] + from_state[..., d:] + self.gate_b[1])
        cand = torch.tanh(
            from_update[..., 2 * d :] + (r * state) @ self.gate_u[2].T + self.gate_b[2]
        )
        return (1.0 - z) * cand + z * state

    def _attention_logits(self, slots: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        q = self.proj_q(self.norm_slots(slots))  # (..., L, D)
        return (keys @ q.transpose(-1, -2)) / math.sqrt(self.feat_dim)

    def step(self, slots: torch.Tensor, embedded: torch.Tensor, keys=None, values=None):
        """One refinement step: returns (new slots, attention used for it)."""
        keys = self.proj_k(embedded) if keys is None else keys
        values = self.proj_v(embedded) if values is None else values
        attn = torch.softmax(self._attention_logits(slots, keys), dim=-1)  # over slots
        mass = attn.sum(dim=-2, keepdim=True).clamp_min(ATTENTION_MASS_FLOOR)
        weights = attn / mass  # per-slot normalization over pixels
        update = weights.transpose(-1, -2) @ values  # (..., L, D)
        return self._gru(update, slots), attn

    def init_slots(self, level: torch.Tensor, centers, stride: int) -> torch.Tensor:
        """Bilinear-sample the raw level features at the object centers.

        ``centers`` is (L, 2) of (cx, cy) in IMAGE pixels (or (N, L, 2));
        sampling coordinates are clamped to the feature grid.
        """
        squeeze = level.dim() == 3
        if squeeze:
            level = level[None]
        n, d, h, w = level.shape
        pts = torch.as_tensor(centers, dtype=level.dtype, device=level.device)
        batched_pts = pts.dim() == 3
        if not batched_pts:
            pts = pts[None].expand(n, *pts.shape)
        gx = (pts[..., 0] / stride).clamp(0, w - 1)
        gy = (pts[..., 1] / stride).clamp(0, h - 1)
        x0 = gx.floor().long().clamp(0, w - 1)
        y0 = gy.floor().long().clamp(0, h - 1)
        x1 = (x0 + 1).clamp(max=w - 1)
        y1 = (y0 + 1).clamp(max=h - 1)
        fx = (gx - x0.to(gx.dtype)).unsqueeze(-1)
        fy = (gy - y0.to(gy.dtype)).unsqueeze(-1)
        flat = level.permute(0, 2, 3, 1).reshape(n, h * w, d)

        def gather(yy, xx):
            idx = (yy * w + xx).unsqueeze(-1).expand(-1, -1, d)
            return flat.gather(1, idx)

        val = (
            gather(y0, x0) * (1 - fx) * (1 - fy)
            + gather(y0, x1) * fx * (1 - fy)
            + gather(y1, x0) * (1 - fx) * fy
            + gather(y1, x1) * fx * fy
        )
        return val[0] if squeeze else val

    def run(self, level: torch.Tensor, centers, stride: int, iterations: int,
            embedded: torch.Tensor | None = None):
        """Full refinement: returns (final slots, final attention).

        ``iterations=0`` is a testing convention: the initial slots are
        returned together with one attention evaluation, without any update.
        ``embedded`` may carry a precomputed positional embedding of
        ``level`` (the trainer reuses one embedding across object groups).
        """
        squeeze = level.dim() == 3
        lvl = level[None] if squeeze else level
        if embedded is None:
            embedded = self.positional_embed(lvl)
        elif embedded.dim() == 2:
            embedded = embedded[None]
        slots = self.init_slots(lvl, centers, stride)
        if slots.dim() == 2:
            slots = slots[None]
        if slots.shape[-2] == 0:
            attn = lvl.new_zeros(lvl.shape[0], embedded.shape[-2], 0)
            return (slots[0], attn[0]) if squeeze else (slots, attn)
        if iterations == 0:
            attn = torch.softmax(
                self._attention_logits(slots, self.proj_k(embedded)), dim=-1
            )
        else:
            keys, values = self.proj_k(embedded), self.proj_v(embedded)
            for _ in range(iterations):
                slots, attn = self.step(slots, embedded, keys, values)
        return (slots[0], attn[0]) if squeeze else (slots, attn)
