"""Central finite-difference gradient oracle for the differentiable modules.

The oracle perturbs each tensor element by +-h in float64 and compares the
resulting slope against autograd.  It never touches backward graphs, only
repeated forward evaluations.

Losses with relu or L1 terms are only piecewise smooth: a central difference
whose two evaluations land on different linear pieces is not a derivative
estimate at all.  Closures therefore return ``(scalar, kink_values)`` where
``kink_values`` collects every breakpoint argument (relu inputs, L1
residuals); coordinates whose perturbation flips the sign of any breakpoint
argument are excluded from the comparison.  The excluded fraction must stay
small for the check to count.
"""

from __future__ import annotations

import torch

MIN_VALID_FRACTION = 0.9


def _split(result):
    if isinstance(result, tuple):
        scalar, kinks = result
        return scalar, kinks
    return result, None


def fd_gradients(fn, tensors, h: float = 1e-3):
    """Central differences plus a per-coordinate validity mask."""
    grads, masks = [], []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            valid = torch.ones(t.numel(), dtype=torch.bool)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus, k_plus = _split(fn())
                flat[i] = orig - h
                f_minus, k_minus = _split(fn())
                flat[i] = orig
                gflat[i] = (float(f_plus) - float(f_minus)) / (2.0 * h)
                if k_plus is not None:
                    crossed = (k_plus * k_minus <= 0) & (k_plus != k_minus)
                    if bool(crossed.any()):
                        valid[i] = False
            grads.append(g)
            masks.append(valid.view_as(t))
    return grads, masks


def autograd_gradients(fn, tensors):
    scalar, _ = _split(fn())
    grads = torch.autograd.grad(scalar, tensors, allow_unused=True)
    return [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]


def max_relative_error(fn, tensors, h: float = 1e-3) -> float:
    """Worst relative gradient mismatch across the given tensors.

    Coordinates whose finite difference straddles a breakpoint are skipped;
    90% of all coordinates (and at least 40% of each tensor's, one minimum)
    must remain comparable for the check to count.
    """
    analytic = autograd_gradients(fn, tensors)
    numeric, masks = fd_gradients(fn, tensors, h)
    total = sum(m.numel() for m in masks)
    valid = sum(int(m.sum()) for m in masks)
    assert valid >= MIN_VALID_FRACTION * total, f"only {valid}/{total} checkable"
    worst = 0.0
    for a, n, m in zip(analytic, numeric, masks):
        frac = m.double().mean().item()
        assert frac >= 0.4 and int(m.sum()) >= 1, f"only {frac:.0%} checkable"
        a, n = a[m], n[m]
        denom = max(n.norm().item(), a.norm().item(), 1e-6)
        worst = max(worst, (a - n).norm().item() / denom)
    return worst
