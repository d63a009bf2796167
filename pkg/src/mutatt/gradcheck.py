"""Finite-difference verification of tape gradients.

The check treats the model as a black-box scalar function of a named set of
parameter tensors: one backward pass supplies analytic gradients, central
differences on each entry supply an independent numeric estimate, and the
relative error is reported per tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad

__all__ = ["GradCheckReport", "numeric_gradient", "finite_difference_check"]

# guard against vanishing denominators when both gradients are ~0
_REL_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    """Per-tensor worst relative error between analytic and numeric gradients."""

    max_rel_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def numeric_gradient(f: Callable[[], Tensor], t: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. every entry of ``t``.

    Mutates ``t.data`` in place entry by entry and restores it; ``f`` must
    re-run the forward pass from the tensors it closes over.
    """
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            up = float(f().data)
            flat[i] = saved - step
            down = float(f().data)
            flat[i] = saved
            if not np.isfinite(up) or not np.isfinite(down):
                raise ValueError(f"non-finite objective while perturbing entry {i}")
            gflat[i] = (up - down) / (2.0 * step)
    return grad


def finite_difference_check(f: Callable[[], Tensor],
                            tensors: dict[str, Tensor],
                            step: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    Relative error per entry is |a - n| / max(|a|, |n|, 1e-8); the report
    carries the max over entries for each named tensor and overall.
    """
    for name, t in tensors.items():
        if not t.requires_grad:
            raise ValueError(f"tensor {name!r} does not track gradients")
        t.zero_grad()

    loss = f()
    loss.backward()
    analytic = {name: t.grad.copy() for name, t in tensors.items()}

    per_tensor: dict[str, float] = {}
    worst = 0.0
    for name, t in tensors.items():
        try:
            numeric = numeric_gradient(f, t, step=step)
        except ValueError as exc:
            raise ValueError(f"{name}: {exc}") from None
        a, n = analytic[name], numeric
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), _REL_FLOOR)
        rel = float((np.abs(a - n) / denom).max()) if a.size else 0.0
        per_tensor[name] = rel
        worst = max(worst, rel)
    return GradCheckReport(max_rel_error=worst, per_tensor=per_tensor)
