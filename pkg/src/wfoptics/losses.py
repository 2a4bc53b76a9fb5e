"""Image, depth, and PSF-concentration losses plus dynamic weight averaging.

The total objective is a weighted sum over four slots (c0: image MSE,
c1: perceptual, c2: depth L1, c3: PSF focus); the perceptual slot exists in
the weight vector but its loss is fixed at zero here. Static per-slot
multipliers stack multiplicatively with the dynamically averaged weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

# c1 (perceptual) is carried but disabled in both presets
STATIC_WEIGHTS_IMAGE_ONLY = (1.0, 0.0, 0.0, 1.0)  # single image head, c2 = 0
STATIC_WEIGHTS_RGBD = (0.05, 0.0, 1.0, 0.05)  # depth-weighted: c2 = 1, c0 = c3 = 0.05
STATIC_WEIGHTS_FOCUS_ONLY = (0.0, 0.0, 0.0, 1.0)

DWA_TEMPERATURE = 2.0


def loss_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over all pixels and channels."""
    pred = torch.as_tensor(pred, dtype=torch.float64) if not torch.is_tensor(pred) else pred
    target = torch.as_tensor(target, dtype=torch.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return torch.mean((pred - target) ** 2)


def loss_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference (sparsity-promoting depth loss)."""
    pred = torch.as_tensor(pred, dtype=torch.float64) if not torch.is_tensor(pred) else pred
    target = torch.as_tensor(target, dtype=torch.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return torch.mean(torch.abs(pred - target))


def focus_region_mask(shape: tuple[int, int], center: tuple[int, int] | None = None) -> torch.Tensor:
    """Boolean mask of the concentration circle O.

    O has diameter equal to half the window's smaller side, centered on the
    chief-ray landing cell (grid center by default).
    """
    ny, nx = shape
    cy, cx = (ny // 2, nx // 2) if center is None else center
    radius = min(ny, nx) / 4.0
    iy = torch.arange(ny, dtype=torch.float64)
    ix = torch.arange(nx, dtype=torch.float64)
    r2 = (iy[:, None] - cy) ** 2 + (ix[None, :] - cx) ** 2
    return r2 <= radius**2


def loss_focus(psf: torch.Tensor, center: tuple[int, int] | None = None) -> torch.Tensor:
    """PSF mass outside the concentration circle O. Requires a unit-sum PSF."""
    total = torch.sum(psf)
    if abs(float(total) - 1.0) > 1e-6:
        raise ValueError(f"PSF must be normalized to unit sum, got {float(total):.8f}")
    inside = focus_region_mask(tuple(psf.shape), center)
    return torch.sum(psf[~inside])


def concentration(psf: torch.Tensor, center: tuple[int, int] | None = None) -> float:
    """Fraction of PSF energy inside the circle O (1 - loss_focus)."""
    return 1.0 - float(loss_focus(psf, center))


def dwa_weights(history, temperature: float = DWA_TEMPERATURE) -> tuple[float, ...]:
    """Dynamic weight averaging from per-task loss histories.

    `history` is a sequence of per-step task losses (each step a sequence of
    W task values). With fewer than 3 steps all weights are 1; afterwards
    each task's descent ratio r_w = L_w(t-1)/L_w(t-2) feeds a softmax scaled
    to sum to the task count. A zero denominator pins that task's ratio at 1.
    """
    steps = [tuple(float(v) for v in row) for row in history]
    if steps and any(len(row) != len(steps[0]) for row in steps):
        raise ValueError("inconsistent task count across history steps")
    n_tasks = len(steps[0]) if steps else 0
    if len(steps) <= 2:
        return tuple(1.0 for _ in range(n_tasks))
    prev, prev2 = steps[-1], steps[-2]
    ratios = [p / q if q != 0.0 else 1.0 for p, q in zip(prev, prev2)]
    exps = [math.exp(r / temperature) for r in ratios]
    total = sum(exps)
    return tuple(n_tasks * e / total for e in exps)


@dataclass(frozen=True)
class LossReport:
    """Component losses, effective weights, and their weighted total."""

    l_mse: float
    l_l1: float
    l_focus: float
    weights: tuple[float, float, float, float]  # effective (c0, c1, c2, c3)
    total: float

    def __post_init__(self):
        vals = (self.l_mse, self.l_l1, self.l_focus, self.total, *self.weights)
        if any(not math.isfinite(v) for v in vals):
            raise ValueError("loss report contains non-finite values")
        if self.l_mse < 0 or self.l_l1 < 0 or self.l_focus < 0:
            raise ValueError("losses must be nonnegative")


def total_loss(
    l_mse,
    l_l1,
    l_focus,
    static_weights=STATIC_WEIGHTS_IMAGE_ONLY,
    dwa=(1.0, 1.0, 1.0, 1.0),
) -> tuple[torch.Tensor, LossReport]:
    """Weighted sum c0*L_mse + c1*L_percep + c2*L_1 + c3*L_focus.

    The perceptual loss is fixed at 0. Returns the differentiable total
    (when inputs are tensors) plus a detached LossReport whose weights are
    the effective static*dwa products.
    """
    c = tuple(float(s) * float(d) for s, d in zip(static_weights, dwa))
    terms = {
        "mse": torch.as_tensor(l_mse, dtype=torch.float64) if not torch.is_tensor(l_mse) else l_mse,
        "l1": torch.as_tensor(l_l1, dtype=torch.float64) if not torch.is_tensor(l_l1) else l_l1,
        "focus": torch.as_tensor(l_focus, dtype=torch.float64) if not torch.is_tensor(l_focus) else l_focus,
    }
    for name, v in terms.items():
        if not torch.isfinite(v):
            raise ValueError(f"non-finite {name} loss")
    total = c[0] * terms["mse"] + c[2] * terms["l1"] + c[3] * terms["focus"]
    report = LossReport(
        l_mse=float(terms["mse"]),
        l_l1=float(terms["l1"]),
        l_focus=float(terms["focus"]),
        weights=c,
        total=float(total),
    )
    return total, report
