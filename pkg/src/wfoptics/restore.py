"""Patchwise Wiener deconvolution, the desk-scale stand-in for a decoder."""

from __future__ import annotations

import math

import torch

from .scene import PatchGrid, PsfBank, patch_field_angle


def wiener_filter(patch: torch.Tensor, kernel: torch.Tensor, snr: float) -> torch.Tensor:
    """Single-kernel Wiener restoration of a (C, H, W) or (H, W) patch.

    W = conj(H) / (|H|^2 + 1/snr) applied in the frequency domain with
    linear-convolution padding; the kernel is centered on its (h//2, w//2)
    cell to match the forward blur convention.
    """
    if snr <= 0:
        raise ValueError("snr must be > 0")
    squeeze = patch.ndim == 2
    if squeeze:
        patch = patch[None]
    kh, kw = kernel.shape
    hh, ww = patch.shape[-2:]
    fh, fw = hh + kh - 1, ww + kw - 1
    img_f = torch.fft.rfft2(patch, s=(fh, fw))
    ker_f = torch.fft.rfft2(kernel, s=(fh, fw))
    wien = torch.conj(ker_f) / (torch.abs(ker_f) ** 2 + 1.0 / snr)
    full = torch.fft.irfft2(img_f * wien, s=(fh, fw))
    # the inverse kernel shifts content up-left by the kernel center; roll
    # it back before cropping so the restored frame aligns with the input
    full = torch.roll(full, shifts=(kh // 2, kw // 2), dims=(-2, -1))
    out = full[..., :hh, :ww]
    return out[0] if squeeze else out


def restore_shift_variant(
    measurement: torch.Tensor,
    bank: PsfBank,
    grid: PatchGrid,
    snr: float,
    pixel_pitch_mm: float = 0.005,
    lens_to_sensor_mm: float = 35.0,
    depth_m: float = math.inf,
) -> torch.Tensor:
    """Per-patch Wiener restoration blended exactly like the renderer."""
    measurement = torch.as_tensor(measurement, dtype=torch.float64)
    if measurement.ndim == 2:
        measurement = measurement[None]
    rows, cols = grid.layout
    out = torch.zeros_like(measurement)
    for r in range(rows):
        for c in range(cols):
            rs, cs = grid.patch_slices(r, c)
            angle = patch_field_angle(grid, r, c, pixel_pitch_mm, lens_to_sensor_mm)
            kernels = bank.kernels_for(angle, [depth_m])[0]  # (C, h, w)
            patch = measurement[:, rs, cs]
            restored = torch.stack(
                [
                    wiener_filter(patch[ch], kernels[min(ch, kernels.shape[0] - 1)], snr)
                    for ch in range(patch.shape[0])
                ]
            )
            w = grid.blend_profile(r, rows)[:, None] * grid.blend_profile(c, cols)[None, :]
            out[:, rs, cs] += restored * w
    return out


def psnr(pred: torch.Tensor, reference: torch.Tensor) -> float:
    """10*log10(1/MSE) on linear [0, 1] intensity; inf for identical frames."""
    pred = torch.as_tensor(pred, dtype=torch.float64)
    reference = torch.as_tensor(reference, dtype=torch.float64)
    mse = float(torch.mean((pred - reference) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
