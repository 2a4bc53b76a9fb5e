"""Occlusion-aware layered image formation with patchwise shift-variant blur.

Layers are indexed far to near (d = 0 is the farthest). Nearer layers'
blurred alpha masks attenuate farther layers; each layer is normalized by
the blurred cumulative coverage U_d, clamped below to avoid dividing by
zero where no layer is present. The `*` of the occlusion model is 2D linear
convolution per channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

U_CLAMP = 1e-6


@dataclass(frozen=True)
class LayeredScene:
    """D depth layers of premultiplied images plus binary occupancy masks.

    images: (D, C, H, W) linear intensity in [0, 1], zero where the mask is 0.
    alphas: (D, H, W) binary masks; per pixel the masks sum to at most 1.
    depths: (D,) layer depths in m, ordered far to near.
    """

    images: torch.Tensor
    alphas: torch.Tensor
    depths: tuple[float, ...]

    def __post_init__(self):
        images = torch.as_tensor(self.images, dtype=torch.float64)
        alphas = torch.as_tensor(self.alphas, dtype=torch.float64)
        if images.ndim != 4 or alphas.ndim != 3:
            raise ValueError("images must be (D, C, H, W), alphas (D, H, W)")
        if images.shape[0] != alphas.shape[0] or images.shape[-2:] != alphas.shape[-2:]:
            raise ValueError("images and alphas disagree on layer count or frame size")
        if images.shape[0] != len(self.depths):
            raise ValueError("need one depth per layer")
        if images.shape[0] == 0:
            raise ValueError("scene needs at least one layer")
        if float(torch.max(torch.sum(alphas, dim=0))) > 1.0 + 1e-9:
            raise ValueError("layer masks must sum to at most 1 per pixel")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "depths", tuple(float(d) for d in self.depths))

    @property
    def n_layers(self) -> int:
        return self.images.shape[0]


def convolve2d(image: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Linear 'same' 2D convolution via padded FFT.

    `image` is (..., H, W); `kernel` (h, w) is centered on its (h//2, w//2)
    cell, so a delta there is the identity.
    """
    h, w = kernel.shape
    hh, ww = image.shape[-2:]
    fh, fw = hh + h - 1, ww + w - 1
    img_f = torch.fft.rfft2(image, s=(fh, fw))
    ker_f = torch.fft.rfft2(kernel, s=(fh, fw))
    full = torch.fft.irfft2(img_f * ker_f, s=(fh, fw))
    r0, c0 = h // 2, w // 2
    return full[..., r0 : r0 + hh, c0 : c0 + ww]


def occlusion_composite(
    scene: LayeredScene,
    psfs: torch.Tensor,
    noise_sigma: float = 0.0,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Simulated measurement of a layered scene, (C, H, W).

    Per layer: blur image and mask with that depth's PSF, normalize by the
    blurred cumulative coverage, attenuate by every nearer layer's blurred
    transparency, sum, add Gaussian read noise, clip at zero.
    `psfs` is (D, C, h, w) or (D, h, w) shared across channels.
    """
    psfs = torch.as_tensor(psfs, dtype=torch.float64)
    if psfs.ndim == 3:
        psfs = psfs[:, None, :, :].expand(-1, scene.images.shape[1], -1, -1)
    if psfs.shape[0] != scene.n_layers:
        raise ValueError("need one PSF per depth layer")
    if psfs.shape[1] != scene.images.shape[1]:
        raise ValueError("PSF channel count does not match the scene")

    d_count, channels = scene.n_layers, scene.images.shape[1]
    cum_alpha = torch.cumsum(scene.alphas, dim=0)
    blurred = []
    alpha_tilde = []
    for d in range(d_count):
        layer_imgs = torch.stack(
            [convolve2d(scene.images[d, c], psfs[d, c]) for c in range(channels)]
        )
        u_d = torch.stack([convolve2d(cum_alpha[d], psfs[d, c]) for c in range(channels)])
        u_d = torch.clamp(u_d, min=U_CLAMP)
        a_d = torch.stack([convolve2d(scene.alphas[d], psfs[d, c]) for c in range(channels)])
        blurred.append(layer_imgs / u_d)
        alpha_tilde.append(a_d / u_d)

    out = torch.zeros_like(scene.images[0])
    for d in range(d_count):
        term = blurred[d]
        for dn in range(d + 1, d_count):
            term = term * (1.0 - alpha_tilde[dn])
        out = out + term
    if noise_sigma > 0.0:
        noise = torch.randn(out.shape, dtype=torch.float64, generator=generator)
        out = out + noise_sigma * noise
    return torch.clamp(out, min=0.0)


def depth_quantize(
    depth_map: torch.Tensor, n_layers: int, z_near: float, z_far: float
) -> tuple[torch.Tensor, tuple[float, ...], int]:
    """Partition a metric depth map into masks uniform in diopters.

    Returns (masks (D, H, W) far-to-near, layer center depths in m,
    clamped-pixel count). Boundaries split [1/z_far, 1/z_near] into D equal
    diopter bins; out-of-range depths clamp to the nearest layer.
    """
    if not 0 < z_near < z_far:
        raise ValueError("need 0 < z_near < z_far")
    if n_layers < 1:
        raise ValueError("need at least one depth layer")
    depth = torch.as_tensor(depth_map, dtype=torch.float64)
    d_lo, d_hi = 1.0 / z_far, 1.0 / z_near
    step = (d_hi - d_lo) / n_layers
    diopt = 1.0 / torch.clamp(depth, min=1e-9)
    clamped = int(torch.count_nonzero((diopt < d_lo) | (diopt > d_hi)))
    idx = torch.clamp(((diopt - d_lo) / step).floor().long(), 0, n_layers - 1)
    masks = torch.stack([(idx == d).to(torch.float64) for d in range(n_layers)])
    centers = tuple(1.0 / (d_lo + (d + 0.5) * step) for d in range(n_layers))
    return masks, centers, clamped


def scene_from_frame(
    frame: torch.Tensor, depth_map: torch.Tensor, n_layers: int, z_near: float, z_far: float
) -> LayeredScene:
    """Quantize an RGB-D frame into a LayeredScene."""
    frame = torch.as_tensor(frame, dtype=torch.float64)
    if frame.ndim == 2:
        frame = frame[None]
    masks, centers, _ = depth_quantize(depth_map, n_layers, z_near, z_far)
    images = frame[None, :, :, :] * masks[:, None, :, :]
    return LayeredScene(images=images, alphas=masks, depths=centers)


# ---------------------------------------------------------------------------
# Patchwise shift-variant rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchGrid:
    """Overlapping patch layout; (size - overlap) must tile the frame."""

    frame_shape: tuple[int, int]
    size: int = 256
    overlap: int = 32

    def __post_init__(self):
        if self.overlap < 0 or self.overlap >= self.size:
            raise ValueError("need 0 <= overlap < patch size")
        for span in self.frame_shape:
            if span < self.size or (span - self.overlap) % self.stride != 0:
                raise ValueError(
                    f"frame span {span} is not tiled by {self.size}px patches "
                    f"with {self.overlap}px overlap"
                )

    @property
    def stride(self) -> int:
        return self.size - self.overlap

    @property
    def layout(self) -> tuple[int, int]:
        return (
            (self.frame_shape[0] - self.overlap) // self.stride,
            (self.frame_shape[1] - self.overlap) // self.stride,
        )

    def patch_slices(self, row: int, col: int) -> tuple[slice, slice]:
        r0, c0 = row * self.stride, col * self.stride
        return slice(r0, r0 + self.size), slice(c0, c0 + self.size)

    def blend_profile(self, index: int, count: int) -> torch.Tensor:
        """1D partition-of-unity weights for patch `index` of `count`."""
        w = torch.ones(self.size, dtype=torch.float64)
        v = self.overlap
        if v > 0:
            ramp = torch.arange(1, v + 1, dtype=torch.float64) / (v + 1)
            if index > 0:
                w[:v] = ramp
            if index < count - 1:
                w[-v:] = ramp.flip(0)
        return w


class PsfCoverageError(RuntimeError):
    """The PSF bank does not cover a patch's field angle or depths."""


@dataclass
class PsfBankEntry:
    angle_deg: float
    depth_m: float
    kernel: torch.Tensor  # (C, h, w) or (h, w)


@dataclass
class PsfBank:
    """Kernels indexed by (field angle, depth); nearest-neighbor lookup."""

    entries: list[PsfBankEntry]

    def angles(self) -> list[float]:
        return sorted({e.angle_deg for e in self.entries})

    def nearest_angle(self, angle_deg: float) -> float:
        angles = self.angles()
        if not angles:
            raise PsfCoverageError("PSF bank is empty")
        return min(angles, key=lambda a: abs(a - angle_deg))

    def kernels_for(self, angle_deg: float, depths) -> torch.Tensor:
        """(D, C, h, w) stack for the nearest bank angle at each depth."""
        a = self.nearest_angle(angle_deg)
        pool = [e for e in self.entries if e.angle_deg == a]
        out = []
        for depth in depths:
            best = min(pool, key=lambda e: abs(_diopters(e.depth_m) - _diopters(depth)))
            k = best.kernel
            if k.ndim == 2:
                k = k[None]
            out.append(k)
        return torch.stack(out)


def _diopters(depth_m: float) -> float:
    return 0.0 if depth_m is None or np.isinf(depth_m) else 1.0 / depth_m


def patch_field_angle(
    grid: PatchGrid, row: int, col: int, pixel_pitch_mm: float, lens_to_sensor_mm: float
) -> float:
    """Field angle (deg) of a patch center as seen from the lens."""
    rows, cols = grid.frame_shape
    rs, cs = grid.patch_slices(row, col)
    cy = (rs.start + rs.stop) / 2 - rows / 2
    cx = (cs.start + cs.stop) / 2 - cols / 2
    height = float(np.hypot(cy, cx)) * pixel_pitch_mm
    return float(np.degrees(np.arctan2(height, lens_to_sensor_mm)))


def render_shift_variant(
    frame: torch.Tensor,
    depth_map: torch.Tensor,
    bank: PsfBank,
    grid: PatchGrid,
    n_layers: int,
    z_near: float,
    z_far: float,
    noise_sigma: float = 0.0,
    seed: int = 0,
    pixel_pitch_mm: float = 0.005,
    lens_to_sensor_mm: float = 35.0,
) -> torch.Tensor:
    """Render a full frame patch by patch with locally shift-invariant PSFs.

    Overlapping patches blend with separable linear ramps that sum to one
    everywhere. Per-patch noise streams derive from (seed, patch index), so
    the result is independent of patch scheduling order.
    """
    frame = torch.as_tensor(frame, dtype=torch.float64)
    if frame.ndim == 2:
        frame = frame[None]
    rows, cols = grid.layout
    out = torch.zeros_like(frame)
    for r in range(rows):
        for c in range(cols):
            rs, cs = grid.patch_slices(r, c)
            scene = scene_from_frame(frame[:, rs, cs], depth_map[rs, cs], n_layers, z_near, z_far)
            angle = patch_field_angle(grid, r, c, pixel_pitch_mm, lens_to_sensor_mm)
            kernels = bank.kernels_for(angle, scene.depths)
            gen = torch.Generator().manual_seed(_patch_seed(seed, r * cols + c))
            patch = occlusion_composite(scene, kernels, noise_sigma, gen)
            w = grid.blend_profile(r, rows)[:, None] * grid.blend_profile(c, cols)[None, :]
            out[:, rs, cs] += patch * w
    return out


def _patch_seed(seed: int, patch_index: int) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(patch_index,))
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF)
