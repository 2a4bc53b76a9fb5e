"""First-order DOE height-map optimization with cosine-annealed Adam.

Gradients come from reverse-mode differentiation through phase generation,
the two-step propagation, PSF formation, and the losses; the transition
field and propagation plan per field angle are height-independent and so
are computed once per run, as is the first propagation leg. Image losses
pull the occlusion renderer into the differentiated graph only when their
weights are nonzero (focus-only runs never build it, which keeps the
300-iteration sweeps cheap).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field
from typing import Callable

import numpy as np
import torch

from .elements import DOEProfile, DoePlacement, LensSystem, doe_phase, quantize_heights
from .field import SampledField
from .fieldsynth import TransitionField
from .losses import (
    STATIC_WEIGHTS_FOCUS_ONLY,
    concentration,
    dwa_weights,
    loss_focus,
    loss_mse,
    total_loss,
)
from .raytrace import Source
from .scene import LayeredScene, occlusion_composite
from .waveprop import (
    PropagationPlan,
    asm_propagate,
    compensate,
    compensation_phase,
    make_transition,
    plan_two_step,
    window_heights,
)


class NonFiniteGradientError(RuntimeError):
    """The objective or its gradient evaluated to NaN/inf."""


class OptimizationDivergedError(RuntimeError):
    """Total loss went non-finite; carries the trace up to the failure."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


def height_gradient(objective: Callable[[torch.Tensor], torch.Tensor], heights: torch.Tensor) -> torch.Tensor:
    """Gradient of a scalar objective with respect to the DOE heights.

    `objective` must be a deterministic pure function of the height tensor.
    An objective that ignores the heights yields an exact zero gradient.
    """
    h = heights.detach().clone().requires_grad_(True)
    value = objective(h)
    if value.ndim != 0:
        raise ValueError("objective must return a scalar")
    if not torch.isfinite(value):
        raise NonFiniteGradientError(f"objective evaluated to {float(value)}")
    (grad,) = torch.autograd.grad(value, h, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(h)
    if not torch.isfinite(grad).all():
        raise NonFiniteGradientError("gradient contains non-finite entries")
    return grad.detach()


def cosine_lr(
    base_lr: float,
    epoch: int,
    total_epochs: int,
    anneal_start: int,
    floor_fraction: float,
) -> float:
    """Constant lr until `anneal_start`, then cosine decay to floor*base."""
    if epoch < anneal_start:
        return base_lr
    floor = base_lr * floor_fraction
    last = max(total_epochs - 1, anneal_start + 1)
    progress = min((epoch - anneal_start) / (last - anneal_start), 1.0)
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class ScheduleState:
    """Learning-rate schedule snapshot for one epoch."""

    epoch: int
    lr: float
    anneal_start: int
    floor_fraction: float


@dataclass
class OptimizeConfig:
    system: LensSystem
    doe: DOEProfile
    placement: DoePlacement
    sensor_z: float
    shape: tuple[int, int]
    pitch: float  # mm
    angles_deg: tuple[float, ...]
    depth_mm: float | None = None  # None = source at infinity
    wavelength: float = 0.55
    iterations: int = 300
    iters_per_epoch: int = 10
    angles_per_iter: int = 2
    lr: float = 6e-3  # um per Adam step on the height map
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    anneal_start_epoch: int | None = None  # default: 70% of the epochs
    floor_fraction: float = 0.1
    static_weights: tuple[float, float, float, float] = STATIC_WEIGHTS_FOCUS_ONLY
    use_dwa: bool = True
    dwa_temperature: float = 2.0
    seed: int = 0
    pupil_samples: int = 64
    scene: LayeredScene | None = None  # enables the image-MSE slot
    psf_kernel: int = 64  # kernel crop (px) when convolving the scene
    noise_sigma: float = 0.0
    patience: int | None = None  # early stop, epochs without improvement
    min_delta: float = 0.0


@dataclass
class TraceRow:
    iter: int
    epoch: int
    lr: float
    l_mse: float
    l_l1: float
    l_focus: float
    c0: float
    c1: float
    c2: float
    c3: float
    total: float


@dataclass
class OptimizeResult:
    doe: DOEProfile
    trace: list[TraceRow]
    final_psfs: dict[float, torch.Tensor]  # angle -> unit-sum PSF
    final_concentration: dict[float, float]
    final_l_focus: dict[float, float]
    quantized: DOEProfile | None = None
    quantized_l_focus: dict[float, float] = dataclass_field(default_factory=dict)


@dataclass
class _AngleContext:
    """Per-angle precomputation: everything that does not depend on heights."""

    source: Source
    transition: TransitionField
    plan: PropagationPlan
    at_doe: SampledField  # compensated envelope after the first leg
    sensor_x: torch.Tensor
    sensor_y: torch.Tensor


def _prepare_angle(config: OptimizeConfig, angle_deg: float) -> _AngleContext:
    source = Source.at_angle(angle_deg, config.depth_mm)
    transition = make_transition(
        config.system, source, config.shape, config.pitch, config.wavelength, config.pupil_samples
    )
    plan = plan_two_step(
        config.system, config.doe, config.placement, config.sensor_z, transition,
        config.shape, config.pitch,
    )
    fc = plan.spectrum_center_for(config.wavelength)
    f = transition.field
    x, y = f.coords()
    env_phase = transition.phase + compensation_phase(x, y, fc)
    env = transition.amplitude.to(torch.complex128) * torch.exp(1j * env_phase.to(torch.complex128))
    env_field = SampledField(values=env, pitch=f.pitch, wavelength=f.wavelength, origin=f.origin)
    at_doe = asm_propagate(env_field, plan.z1, spectrum_center=fc, out_origin=plan.doe_window.origin)
    out = SampledField(
        values=torch.zeros(config.shape, dtype=torch.complex128),
        pitch=config.pitch,
        wavelength=config.wavelength,
        origin=plan.sensor_origin,
    )
    sx, sy = out.coords()
    return _AngleContext(source=source, transition=transition, plan=plan, at_doe=at_doe, sensor_x=sx, sensor_y=sy)


def _angle_psf(ctx: _AngleContext, doe: DOEProfile, wavelength: float) -> torch.Tensor:
    """Unit-sum PSF for a prepared angle and live DOE heights."""
    fc = ctx.plan.spectrum_center_for(wavelength)
    phi = doe_phase(doe, wavelength, heights=window_heights(doe, ctx.plan.doe_window))
    after = ctx.at_doe.with_values(ctx.at_doe.values * torch.exp(1j * phi.to(torch.complex128)))
    sensor = asm_propagate(after, ctx.plan.z2, spectrum_center=fc, out_origin=ctx.plan.sensor_origin)
    sensor = compensate(sensor, (-fc[0], -fc[1]))
    k = torch.abs(sensor.values) ** 2
    return k / torch.sum(k)


def _crop_kernel(psf: torch.Tensor, size: int) -> torch.Tensor:
    ny, nx = psf.shape
    size = min(size, ny, nx)
    r0, c0 = ny // 2 - size // 2, nx // 2 - size // 2
    kernel = psf[r0 : r0 + size, c0 : c0 + size]
    return kernel / torch.sum(kernel)


def _scene_mse(config: OptimizeConfig, psf_grid: torch.Tensor) -> torch.Tensor:
    """Image MSE of the blurred scene against the sharp composite."""
    scene = config.scene
    kernel = _crop_kernel(psf_grid, config.psf_kernel)
    kernels = kernel[None, None].expand(scene.n_layers, scene.images.shape[1], -1, -1)
    measured = occlusion_composite(scene, kernels)
    sharp = torch.sum(scene.images, dim=0)
    return loss_mse(measured, sharp)


def optimize_doe(config: OptimizeConfig) -> OptimizeResult:
    """Run Adam over the DOE heights against the configured objective.

    Deterministic under a fixed seed; heights are clamped to [0, h_max]
    after every step. When the profile requests quantization levels, the
    continuous optimum is snapped once at the end and re-scored.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    h_max = config.doe.max_height

    contexts = {a: _prepare_angle(config, a) for a in config.angles_deg}
    heights = config.doe.heights.detach().clone().requires_grad_(True)
    optimizer = torch.optim.Adam([heights], lr=config.lr, betas=config.betas, eps=config.eps)

    n_epochs = max(1, math.ceil(config.iterations / config.iters_per_epoch))
    anneal_start = (
        config.anneal_start_epoch
        if config.anneal_start_epoch is not None
        else max(1, int(round(0.7 * n_epochs)))
    )
    image_active = config.static_weights[0] > 0 and config.scene is not None
    task_slots = [i for i, w in enumerate(config.static_weights) if w > 0]

    trace: list[TraceRow] = []
    epoch_history: list[tuple[float, ...]] = []
    epoch_sums = None
    bag: list[float] = []
    best_total, stale_epochs = math.inf, 0

    for it in range(config.iterations):
        epoch = it // config.iters_per_epoch
        if it % config.iters_per_epoch == 0:
            if it > 0 and epoch_sums is not None:
                means = tuple(s / config.iters_per_epoch for s in epoch_sums)
                # weight slots map to losses as (c0: mse, c1: percep, c2: l1, c3: focus)
                slot_loss = {0: means[0], 1: 0.0, 2: means[1], 3: means[2]}
                epoch_history.append(tuple(slot_loss[i] for i in task_slots))
                if config.patience is not None:
                    total_mean = means[4]
                    if total_mean < best_total - config.min_delta:
                        best_total, stale_epochs = total_mean, 0
                    else:
                        stale_epochs += 1
                        if stale_epochs > config.patience:
                            break
            epoch_sums = [0.0, 0.0, 0.0, 0.0, 0.0]
        lr = cosine_lr(config.lr, epoch, n_epochs, anneal_start, config.floor_fraction)
        for group in optimizer.param_groups:
            group["lr"] = lr

        if len(bag) < config.angles_per_iter:
            bag = list(rng.permutation(np.asarray(config.angles_deg, dtype=np.float64)))
        picked = [float(bag.pop()) for _ in range(min(config.angles_per_iter, len(config.angles_deg)))]

        live = config.doe.with_heights(heights)
        focus_terms, mse_terms = [], []
        for angle in picked:
            k = _angle_psf(contexts[angle], live, config.wavelength)
            focus_terms.append(loss_focus(k))
            if image_active:
                mse_terms.append(_scene_mse(config, k))
        l_focus_t = torch.stack(focus_terms).mean()
        l_mse_t = torch.stack(mse_terms).mean() if mse_terms else torch.zeros((), dtype=torch.float64)
        l_l1_t = torch.zeros((), dtype=torch.float64)  # no depth decoder in scope

        dwa = [1.0, 1.0, 1.0, 1.0]
        if config.use_dwa and task_slots:
            task_w = dwa_weights(epoch_history, config.dwa_temperature)
            if task_w:
                for slot, w in zip(task_slots, task_w):
                    dwa[slot] = w
        total_t, report = total_loss(l_mse_t, l_l1_t, l_focus_t, config.static_weights, tuple(dwa))
        if not math.isfinite(report.total):
            raise OptimizationDivergedError(f"total loss diverged at iteration {it}", trace)

        optimizer.zero_grad()
        total_t.backward()
        optimizer.step()
        with torch.no_grad():
            heights.clamp_(0.0, h_max)

        trace.append(
            TraceRow(
                iter=it, epoch=epoch, lr=lr,
                l_mse=report.l_mse, l_l1=report.l_l1, l_focus=report.l_focus,
                c0=report.weights[0], c1=report.weights[1],
                c2=report.weights[2], c3=report.weights[3],
                total=report.total,
            )
        )
        for j, v in enumerate((report.l_mse, report.l_l1, report.l_focus, 0.0, report.total)):
            epoch_sums[j] += v

    final = config.doe.with_heights(heights.detach().clone())
    result = OptimizeResult(
        doe=final, trace=trace, final_psfs={}, final_concentration={}, final_l_focus={}
    )
    with torch.no_grad():
        for angle in config.angles_deg:
            k = _angle_psf(contexts[angle], final, config.wavelength)
            result.final_psfs[angle] = k
            result.final_l_focus[angle] = float(loss_focus(k))
            result.final_concentration[angle] = concentration(k)
        if final.levels >= 2:
            snapped = quantize_heights(final)
            result.quantized = snapped
            for angle in config.angles_deg:
                k = _angle_psf(contexts[angle], snapped, config.wavelength)
                result.quantized_l_focus[angle] = float(loss_focus(k))
    return result
