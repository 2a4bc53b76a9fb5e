"""On-disk formats: lens prescriptions, DOE maps, PSF stacks, frames, depth.

Binary formats share one pattern: a single ASCII header line followed by
little-endian float32 payload, row-major. The lens prescription is a
line-oriented text format with indented blocks per surface/medium; floats
are serialized with repr() so parse(serialize(x)) round-trips exactly.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .elements import DOEProfile, LensSystem, Surface
from .materials import Material

DOE_MAGIC = "WFDOE"
PSF_MAGIC = "WFPSF"
IMG_MAGIC = "WFIMG"
DEPTH_MAGIC = "WFDEPTH"
LENS_MAGIC = "WFLENS"


# ---------------------------------------------------------------------------
# Lens prescription text format
# ---------------------------------------------------------------------------


def serialize_lens(system: LensSystem) -> str:
    lines = [f"{LENS_MAGIC} 1", f"mode {system.mode}", f"stop_index {system.stop_index}"]
    lines.append(f"transition_plane_z {system.transition_plane_z!r}")
    if system.focal_length is not None:
        lines.append(f"focal_length {system.focal_length!r}")
    for surface, medium in zip(system.surfaces, system.media):
        lines.append("surface")
        lines.append(f"  kind {surface.kind}")
        lines.append(f"  axial_position {surface.axial_position!r}")
        lines.append(f"  curvature {surface.curvature!r}")
        lines.append(f"  conic {surface.conic!r}")
        if surface.aspheric_coeffs:
            coeffs = " ".join(repr(a) for a in surface.aspheric_coeffs)
            lines.append(f"  aspheric_coeffs {coeffs}")
        lines.append(f"  semi_diameter {surface.semi_diameter!r}")
        lines.append("medium")
        lines.append(f"  model {medium.model}")
        lines.append(f"  n0 {medium.n0!r}")
        if medium.model == "cauchy":
            lines.append(f"  b {medium.b!r}")
            lines.append(f"  c {medium.c!r}")
            lines.append(f"  reference_wavelength {medium.reference_wavelength!r}")
    return "\n".join(lines) + "\n"


def parse_lens(text: str) -> LensSystem:
    top: dict[str, str] = {}
    surfaces: list[dict] = []
    media: list[dict] = []
    block: dict | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].rstrip()
        if not stripped:
            continue
        indented = stripped.startswith((" ", "\t"))
        parts = stripped.split()
        key, args = parts[0], parts[1:]
        if not indented:
            if key == LENS_MAGIC:
                continue
            if key == "surface":
                block = {}
                surfaces.append(block)
            elif key == "medium":
                if not surfaces or len(media) >= len(surfaces):
                    raise ValueError(f"line {lineno}: medium block without a preceding surface")
                block = {}
                media.append(block)
            else:
                top[key] = " ".join(args)
                block = None
        else:
            if block is None:
                raise ValueError(f"line {lineno}: indented line outside a block")
            block[key] = " ".join(args)
    if len(media) != len(surfaces):
        raise ValueError("each surface block needs a following medium block")

    def surf(d: dict) -> Surface:
        coeffs = tuple(float(v) for v in d.get("aspheric_coeffs", "").split())
        return Surface(
            kind=d["kind"],
            axial_position=float(d["axial_position"]),
            curvature=float(d.get("curvature", "0")),
            conic=float(d.get("conic", "0")),
            aspheric_coeffs=coeffs,
            semi_diameter=float(d["semi_diameter"]),
        )

    def mat(d: dict) -> Material:
        return Material(
            model=d["model"],
            n0=float(d["n0"]),
            b=float(d.get("b", "0")),
            c=float(d.get("c", "0")),
            reference_wavelength=float(d.get("reference_wavelength", "0.55")),
        )

    focal = top.get("focal_length")
    return LensSystem(
        surfaces=tuple(surf(d) for d in surfaces),
        media=tuple(mat(d) for d in media),
        stop_index=int(top["stop_index"]),
        transition_plane_z=float(top["transition_plane_z"]),
        mode=top.get("mode", "traced"),
        focal_length=float(focal) if focal is not None else None,
    )


def write_lens(system: LensSystem, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write(serialize_lens(system))


def read_lens(path) -> LensSystem:
    with open(path, "r", encoding="ascii") as f:
        return parse_lens(f.read())


# ---------------------------------------------------------------------------
# DOE height maps
# ---------------------------------------------------------------------------


def write_doe(doe: DOEProfile, path) -> None:
    h = doe.heights.detach().numpy().astype("<f4")
    if doe.parameterization == "radial":
        rows, cols = 1, h.shape[0]
        h = h.reshape(1, -1)
    else:
        rows, cols = h.shape
    header = (
        f"{DOE_MAGIC} {rows} {cols} {doe.pitch!r} {doe.substrate.n0!r} "
        f"{doe.levels} {doe.axial_position!r}\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(h.tobytes())


def read_doe(path) -> DOEProfile:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if not header or header[0] != DOE_MAGIC:
            raise ValueError(f"{path}: not a {DOE_MAGIC} file")
        rows, cols = int(header[1]), int(header[2])
        pitch, n0 = float(header[3]), float(header[4])
        levels, axial = int(header[5]), float(header[6])
        raw = np.frombuffer(f.read(rows * cols * 4), dtype="<f4").astype(np.float64)
    substrate = Material(model="constant", n0=n0)
    if rows == 1:
        return DOEProfile(
            parameterization="radial", heights=torch.from_numpy(raw.copy()),
            pitch=pitch, substrate=substrate, axial_position=axial, levels=levels,
        )
    return DOEProfile(
        parameterization="full_grid", heights=torch.from_numpy(raw.copy().reshape(rows, cols)),
        pitch=pitch, substrate=substrate, axial_position=axial, levels=levels,
    )


# ---------------------------------------------------------------------------
# PSF stacks
# ---------------------------------------------------------------------------


def write_psf_stack(records: list[dict], path, pitch_um: float) -> None:
    """records: dicts with angle_deg, depth_m, channel, offset_x_mm,
    offset_y_mm, and psf (2D array). All PSFs share one shape and pitch."""
    if not records:
        raise ValueError("empty PSF stack")
    shapes = {tuple(np.asarray(r["psf"]).shape) for r in records}
    if len(shapes) != 1:
        raise ValueError("all PSFs in a stack must share one shape")
    rows, cols = shapes.pop()
    header = f"{PSF_MAGIC} {len(records)} {rows} {cols} {pitch_um!r}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        for r in records:
            meta = np.array(
                [r["angle_deg"], r["depth_m"], r["channel"], r["offset_x_mm"], r["offset_y_mm"]],
                dtype="<f4",
            )
            f.write(meta.tobytes())
            f.write(np.asarray(r["psf"], dtype=np.float64).astype("<f4").tobytes())


def read_psf_stack(path) -> tuple[list[dict], float]:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if not header or header[0] != PSF_MAGIC:
            raise ValueError(f"{path}: not a {PSF_MAGIC} file")
        count, rows, cols = int(header[1]), int(header[2]), int(header[3])
        pitch_um = float(header[4])
        records = []
        for _ in range(count):
            meta = np.frombuffer(f.read(5 * 4), dtype="<f4")
            psf = np.frombuffer(f.read(rows * cols * 4), dtype="<f4")
            records.append(
                {
                    "angle_deg": float(meta[0]),
                    "depth_m": float(meta[1]),
                    "channel": int(meta[2]),
                    "offset_x_mm": float(meta[3]),
                    "offset_y_mm": float(meta[4]),
                    "psf": psf.astype(np.float64).reshape(rows, cols),
                }
            )
    return records, pitch_um


# ---------------------------------------------------------------------------
# Frames and depth maps
# ---------------------------------------------------------------------------


def write_image(frame, path) -> None:
    """f32 raw frame, (channels, rows, cols) or (rows, cols)."""
    arr = np.asarray(torch.as_tensor(frame).detach().numpy(), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    channels, rows, cols = arr.shape
    header = f"{IMG_MAGIC} {rows} {cols} {channels}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(arr.astype("<f4").tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if not header or header[0] != IMG_MAGIC:
            raise ValueError(f"{path}: not a {IMG_MAGIC} file")
        rows, cols, channels = int(header[1]), int(header[2]), int(header[3])
        raw = np.frombuffer(f.read(channels * rows * cols * 4), dtype="<f4")
    return raw.astype(np.float64).reshape(channels, rows, cols)


def write_depth(depth_m, path) -> None:
    arr = np.asarray(torch.as_tensor(depth_m).detach().numpy(), dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("depth map must be 2D")
    header = f"{DEPTH_MAGIC} {arr.shape[0]} {arr.shape[1]}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(arr.astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if not header or header[0] != DEPTH_MAGIC:
            raise ValueError(f"{path}: not a {DEPTH_MAGIC} file")
        rows, cols = int(header[1]), int(header[2])
        raw = np.frombuffer(f.read(rows * cols * 4), dtype="<f4")
    return raw.astype(np.float64).reshape(rows, cols)


def load_frame(path) -> np.ndarray:
    """Read a frame from WFIMG raw or an 8/16-bit PNG-style raster."""
    path = str(path)
    if path.endswith(".png") or path.endswith(".tif") or path.endswith(".tiff"):
        from PIL import Image

        img = Image.open(path)
        arr = np.asarray(img, dtype=np.float64)
        scale = 65535.0 if arr.max() > 255 else 255.0
        arr = arr / scale
        if arr.ndim == 2:
            return arr[None]
        return np.moveaxis(arr, -1, 0)
    return read_image(path)


def save_preview_png(intensity, path, log_floor: float = 1e-4) -> None:
    """8-bit log-scaled preview raster (PSFs span orders of magnitude)."""
    from PIL import Image

    arr = np.asarray(torch.as_tensor(intensity).detach().numpy(), dtype=np.float64)
    peak = arr.max()
    if peak <= 0:
        img = np.zeros(arr.shape, dtype=np.uint8)
    else:
        scaled = np.log10(np.clip(arr / peak, log_floor, 1.0))
        img = np.round(255 * (1.0 - scaled / math.log10(log_floor))).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def save_frame_png(frame, path) -> None:
    """8-bit linear raster of a (C, H, W) or (H, W) frame clipped to [0, 1]."""
    from PIL import Image

    arr = np.asarray(torch.as_tensor(frame).detach().numpy(), dtype=np.float64)
    arr = np.clip(arr, 0.0, 1.0)
    img = np.round(arr * 255).astype(np.uint8)
    if img.ndim == 3:
        img = np.moveaxis(img, 0, -1)
        if img.shape[-1] == 1:
            img = img[..., 0]
    Image.fromarray(img).save(path)
