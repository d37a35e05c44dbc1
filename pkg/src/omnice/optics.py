"""Optical engine: color cast, exposure, defocus PSFs and coverage overlays.

Defocus uses a scalar pupil-plane model: a circular pupil cut off at
NA/lambda carries a quadratic defocus phase, and the PSF is the squared
magnitude of its Fourier transform sampled at the sensor pixel pitch.
Coverage corruptions (stain deposit, bubble, knife line) are procedural
templates composited in optical density space; pixels outside their
alpha mask are left bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from . import severity as sev
from .imaging import od_blend_sum, od_to_rgb, rgb_to_od, validate_image

CHANNELS = ("R", "G", "B")

# Hematoxylin-like OD color used to tint stain deposits.
DEPOSIT_OD_COLOR = np.array([0.65, 0.70, 0.29])
DEPOSIT_OD_COLOR = DEPOSIT_OD_COLOR / np.linalg.norm(DEPOSIT_OD_COLOR)
NEUTRAL_OD_COLOR = np.ones(3) / np.sqrt(3.0)

PSF_GRID = 512
PSF_ENERGY_FRACTION = 0.999


@dataclass(frozen=True)
class PSFKernel:
    size: int
    weights: np.ndarray
    wavelength_nm: float
    channel: str

    def second_moment(self) -> float:
        r = self.size // 2
        ys, xs = np.mgrid[-r : r + 1, -r : r + 1]
        return float((self.weights * (xs**2 + ys**2)).sum())


def make_defocus_psf(optics: sev.OpticsParams, channel: str,
                     defocus_um: float) -> PSFKernel:
    """Pupil-plane defocus PSF for one color channel.

    The defocus path-length coefficient is
    W20 = defocus * NA^2 / (2 * refractive_index); the kernel is cropped
    to the smallest odd size holding >= 99.9% of the energy and
    renormalized to unit sum.
    """
    if not 0 < optics.numerical_aperture < optics.refractive_index + 1e-12:
        raise ValueError("numerical aperture must be below the refractive index")
    if defocus_um < 0:
        raise ValueError("defocus distance must be nonnegative")
    ch = CHANNELS.index(channel)
    lam_um = optics.wavelengths_nm[ch] / 1000.0
    cutoff = optics.numerical_aperture / lam_um  # cycles per micron

    f = np.fft.fftfreq(PSF_GRID, d=optics.pixel_pitch_um)
    fx, fy = np.meshgrid(f, f)
    rho2 = (fx**2 + fy**2) / cutoff**2
    inside = rho2 <= 1.0
    w20 = defocus_um * optics.numerical_aperture**2 / (2.0 * optics.refractive_index)
    phase = (2.0 * np.pi / lam_um) * w20 * rho2
    pupil = np.where(inside, np.exp(1j * phase), 0.0)

    field = np.fft.ifft2(pupil)
    psf = np.fft.fftshift(np.abs(field) ** 2)
    psf /= psf.sum()

    center = PSF_GRID // 2
    total = 1.0
    radius = 0
    while radius < center - 1:
        window = psf[center - radius : center + radius + 1,
                     center - radius : center + radius + 1]
        if window.sum() >= PSF_ENERGY_FRACTION * total:
            break
        radius += 1
    kernel = psf[center - radius : center + radius + 1,
                 center - radius : center + radius + 1].copy()
    kernel = 0.5 * (kernel + kernel[::-1, ::-1])  # enforce exact central symmetry
    kernel /= kernel.sum()
    return PSFKernel(2 * radius + 1, kernel, optics.wavelengths_nm[ch], channel)


def defocus_kernels(severity, table=None) -> list[PSFKernel]:
    table = table or sev.DEFAULT_TABLE
    params = sev.params_for("defocus", severity, 0, table)
    return [
        make_defocus_psf(table.optics, ch, params["defocus_um"]) for ch in CHANNELS
    ]


def _convolve_reflect(channel_f, kernel):
    r = kernel.shape[0] // 2
    if r == 0:
        return channel_f * kernel[0, 0]
    padded = np.pad(channel_f, r, mode="reflect")
    return fftconvolve(padded, kernel, mode="valid")


def apply_defocus(image, severity, seed=0, table=None) -> np.ndarray:
    """Convolve each channel with its wavelength's defocus PSF (reflect borders)."""
    arr = validate_image(image).astype(np.float32)
    kernels = defocus_kernels(severity, table)
    out = np.empty_like(arr)
    for ch in range(3):
        out[:, :, ch] = _convolve_reflect(arr[:, :, ch], kernels[ch].weights)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def apply_color_cast(image, kind, severity, seed=0, table=None) -> np.ndarray:
    """Cold boosts blue and cuts red, warm the inverse; green untouched."""
    if kind not in ("cold-color", "warm-color"):
        raise sev.UnknownKindError(kind)
    params = sev.params_for(kind, severity, seed, table)
    arr = validate_image(image).astype(np.float32)
    gains = np.array([params["red_gain"], 1.0, params["blue_gain"]], np.float32)
    return np.clip(np.rint(arr * gains), 0, 255).astype(np.uint8)


def apply_exposure(image, kind, severity, seed=0, table=None) -> np.ndarray:
    if kind not in ("overexposure", "underexposure"):
        raise sev.UnknownKindError(kind)
    params = sev.params_for(kind, severity, seed, table)
    arr = validate_image(image).astype(np.float32)
    return np.clip(np.rint(arr * np.float32(params["gain"])), 0, 255).astype(np.uint8)


@dataclass
class CoverageTemplate:
    """Full-frame OD overlay with per-pixel alpha plus an OD scale factor.

    ``od_scale`` darkens (>1 impossible here, it stays 1) or brightens
    (<1, bubble interiors) the existing OD before the additive overlay.
    """

    od_overlay: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    od_scale: np.ndarray | None = None  # (H, W) multiplicative, default 1


def _disk(shape, cx, cy, radius):
    h, w = shape
    y0 = max(int(np.floor(cy - radius - 1)), 0)
    y1 = min(int(np.ceil(cy + radius + 1)) + 1, h)
    x0 = max(int(np.floor(cx - radius - 1)), 0)
    x1 = min(int(np.ceil(cx + radius + 1)) + 1, w)
    if y0 >= y1 or x0 >= x1:
        return None
    ys, xs = np.mgrid[y0:y1, x0:x1]
    d = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    return (slice(y0, y1), slice(x0, x1)), d


def _deposit_template(shape, severity, seed, table) -> CoverageTemplate:
    h, w = shape
    d1 = sev.params_for("stain-deposit", 1, seed, table)["density"]
    d5 = sev.params_for("stain-deposit", 5, seed, table)["density"]
    ds = sev.params_for("stain-deposit", severity, seed, table)["density"]
    n_max = max(1, round(max(d5, d1) * h * w / 1e4))
    n = max(1, round(ds * h * w / 1e4))

    rng = np.random.default_rng(np.uint64(seed))
    overlay = np.zeros((h, w), dtype=np.float32)
    # Draw the level-5 placement stream and keep the first n clusters so
    # higher severities strictly extend lower ones.
    for i in range(n_max):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        grains = rng.integers(5, 15)
        spread = rng.uniform(3.0, 8.0)
        grain_params = [
            (
                cx + rng.normal(0, spread),
                cy + rng.normal(0, spread),
                rng.uniform(0.8, 2.5),
                rng.uniform(0.6, 1.2),
            )
            for _ in range(grains)
        ]
        if i >= n:
            continue
        for gx, gy, radius, amp in grain_params:
            hit = _disk((h, w), gx, gy, radius)
            if hit is None:
                continue
            sl, d = hit
            soft = np.clip(1.0 - (d / radius) ** 2, 0.0, None)
            overlay[sl] = np.maximum(overlay[sl], amp * soft)
    od = overlay[:, :, None] * DEPOSIT_OD_COLOR[None, None, :].astype(np.float32)
    alpha = (overlay > 1e-4).astype(np.float32)
    return CoverageTemplate(od.astype(np.float32), alpha)


def _bubble_template(shape, severity, seed, table) -> CoverageTemplate:
    h, w = shape
    d5 = sev.params_for("bubble", 5, seed, table)["density"]
    ds = sev.params_for("bubble", severity, seed, table)["density"]
    n_max = max(1, round(d5 * h * w / 1e4))
    n = max(1, round(ds * h * w / 1e4))

    rng = np.random.default_rng(np.uint64(seed))
    rim = np.zeros((h, w), dtype=np.float32)
    interior = np.zeros((h, w), dtype=np.float32)
    for i in range(n_max):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        radius = rng.uniform(6.0, min(24.0, max(7.0, min(h, w) / 4)))
        rim_od = rng.uniform(0.5, 0.9)
        if i >= n:
            continue
        hit = _disk((h, w), cx, cy, radius + 2)
        if hit is None:
            continue
        sl, d = hit
        rim_band = np.clip(1.0 - np.abs(d - radius) / 2.0, 0.0, None)
        rim[sl] = np.maximum(rim[sl], rim_od * rim_band)
        interior[sl] = np.maximum(
            interior[sl], np.where(d < radius - 1.0, 0.6, 0.0)
        )
    od = rim[:, :, None] * NEUTRAL_OD_COLOR[None, None, :].astype(np.float32)
    alpha = ((rim > 1e-4) | (interior > 0)).astype(np.float32)
    od_scale = 1.0 - interior  # brighten interiors toward the glass
    return CoverageTemplate(od.astype(np.float32), alpha, od_scale)


def _knife_line_template(shape, severity, seed, table) -> CoverageTemplate:
    h, w = shape
    n5 = round(sev.params_for("knife-line", 5, seed, table)["count"])
    n = round(sev.params_for("knife-line", severity, seed, table)["count"])

    rng = np.random.default_rng(np.uint64(seed))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    overlay = np.zeros((h, w), dtype=np.float32)
    diag = np.hypot(h, w)
    for i in range(n5):
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(-0.45, 0.45) * diag
        od_amp = rng.uniform(0.15, 0.35)
        width = rng.uniform(1.0, 2.0)
        if i >= n:
            continue
        # Signed distance to a line through the image center.
        d = (
            (xs - w / 2) * np.cos(theta)
            + (ys - h / 2) * np.sin(theta)
            - offset
        )
        profile = np.clip(1.0 - np.abs(d) / width, 0.0, None)
        overlay = np.maximum(overlay, od_amp * profile)
    od = overlay[:, :, None] * NEUTRAL_OD_COLOR[None, None, :].astype(np.float32)
    alpha = (overlay > 1e-4).astype(np.float32)
    return CoverageTemplate(od.astype(np.float32), alpha)


def coverage_template(shape, kind, severity, seed, table=None) -> CoverageTemplate:
    if kind == "stain-deposit":
        return _deposit_template(shape, severity, seed, table)
    if kind == "bubble":
        return _bubble_template(shape, severity, seed, table)
    if kind == "knife-line":
        return _knife_line_template(shape, severity, seed, table)
    raise sev.UnknownKindError(kind)


def apply_coverage_template(image, template: CoverageTemplate, origin=(0, 0),
                            i0: float = 255.0) -> np.ndarray:
    """Composite a coverage template over one region in OD space.

    Pixels where the alpha mask is zero are copied bit-identically from
    the input.
    """
    arr = validate_image(image)
    h, w = arr.shape[:2]
    ox, oy = origin
    alpha = template.alpha[oy : oy + h, ox : ox + w]
    if not alpha.any():
        return arr.copy()
    od = rgb_to_od(arr, i0)
    if template.od_scale is not None:
        od = od * template.od_scale[oy : oy + h, ox : ox + w, None]
    od = od_blend_sum(od, template.od_overlay[oy : oy + h, ox : ox + w], alpha)
    composited = od_to_rgb(od, i0)
    return np.where(alpha[:, :, None] > 0, composited, arr)


def apply_coverage(image, kind, severity, seed, table=None) -> np.ndarray:
    arr = validate_image(image)
    template = coverage_template(arr.shape[:2], kind, severity, seed, table)
    return apply_coverage_template(arr, template)
