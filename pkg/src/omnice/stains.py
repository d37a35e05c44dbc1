"""Chemical engine: Macenko stain separation and the stain-family corruptions.

Covers over/under-staining with H&E, H only and E only, the residual
wax/xylene/alkali blob corruptions, and thick-and-thin sectioning bands.
All of them run the same pipeline: separate stains, rescale the per-pixel
concentrations (globally, inside a random blob mask, or in alternating
bands), then reconstruct.  Reconstruction keeps the residual OD that the
two-stain model cannot explain, so unit coefficients reproduce the input
almost exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from . import severity as sev
from .imaging import od_to_rgb, rgb_to_od, validate_image

# Macenko defaults from the original method.
TISSUE_OD_THRESHOLD = 0.15
ANGLE_PERCENTILE = 1.0
MIN_TISSUE_PIXELS = 100
MIN_STAIN_ANGLE_DEG = 1.0

BLOB_FEATHER_SIGMA_PX = 4.0  # ~8 px soft edge on residual blob masks


class StainSeparationError(ValueError):
    """Stain estimation failed (too little tissue or a degenerate OD cloud)."""


@dataclass(frozen=True)
class StainEstimate:
    """Macenko separation result.

    ``matrix`` holds the two unit-norm stain OD color vectors as columns,
    ordered (H, E).  ``concentrations`` is (H, W, 2) with nonnegative
    per-pixel stain amounts.  ``reconstruction_error`` is the mean
    Euclidean OD residual of matrix @ concentrations vs the image OD.
    """

    matrix: np.ndarray
    concentrations: np.ndarray
    reconstruction_error: float


@dataclass
class StainCorruptionParams:
    """Concentration rescaling in exactly one of three modes.

    * global: plain per-stain coefficients ``alpha_h`` / ``alpha_e``
    * region: coefficients interpolated per pixel through ``region_mask``
    * band:   alternating parallel bands via ``band_spec`` =
      (orientation_rad, band_width_px, alpha_low, alpha_high)
    """

    alpha_h: float = 1.0
    alpha_e: float = 1.0
    region_mask: np.ndarray | None = None
    band_spec: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.region_mask is not None and self.band_spec is not None:
            raise ValueError("region_mask and band_spec are mutually exclusive")
        if self.alpha_h < 0 or self.alpha_e < 0:
            raise ValueError("stain coefficients must be nonnegative")


# Covariance/percentile estimation runs on at most this many tissue
# pixels, taken with a deterministic stride on large slides.
MAX_ESTIMATION_PIXELS = 200_000


def estimate_stains(image, i0: float = 255.0) -> StainEstimate:
    """Macenko separation: extreme directions of the OD cloud's principal plane."""
    arr = validate_image(image)
    od = rgb_to_od(arr, i0).reshape(-1, 3).astype(np.float64)
    matrix = _estimate_matrix(od)
    conc, err = solve_concentrations(od, matrix)
    h, w = arr.shape[:2]
    return StainEstimate(matrix, conc.reshape(h, w, 2).astype(np.float32), err)


def _estimate_matrix(od) -> np.ndarray:
    # Transparency filter on OD magnitude so near-pure pixels of a stain
    # with a weak channel (eosin's red) still count as tissue.
    tissue = od[np.linalg.norm(od, axis=1) > TISSUE_OD_THRESHOLD]
    if tissue.shape[0] < MIN_TISSUE_PIXELS:
        raise StainSeparationError(
            f"insufficient tissue: {tissue.shape[0]} pixels above the OD "
            f"threshold (need {MIN_TISSUE_PIXELS})"
        )
    if tissue.shape[0] > MAX_ESTIMATION_PIXELS:
        stride = -(-tissue.shape[0] // MAX_ESTIMATION_PIXELS)
        tissue = tissue[::stride]

    cov = np.cov(tissue, rowvar=False)
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 0 or evals[-2] <= 1e-6 * evals[-1]:
        raise StainSeparationError("monochrome input: OD cloud has rank < 2")
    plane = evecs[:, -2:]  # (3, 2), columns span the principal plane
    # Rotate the in-plane basis so the mean OD direction is the +x axis;
    # the angle distribution is then centered at zero and cannot wrap
    # across the +-pi cut, which would collapse the percentile bracket.
    mean2 = tissue.mean(axis=0) @ plane
    norm = np.linalg.norm(mean2)
    if norm < 1e-12:
        raise StainSeparationError("monochrome input: OD cloud centered at zero")
    c, s = mean2 / norm
    plane = plane @ np.array([[c, -s], [s, c]])

    proj = tissue @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    phi_lo = np.percentile(phi, ANGLE_PERCENTILE)
    phi_hi = np.percentile(phi, 100.0 - ANGLE_PERCENTILE)
    v_lo = plane @ np.array([np.cos(phi_lo), np.sin(phi_lo)])
    v_hi = plane @ np.array([np.cos(phi_hi), np.sin(phi_hi)])

    def _positive_unit(v):
        if v.sum() < 0:
            v = -v
        v = np.clip(v, 0.0, None)
        n = np.linalg.norm(v)
        if n < 1e-9:
            raise StainSeparationError("monochrome input: degenerate stain vector")
        return v / n

    v_lo, v_hi = _positive_unit(v_lo), _positive_unit(v_hi)
    # Hematoxylin absorbs red most: the column with larger red OD is H.
    if v_lo[0] >= v_hi[0]:
        matrix = np.stack([v_lo, v_hi], axis=1)
    else:
        matrix = np.stack([v_hi, v_lo], axis=1)

    angle = np.degrees(np.arccos(np.clip(matrix[:, 0] @ matrix[:, 1], -1.0, 1.0)))
    if angle <= MIN_STAIN_ANGLE_DEG:
        raise StainSeparationError(
            f"monochrome input: stain vectors only {angle:.2f} degrees apart"
        )
    return matrix


def solve_concentrations(od_flat, matrix):
    """Least-squares concentrations for OD ~ matrix @ C, negatives clamped to 0."""
    pinv = np.linalg.pinv(matrix)  # (2, 3)
    conc = od_flat @ pinv.T
    conc = np.clip(conc, 0.0, None)
    residual = od_flat - conc @ matrix.T
    err = float(np.sqrt((residual**2).sum(axis=1)).mean())
    return conc, err


def band_alpha_map(shape, band_spec) -> np.ndarray:
    """Per-pixel coefficient of alternating parallel bands."""
    orientation, width_px, alpha_low, alpha_high = band_spec
    if width_px <= 0:
        raise ValueError("band width must be positive")
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    t = xs * np.cos(orientation) + ys * np.sin(orientation)
    even = np.floor_divide(t, width_px).astype(np.int64) % 2 == 0
    return np.where(even, np.float32(alpha_low), np.float32(alpha_high))


def scale_concentrations(conc, params: StainCorruptionParams) -> np.ndarray:
    """Rescale a (H, W, 2) concentration map per the active mode."""
    conc = np.asarray(conc, dtype=np.float32)
    if params.band_spec is not None:
        alpha = band_alpha_map(conc.shape[:2], params.band_spec)
        return conc * alpha[:, :, None]
    if params.region_mask is not None:
        mask = np.asarray(params.region_mask, dtype=np.float32)
        if mask.shape != conc.shape[:2]:
            raise ValueError("region mask dimensions do not match the map")
        coeff_h = 1.0 + mask * (params.alpha_h - 1.0)
        coeff_e = 1.0 + mask * (params.alpha_e - 1.0)
        return np.stack([conc[..., 0] * coeff_h, conc[..., 1] * coeff_e], axis=-1)
    out = conc.copy()
    out[..., 0] *= np.float32(params.alpha_h)
    out[..., 1] *= np.float32(params.alpha_e)
    return out


def blob_mask(shape, coverage: float, seed: int) -> np.ndarray:
    """Feathered random blob mask hitting the target coverage fraction.

    Thresholded Gaussian-smoothed white noise; for a fixed seed, masks of
    increasing coverage are nested, which keeps severity monotone.
    """
    h, w = shape
    rng = np.random.default_rng(np.uint64(seed))
    # The blob field only carries low spatial frequencies, so build it on
    # a coarse grid and upsample; big slides then cost about the same as
    # small tiles.
    scale = max(1, -(-max(h, w) // 512))
    gh, gw = -(-h // scale), -(-w // scale)
    noise = rng.standard_normal((gh, gw), dtype=np.float32)
    sigma = max(8.0, min(h, w) / 20.0) / scale
    smooth = gaussian_filter(noise, sigma)
    if scale > 1:
        smooth = zoom(smooth, scale, order=1)[:h, :w]
    threshold = np.quantile(smooth, 1.0 - coverage)
    hard = (smooth >= threshold).astype(np.float32)
    soft = gaussian_filter(hard, BLOB_FEATHER_SIGMA_PX)
    return np.clip(soft, 0.0, 1.0)


def _corruption_params(kind, shape, params) -> StainCorruptionParams:
    alpha = params.get("alpha")
    if kind == "under-stained-he" or kind == "over-stained-he":
        return StainCorruptionParams(alpha_h=alpha, alpha_e=alpha)
    if kind == "under-stained-h" or kind == "over-stained-h":
        return StainCorruptionParams(alpha_h=alpha, alpha_e=1.0)
    if kind == "under-stained-e" or kind == "over-stained-e":
        return StainCorruptionParams(alpha_h=1.0, alpha_e=alpha)
    if kind in ("residual-wax", "residual-xylene", "residual-alkali"):
        mask = blob_mask(shape, params["coverage"], params["seed"])
        alpha_h = alpha if kind in ("residual-wax", "residual-xylene") else 1.0
        alpha_e = alpha if kind in ("residual-wax", "residual-alkali") else 1.0
        return StainCorruptionParams(
            alpha_h=alpha_h, alpha_e=alpha_e, region_mask=mask
        )
    if kind == "thick-and-thin":
        rng = np.random.default_rng(np.uint64(params["seed"]))
        orientation = rng.uniform(0.0, np.pi)
        return StainCorruptionParams(
            band_spec=(
                orientation,
                params["band_width_px"],
                params["alpha_low"],
                params["alpha_high"],
            )
        )
    raise sev.UnknownKindError(kind)


@dataclass
class StainPlan:
    """Precomputed state for applying one stain corruption tile by tile."""

    matrix: np.ndarray
    params: StainCorruptionParams
    i0: float = 255.0

    def render(self, region_image, origin=(0, 0)) -> np.ndarray:
        """Corrupt one region; (ox, oy) locates it in the full frame."""
        arr = validate_image(region_image)
        h, w = arr.shape[:2]
        ox, oy = origin
        od = rgb_to_od(arr, self.i0)
        pinv = np.linalg.pinv(self.matrix).astype(np.float32)  # (2, 3)
        conc = np.clip(od.reshape(-1, 3) @ pinv.T, 0.0, None)
        conc = conc.reshape(h, w, 2)
        params = self.params
        if params.region_mask is not None:
            params = StainCorruptionParams(
                alpha_h=params.alpha_h,
                alpha_e=params.alpha_e,
                region_mask=params.region_mask[oy : oy + h, ox : ox + w],
            )
        elif params.band_spec is not None:
            # Shift the band phase so the region sees the global pattern.
            orientation, width_px, lo, hi = params.band_spec
            ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
            t = (xs + ox) * np.cos(orientation) + (ys + oy) * np.sin(orientation)
            even = np.floor_divide(t, width_px).astype(np.int64) % 2 == 0
            alpha = np.where(even, np.float32(lo), np.float32(hi))
            scaled = conc * alpha[:, :, None]
            return self._reconstruct(od, conc, scaled)
        scaled = scale_concentrations(conc, params)
        return self._reconstruct(od, conc, scaled)

    def _reconstruct(self, od, conc, scaled):
        # Residual-preserving reconstruction: OD + S @ (C' - C).
        delta = (scaled - conc) @ self.matrix.T.astype(np.float32)
        od_out = np.clip(od + delta, 0.0, None)
        return od_to_rgb(od_out, self.i0)


def plan_stain_corruption(image, kind, severity, seed, table=None) -> StainPlan:
    params = sev.params_for(kind, severity, seed, table)
    arr = validate_image(image)
    od = rgb_to_od(arr).reshape(-1, 3).astype(np.float64)
    matrix = _estimate_matrix(od)
    cparams = _corruption_params(kind, arr.shape[:2], params)
    return StainPlan(matrix=matrix, params=cparams)


def apply_stain_corruption(image, kind, severity, seed, table=None) -> np.ndarray:
    """Separate, rescale concentrations per (kind, severity, seed), reconstruct."""
    plan = plan_stain_corruption(image, kind, severity, seed, table)
    return plan.render(image)
