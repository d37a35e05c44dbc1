"""Shared fixtures: synthetic two-stain images with known ground truth.

The generator paints smooth random concentration fields for two known
unit-norm stain color vectors and converts the resulting optical density
to 8-bit RGB.  Ground-truth vectors and concentrations come back with the
image so estimators can be checked against them.
"""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

H_VEC = np.array([0.65, 0.70, 0.29])
H_VEC = H_VEC / np.linalg.norm(H_VEC)
E_VEC = np.array([0.07, 0.99, 0.11])
E_VEC = E_VEC / np.linalg.norm(E_VEC)


def synth_he(size: int, seed: int, strength: float = 1.0):
    """Synthetic two-stain image; returns (rgb, conc_a, conc_b).

    ``strength`` scales the concentration fields; lower values keep the
    image away from the dark end where quantization noise in density
    grows large.
    """
    rng = np.random.default_rng(seed)
    sigma = max(3.0, size / 24.0)

    def field(mean, spread, lo, hi):
        f = gaussian_filter(rng.standard_normal((size, size), dtype=np.float32), sigma)
        f = (f - f.mean()) / (f.std() + 1e-9)
        return np.clip(mean + spread * f, lo, hi)

    ca = field(0.6 * strength, 0.35 * strength, 0.0, 1.5 * strength)
    cb = field(0.45 * strength, 0.28 * strength, 0.0, 1.2 * strength)
    od = ca[..., None] * H_VEC + cb[..., None] * E_VEC
    rgb = np.rint(255.0 * np.power(10.0, -od)).clip(0, 255).astype(np.uint8)
    return rgb, ca, cb


@pytest.fixture
def he_image():
    rgb, _, _ = synth_he(96, 7)
    return rgb


@pytest.fixture
def he_corpus():
    return [synth_he(96, 100 + i)[0] for i in range(10)]
