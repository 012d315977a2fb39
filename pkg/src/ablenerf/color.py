"""Fixed linear <-> sRGB transfer functions (plain numpy, non-differentiable).

The differentiable tone-mapping used inside the network lives in
``model.tone_map``; these are the reference curves it is tested against
and the ones dataset generation and metrics use.
"""

from __future__ import annotations

import numpy as np

SRGB_LINEAR_CUTOFF = 0.0031308
SRGB_ENCODED_CUTOFF = 0.04045


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    """Standard sRGB opto-electronic transfer, clamped to [0, 1]."""
    x = np.asarray(x)
    safe = np.maximum(x, SRGB_LINEAR_CUTOFF)
    out = np.where(x <= SRGB_LINEAR_CUTOFF, 12.92 * x, 1.055 * safe ** (1.0 / 2.4) - 0.055)
    return np.clip(out, 0.0, 1.0)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.where(x <= SRGB_ENCODED_CUTOFF, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)
