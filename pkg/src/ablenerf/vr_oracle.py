"""Classic emission-absorption volume rendering, plain numpy.

This is the reference physics: given ordered samples along a ray with
density sigma, interval length delta and linear colour c, the composite
is

    C = sum_i T_i * (1 - exp(-sigma_i * delta_i)) * c_i
    T_i = exp(-sum_{j<i} sigma_j * delta_j)

It exists as a test oracle and sanity baseline; nothing here is
differentiable on purpose.  The attention renderer is checked against
these functions, not the other way round.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class PointRadiance:
    """One quadrature sample: density, interval length, linear RGB."""

    sigma: float
    delta: float
    colour: tuple

    def __post_init__(self):
        if self.sigma < 0:
            raise ContractError(f"sigma must be non-negative, got {self.sigma}")
        if self.delta <= 0:
            raise ContractError(f"delta must be positive, got {self.delta}")
        c = np.asarray(self.colour, dtype=np.float64)
        if c.shape != (3,):
            raise ContractError(f"colour must be RGB, got shape {c.shape}")
        if np.any(c < 0) or np.any(c > 1):
            raise ContractError("colour components must lie in [0, 1]")


def _unpack(points):
    sigma = np.array([p.sigma for p in points], dtype=np.float64)
    delta = np.array([p.delta for p in points], dtype=np.float64)
    colour = np.array([p.colour for p in points], dtype=np.float64)
    if sigma.size == 0:
        raise ContractError("need at least one point")
    return sigma, delta, colour


def transmittance_from_arrays(sigma, delta):
    """T_i = exp(-prefix sum of sigma*delta), exclusive: T_0 = 1."""
    sigma = np.asarray(sigma, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(sigma < 0):
        raise ContractError("negative density in transmittance input")
    sd = sigma * delta
    return np.exp(-(np.cumsum(sd) - sd))


def transmittance(points):
    """Per-sample transmittance for an ordered front-to-back point list."""
    sigma, delta, _ = _unpack(points)
    return transmittance_from_arrays(sigma, delta)


def weights_from_arrays(sigma, delta):
    """Compositing weights w_i = T_i * (1 - exp(-sigma_i delta_i))."""
    t = transmittance_from_arrays(sigma, delta)
    sd = np.asarray(sigma, dtype=np.float64) * np.asarray(delta, dtype=np.float64)
    return t * -np.expm1(-sd)


def composite_from_arrays(sigma, delta, colour):
    w = weights_from_arrays(sigma, delta)
    return w @ np.asarray(colour, dtype=np.float64)


def weights(points):
    sigma, delta, _ = _unpack(points)
    return weights_from_arrays(sigma, delta)


def composite(points):
    """Alpha-composited linear RGB for ordered front-to-back samples."""
    sigma, delta, colour = _unpack(points)
    return composite_from_arrays(sigma, delta, colour)
