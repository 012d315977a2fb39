"""Emission-absorption reference: hand-derived transmittance/weight values,
invariants on random inputs, and interval-splitting consistency.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ablenerf import vr_oracle as vr
from ablenerf.errors import ContractError

LN2 = float(np.log(2.0))


def _pts(sigmas, colours=None):
    colours = colours or [(1.0, 1.0, 1.0)] * len(sigmas)
    return [vr.PointRadiance(s, 1.0, c) for s, c in zip(sigmas, colours)]


# ---------------------------------------------------------------------------
# frozen hand values
#
# With unit deltas, sigma*delta = ln 2 halves the transmittance per step:
#   T_i = exp(-sum_{j<i} sd_j), exclusive, so T_0 = 1 always.


def test_transmittance_exclusive_prefix():
    t = vr.transmittance(_pts([0.0, 0.0, LN2]))
    assert np.allclose(t, [1.0, 1.0, 1.0], atol=1e-12)  # last sd unseen
    t = vr.transmittance(_pts([LN2, LN2]))
    assert np.allclose(t, [1.0, 0.5], atol=1e-12)
    assert np.array_equal(vr.transmittance(_pts([5.0])), [1.0])


def test_weights_hand_case():
    # sd = [0, ln2, ln2]: w = T * (1 - 2^-1) = [0, 0.5, 0.25]
    w = vr.weights(_pts([0.0, LN2, LN2]))
    assert np.allclose(w, [0.0, 0.5, 0.25], atol=1e-7)


def test_composite_hand_case():
    pts = [
        vr.PointRadiance(0.0, 1.0, (1.0, 0.0, 0.0)),
        vr.PointRadiance(LN2, 1.0, (0.0, 1.0, 0.0)),
        vr.PointRadiance(LN2, 1.0, (0.0, 0.0, 1.0)),
    ]
    c = vr.composite(pts)
    assert np.allclose(c, [0.0, 0.5, 0.25], atol=1e-7)


def test_opaque_sample_returns_its_colour():
    pts = [vr.PointRadiance(20.0, 1.0, (0.3, 0.6, 0.9))]
    assert np.allclose(vr.composite(pts), [0.3, 0.6, 0.9], atol=1e-8)


def test_vacuum_composites_to_black():
    pts = _pts([0.0, 0.0, 0.0], [(0.9, 0.9, 0.9)] * 3)
    assert np.array_equal(vr.composite(pts), [0.0, 0.0, 0.0])
    assert np.array_equal(vr.weights(pts), [0.0, 0.0, 0.0])


def test_first_opaque_sample_occludes_everything_behind():
    pts = [
        vr.PointRadiance(50.0, 1.0, (1.0, 0.0, 0.0)),
        vr.PointRadiance(50.0, 1.0, (0.0, 1.0, 0.0)),
    ]
    c = vr.composite(pts)
    assert c[0] > 0.999 and c[1] < 1e-6


def test_order_matters():
    a = [vr.PointRadiance(LN2, 1.0, (1.0, 0.0, 0.0)),
         vr.PointRadiance(20.0, 1.0, (0.0, 0.0, 1.0))]
    assert not np.allclose(vr.composite(a), vr.composite(a[::-1]))


def test_delta_scaling_equivalence():
    # sigma * delta is all that matters: (2s, d) == (s, 2d)
    a = vr.weights_from_arrays(np.array([2.0, 4.0]), np.array([0.3, 0.1]))
    b = vr.weights_from_arrays(np.array([1.0, 2.0]), np.array([0.6, 0.2]))
    assert np.allclose(a, b, atol=1e-15)


def test_interval_split_consistency():
    # splitting each constant-density interval in half must not change
    # the composite (the quadrature is exact for piecewise-constant fields)
    sigma = np.array([0.7, 2.3, 0.0, 1.1])
    delta = np.array([0.5, 0.25, 0.4, 0.8])
    colour = np.array([[0.2, 0.4, 0.6], [0.9, 0.1, 0.3],
                       [0.5, 0.5, 0.5], [0.0, 0.7, 1.0]])
    whole = vr.composite_from_arrays(sigma, delta, colour)
    split = vr.composite_from_arrays(
        np.repeat(sigma, 2), np.repeat(delta, 2) / 2.0,
        np.repeat(colour, 2, axis=0))
    assert np.allclose(whole, split, atol=1e-6)


# ---------------------------------------------------------------------------
# contracts


def test_point_radiance_contracts():
    with pytest.raises(ContractError):
        vr.PointRadiance(-0.1, 1.0, (0.5, 0.5, 0.5))
    with pytest.raises(ContractError):
        vr.PointRadiance(1.0, 0.0, (0.5, 0.5, 0.5))
    with pytest.raises(ContractError):
        vr.PointRadiance(1.0, 1.0, (0.5, 0.5))
    with pytest.raises(ContractError):
        vr.PointRadiance(1.0, 1.0, (0.5, 0.5, 1.5))
    with pytest.raises(ContractError):
        vr.PointRadiance(1.0, 1.0, (-0.01, 0.5, 0.5))


def test_empty_point_list_rejected():
    with pytest.raises(ContractError):
        vr.composite([])


def test_negative_density_arrays_rejected():
    with pytest.raises(ContractError):
        vr.transmittance_from_arrays(np.array([0.5, -0.5]), np.ones(2))


# ---------------------------------------------------------------------------
# invariants on random inputs


def test_weights_bounded_on_random_rays():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = rng.integers(1, 64)
        sigma = rng.uniform(0, 30, n)
        delta = rng.uniform(1e-3, 0.5, n)
        w = vr.weights_from_arrays(sigma, delta)
        assert (w >= 0).all() and (w <= 1).all()
        assert w.sum() <= 1.0 + 1e-12


def test_transmittance_monotone_nonincreasing():
    rng = np.random.default_rng(1)
    t = vr.transmittance_from_arrays(rng.uniform(0, 5, 50),
                                     rng.uniform(0.01, 0.3, 50))
    assert t[0] == 1.0
    assert (np.diff(t) <= 1e-15).all()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 50), st.floats(1e-3, 1.0)),
                min_size=1, max_size=32))
def test_weight_sum_plus_leftover_is_one(pairs):
    sigma = np.array([p[0] for p in pairs])
    delta = np.array([p[1] for p in pairs])
    w = vr.weights_from_arrays(sigma, delta)
    leftover = np.exp(-(sigma * delta).sum())
    assert np.isclose(w.sum() + leftover, 1.0, atol=1e-10)


def test_composite_stays_inside_colour_hull():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(1, 32))
        sigma = rng.uniform(0, 20, n)
        delta = rng.uniform(0.01, 0.5, n)
        colour = rng.uniform(0, 1, (n, 3))
        c = vr.composite_from_arrays(sigma, delta, colour)
        assert (c >= 0).all() and (c <= colour.max(axis=0) + 1e-12).all()
