"""Numba-compiled twins of the numpy kernels.

Same signatures, same math, loop-structured for the JIT.  Importing
this module requires numba; the dispatch layer falls back to the numpy
implementations when it is missing or disabled.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def conic_moments(t0, t1, radius):
    n = t0.shape[0]
    mu_t = np.empty_like(t0)
    sigma_t2 = np.empty_like(t0)
    sigma_r2 = np.empty_like(t0)
    for i in range(n):
        t_mu = 0.5 * (t0[i] + t1[i])
        t_d = 0.5 * (t1[i] - t0[i])
        t_mu2 = t_mu * t_mu
        t_d2 = t_d * t_d
        denom = 3.0 * t_mu2 + t_d2
        mu_t[i] = t_mu + 2.0 * t_mu * t_d2 / denom
        sigma_t2[i] = t_d2 / 3.0 - (4.0 * t_d2 * t_d2 * (12.0 * t_mu2 - t_d2)) / (15.0 * denom * denom)
        sigma_r2[i] = radius[i] * radius[i] * (
            0.25 * t_mu2 + (5.0 / 12.0) * t_d2 - (4.0 * t_d2 * t_d2) / (15.0 * denom)
        )
    return mu_t, sigma_t2, sigma_r2


@njit(cache=True)
def ipe_features(mu, var, n_bands):
    m = mu.shape[0]
    width = n_bands * 3
    out = np.empty((m, 2 * width), dtype=mu.dtype)
    for i in range(m):
        for k in range(n_bands):
            scale = 2.0 ** k
            for j in range(3):
                s = scale * mu[i, j]
                damp = np.exp(-0.5 * scale * scale * var[i, j])
                out[i, k * 3 + j] = np.sin(s) * damp
                out[i, width + k * 3 + j] = np.cos(s) * damp
    return out


@njit(cache=True)
def ipe_grad_mu(mu, var, n_bands):
    m = mu.shape[0]
    width = n_bands * 3
    out = np.empty((m, 2 * width), dtype=mu.dtype)
    for i in range(m):
        for k in range(n_bands):
            scale = 2.0 ** k
            for j in range(3):
                s = scale * mu[i, j]
                damp = np.exp(-0.5 * scale * scale * var[i, j])
                out[i, k * 3 + j] = np.cos(s) * damp * scale
                out[i, width + k * 3 + j] = -np.sin(s) * damp * scale
    return out


@njit(cache=True)
def sample_pdf(edges, weights, u):
    b, n = weights.shape
    m = u.shape[1]
    out = np.empty((b, m), dtype=edges.dtype)
    cdf = np.empty(n + 1, dtype=edges.dtype)
    for r in range(b):
        total = 0.0
        for i in range(n):
            total += weights[r, i]
        cdf[0] = 0.0
        acc = 0.0
        for i in range(n):
            acc += weights[r, i] / total
            cdf[i + 1] = acc
        cdf[n] = 1.0
        for s in range(m):
            us = u[r, s]
            # count of cdf entries <= us, minus one (matches numpy twin)
            idx = -1
            for i in range(n + 1):
                if cdf[i] <= us:
                    idx += 1
                else:
                    break
            if idx < 0:
                idx = 0
            if idx > n - 1:
                idx = n - 1
            span = cdf[idx + 1] - cdf[idx]
            if span <= 0.0:
                span = 1.0
            frac = (us - cdf[idx]) / span
            out[r, s] = edges[r, idx] + frac * (edges[r, idx + 1] - edges[r, idx])
    return out


@njit(cache=True)
def composite_rays(sigma, delta, rgb):
    b, n = sigma.shape
    colour = np.zeros((b, 3), dtype=rgb.dtype)
    w = np.empty((b, n), dtype=sigma.dtype)
    resid = np.empty(b, dtype=sigma.dtype)
    for r in range(b):
        trans = 1.0
        for i in range(n):
            sd = sigma[r, i] * delta[r, i]
            alpha = -np.expm1(-sd)
            wi = trans * alpha
            w[r, i] = wi
            colour[r, 0] += wi * rgb[r, i, 0]
            colour[r, 1] += wi * rgb[r, i, 1]
            colour[r, 2] += wi * rgb[r, i, 2]
            trans *= np.exp(-sd)
        resid[r] = trans
    return colour, w, resid


@njit(cache=True)
def eval_scene(points, view_dirs, kind, center, extent, density,
               base_rgb, lobe_exp, lobe_rgb, light_pos):
    m = points.shape[0]
    n_prim = kind.shape[0]
    sig = np.zeros(m, dtype=points.dtype)
    col = np.zeros((m, 3), dtype=points.dtype)
    for i in range(m):
        for p in range(n_prim):
            dx = points[i, 0] - center[p, 0]
            dy = points[i, 1] - center[p, 1]
            dz = points[i, 2] - center[p, 2]
            if kind[p] == 0:
                inside = dx * dx + dy * dy + dz * dz <= extent[p, 0] * extent[p, 0]
            else:
                inside = (abs(dx) <= extent[p, 0]) and (abs(dy) <= extent[p, 1]) and (abs(dz) <= extent[p, 2])
            if not inside:
                continue
            cr = base_rgb[p, 0]
            cg = base_rgb[p, 1]
            cb = base_rgb[p, 2]
            if lobe_exp[p] > 0:
                lx = light_pos[p, 0] - points[i, 0]
                ly = light_pos[p, 1] - points[i, 1]
                lz = light_pos[p, 2] - points[i, 2]
                norm = np.sqrt(lx * lx + ly * ly + lz * lz)
                if norm <= 0.0:
                    norm = 1.0
                cosang = -(lx * view_dirs[i, 0] + ly * view_dirs[i, 1] + lz * view_dirs[i, 2]) / norm
                if cosang > 0.0:
                    glint = cosang ** lobe_exp[p]
                    cr += glint * lobe_rgb[p, 0]
                    cg += glint * lobe_rgb[p, 1]
                    cb += glint * lobe_rgb[p, 2]
            sig[i] += density[p]
            col[i, 0] += density[p] * cr
            col[i, 1] += density[p] * cg
            col[i, 2] += density[p] * cb
        if sig[i] > 0:
            col[i, 0] /= sig[i]
            col[i, 1] /= sig[i]
            col[i, 2] /= sig[i]
    return sig, col
