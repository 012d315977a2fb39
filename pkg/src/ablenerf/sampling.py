"""Ray generation, stratified conic-frustum sampling, IPE, resampling.

Conventions (Blender-NeRF family):
  * camera looks down -z in its own frame, +x right, +y up
  * pixel (row, col) maps through the pixel *center*, i.e. col + 0.5
  * ray directions are unnormalized: the camera-frame z component is -1,
    so t values are measured in view-depth units and near/far bounds
    (2/6 for the standard scenes) mean view depth, not euclidean range.
    Euclidean distance along the ray is t * |d|.
  * the cone base radius grows as r(t) = pixel_radius * t with
    pixel_radius = (pixel width in camera units at t=1) / sqrt(12).

Single-object functions (generate_rays, frustum_to_gaussian, ...) mirror
the conceptual contracts; the *_batch variants operate on arrays and are
what the renderer actually calls.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError

log = logging.getLogger("ablenerf.sampling")

_SQRT12 = float(np.sqrt(12.0))
WEIGHT_FLOOR = 1e-3


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    focal: float
    pose: np.ndarray  # 4x4 camera-to-world

    def __post_init__(self):
        if self.focal <= 0:
            raise ContractError(f"focal must be positive, got {self.focal}")
        if self.width <= 0 or self.height <= 0:
            raise ContractError("image dimensions must be positive")
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise ContractError(f"pose must be 4x4, got {pose.shape}")
        rot = pose[:3, :3]
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > 1e-4:
            raise ContractError(
                f"pose rotation block not orthonormal (max dev {err:.2e})")
        object.__setattr__(self, "pose", pose)

    @property
    def rotation(self):
        return self.pose[:3, :3]

    @property
    def origin(self):
        return self.pose[:3, 3]


def focal_from_angle_x(width, camera_angle_x):
    """Blender-NeRF focal length: 0.5 * W / tan(0.5 * angle_x)."""
    return 0.5 * width / np.tan(0.5 * camera_angle_x)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel_radius: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if np.linalg.norm(d) == 0:
            raise ContractError("ray direction must be nonzero")
        if self.pixel_radius <= 0:
            raise ContractError("pixel_radius must be positive")


@dataclass(frozen=True)
class TInterval:
    t0: float
    t1: float

    def __post_init__(self):
        if not self.t0 < self.t1:
            raise ContractError(
                f"degenerate interval [{self.t0}, {self.t1}]")


@dataclass(frozen=True)
class ConicFrustumGaussian:
    mean: np.ndarray
    cov: np.ndarray
    interval: TInterval = field(compare=False)


# ---------------------------------------------------------------------------
# ray generation


def ray_bundle(camera, rows, cols):
    """Vectorized pinhole rays through pixel centers.

    rows/cols are integer arrays; returns (origins (B,3), dirs (B,3),
    pixel_radius scalar).  Out-of-bounds pixels are a contract error.
    """
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    if np.any(rows < 0) or np.any(rows >= camera.height) \
            or np.any(cols < 0) or np.any(cols >= camera.width):
        raise ContractError("pixel coordinates outside image bounds")
    x = (cols + 0.5 - 0.5 * camera.width) / camera.focal
    y = -(rows + 0.5 - 0.5 * camera.height) / camera.focal
    d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
    dirs = d_cam @ camera.rotation.T
    origins = np.broadcast_to(camera.origin, dirs.shape)
    radius = (1.0 / camera.focal) / _SQRT12
    return origins, dirs, radius


def generate_rays(camera, pixel_coords):
    """List-of-Ray wrapper over ray_bundle for (row, col) pairs."""
    coords = np.asarray(list(pixel_coords))
    if coords.size == 0:
        return []
    origins, dirs, radius = ray_bundle(camera, coords[:, 0], coords[:, 1])
    return [Ray(o, d, radius) for o, d in zip(origins, dirs)]


# ---------------------------------------------------------------------------
# stratified intervals


def stratified_edges(near, far, n, rng=None, batch=None):
    """Interval edges partitioning [near, far] into n bins.

    Without an rng the grid is uniform.  With one, each interior edge is
    drawn uniformly within the width-w bin centered on its grid position
    (w = (far-near)/n), which keeps edges strictly sorted while jittering
    every cut point.  Returns shape (n+1,) or (batch, n+1).
    """
    if not 0 < near < far:
        raise ContractError(f"need 0 < near < far, got {near}, {far}")
    if n < 2:
        raise ConfigError(f"need at least 2 intervals, got {n}")
    w = (far - near) / n
    base = near + w * np.arange(1, n)
    shape = (n - 1,) if batch is None else (batch, n - 1)
    if rng is None:
        interior = np.broadcast_to(base, shape).copy()
    else:
        interior = base + w * (rng.random(shape) - 0.5)
    pad = np.full(shape[:-1] + (1,), 0.0)
    return np.concatenate([pad + near, interior, pad + far], axis=-1)


def stratified_intervals(near, far, n, rng=None):
    """TInterval list form of stratified_edges (single ray)."""
    edges = stratified_edges(near, far, n, rng=rng)
    return [TInterval(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:])]


# ---------------------------------------------------------------------------
# conic frustum -> gaussian


def frustum_gaussians(origins, dirs, radius, edges):
    """Batched frustum moments: means (B,N,3) and diag covariance (B,N,3).

    edges is (B, N+1); radius is the per-ray cone slope (scalar or (B,)).
    Only the covariance diagonal is produced (all the encoder needs).
    """
    t0 = np.ascontiguousarray(edges[..., :-1], dtype=np.float64)
    t1 = np.ascontiguousarray(edges[..., 1:], dtype=np.float64)
    b, n = t0.shape
    r = np.broadcast_to(np.asarray(radius, dtype=np.float64), (b,))
    r_flat = np.repeat(r, n)
    mu_t, sigma_t2, sigma_r2 = kernels.conic_moments(
        t0.reshape(-1), t1.reshape(-1), r_flat)
    mu_t = mu_t.reshape(b, n)
    sigma_t2 = sigma_t2.reshape(b, n)
    sigma_r2 = sigma_r2.reshape(b, n)
    d = np.asarray(dirs, dtype=np.float64)
    means = origins[:, None, :] + mu_t[..., None] * d[:, None, :]
    d2 = d * d
    dnorm2 = d2.sum(-1, keepdims=True)
    # diag of sigma_t^2 dd^T + sigma_r^2 (I - dd^T/|d|^2)
    var = (sigma_t2[..., None] * d2[:, None, :]
           + sigma_r2[..., None] * (1.0 - d2 / dnorm2)[:, None, :])
    return means, var


def frustum_to_gaussian(ray, interval):
    """Single-frustum version with the full 3x3 covariance."""
    if not isinstance(interval, TInterval):
        interval = TInterval(*interval)
    o = np.asarray(ray.origin, dtype=np.float64)
    d = np.asarray(ray.direction, dtype=np.float64)
    t0 = np.array([interval.t0])
    t1 = np.array([interval.t1])
    mu_t, sigma_t2, sigma_r2 = kernels.conic_moments(
        t0, t1, np.array([ray.pixel_radius], dtype=np.float64))
    mu = o + mu_t[0] * d
    outer = np.outer(d, d)
    cov = sigma_t2[0] * outer + sigma_r2[0] * (np.eye(3) - outer / (d @ d))
    return ConicFrustumGaussian(mu, cov, interval)


# ---------------------------------------------------------------------------
# integrated positional encoding


def ipe_batch(means, var, n_bands):
    """IPE features for means/var of shape (..., 3) -> (..., 6*n_bands).

    Layout: [sin(2^k mu_j) * damp | cos(2^k mu_j) * damp] with band k
    outer, axis j inner in each half; damp = exp(-0.5 * 4^k * var_j).
    """
    if n_bands < 1:
        raise ConfigError(f"need at least one frequency band, got {n_bands}")
    lead = means.shape[:-1]
    flat_mu = np.ascontiguousarray(means.reshape(-1, 3), dtype=np.float64)
    flat_var = np.ascontiguousarray(var.reshape(-1, 3), dtype=np.float64)
    feats = kernels.ipe_features(flat_mu, flat_var, n_bands)
    return feats.reshape(lead + (6 * n_bands,))


def ipe_grad_mu_batch(means, var, n_bands):
    """d(feature_c)/d(mu_{axis of c}); column c touches axis c%3 only."""
    lead = means.shape[:-1]
    flat_mu = np.ascontiguousarray(means.reshape(-1, 3), dtype=np.float64)
    flat_var = np.ascontiguousarray(var.reshape(-1, 3), dtype=np.float64)
    g = kernels.ipe_grad_mu(flat_mu, flat_var, n_bands)
    return g.reshape(lead + (6 * n_bands,))


def integrated_pos_enc(g, n_bands):
    """Feature vector of length 6*n_bands for one ConicFrustumGaussian."""
    var = np.diag(np.asarray(g.cov, dtype=np.float64))
    return ipe_batch(np.asarray(g.mean, dtype=np.float64)[None, :],
                     var[None, :], n_bands)[0]


# ---------------------------------------------------------------------------
# hierarchical resampling from attention


def midpoint_uniforms(n, batch=None):
    """Deterministic CDF positions (i + 0.5)/n, for evaluation."""
    u = (np.arange(n) + 0.5) / n
    if batch is None:
        return u
    return np.broadcast_to(u, (batch, n)).copy()


def stratified_uniforms(n, rng, batch=None):
    """Sorted stratified CDF positions (i + u_i)/n with u_i ~ U[0,1)."""
    shape = (n,) if batch is None else (batch, n)
    return (np.arange(n) + rng.random(shape)) / n


def _prepare_weights(attn):
    """Floor-and-renormalize attention weights; uniform fallback on zero rows."""
    w = np.asarray(attn, dtype=np.float64)
    if np.any(w < 0):
        raise ContractError("attention weights must be non-negative")
    total = w.sum(-1, keepdims=True)
    dead = (total <= 0.0).reshape(-1)
    if np.any(dead):
        log.warning("resample: %d ray(s) with all-zero attention, "
                    "falling back to uniform pdf", int(dead.sum()))
        w = np.where(total > 0, w, 1.0)
        total = w.sum(-1, keepdims=True)
    w = np.maximum(w / total, WEIGHT_FLOOR)
    return w / w.sum(-1, keepdims=True)


def _edges_from_samples(t, near, far):
    """Midpoint edges around sorted samples, ends mirrored then clamped."""
    mid = 0.5 * (t[..., 1:] + t[..., :-1])
    n_edges = t.shape[-1] + 1
    eps = 1e-6 * (far - near) / n_edges
    lo = np.clip(2.0 * t[..., :1] - mid[..., :1], near, far - n_edges * eps)
    hi = np.clip(2.0 * t[..., -1:] - mid[..., -1:], near, far)
    edges = np.concatenate([lo, mid, hi], axis=-1)
    # duplicate samples would give zero-width intervals; floor each step,
    # then shrink linearly if the floors pushed the last edge past far
    steps = np.maximum(np.diff(edges, axis=-1), eps)
    out = lo + np.concatenate(
        [np.zeros_like(lo), np.cumsum(steps, axis=-1)], axis=-1)
    over = out[..., -1:] > far
    scale = np.where(over, (far - lo) / (out[..., -1:] - lo), 1.0)
    return lo + (out - lo) * scale


def resample_edges(coarse_edges, attn, n_f, u):
    """Inverse-CDF resampling: (B,N+1) edges + (B,N) weights -> (B,N_f+1) edges.

    u holds sorted CDF positions in [0,1), shape (B, N_f) — stratified
    from an rng during training, midpoints for deterministic eval.  The
    weights are treated as plain numbers: no gradient ever flows back.
    """
    coarse_edges = np.ascontiguousarray(coarse_edges, dtype=np.float64)
    w = np.ascontiguousarray(_prepare_weights(attn))
    u = np.ascontiguousarray(u, dtype=np.float64)
    if w.shape[-1] != coarse_edges.shape[-1] - 1:
        raise ContractError(
            f"weights ({w.shape[-1]}) must match interval count "
            f"({coarse_edges.shape[-1] - 1})")
    t = kernels.sample_pdf(coarse_edges, w, u)
    t = np.sort(t, axis=-1)
    near = float(coarse_edges[..., 0].min())
    far = float(coarse_edges[..., -1].max())
    return _edges_from_samples(t, near, far)


def resample_from_attention(coarse_intervals, attn, n_f, rng=None):
    """TInterval-list wrapper over resample_edges for one ray."""
    t0s = [iv.t0 for iv in coarse_intervals]
    t1s = [iv.t1 for iv in coarse_intervals]
    edges = np.array(t0s + [t1s[-1]], dtype=np.float64)[None, :]
    if rng is None:
        u = midpoint_uniforms(n_f, batch=1)
    else:
        u = stratified_uniforms(n_f, rng, batch=1)
    out = resample_edges(edges, np.asarray(attn, dtype=np.float64)[None, :],
                         n_f, u)[0]
    return [TInterval(float(a), float(b)) for a, b in zip(out[:-1], out[1:])]
