"""Image metrics, whole-image rendering, depth maps, LE perturbation, PNG I/O.

Images are plain float arrays, (H, W, 3) sRGB in [0, 1] (grayscale maps
are (H, W)).  PSNR/SSIM are computed in that clamped sRGB space, the
usual convention for NeRF-family evaluation.
"""

from __future__ import annotations

import logging
import os
import tempfile

import numpy as np
from PIL import Image
from scipy.signal import convolve2d

from . import checkpoint as ckpt
from . import diffcore as dc
from . import model as ablemodel
from . import sampling
from .errors import CheckpointError, ContractError, ShapeError

log = logging.getLogger("ablenerf.evalviz")

PSNR_CAP = 99.0


# ---------------------------------------------------------------------------
# metrics


def psnr(a, b):
    """-10 log10(MSE) over all channels, capped at 99 dB for identical input."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(-10.0 * np.log10(mse), PSNR_CAP)


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, k1=0.01, k2=0.03, dynamic_range=1.0):
    """Single-scale SSIM, 11x11 Gaussian window sigma=1.5, per-channel mean."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise ContractError(f"ssim needs at least 11x11 images, got {a.shape[:2]}")
    win = _gaussian_window()
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x = convolve2d(x, win, mode="valid")
        mu_y = convolve2d(y, win, mode="valid")
        xx = convolve2d(x * x, win, mode="valid") - mu_x * mu_x
        yy = convolve2d(y * y, win, mode="valid") - mu_y * mu_y
        xy = convolve2d(x * y, win, mode="valid") - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        vals.append((num / den).mean())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# whole-image rendering


class ImageRender:
    """Per-pixel render products for one camera."""

    def __init__(self, h, w):
        self.rgb = np.zeros((h, w, 3), dtype=np.float32)
        self.rgb_coarse = np.zeros((h, w, 3), dtype=np.float32)
        self.direct = np.zeros((h, w, 3), dtype=np.float32)
        self.viewdep = np.zeros((h, w, 3), dtype=np.float32)
        self.depth = np.zeros((h, w), dtype=np.float64)
        self.depth_expected = np.zeros((h, w), dtype=np.float64)


def render_image(params, cfg, camera, near, far, chunk=1024):
    """Deterministic full-frame render (midpoint samples, no jitter)."""
    h, w = camera.height, camera.width
    rows, cols = np.mgrid[0:h, 0:w]
    o, d, radius = sampling.ray_bundle(camera, rows.reshape(-1), cols.reshape(-1))
    out = ImageRender(h, w)
    flat_rgb = out.rgb.reshape(-1, 3)
    flat_coarse = out.rgb_coarse.reshape(-1, 3)
    flat_direct = out.direct.reshape(-1, 3)
    flat_view = out.viewdep.reshape(-1, 3)
    flat_depth = out.depth.reshape(-1)
    flat_depth_exp = out.depth_expected.reshape(-1)
    with dc.no_grad():
        for s in range(0, h * w, chunk):
            e = min(s + chunk, h * w)
            batch = ablemodel.render_rays(
                params, cfg, o[s:e], d[s:e],
                np.full(e - s, radius), near, far, rng=None)
            flat_rgb[s:e] = batch.rgb_fine.data
            flat_coarse[s:e] = batch.rgb_coarse.data
            flat_direct[s:e] = batch.direct_rgb
            flat_view[s:e] = batch.viewdep_rgb
            flat_depth[s:e] = batch.depth
            flat_depth_exp[s:e] = batch.depth_expected
    return out


# ---------------------------------------------------------------------------
# depth maps


def depth_map(depth, near, far):
    """Raw depth array -> (grayscale image in [0,1], the raw array).

    Grayscale maps [near, far] to [0, 1] (clipped); raw values are the
    euclidean peak-attention depths and go to CSV untouched.
    """
    raw = np.asarray(depth, dtype=np.float64)
    gray = np.clip((raw - near) / (far - near), 0.0, 1.0)
    return gray.astype(np.float32), raw


def write_depth_csv(path, raw):
    _atomic_write(path, "\n".join(
        ",".join(f"{v:.8g}" for v in row) for row in np.atleast_2d(raw)).encode()
        + b"\n")


# ---------------------------------------------------------------------------
# LE perturbation studies


def perturb_le(ckpt_path, out_path, mode, sigma=0.1, seed=0):
    """Copy a checkpoint with its embedding bank corrupted.

    mode="gaussian" adds seeded N(0, sigma^2) noise; mode="zero" blanks
    the bank.  Every other tensor and the header are byte-identical.
    """
    arrays, meta = ckpt.load_checkpoint(ckpt_path)
    if "le_bank" not in arrays:
        raise CheckpointError(
            f"{ckpt_path} has no le_bank (trained with the LE branch off?)")
    bank = arrays["le_bank"]
    if mode == "gaussian":
        noise = np.random.default_rng(seed).normal(0.0, sigma, bank.shape)
        arrays["le_bank"] = (bank + noise).astype(bank.dtype)
    elif mode == "zero":
        arrays["le_bank"] = np.zeros_like(bank)
    else:
        raise ContractError(f"unknown perturbation mode {mode!r}")
    ckpt.save_checkpoint(out_path, arrays, meta)
    return out_path


# ---------------------------------------------------------------------------
# PNG I/O


def _atomic_write(path, data):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_uint8(img):
    """[0,1] floats -> uint8, round-half-up."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def write_png(img, path):
    """8-bit PNG, written atomically; grayscale or RGB floats in [0,1]."""
    arr = to_uint8(img)
    if arr.ndim not in (2, 3):
        raise ShapeError(f"expected (H,W) or (H,W,3) image, got {arr.shape}")
    import io
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    _atomic_write(path, buf.getvalue())
    return path


def read_png(path):
    """PNG -> float32 in [0,1]; RGBA is composited onto white."""
    arr = np.asarray(Image.open(path)).astype(np.float32) / 255.0
    if arr.ndim == 3 and arr.shape[-1] == 4:
        alpha = arr[..., 3:4]
        arr = arr[..., :3] * alpha + (1.0 - alpha)
    return arr
