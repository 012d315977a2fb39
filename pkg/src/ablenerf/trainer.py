"""Loss, Adam, lr schedule, and the training loop.

Supervision happens in sRGB space: both network outputs and dataset
pixels are tone-mapped values in [0,1], and the loss is the batch mean
of the channel-summed squared error of the coarse and fine predictions
(mean, not sum, so desk-scale batches keep the published lr sensible).
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, fields

import numpy as np

from . import checkpoint as ckpt
from . import diffcore as dc
from . import model as ablemodel
from . import sampling
from .errors import ConfigError, ShapeError, TrainingError

log = logging.getLogger("ablenerf.trainer")

GRAD_CLIP_NORM = 5.0


@dataclass
class TrainConfig:
    batch_rays: int = 1024
    iters: int = 25000
    lr_init: float = 5e-4
    lr_final: float = 1e-4
    warmup_iters: int = 1250
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 5000

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.lr_final <= self.lr_init:
            raise ConfigError(
                f"need 0 < lr_final <= lr_init, got {self.lr_final}, {self.lr_init}")
        if not 0 < self.warmup_iters < self.iters:
            raise ConfigError(
                f"need 0 < warmup_iters < iters, got {self.warmup_iters}, {self.iters}")
        for name in ("batch_rays", "iters", "log_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown train config keys: {sorted(bad)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss and schedule


def loss(rgb_coarse, rgb_fine, gt):
    """Batch mean of |c_coarse - gt|^2 + |c_fine - gt|^2 (3-channel norms)."""
    gt = np.asarray(gt)
    if rgb_coarse.shape != gt.shape or rgb_fine.shape != gt.shape:
        raise ShapeError(
            f"loss shapes disagree: {rgb_coarse.shape}, {rgb_fine.shape}, {gt.shape}")
    g = dc.constant(gt.astype(rgb_coarse.dtype))
    ec = dc.sub(rgb_coarse, g)
    ef = dc.sub(rgb_fine, g)
    per_ray = dc.add(dc.tsum(dc.mul(ec, ec), axis=-1),
                     dc.tsum(dc.mul(ef, ef), axis=-1))
    return dc.tmean(per_ray)


def lr_at(it, cfg):
    """Log-linear anneal lr_init -> lr_final with a linear warmup ramp."""
    frac = min(max(it / cfg.iters, 0.0), 1.0)
    base = math.exp((1.0 - frac) * math.log(cfg.lr_init)
                    + frac * math.log(cfg.lr_final))
    return base * min(1.0, it / cfg.warmup_iters)


# ---------------------------------------------------------------------------
# optimizer


def init_adam_state(params):
    return {
        "step": 0,
        "m": {k: np.zeros_like(t.data) for k, t in params.items()},
        "v": {k: np.zeros_like(t.data) for k, t in params.items()},
    }


def clip_global_norm(grads, max_norm=GRAD_CLIP_NORM):
    """Scale every gradient down so the joint L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def adam_step(params, grads, state, lr, cfg):
    """Bias-corrected Adam update, in place on the parameter tensors."""
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            raise TrainingError(f"missing gradient for parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        p = params[name]
        m = state["m"][name]
        v = state["v"][name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# ray table


@dataclass
class RayTable:
    """Every training ray of a dataset, flattened for random batching."""

    origins: np.ndarray   # (M, 3)
    dirs: np.ndarray      # (M, 3)
    radius: np.ndarray    # (M,)
    rgb: np.ndarray       # (M, 3) sRGB ground truth
    near: float
    far: float


def build_ray_table(dataset):
    """Precompute rays and target colours for all pixels of all images."""
    if len(dataset.images) == 0:
        raise ConfigError("dataset has no images")
    if len(dataset.images) != len(dataset.cameras):
        raise ConfigError(
            f"{len(dataset.images)} images but {len(dataset.cameras)} cameras")
    all_o, all_d, all_r, all_c = [], [], [], []
    for img, cam in zip(dataset.images, dataset.cameras):
        h, w = img.shape[:2]
        if (h, w) != (cam.height, cam.width):
            raise ConfigError(
                f"image is {h}x{w} but camera says {cam.height}x{cam.width}")
        rows, cols = np.mgrid[0:h, 0:w]
        o, d, rad = sampling.ray_bundle(cam, rows.reshape(-1), cols.reshape(-1))
        all_o.append(o)
        all_d.append(d)
        all_r.append(np.full(h * w, rad))
        all_c.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))
    return RayTable(
        origins=np.concatenate(all_o), dirs=np.concatenate(all_d),
        radius=np.concatenate(all_r), rgb=np.concatenate(all_c),
        near=float(dataset.near), far=float(dataset.far))


# ---------------------------------------------------------------------------
# checkpoint plumbing


def save_training_checkpoint(out_dir, params, state, model_cfg, train_cfg, it,
                             filename="model.ckpt"):
    meta = {
        "model_cfg": model_cfg.to_dict(),
        "train_cfg": train_cfg.to_dict(),
        "iter": it,
    }
    path = os.path.join(out_dir, filename)
    ckpt.save_checkpoint(path, ablemodel.params_to_arrays(params), meta)
    opt_tensors = {}
    for k, a in state["m"].items():
        opt_tensors["m/" + k] = a
    for k, a in state["v"].items():
        opt_tensors["v/" + k] = a
    ckpt.save_checkpoint(os.path.join(out_dir, "optimizer.ckpt"),
                         opt_tensors, {"step": state["step"], "iter": it})
    return path


def load_training_checkpoint(path, dtype=np.float32):
    """Load a model checkpoint (+ sibling optimizer state if present)."""
    arrays, meta = ckpt.load_checkpoint(path)
    params = ablemodel.params_from_arrays(arrays, dtype=dtype)
    model_cfg = ablemodel.ModelConfig.from_dict(meta["model_cfg"])
    train_cfg = TrainConfig.from_dict(meta["train_cfg"]) if "train_cfg" in meta else None
    state = None
    opt_path = os.path.join(os.path.dirname(path) or ".", "optimizer.ckpt")
    if os.path.exists(opt_path):
        opt, opt_meta = ckpt.load_checkpoint(opt_path)
        if opt_meta.get("iter") == meta.get("iter"):
            state = {
                "step": int(opt_meta["step"]),
                "m": {k[2:]: a.astype(dtype) for k, a in opt.items() if k.startswith("m/")},
                "v": {k[2:]: a.astype(dtype) for k, a in opt.items() if k.startswith("v/")},
            }
    return params, model_cfg, train_cfg, int(meta.get("iter", 0)), state


# ---------------------------------------------------------------------------
# training loop


def train(dataset, model_cfg, train_cfg, out_dir, resume=None,
          dtype=np.float32, progress=None):
    """Optimize a model on a dataset; returns (params, final ckpt path).

    Deterministic for a fixed seed in single-threaded mode.  Metrics go
    to <out_dir>/metrics.csv (iter, loss, psnr, lr) every log_every
    iterations; checkpoints to <out_dir>/model.ckpt every
    checkpoint_every iterations and at the end.
    """
    os.makedirs(out_dir, exist_ok=True)
    table = build_ray_table(dataset)
    n_rays = table.origins.shape[0]
    if train_cfg.batch_rays > n_rays:
        log.warning("batch_rays %d exceeds dataset ray count %d",
                    train_cfg.batch_rays, n_rays)

    start_iter = 0
    state = None
    if resume is not None:
        params, loaded_cfg, _, start_iter, state = load_training_checkpoint(
            resume, dtype=dtype)
        if loaded_cfg.to_dict() != model_cfg.to_dict():
            raise ConfigError("checkpoint model config does not match request")
        log.info("resuming from %s at iter %d", resume, start_iter)
    else:
        params = ablemodel.init_params(
            model_cfg, np.random.default_rng(train_cfg.seed), dtype=dtype)
    if state is None:
        state = init_adam_state(params)

    # a fresh stream keyed on (seed, start) keeps resumed runs deterministic
    rng = np.random.default_rng([train_cfg.seed, start_iter])

    metrics_path = os.path.join(out_dir, "metrics.csv")
    new_log = not (resume is not None and os.path.exists(metrics_path))
    metrics = open(metrics_path, "w" if new_log else "a", newline="")
    writer = csv.writer(metrics)
    if new_log:
        writer.writerow(["iter", "loss", "psnr", "lr"])

    t_start = time.time()
    try:
        for it in range(start_iter, train_cfg.iters):
            idx = rng.integers(0, n_rays, size=train_cfg.batch_rays)
            out = ablemodel.render_rays(
                params, model_cfg, table.origins[idx], table.dirs[idx],
                table.radius[idx], table.near, table.far, rng=rng)
            gt = table.rgb[idx]
            batch_loss = loss(out.rgb_coarse, out.rgb_fine, gt)
            lval = float(batch_loss.data)
            if not math.isfinite(lval):
                raise TrainingError(f"loss became non-finite at iter {it}")

            dc.zero_grads(params.values())
            dc.backward(batch_loss)
            grads = {}
            for name, p in params.items():
                if p.grad is None:
                    raise TrainingError(f"no gradient reached parameter {name!r}")
                grads[name] = p.grad
            clip_global_norm(grads)
            adam_step(params, grads, state, lr_at(it, train_cfg), train_cfg)

            if it % train_cfg.log_every == 0 or it == train_cfg.iters - 1:
                mse = float(((out.rgb_fine.data - gt) ** 2).mean())
                psnr = -10.0 * math.log10(max(mse, 1e-12))
                writer.writerow([it, f"{lval:.6e}", f"{psnr:.3f}",
                                 f"{lr_at(it, train_cfg):.6e}"])
                metrics.flush()
                log.info("iter %6d  loss %.5f  psnr %6.2f  lr %.2e  (%.1fs)",
                         it, lval, psnr, lr_at(it, train_cfg),
                         time.time() - t_start)
                if progress is not None:
                    progress(it, lval, psnr)
            if (it + 1) % train_cfg.checkpoint_every == 0 \
                    and it + 1 < train_cfg.iters:
                save_training_checkpoint(out_dir, params, state, model_cfg,
                                         train_cfg, it + 1)
    finally:
        metrics.close()
    path = save_training_checkpoint(out_dir, params, state, model_cfg,
                                    train_cfg, train_cfg.iters)
    return params, path
