"""Shared fixtures: cached synthetic datasets and trained checkpoints.

Training runs for the acceptance suite take minutes each, so they are
materialized once under tests/artifacts/ and reused when the checkpoint
on disk matches the requested config and iteration count.  Delete the
directory to force retraining.  Metrics are always recomputed from the
checkpoints; only the expensive, seed-deterministic optimization and
dataset synthesis are cached.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from ablenerf import evalviz, scenes, trainer
from ablenerf import model as ablemodel

ASSETS = Path(__file__).resolve().parent.parent / "assets" / "scenes"
ARTIFACTS = Path(__file__).resolve().parent / "artifacts"

# Overfit protocol shared by the cached training-run fixtures: token_dim=64,
# 32+32 samples, 8 embeddings, 5000 iters, 4 views at 64x64.  The ablation
# comparisons below train with these exact settings, toggling one flag at a
# time.  Free choices (depth, widths, bands, batch, warmup) sized for a
# single CPU core: ~0.25 s/iter, ~20 minutes per training run.
OVERFIT_MODEL = dict(token_dim=64, coarse_layers=1, fine_layers=3, heads=4,
                     ff_ratio=2, coarse_samples=32, fine_samples=32, n_le=8,
                     view_bands=8, pos_bands=8, embed_layers=2, embed_width=64,
                     le_blocks=1)
OVERFIT_TRAIN = dict(batch_rays=128, iters=5000, warmup_iters=250, seed=11,
                     log_every=250, checkpoint_every=100000)
SPHERE_TRAIN = dict(batch_rays=128, iters=2500, warmup_iters=250, seed=7,
                    log_every=250, checkpoint_every=100000)

# Tiny config for fast unit tests and the gradient suite: token_dim=32,
# 8 samples, 4 embeddings, 1+1 layers keeps a full forward-backward under
# a second so finite differences stay affordable.
TINY_MODEL = dict(token_dim=32, coarse_layers=1, fine_layers=1, heads=4,
                  ff_ratio=2, coarse_samples=8, fine_samples=8, n_le=4,
                  view_bands=4, pos_bands=4, embed_layers=2, embed_width=32,
                  le_blocks=1)


def tiny_config(**over):
    kw = dict(TINY_MODEL)
    kw.update(over)
    return ablemodel.ModelConfig(**kw)


def toy_rays(n, seed=0):
    """Rays near the -z axis from z=4, the synthetic-camera geometry."""
    rng = np.random.default_rng(seed)
    o = np.zeros((n, 3))
    o[:, 2] = 4.0
    d = np.zeros((n, 3))
    d[:, 2] = -1.0
    d[:, :2] = 0.15 * rng.standard_normal((n, 2))
    return o, d


def central_diff(f, tensor, idx, eps=None):
    """Two-sided finite difference of scalar f() w.r.t. tensor.data[idx]."""
    keep = tensor.data[idx]
    if eps is None:
        eps = 1e-6 * max(1.0, abs(float(keep)))
    tensor.data[idx] = keep + eps
    hi = float(f())
    tensor.data[idx] = keep - eps
    lo = float(f())
    tensor.data[idx] = keep
    return (hi - lo) / (2.0 * eps)


def rel_err(a, b, floor=1e-10):
    return abs(a - b) / max(abs(a), abs(b), floor)


# ---------------------------------------------------------------------------
# artifact builders


def ensure_dataset(name, scene_file, n_train, n_test, res, seed, n_quad=1024):
    out = ARTIFACTS / name
    if not (out / "transforms_train.json").exists():
        scene = scenes.load_scene(str(ASSETS / scene_file))
        tr, te = scenes.generate_synthetic_splits(
            scene, n_train, n_test, res, seed, n_quad=n_quad)
        scenes.write_blender_dataset(str(out), [tr, te],
                                     camera_angle_x=0.6911112)
    return out


def ensure_run(tag, dataset_dir, model_kw, train_kw):
    """Train (or reuse) a checkpoint for the given configs."""
    run = ARTIFACTS / f"run_{tag}"
    ckpt = run / "model.ckpt"
    cfg = ablemodel.ModelConfig(**model_kw)
    tcfg = trainer.TrainConfig(**train_kw)
    if ckpt.exists():
        try:
            _, loaded_cfg, loaded_tcfg, it, _ = \
                trainer.load_training_checkpoint(str(ckpt))
            if it == tcfg.iters and loaded_cfg.to_dict() == cfg.to_dict() \
                    and loaded_tcfg.to_dict() == tcfg.to_dict():
                return ckpt
        except Exception:
            pass
    ds = scenes.load_blender(str(dataset_dir), "train")
    trainer.train(ds, cfg, tcfg, str(run))
    return ckpt


def load_run(ckpt_path):
    params, cfg, _, _, _ = trainer.load_training_checkpoint(str(ckpt_path))
    return params, cfg


def render_split(ckpt_path, dataset_dir, split):
    """Deterministic renders of every view in a split."""
    params, cfg = load_run(ckpt_path)
    ds = scenes.load_blender(str(dataset_dir), split)
    renders = [evalviz.render_image(params, cfg, cam, ds.near, ds.far)
               for cam in ds.cameras]
    return ds, renders


def mean_psnr(ckpt_path, dataset_dir, split):
    ds, renders = render_split(ckpt_path, dataset_dir, split)
    vals = [evalviz.psnr(r.rgb, img) for r, img in zip(renders, ds.images)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# session fixtures


@pytest.fixture(scope="session")
def three_ds_dir():
    return ensure_dataset("ds_three64", "three_spheres.txt",
                          n_train=4, n_test=2, res=64, seed=11)


@pytest.fixture(scope="session")
def sphere_ds_dir():
    return ensure_dataset("ds_sphere64", "opaque_sphere.txt",
                          n_train=4, n_test=2, res=64, seed=5)


@pytest.fixture(scope="session")
def run_full(three_ds_dir):
    return ensure_run("full", three_ds_dir, OVERFIT_MODEL, OVERFIT_TRAIN)


@pytest.fixture(scope="session")
def run_nole(three_ds_dir):
    kw = dict(OVERFIT_MODEL, n_le=0)
    return ensure_run("nole", three_ds_dir, kw, OVERFIT_TRAIN)


@pytest.fixture(scope="session")
def run_nomask(three_ds_dir):
    kw = dict(OVERFIT_MODEL, masked=False)
    return ensure_run("nomask", three_ds_dir, kw, OVERFIT_TRAIN)


@pytest.fixture(scope="session")
def run_sphere(sphere_ds_dir):
    return ensure_run("sphere", sphere_ds_dir, OVERFIT_MODEL, SPHERE_TRAIN)
