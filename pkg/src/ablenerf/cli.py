"""Command-line entry point: train / render / eval / depth / perturb / synth.

Heavy imports happen inside the command handlers, after --threads has
been translated into BLAS/numba environment variables — importing numpy
first would lock in its thread pool.  ABLE_LOG=debug|info controls
verbosity; every command echoes its fully resolved configuration and
exits 0 on success, 1 with a single-line "error: ..." otherwise.

Config files are plain text, one "key = value" per line, # comments.
Keys are the ModelConfig and TrainConfig field names plus:
    dataset   path to a Blender-layout dataset directory
    out_dir   artifact directory
    downscale integer image downscale factor (default 1)
Flags override file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS",
                "NUMBA_NUM_THREADS")


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; the contract here is a one-line
    # "error:" message and exit code 1 for every failure mode
    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser():
    p = _Parser(prog="ablenerf",
                description="attention-based volumetric rendering "
                            "with learnable embeddings")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS/numba thread count (1 = bitwise deterministic); "
                        "default: all logical cores")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[], help="optimize a model")
    t.add_argument("--config", required=True, help="key = value config file")
    t.add_argument("--dataset", help="override dataset path")
    t.add_argument("--out", help="override artifact directory")
    t.add_argument("--seed", type=int, default=None, help="override seed")
    t.add_argument("--no-mask", action="store_true",
                   help="ablation: all-allowed attention")
    t.add_argument("--no-le", action="store_true",
                   help="ablation: drop the learnable-embedding branch")
    t.add_argument("--resume", help="checkpoint to continue from")

    for name, extra in (("render", "PNG per view + metrics CSV"),
                        ("eval", "metrics table only"),
                        ("depth", "depth PNGs + CSV")):
        c = sub.add_parser(name, help=extra)
        c.add_argument("--ckpt", required=True)
        c.add_argument("--dataset", required=True)
        c.add_argument("--split", default="test")
        c.add_argument("--downscale", type=int, default=1)
        c.add_argument("--out", help="output directory "
                                     "(default: alongside the checkpoint)")
        if name == "depth":
            c.add_argument("--agg", default="peak",
                           choices=("peak", "expected"),
                           help="per-pixel depth: argmax-attention frustum "
                                "midpoint (peak) or attention-weighted mean")

    pe = sub.add_parser("perturb", help="corrupt the LE bank of a checkpoint")
    pe.add_argument("--ckpt", required=True)
    pe.add_argument("--mode", required=True, choices=("gaussian", "zero"))
    pe.add_argument("--sigma", type=float, default=0.1)
    pe.add_argument("--seed", type=int, default=0)
    pe.add_argument("--out", help="output checkpoint path")
    pe.add_argument("--dataset", help="if given, render comparison views")
    pe.add_argument("--split", default="test")
    pe.add_argument("--downscale", type=int, default=1)

    sy = sub.add_parser("synth", help="generate a synthetic dataset")
    sy.add_argument("--scene", required=True, help="scene description file")
    sy.add_argument("--views", type=int, required=True)
    sy.add_argument("--test-views", type=int, default=2)
    sy.add_argument("--res", type=int, required=True)
    sy.add_argument("--out", required=True)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--quad", type=int, default=1024,
                    help="quadrature points per ground-truth ray")
    return p


def _setup_logging():
    level = {"debug": logging.DEBUG, "info": logging.INFO}.get(
        os.environ.get("ABLE_LOG", "").lower(), logging.WARNING)
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")


def _echo_config(d):
    print("config: " + json.dumps(d, sort_keys=True))


# ---------------------------------------------------------------------------
# config files


def parse_config_file(path):
    from .errors import ConfigError
    if not os.path.exists(path):
        raise ConfigError(f"no such config file: {path}")
    kv = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    return kv


def _coerce(value, typ, key):
    from .errors import ConfigError
    try:
        if typ is bool:
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        return typ(value)
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} "
                          f"as {typ.__name__}") from e


def split_config(kv):
    """Raw strings -> (model kwargs, train kwargs, paths dict)."""
    from dataclasses import fields
    from .errors import ConfigError
    from .model import ModelConfig
    from .trainer import TrainConfig
    mfields = {f.name: (bool if f.type == "bool" else int)
               for f in fields(ModelConfig)}
    tfields = {f.name: (float if f.type == "float" else int)
               for f in fields(TrainConfig)}
    model_kw, train_kw, rest = {}, {}, {}
    for key, value in kv.items():
        if key in mfields:
            model_kw[key] = _coerce(value, mfields[key], key)
        elif key in tfields:
            train_kw[key] = _coerce(value, tfields[key], key)
        elif key in ("dataset", "out_dir"):
            rest[key] = value
        elif key == "downscale":
            rest[key] = _coerce(value, int, key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return model_kw, train_kw, rest


# ---------------------------------------------------------------------------
# command handlers


def _cmd_train(args):
    from .errors import ConfigError
    from .model import ModelConfig
    from .scenes import load_blender
    from .trainer import TrainConfig, train

    model_kw, train_kw, rest = split_config(parse_config_file(args.config))
    if args.no_mask:
        model_kw["masked"] = False
    if args.no_le:
        model_kw["n_le"] = 0
    if args.seed is not None:
        train_kw["seed"] = args.seed
    model_cfg = ModelConfig.from_dict(model_kw) if model_kw else ModelConfig()
    train_cfg = TrainConfig.from_dict(train_kw) if train_kw else TrainConfig()

    dataset_path = args.dataset or rest.get("dataset")
    out_dir = args.out or rest.get("out_dir")
    if not dataset_path:
        raise ConfigError("no dataset given (config 'dataset' or --dataset)")
    if not out_dir:
        raise ConfigError("no output dir given (config 'out_dir' or --out)")
    ds = load_blender(dataset_path, "train", rest.get("downscale", 1))

    _echo_config({"command": "train", "model": model_cfg.to_dict(),
                  "train": train_cfg.to_dict(), "dataset": dataset_path,
                  "out_dir": out_dir, "downscale": rest.get("downscale", 1),
                  "resume": args.resume})
    _, path = train(ds, model_cfg, train_cfg, out_dir, resume=args.resume)
    print(f"checkpoint: {path}")
    return 0


def _load_for_eval(args):
    from .scenes import load_blender
    from .trainer import load_training_checkpoint
    params, model_cfg, _, it, _ = load_training_checkpoint(args.ckpt)
    ds = load_blender(args.dataset, args.split, args.downscale)
    out_dir = args.out or os.path.join(
        os.path.dirname(os.path.abspath(args.ckpt)), f"{args.command}_{args.split}")
    return params, model_cfg, it, ds, out_dir


def _render_views(params, model_cfg, ds):
    from .evalviz import render_image
    for i, cam in enumerate(ds.cameras):
        yield i, render_image(params, model_cfg, cam, ds.near, ds.far)


def _metrics_rows(params, model_cfg, ds, out_dir=None, save_png=False):
    from .evalviz import psnr, ssim, write_png
    rows = []
    for i, render in _render_views(params, model_cfg, ds):
        p = psnr(render.rgb, ds.images[i])
        s = ssim(render.rgb, ds.images[i])
        rows.append((i, p, s))
        print(f"view {i:3d}  psnr {p:7.3f}  ssim {s:.4f}")
        if save_png:
            write_png(render.rgb, os.path.join(out_dir, f"r_{i}.png"))
    mean_p = sum(r[1] for r in rows) / len(rows)
    mean_s = sum(r[2] for r in rows) / len(rows)
    print(f"mean      psnr {mean_p:7.3f}  ssim {mean_s:.4f}")
    return rows, mean_p, mean_s


def _write_metrics_csv(path, rows, mean_p, mean_s):
    from .evalviz import _atomic_write
    lines = ["view,psnr,ssim"]
    lines += [f"{i},{p:.4f},{s:.6f}" for i, p, s in rows]
    lines.append(f"mean,{mean_p:.4f},{mean_s:.6f}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def _cmd_render(args):
    params, model_cfg, it, ds, out_dir = _load_for_eval(args)
    os.makedirs(out_dir, exist_ok=True)
    _echo_config({"command": "render", "ckpt": args.ckpt, "iter": it,
                  "model": model_cfg.to_dict(), "dataset": args.dataset,
                  "split": args.split, "out": out_dir})
    rows, mp, ms = _metrics_rows(params, model_cfg, ds, out_dir, save_png=True)
    _write_metrics_csv(os.path.join(out_dir, f"metrics_{args.split}.csv"),
                       rows, mp, ms)
    return 0


def _cmd_eval(args):
    params, model_cfg, it, ds, _ = _load_for_eval(args)
    _echo_config({"command": "eval", "ckpt": args.ckpt, "iter": it,
                  "model": model_cfg.to_dict(), "dataset": args.dataset,
                  "split": args.split})
    _metrics_rows(params, model_cfg, ds)
    return 0


def _cmd_depth(args):
    from .evalviz import depth_map, write_depth_csv, write_png
    params, model_cfg, it, ds, out_dir = _load_for_eval(args)
    os.makedirs(out_dir, exist_ok=True)
    _echo_config({"command": "depth", "ckpt": args.ckpt, "iter": it,
                  "dataset": args.dataset, "split": args.split,
                  "agg": args.agg, "out": out_dir})
    for i, render in _render_views(params, model_cfg, ds):
        picked = render.depth if args.agg == "peak" else render.depth_expected
        gray, raw = depth_map(picked, ds.near, ds.far)
        write_png(gray, os.path.join(out_dir, f"depth_{i}.png"))
        write_depth_csv(os.path.join(out_dir, f"depth_{i}.csv"), raw)
        print(f"view {i:3d}  depth range [{raw.min():.3f}, {raw.max():.3f}]")
    return 0


def _cmd_perturb(args):
    import numpy as np
    from .evalviz import perturb_le, render_image, write_png
    from .scenes import load_blender
    from .trainer import load_training_checkpoint

    out_path = args.out or args.ckpt + f".{args.mode}.ckpt"
    _echo_config({"command": "perturb", "ckpt": args.ckpt, "mode": args.mode,
                  "sigma": args.sigma, "seed": args.seed, "out": out_path,
                  "dataset": args.dataset})
    perturb_le(args.ckpt, out_path, args.mode, sigma=args.sigma, seed=args.seed)
    print(f"perturbed checkpoint: {out_path}")
    if args.dataset:
        base_params, model_cfg, _, _, _ = load_training_checkpoint(args.ckpt)
        pert_params, _, _, _, _ = load_training_checkpoint(out_path)
        ds = load_blender(args.dataset, args.split, args.downscale)
        out_dir = os.path.dirname(os.path.abspath(out_path))
        cam = ds.cameras[0]
        a = render_image(base_params, model_cfg, cam, ds.near, ds.far)
        b = render_image(pert_params, model_cfg, cam, ds.near, ds.far)
        write_png(a.rgb, os.path.join(out_dir, "perturb_before.png"))
        write_png(b.rgb, os.path.join(out_dir, "perturb_after.png"))
        l2 = float(((a.rgb - b.rgb) ** 2).mean())
        direct_same = bool(np.array_equal(a.direct, b.direct))
        print(f"image mean L2: {l2:.6e}; direct branch bitwise equal: "
              f"{direct_same}")
    return 0


def _cmd_synth(args):
    from .scenes import generate_synthetic_splits, load_scene, write_blender_dataset
    scene = load_scene(args.scene)
    _echo_config({"command": "synth", "scene": args.scene, "views": args.views,
                  "test_views": args.test_views, "res": args.res,
                  "seed": args.seed, "quad": args.quad, "out": args.out})
    train, test = generate_synthetic_splits(
        scene, args.views, args.test_views, args.res, args.seed,
        n_quad=args.quad)
    write_blender_dataset(args.out, [train, test], camera_angle_x=0.6911112)
    print(f"dataset: {args.out} ({args.views} train / {args.test_views} test "
          f"views at {args.res}x{args.res})")
    return 0


_HANDLERS = {"train": _cmd_train, "render": _cmd_render, "eval": _cmd_eval,
             "depth": _cmd_depth, "perturb": _cmd_perturb, "synth": _cmd_synth}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 1
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    _setup_logging()
    try:
        from .errors import AbleNerfError
        return _HANDLERS[args.command](args)
    except AbleNerfError as e:
        print(f"error: {str(e).splitlines()[0]}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
