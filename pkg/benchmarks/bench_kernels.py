"""Timing comparison of the numba kernels against the numpy reference.

Run from the repo root:

    python3 benchmarks/bench_kernels.py [--rays 4096] [--samples 32] [--repeat 5]

Shapes default to one training-scale chunk (4096 rays x 32 samples).
Numba is warmed up (and parity-checked against numpy) before timing, so
jit compilation never lands in the numbers.
"""

import argparse
import time

import numpy as np

from ablenerf import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def make_inputs(rays, samples, rng):
    edges = np.sort(rng.uniform(2.0, 6.0, (rays, samples + 1)), axis=-1)
    t0, t1 = edges[:, :-1], edges[:, 1:]
    radius = np.full_like(t0, 9e-4)
    mu = rng.standard_normal((rays * samples, 3))
    var = rng.uniform(0.0, 0.1, (rays * samples, 3))
    weights = rng.uniform(0.0, 1.0, (rays, samples)) + 1e-3
    u = rng.uniform(0.0, 1.0 - 1e-9, (rays, samples))
    sigma = rng.exponential(1.0, (rays, samples))
    delta = rng.uniform(0.01, 0.2, (rays, samples))
    rgb = rng.uniform(0.0, 1.0, (rays, samples, 3))
    pts = rng.uniform(-1.5, 1.5, (rays * samples, 3))
    dirs = rng.standard_normal((rays * samples, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    prim = dict(
        kind=np.array([0, 1, 0]),
        center=np.array([[0.0, 0.0, 0.0], [0.7, 0.0, 0.0], [-0.7, 0.3, 0.0]]),
        extent=np.array([[0.5, 0.5, 0.5], [0.3, 0.4, 0.2], [0.35, 0.35, 0.35]]),
        density=np.array([40.0, 10.0, 60.0]),
        base_rgb=np.array([[0.8, 0.2, 0.1], [0.1, 0.2, 0.9], [0.2, 0.2, 0.2]]),
        lobe_exp=np.array([0.0, 0.0, 8.0]),
        lobe_rgb=np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.7, 0.7, 0.5]]),
        light_pos=np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [3.0, 2.0, 4.0]]),
    )
    return {
        "conic_moments": lambda k: k.conic_moments(t0, t1, radius),
        "ipe_features": lambda k: k.ipe_features(mu, var, 8),
        "ipe_grad_mu": lambda k: k.ipe_grad_mu(mu, var, 8),
        "sample_pdf": lambda k: k.sample_pdf(edges, weights, u),
        "composite_rays": lambda k: k.composite_rays(sigma, delta, rgb),
        "eval_scene": lambda k: k.eval_scene(pts, dirs, **prim),
    }


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.abs(np.asarray(a) - np.asarray(b)).max())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rays", type=int, default=4096)
    ap.add_argument("--samples", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    npk = kernels.get_impl("numpy")
    try:
        nbk = kernels.get_impl("numba")
    except Exception as e:
        print(f"numba backend unavailable ({e}); nothing to compare")
        return 1

    cases = make_inputs(args.rays, args.samples, np.random.default_rng(0))
    print(f"{args.rays} rays x {args.samples} samples, best of {args.repeat}")
    print(f"{'kernel':<16} {'numpy':>10} {'numba':>10} {'speedup':>8}  parity")
    for name, call in cases.items():
        ref = call(npk)
        got = call(nbk)        # first call also jit-compiles
        diff = max_diff(ref, got)
        t_np = best_of(lambda: call(npk), args.repeat)
        t_nb = best_of(lambda: call(nbk), args.repeat)
        print(f"{name:<16} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms "
              f"{t_np / t_nb:>7.1f}x  {diff:.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
