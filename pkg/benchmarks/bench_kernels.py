#!/usr/bin/env python3
"""Numba kernels vs their pure-numpy twins.

Times each hot kernel on both paths (after a JIT warm-up), checks that the two
paths agree, then times a full metric evaluation under each backend in a
subprocess since the backend is fixed at import by ``TEMPREG_DISABLE_JIT``.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from tempreg import _kernels

EVAL_SNIPPET = r"""
import time, numpy as np
from tempreg import _kernels, phantom
from tempreg.metric import evaluate
from tempreg.transforms import RigidParams
img, labels, rois, truth = phantom.make_phantom(phantom.PhantomSpec(),
    phantom.MotionSpec(n_frames=3), noise_std=0.02, bias=0.1)
roi = rois[phantom.BRAIN]
fixed, moving = truth.series[0].rescaled(), img.rescaled()
t = RigidParams([0.02, -0.01, 0.03], [1.0, -0.5, 0.2], roi.centroid())
evaluate(fixed, moving, t, roi)
n = %d
t0 = time.perf_counter()
for _ in range(n):
    r = evaluate(fixed, moving, t, roi)
dt = (time.perf_counter() - t0) / n
print(_kernels.backend(), dt, r.value)
"""


def bench(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(rng):
    vol = rng.standard_normal((64, 64, 64))
    pts = rng.uniform(-1, 64, size=(200_000, 3))
    box = rng.standard_normal((40, 40, 40))
    return [
        ("sample_linear 200k pts", lambda jit: _kernels.sample_linear(vol, pts, 0.0, use_jit=jit)),
        ("sample_linear_grad 200k pts", lambda jit: _kernels.sample_linear_grad(vol, pts, 0.0, use_jit=jit)),
        ("sample_nearest 200k pts", lambda jit: _kernels.sample_nearest(vol, pts, 0.0, use_jit=jit)),
        ("box_sum 40^3 r=2", lambda jit: _kernels.box_sum(box, 2, use_jit=jit)),
    ]


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--evals", type=int, default=20, help="metric evaluations per backend")
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)

    results = {"kernels": [], "metric": {}}
    rng = np.random.default_rng(0)
    have_jit = _kernels.backend() == "numba"
    print(f"{'kernel':32s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s}  agree")
    for name, fn in kernel_cases(rng):
        t_np = bench(lambda: fn(False), args.repeat)
        row = {"kernel": name, "numpy_s": t_np}
        if have_jit:
            t_nb = bench(lambda: fn(True), args.repeat)
            row.update(numba_s=t_nb, agree=bool(same(fn(False), fn(True))))
            print(f"{name:32s} {1e3 * t_np:11.2f} {1e3 * t_nb:11.2f} {t_np / t_nb:8.1f}  {row['agree']}")
        else:
            print(f"{name:32s} {1e3 * t_np:11.2f} {'n/a':>11s}")
        results["kernels"].append(row)

    for flag in ("0", "1"):
        env = dict(os.environ, TEMPREG_DISABLE_JIT=flag)
        out = subprocess.run([sys.executable, "-c", EVAL_SNIPPET % args.evals], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        backend, dt, value = out[0], float(out[1]), float(out[2])
        results["metric"][backend] = {"seconds_per_eval": dt, "value": value}
        print(f"metric evaluation ({backend}): {1e3 * dt:.2f} ms, value {value!r}")

    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1)
    return results


if __name__ == "__main__":
    main()
