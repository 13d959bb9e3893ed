"""Compare the compiled and pure-Python detection kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0] [--json out.json]

Each kernel runs on the same synthetic inputs under both backends; the outputs
are checked for bitwise equality before timings are reported.  The last row
times a full ``mean_ap`` evaluation in two child interpreters, one of them
started with ``SECUREFL_PURE_PYTHON=1``.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from securefl.detection import kernels


def boxes(rng, n, extent=500.0):
    xy = rng.uniform(0, extent, (n, 2))
    wh = rng.uniform(5, 80, (n, 2))
    return np.hstack([xy, xy + wh])


def workloads(scale, seed=0):
    rng = np.random.default_rng(seed)
    n_pred, n_gt, n_img = int(2000 * scale), int(600 * scale), max(1, int(50 * scale))
    pred = boxes(rng, n_pred)
    gt = boxes(rng, n_gt)
    pred_img = np.sort(rng.integers(0, n_img, n_pred)).astype(np.int64)
    gt_img = np.sort(rng.integers(0, n_img, n_gt))
    offsets = np.searchsorted(gt_img, np.arange(n_img + 1)).astype(np.int64)
    order = rng.permutation(n_pred).astype(np.int64)
    tp = (rng.random(n_pred) < 0.3).astype(np.uint8)
    small = pred[: int(400 * scale)]
    return {
        "iou_matrix": lambda k: k.iou_matrix(small, gt),
        "nms": lambda k: k.nms(pred, order, 0.65),
        "greedy_match": lambda k: k.greedy_match(pred, pred_img, gt, offsets, 0.5),
        "all_point_ap": lambda k: k.all_point_ap(tp, n_gt),
    }


def same(a, b) -> bool:
    if isinstance(a, np.ndarray):
        return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
    return a == b


_CHILD = """
import sys, time, numpy as np
sys.path[:0] = {path!r}
from benchmarks_support import records
from securefl.detection import mean_ap, BACKEND
recs = records({scale})
best = float("inf")
for _ in range({repeat}):
    t = time.perf_counter(); res = mean_ap(recs); best = min(best, time.perf_counter() - t)
print(BACKEND, best, repr(res.overall))
"""


def end_to_end(scale, repeat):
    here = os.path.dirname(os.path.abspath(__file__))
    out = {}
    for pure in (False, True):
        env = dict(os.environ)
        env.pop("SECUREFL_PURE_PYTHON", None)
        if pure:
            env["SECUREFL_PURE_PYTHON"] = "1"
        code = _CHILD.format(path=[here], scale=scale, repeat=repeat)
        line = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                              check=True).stdout.split()
        out[line[0]] = (float(line[1]), line[2])
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0, help="multiply workload sizes")
    ap.add_argument("--json", default=None, help="also write results here")
    args = ap.parse_args(argv)
    if kernels.compiled_impl is None:
        print("compiled kernels are not built; nothing to compare", file=sys.stderr)
        return 1
    rows = []
    for name, fn in workloads(args.scale).items():
        py, cy = fn(kernels.python_impl), fn(kernels.compiled_impl)
        if not same(py, cy):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        t_py = min(timeit.repeat(lambda: fn(kernels.python_impl), number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: fn(kernels.compiled_impl), number=1, repeat=args.repeat))
        rows.append({"kernel": name, "python_s": t_py, "cython_s": t_cy, "speedup": t_py / t_cy})
    e2e = end_to_end(args.scale, args.repeat)
    if e2e["python"][1] != e2e["cython"][1]:
        print("mean_ap: backends disagree", file=sys.stderr)
        return 1
    rows.append({"kernel": "mean_ap (end to end)", "python_s": e2e["python"][0], "cython_s": e2e["cython"][0],
                 "speedup": e2e["python"][0] / e2e["cython"][0]})
    print(f"{'kernel':<22}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for r in rows:
        print(f"{r['kernel']:<22}{1e3 * r['python_s']:>12.2f}{1e3 * r['cython_s']:>12.3f}{r['speedup']:>9.1f}x")
    print("outputs bitwise identical across backends")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
