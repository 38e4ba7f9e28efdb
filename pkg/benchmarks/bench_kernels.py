"""Compare the compiled conv kernels with the NumPy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Times forward, input-gradient and weight-gradient kernels (3-D layout; 2-D
convs reach them with a unit depth axis) on shapes taken
from the tiny 3-D networks and reports the largest deviation between the two
backends next to the timings.
"""

import argparse
import json
import time

import numpy as np

from dmcnet import _backend, _conv_py

CASES = [
    # (c_in, c_out, kernel, groups, spatial)
    (8, 8, 3, 1, (32, 32, 32)),
    (16, 8, 3, 1, (32, 32, 32)),
    (8, 8, 5, 8, (32, 32, 32)),
    (16, 16, 3, 1, (16, 16, 16)),
    (32, 32, 3, 1, (8, 8, 8)),
]


def _time(fn, args, repeat):
    fn(*args)
    start = time.perf_counter()
    for _ in range(repeat):
        out = fn(*args)
    return (time.perf_counter() - start) / repeat, out


def run(repeat=3, seed=0):
    if "compiled" not in _backend.available():
        raise SystemExit("compiled extension not built; reinstall without DMCNET_NO_EXT")
    ext = _backend._BACKENDS["compiled"]
    rng = np.random.default_rng(seed)
    rows = []
    for c_in, c_out, k, groups, sp in CASES:
        rank = len(sp)
        x = rng.standard_normal((1, c_in) + sp)
        w = rng.standard_normal((c_out, c_in // groups) + (k,) * rank)
        stride, pad = (1,) * rank, (k // 2,) * rank
        row = {"shape": f"{c_in}->{c_out} k{k} g{groups} {'x'.join(map(str, sp))}"}
        for label, fn_name, args in (
            ("forward", "conv_forward", (x, w, sp, stride, pad, groups)),
            ("grad_input", "conv_backward_input", None),
            ("grad_weight", "conv_backward_weight", None),
        ):
            if args is None:
                g = rng.standard_normal((1, c_out) + sp)
                args = ((g, w, sp, stride, pad, groups) if label == "grad_input"
                        else (g, x, (k,) * rank, stride, pad, groups))
            t_py, a = _time(getattr(_conv_py, fn_name), args, repeat)
            t_ext, b = _time(getattr(ext, fn_name), args, repeat)
            row[label] = {"numpy_s": t_py, "compiled_s": t_ext, "speedup": t_py / t_ext,
                          "max_rel_dev": float(np.abs(a - b).max() / max(np.abs(a).max(), 1e-300))}
        rows.append(row)
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", default=None)
    args = ap.parse_args()
    rows = run(args.repeat)
    print(f"{'case':<32}{'op':<13}{'numpy ms':>10}{'compiled ms':>13}{'speedup':>9}{'max dev':>10}")
    for row in rows:
        for op in ("forward", "grad_input", "grad_weight"):
            r = row[op]
            print(f"{row['shape']:<32}{op:<13}{1e3 * r['numpy_s']:>10.1f}{1e3 * r['compiled_s']:>13.1f}"
                  f"{r['speedup']:>9.2f}{r['max_rel_dev']:>10.1e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
