"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 20] [--json]

Times conv forward/backward and the fused gate at desk and full-scale
shapes, then one full training iteration of the desk model per backend.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from stpredict.autodiff import backend
from stpredict.network import build_model, rollout, table_variants
from stpredict.training import gradients, mse_loss, param_list

SHAPES = {
    # name: (batch, cin, cout, spatial, kernel)
    "desk conv 3x3": (8, 16, 32, 8, 3),
    "desk conv 7x7": (8, 2, 1, 8, 7),
    "full-scale conv 3x3": (8, 192, 384, 16, 3),
}


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_rows(k, repeat):
    rng = np.random.default_rng(0)
    rows = {}
    for name, (B, cin, cout, S, ks) in SHAPES.items():
        x = rng.standard_normal((B, cin, S, S)).astype(np.float32)
        w = rng.standard_normal((cout, cin, ks, ks)).astype(np.float32)
        b = rng.standard_normal(cout).astype(np.float32)
        pad = (ks - 1) // 2
        out, cols = k.conv2d_forward(x, w, b, pad)
        g = np.ones_like(out)
        rows[name + " fwd"] = best(lambda: k.conv2d_forward(x, w, b, pad), repeat)
        rows[name + " bwd"] = best(lambda: k.conv2d_backward(g, x, w, cols, pad), repeat)
    pre = rng.standard_normal((8, 96, 16, 16)).astype(np.float32)
    mem = rng.standard_normal((8, 32, 16, 16)).astype(np.float32)
    out, act = k.gate_forward(pre, mem)
    rows["gate fwd"] = best(lambda: k.gate_forward(pre, mem), repeat)
    rows["gate bwd"] = best(lambda: k.gate_backward(out, mem, act), repeat)
    return rows


def train_iteration(repeat):
    variant = table_variants(channels=(8, 8), ghu_channels=8)[-1]
    model = build_model(variant, 4, 8, seed=0)
    frames = np.random.default_rng(1).standard_normal((8, 20, 4, 8, 8)).astype(np.float32)
    params = param_list(model)

    def step():
        gradients(mse_loss(rollout(model, frames, 10, 10), frames).loss, params)
    step()
    return best(step, max(2, repeat // 5))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", action="store_true", help="print machine-readable results")
    args = ap.parse_args(argv)
    names = backend.available()
    results = {}
    for name in names:
        k = backend.use(name)
        rows = kernel_rows(k, args.repeat)
        rows["desk train iteration (full variant)"] = train_iteration(args.repeat)
        results[name] = rows
    if args.json:
        json.dump(results, sys.stdout, indent=2)
        print()
        return 0
    keys = list(results[names[0]])
    width = max(len(s) for s in keys)
    print(f"{'case':<{width}}  " + "  ".join(f"{n:>10}" for n in names)
          + ("  speedup" if len(names) == 2 else ""))
    for key in keys:
        cells = "  ".join(f"{results[n][key] * 1e3:8.3f}ms" for n in names)
        extra = ""
        if "cython" in results and "python" in results:
            extra = f"  {results['python'][key] / results['cython'][key]:6.2f}x"
        print(f"{key:<{width}}  {cells}{extra}")
    if len(names) < 2:
        print("compiled kernels not built; only the numpy backend was timed", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
