"""Compiled vs numpy segment kernels, then one training epoch under each backend.

    python3 benchmarks/bench_kernels.py [--edges N] [--dim D] [--repeat R] [--no-train]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from iagnn import _kernels_py

try:
    from iagnn import _kernels
except ImportError:
    _kernels = None

TRAIN_SNIPPET = """
import time
from iagnn.kernels import BACKEND
from iagnn.synth import generate_interactions
from iagnn.data import parse_interactions, preprocess
from iagnn.model import ModelConfig
from iagnn.trainer import TrainConfig, train_from_scratch
rows = generate_interactions(n_sessions=3000, n_items=800, n_categories=8, seed=0)
res = preprocess(parse_interactions(",".join(map(str, r)) for r in rows).sessions)
cfg = TrainConfig(max_epochs=1, model=ModelConfig(dim=64, layers=2))
t = time.perf_counter()
train_from_scratch(res.train, res.valid, res.vocab.n_items, res.vocab.n_categories,
                   res.vocab.item_category_array(), cfg)
print(BACKEND, len(res.train), time.perf_counter() - t)
"""


def inputs(n_edges, dim, seed=0):
    rng = np.random.default_rng(seed)
    n_seg = max(1, n_edges // 4)
    seg = np.sort(rng.integers(0, n_seg, n_edges)).astype(np.int64)
    seg[:n_seg] = np.arange(n_seg)
    seg.sort()
    return {
        "values": rng.normal(size=n_edges),
        "grad": rng.normal(size=n_edges),
        "rows": rng.normal(size=(n_edges, dim)),
        "seg": seg,
        "n_seg": n_seg,
    }


def cases(mod, x):
    prob = mod.segment_softmax(x["values"], x["seg"], x["n_seg"])
    out = np.zeros((x["n_seg"], x["rows"].shape[1]))
    return {
        "scatter_add_rows": lambda: mod.scatter_add_rows(x["rows"], x["seg"], x["n_seg"]),
        "scatter_add_rows_into": lambda: mod.scatter_add_rows_into(out, x["rows"], x["seg"]),
        "segment_max": lambda: mod.segment_max(x["values"], x["seg"], x["n_seg"]),
        "segment_softmax": lambda: mod.segment_softmax(x["values"], x["seg"], x["n_seg"]),
        "segment_softmax_backward": lambda: mod.segment_softmax_backward(prob, x["grad"], x["seg"], x["n_seg"]),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--edges", type=int, default=20000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--no-train", action="store_true")
    args = ap.parse_args()

    x = inputs(args.edges, args.dim)
    py = cases(_kernels_py, x)
    cy = cases(_kernels, x) if _kernels is not None else {}
    print(f"edges={args.edges} dim={args.dim} repeat={args.repeat}")
    print(f"{'kernel':28s}{'numpy ms':>10s}{'cython ms':>11s}{'speedup':>9s}")
    for name, fn in py.items():
        t_py = min(timeit.repeat(fn, number=args.repeat, repeat=3)) / args.repeat * 1e3
        if name in cy:
            t_cy = min(timeit.repeat(cy[name], number=args.repeat, repeat=3)) / args.repeat * 1e3
            print(f"{name:28s}{t_py:10.3f}{t_cy:11.3f}{t_py / t_cy:9.1f}x")
        else:
            print(f"{name:28s}{t_py:10.3f}{'n/a':>11s}")

    if args.no_train:
        return
    print("\none training epoch (dim 64, L=2):")
    for pure in ("0", "1"):
        env = dict(os.environ, IAGNN_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, n, secs = out.stdout.split()
        print(f"  {backend:8s} {int(n)} examples in {float(secs):.2f} s")


if __name__ == "__main__":
    main()
