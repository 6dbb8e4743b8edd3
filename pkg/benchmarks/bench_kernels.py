"""Timing comparison of the compiled and pure-python scatter kernels.

Run after installing the package:

    python benchmarks/bench_kernels.py [--edges 200000] [--nodes 20000]
                                       [--dim 128] [--repeats 20]

The workload mirrors one attention layer on a large graph batch: a segment
softmax over the destination index, the matching backward pass, and the
weighted neighborhood sum. Both backends are imported directly so the timing
ignores the SGREID_KERNELS selection logic.
"""

from __future__ import annotations

import argparse
import importlib
import statistics
import time

import numpy as np


def _load_backends():
    backends = {}
    backends["pure"] = importlib.import_module("sgreid.kernels.pure")
    try:
        backends["native"] = importlib.import_module("sgreid.kernels._native")
    except ImportError:
        print("native backend not built; benchmarking pure only\n")
    return backends


def _bench(fn, repeats: int) -> tuple[float, float]:
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times), statistics.median(times)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--edges", type=int, default=200_000)
    parser.add_argument("--nodes", type=int, default=20_000)
    parser.add_argument("--dim", type=int, default=128)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    logits = rng.standard_normal(args.edges)
    seg = np.sort(rng.integers(0, args.nodes, size=args.edges)).astype(np.int64)
    grad = rng.standard_normal(args.edges)
    values = rng.standard_normal((args.edges, args.dim))

    backends = _load_backends()
    results: dict[str, dict[str, tuple[float, float]]] = {}
    outputs: dict[str, dict[str, np.ndarray]] = {}
    for name, mod in backends.items():
        alpha = mod.segment_softmax(logits, seg, args.nodes)
        results[name] = {
            "segment_softmax": _bench(
                lambda m=mod: m.segment_softmax(logits, seg, args.nodes), args.repeats
            ),
            "softmax_backward": _bench(
                lambda m=mod, a=alpha: m.segment_softmax_backward(a, grad, seg, args.nodes),
                args.repeats,
            ),
            "weighted_rowsum": _bench(
                lambda m=mod, a=alpha: m.scatter_weighted_rowsum(
                    values, a, seg, args.nodes
                ),
                args.repeats,
            ),
        }
        outputs[name] = {
            "alpha": alpha,
            "rowsum": mod.scatter_weighted_rowsum(values, alpha, seg, args.nodes),
        }

    print(
        f"workload: {args.edges} edges, {args.nodes} segments, dim {args.dim}, "
        f"best/median of {args.repeats} runs\n"
    )
    header = f"{'kernel':<20}" + "".join(f"{n:>18}" for n in results)
    print(header)
    for kernel in ("segment_softmax", "softmax_backward", "weighted_rowsum"):
        row = f"{kernel:<20}"
        for name in results:
            best, med = results[name][kernel]
            row += f"{best * 1e3:>9.2f}/{med * 1e3:<.2f}ms".rjust(18)
        print(row)

    if len(outputs) == 2:
        d_alpha = float(np.max(np.abs(outputs["pure"]["alpha"] - outputs["native"]["alpha"])))
        d_sum = float(np.max(np.abs(outputs["pure"]["rowsum"] - outputs["native"]["rowsum"])))
        print(f"\nmax |pure - native|: softmax {d_alpha:.3e}, rowsum {d_sum:.3e}")
        speed = results["pure"]["segment_softmax"][0] / results["native"]["segment_softmax"][0]
        print(f"native softmax speedup over pure: {speed:.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
