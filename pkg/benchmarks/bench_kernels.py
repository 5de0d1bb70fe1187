#!/usr/bin/env python3
"""Compare the jitted and pure-numpy kernel backends on full windows.

Runs forward + backward over one truncation window per architecture and
reports median wall time for both backends plus the speedup.  The first
jitted call pays compilation (cached on disk by the JIT); a warmup run keeps
that out of the numbers.

Usage: python benchmarks/bench_kernels.py [--hidden 256] [--lanes 16]
       [--window 128] [--vocab 64] [--repeats 5]
"""
import argparse
import statistics
import time

import numpy as np

from mlstm_lab.cells import Arch, init_params, zero_state
from mlstm_lab.kernels import available_backends
from mlstm_lab.numerics import make_rng
from mlstm_lab.sequence import backward_sequence, forward_sequence

ARCHS = ("vanilla-rnn", "mrnn", "lstm", "stacked-lstm", "mlstm")


def bench_one(kind, backend, h, B, T, vocab, repeats):
    arch = Arch(kind=kind, hidden=h, layers=2 if kind == "stacked-lstm" else 1)
    rng = make_rng(0)
    params = init_params(arch, vocab, 1.0, rng, dtype=np.float32)
    inputs = rng.integers(0, vocab, size=(B, T))
    targets = rng.integers(0, vocab, size=(B, T))
    state = zero_state(arch, batch=B, dtype=np.float32)

    def step():
        t0 = time.perf_counter()
        tape, _logits, _state = forward_sequence(params, arch, state, inputs,
                                                 backend=backend)
        t1 = time.perf_counter()
        backward_sequence(params, arch, tape, targets)
        t2 = time.perf_counter()
        return t1 - t0, t2 - t1

    step()   # warmup (JIT compile and caches)
    fwd, bwd = zip(*(step() for _ in range(repeats)))
    return statistics.median(fwd), statistics.median(bwd)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hidden", type=int, default=256)
    ap.add_argument("--lanes", type=int, default=16)
    ap.add_argument("--window", type=int, default=128)
    ap.add_argument("--vocab", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    backends = available_backends()
    print(f"backends: {', '.join(backends)}   "
          f"h={args.hidden} B={args.lanes} T={args.window} N={args.vocab}")
    print(f"{'arch':<14}" + "".join(f"{b + ' fwd/bwd (ms)':>24}" for b in backends)
          + (f"{'speedup':>10}" if len(backends) > 1 else ""))
    for kind in ARCHS:
        times = {}
        for b in backends:
            times[b] = bench_one(kind, b, args.hidden, args.lanes, args.window,
                                 args.vocab, args.repeats)
        row = f"{kind:<14}"
        for b in backends:
            f, w = times[b]
            row += f"{f * 1e3:>12.2f} /{w * 1e3:>9.2f}"
        if len(backends) > 1:
            base = sum(times["numpy"])
            fast = sum(times["numba"])
            row += f"{base / fast:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
