"""Time each kernel on the compiled and pure-Python backends.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes match one training sample of the desk-scale preset (about 40 tokens,
d=32, 4 heads) and one 1024-sample accelerometer record.
"""

import argparse
import timeit

import numpy as np

from medstat import kernels


def cases(rng):
    scores = rng.normal(size=(4, 60, 60))
    probs = kernels.backend_module("python").softmax_rows(scores)
    x = rng.normal(size=(60, 32))
    _, xhat, rstd = kernels.backend_module("python").layernorm_forward(x, np.ones(32), np.zeros(32), 1e-5)
    return {
        "highpass_fb": (np.ascontiguousarray(rng.normal(size=(1024, 3)).cumsum(axis=0)), 0.9815),
        "softmax_rows": (np.ascontiguousarray(scores),),
        "softmax_rows_backward": (np.ascontiguousarray(probs), np.ascontiguousarray(rng.normal(size=probs.shape))),
        "layernorm_forward": (x, np.ones(32), np.zeros(32), 1e-5),
        "layernorm_backward": (rng.normal(size=(60, 32)), xhat, rstd, np.ones(32)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--number", type=int, default=200)
    args = ap.parse_args(argv)
    args_by_kernel = cases(np.random.default_rng(0))
    backends = kernels.available_backends()
    print(f"{'kernel':24s}" + "".join(f"{b:>14s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, call_args in args_by_kernel.items():
        times = []
        for b in backends:
            fn = getattr(kernels.backend_module(b), name)
            best = min(timeit.repeat(lambda: fn(*call_args), number=args.number, repeat=args.repeat))
            times.append(best / args.number * 1e6)
        line = f"{name:24s}" + "".join(f"{t:12.1f}us" for t in times)
        if len(times) > 1:
            line += f"{times[1] / times[0]:11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
