"""Compiled kernels vs the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeats 50]

Prints one CSV row per kernel: median seconds for each backend and the
speed-up. Exits non-zero if the compiled extension is not built.
"""

import argparse
import sys
import timeit

import numpy as np

from npmatch import kernels


def cases(rng):
    logits = rng.standard_normal((4096, 10))
    probs = kernels.python.softmax_rows(logits)
    h = rng.standard_normal((4096, 16))
    a, b = rng.standard_normal((512, 16)), rng.standard_normal((10, 16))
    pair = kernels.python.pair_relu(a, b)
    img = rng.standard_normal((64, 8, 28, 28))
    cols = kernels.python.im2col(img, 3, 3, 2, 1)
    return {
        "softmax_rows": lambda k: k.softmax_rows(logits),
        "log_softmax_rows": lambda k: k.log_softmax_rows(logits),
        "row_entropy": lambda k: k.row_entropy(probs),
        "logistic": lambda k: k.logistic(h),
        "relu": lambda k: k.relu(h),
        "relu_grad": lambda k: k.relu_grad(h, h),
        "pair_relu": lambda k: k.pair_relu(a, b),
        "pair_relu_grad": lambda k: k.pair_relu_grad(pair, pair, 512),
        "im2col": lambda k: k.im2col(img, 3, 3, 2, 1),
        "col2im": lambda k: k.col2im(cols, img.shape, 3, 3, 2, 1),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args(argv)
    if kernels.native is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`",
              file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print("kernel,cython_s,python_s,speedup")
    for name, fn in cases(rng).items():
        t_c = np.median(timeit.repeat(lambda: fn(kernels.native), number=1, repeat=args.repeats))
        t_p = np.median(timeit.repeat(lambda: fn(kernels.python), number=1, repeat=args.repeats))
        print(f"{name},{t_c:.3e},{t_p:.3e},{t_p / t_c:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
