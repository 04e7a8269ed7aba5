"""Compare the numba and pure-numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel is warmed up once (numba compiles on first call) and then timed
over ``--repeat`` calls; the best time per call is reported.
"""

import argparse
import timeit

import numpy as np

from rwf import kernels
from rwf.numerics import RngStream


def cases():
    r = RngStream(0)
    x = r.child(0).normal((4096, 33), 2.0)
    g, b = r.child(1).normal((33,)), r.child(2).normal((33,))
    _, xhat, inv = kernels.layer_norm_rows_numpy(x, g, b, 1e-5)
    dy = r.child(3).normal(x.shape)
    s3, s4 = r.child(4).normal((3,)), r.child(5).normal((4,))
    return [
        ("softmax_rows 4096x33", "softmax_rows", (x,)),
        ("layer_norm_rows 4096x33", "layer_norm_rows", (x, g, b, 1e-5)),
        ("layer_norm_backward_rows", "layer_norm_backward_rows", (dy, xhat, inv, g)),
        ("simplex grid L=3 step 0.005", "simplex_grid_argmin", (s3, 1.0, 200)),
        ("simplex grid L=4 step 0.005", "simplex_grid_argmin", (s4, 1.0, 200)),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, name, argv in cases():
        f_np = getattr(kernels, name + "_numpy")
        f_nb = getattr(kernels, name + "_numba")
        out_np, out_nb = f_np(*argv), f_nb(*argv)  # warm-up + parity
        for a, c in zip(np.atleast_1d(out_np) if not isinstance(out_np, tuple) else out_np,
                        np.atleast_1d(out_nb) if not isinstance(out_nb, tuple) else out_nb):
            np.testing.assert_allclose(a, c, atol=1e-10)
        t_np = min(timeit.repeat(lambda: f_np(*argv), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: f_nb(*argv), number=1, repeat=args.repeat))
        print(f"{label:32s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
