import numpy as np
import pytest

from rwf import kernels
from rwf.numerics import RngStream

pytestmark = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")


def test_softmax_parity(rng):
    x = rng.normal((20, 7), 5.0)
    np.testing.assert_allclose(kernels.softmax_rows_numba(x), kernels.softmax_rows_numpy(x), atol=1e-15)


def test_layer_norm_parity(rng):
    x = rng.normal((10, 6), 2.0)
    g, b = rng.child(1).normal((6,)), rng.child(2).normal((6,))
    for a, c in zip(kernels.layer_norm_rows_numba(x, g, b, 1e-5),
                    kernels.layer_norm_rows_numpy(x, g, b, 1e-5)):
        np.testing.assert_allclose(a, c, atol=1e-13)
    y, xhat, inv = kernels.layer_norm_rows_numpy(x, g, b, 1e-5)
    dy = rng.child(3).normal(x.shape)
    np.testing.assert_allclose(kernels.layer_norm_backward_rows_numba(dy, xhat, inv, g),
                               kernels.layer_norm_backward_rows_numpy(dy, xhat, inv, g), atol=1e-12)


@pytest.mark.parametrize("L", [1, 2, 3, 4])
def test_grid_argmin_parity(L):
    s = RngStream(L).normal((L,), 1.0)
    p1, e1 = kernels.simplex_grid_argmin_numba(s, 1.5, 40)
    p2, e2 = kernels.simplex_grid_argmin_numpy(s, 1.5, 40)
    np.testing.assert_array_equal(p1, p2)
    assert e1 == pytest.approx(e2, abs=1e-12)


def test_simplex_grid_enumerates_all_points():
    from math import comb

    g = kernels.simplex_grid(3, 10)
    assert len(g) == comb(12, 2)
    assert np.all(g.sum(axis=1) == 10) and g.min() >= 0
    assert len({tuple(r) for r in g}) == len(g)


def test_env_flag_selects_numpy_backend():
    import os
    import subprocess
    import sys

    env = dict(os.environ, RWF_BACKEND="numpy")
    out = subprocess.run([sys.executable, "-c", "from rwf import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
