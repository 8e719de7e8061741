import os
import subprocess
import sys

import numpy as np
import pytest

from remax import kernels

pytestmark = pytest.mark.skipif(kernels.numba_backend is None, reason="numba not importable")


def test_assignment_backends_bit_identical():
    rng = np.random.default_rng(0)
    for trial in range(300):
        n = int(rng.integers(1, 9))
        cost = rng.integers(0, 4, (n, n)).astype(float) if trial % 3 == 0 else rng.normal(size=(n, n))
        a = kernels.numpy_backend.solve_square_assignment(cost)
        b = kernels.numba_backend.solve_square_assignment(cost)
        for x, y in zip(a, b):
            assert np.asarray(x).tobytes() == np.asarray(y).tobytes()


def test_assignment_duals_are_feasible_and_tight():
    rng = np.random.default_rng(1)
    for _ in range(50):
        cost = rng.normal(size=(6, 6))
        col4row, u, v = kernels.solve_square_assignment(cost)
        reduced = cost - u[:, None] - v[None, :]
        assert reduced.min() >= -1e-12
        assert np.abs(reduced[np.arange(6), col4row]).max() <= 1e-12
        assert sorted(col4row.tolist()) == list(range(6))


def test_pair_counts_backends_and_oracle():
    rng = np.random.default_rng(2)
    a, b = rng.integers(0, 5, 500), rng.integers(0, 7, 500)
    want = np.zeros((5, 7), dtype=np.int64)
    for i, j in zip(a, b):
        want[i, j] += 1
    for backend in (kernels.numpy_backend, kernels.numba_backend):
        np.testing.assert_array_equal(backend.pair_counts(a, b, 5, 7), want)


def test_masked_argmax_backends():
    rng = np.random.default_rng(3)
    scores = np.ascontiguousarray(rng.integers(0, 3, (200, 6)).astype(float))
    for keep in (rng.random(6) < 0.5, np.zeros(6, bool), np.ones(6, bool)):
        a = kernels.numpy_backend.masked_argmax(scores, keep)
        b = kernels.numba_backend.masked_argmax(scores, keep)
        np.testing.assert_array_equal(a, b)
        if not keep.any():
            assert (a == -1).all()
        else:
            masked = np.where(keep[None, :], scores, -np.inf)
            np.testing.assert_array_equal(a, np.argmax(masked, axis=1))


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = {**os.environ, "REMAX_DISABLE_NUMBA": flag}
    out = subprocess.run([sys.executable, "-c", "from remax import kernels; print(kernels.BACKEND_NAME)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
