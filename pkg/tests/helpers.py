"""Shared test utilities: oracle constructions kept independent of the
production code paths they check."""

import numpy as np

from rgp.linalg import gram_schmidt_columns
from rgp.seeding import seeded_rng


def naive_matmul(a, b):
    """Triple-loop matrix product, the reference for the fast path."""
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def matrix_with_spectrum(rng, rows, cols, spectrum):
    """Random matrix with prescribed singular values (padded with zeros)."""
    spectrum = np.asarray(spectrum, dtype=np.float64)
    k = len(spectrum)
    assert k <= min(rows, cols)
    u = gram_schmidt_columns(rng.standard_normal((rows, k)), rng=rng)
    v = gram_schmidt_columns(rng.standard_normal((cols, k)), rng=rng)
    return (u * spectrum) @ v.T


def random_orthonormal(rng, rows, cols):
    return gram_schmidt_columns(rng.standard_normal((rows, cols)), rng=rng)


def rng_for(*key):
    return seeded_rng(*key)
