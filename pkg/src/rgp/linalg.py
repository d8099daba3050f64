"""Dense matrix kernels: orthonormalization, spectral estimates, and an
exact SVD (cyclic Jacobi on the smaller Gram matrix) used as an independent
check for the power-method code.

Everything here is a pure function on float64 arrays; nothing keeps state.
"""

import numpy as np

from .seeding import seeded_rng

__all__ = [
    "as_matrix",
    "matmul",
    "gram_schmidt_columns",
    "svd_oracle",
    "spectral_norm",
    "stable_rank",
    "subspace_angle_sin",
]


def as_matrix(m, name="matrix"):
    """Coerce to a 2-D float64 array and reject non-finite entries."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if a.size and not np.isfinite(a).all():
        raise ValueError(f"{name} contains NaN or Inf entries")
    return a


def matmul(a, b):
    """Matrix product with explicit shape and finiteness validation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if out.size and not np.isfinite(out).all():
        raise FloatingPointError("matrix product overflowed to non-finite values")
    return out


def _orthogonal_unit(basis, rng):
    """Random unit vector orthogonal to the columns ``basis[:, :k]``."""
    rows, k = basis.shape
    while True:
        v = rng.standard_normal(rows)
        for _ in range(2):
            for i in range(k):
                v -= (basis[:, i] @ v) * basis[:, i]
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            return v / norm


def gram_schmidt_columns(m, tol=1e-10, rng=None):
    """Orthonormalize the columns of ``m`` (modified Gram-Schmidt, two passes).

    A column whose residual after projection drops below ``tol`` times its
    original norm is considered linearly dependent and is replaced by a
    random unit vector orthogonal to the columns accepted so far, so the
    result always has exactly ``m.shape[1]`` orthonormal columns.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    if cols == 0:
        raise ValueError("need at least one column")
    if rows < cols:
        raise ValueError(f"cannot orthonormalize {cols} columns of length {rows}")
    if rng is None:
        rng = seeded_rng(0)
    thresholds = tol * np.linalg.norm(a, axis=0)
    q = np.empty_like(a)
    for j in range(cols):
        v = a[:, j].copy()
        for _ in range(2):
            for i in range(j):
                v -= (q[:, i] @ v) * q[:, i]
        norm = np.linalg.norm(v)
        if norm <= thresholds[j]:
            q[:, j] = _orthogonal_unit(q[:, :j], rng)
        else:
            q[:, j] = v / norm
    return q


def _jacobi_eigh(sym, max_sweeps=60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with ``sym == V diag(w) V.T``;
    ordering is unspecified (callers sort).
    """
    g = np.array(sym, dtype=np.float64, copy=True)
    n = g.shape[0]
    v = np.eye(n)
    if n == 1:
        return g[0].copy(), v
    scale = np.linalg.norm(g)
    if scale == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = np.linalg.norm(g - np.diag(np.diagonal(g)))
        if off <= 1e-14 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                gpq = g[p, q]
                if abs(gpq) <= 1e-18 * scale:
                    continue
                tau = (g[q, q] - g[p, p]) / (2.0 * gpq)
                sign = 1.0 if tau >= 0.0 else -1.0
                t = sign / (abs(tau) + np.hypot(tau, 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                gp = c * g[:, p] - s * g[:, q]
                gq = s * g[:, p] + c * g[:, q]
                g[:, p], g[:, q] = gp, gq
                gp = c * g[p, :] - s * g[q, :]
                gq = s * g[p, :] + c * g[q, :]
                g[p, :], g[q, :] = gp, gq
                vp = c * v[:, p] - s * v[:, q]
                vq = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = vp, vq
    return np.diagonal(g).copy(), v


def svd_oracle(m, rng=None):
    """Full SVD for test-scale matrices via Jacobi on the smaller Gram matrix.

    Returns ``(u, s, v)`` with ``m ~= u @ diag(s) @ v.T``, `s` non-negative
    and non-increasing, and `u`, `v` having orthonormal columns
    (``k = min(rows, cols)`` of them).  Directions belonging to zero singular
    values are filled with random orthonormal vectors.  This is the slow,
    independent reference route; production code uses the power method.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    if rows == 0 or cols == 0:
        raise ValueError("empty matrix")
    if min(rows, cols) > 256:
        raise ValueError("svd_oracle is restricted to min(rows, cols) <= 256")
    if cols > rows:
        v, s, u = svd_oracle(a.T, rng)
        return u, s, v
    evals, v = _jacobi_eigh(a.T @ a)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    v = np.ascontiguousarray(v[:, order])
    s = np.sqrt(np.clip(evals, 0.0, None))
    # The Gram route cannot resolve singular values below ~sqrt(eps) * s_max;
    # anything down there is round-off ghost mass, so report it as exact zero.
    s[s <= 1e-7 * s[0]] = 0.0
    u = np.zeros((rows, cols))
    for i in range(cols):
        if s[i] > 0.0:
            u[:, i] = (a @ v[:, i]) / s[i]
    u = gram_schmidt_columns(u, rng=rng)
    return u, s, v


def spectral_norm(m, iters=100, seed=0):
    """Largest singular value estimated by power iteration on the Gram matrix.

    Deterministic: the start vector is drawn from a stream derived from
    ``seed``, and the iteration budget is fixed.
    """
    a = as_matrix(m)
    if a.shape[0] < a.shape[1]:
        a = a.T
    cols = a.shape[1]
    v = seeded_rng(seed).standard_normal(cols)
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = a.T @ (a @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
    return float(np.linalg.norm(a @ v))


def stable_rank(m, iters=100, seed=0):
    """Squared Frobenius norm over squared spectral norm.

    A smooth surrogate for rank: 1 for rank-one matrices, ``n`` for the
    n-by-n identity.
    """
    a = as_matrix(m)
    fro = np.linalg.norm(a)
    if fro == 0.0:
        raise ValueError("stable rank of the zero matrix is undefined")
    top = spectral_norm(a, iters=iters, seed=seed)
    if top == 0.0:
        raise ValueError("spectral norm estimate degenerated to zero")
    return float((fro / top) ** 2)


def subspace_angle_sin(a, b):
    """Sine of the largest principal angle between two column spaces.

    Both arguments must have orthonormal columns.  Computed as the spectral
    norm of ``(I - a a^T) b``, which stays accurate for tiny angles where the
    cosine saturates at 1.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    rejected = b - a @ (a.T @ b)
    _, s, _ = svd_oracle(rejected)
    return float(s[0])
