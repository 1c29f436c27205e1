"""Dense K-dimensional linear algebra used by the sampler.

All operations work on float64 C-contiguous arrays.  Matrices that are
factors of SPD matrices are stored as lower triangles with exact zeros
above the diagonal.  The hot paths are nopython-compiled and release the
GIL so item updates scale across worker threads.

Summation order is part of the contract: Gram matrices are accumulated
over fixed chunk boundaries and the per-chunk partials are combined in
ascending chunk order, which makes the result bit-identical no matter
how many workers computed the chunks.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .errors import NotPositiveDefinite

__all__ = [
    "cholesky",
    "tri_solve",
    "chol_rank1_update",
    "gram_accumulate",
    "chunk_bounds",
    "combine_gram_partials",
    "mirror_lower",
    "warmup",
]


def _as_matrix(a, name="matrix"):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _as_vector(a, k=None, name="vector"):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {a.shape}")
    if k is not None and a.shape[0] != k:
        raise ValueError(f"{name} must have length {k}, got {a.shape[0]}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _require_lower(l, name="factor"):
    l = _as_matrix(l, name)
    k = l.shape[0]
    if k and np.any(np.triu(l, 1) != 0.0):
        raise ValueError(f"{name} must have exact zeros above the diagonal")
    if np.any(np.diag(l) <= 0.0):
        raise ValueError(f"{name} must have a strictly positive diagonal")
    return l


@njit(cache=True, nogil=True)
def _chol_lower(a):
    # Cholesky-Banachiewicz; reads only the lower triangle of a.
    k = a.shape[0]
    l = np.zeros((k, k))
    for j in range(k):
        s = a[j, j]
        for p in range(j):
            s -= l[j, p] * l[j, p]
        if s <= 0.0 or not np.isfinite(s):
            return l, False
        d = math.sqrt(s)
        l[j, j] = d
        for i in range(j + 1, k):
            t = a[i, j]
            for p in range(j):
                t -= l[i, p] * l[j, p]
            l[i, j] = t / d
    return l, True


@njit(cache=True, nogil=True)
def _solve_lower(l, b):
    # forward substitution: l @ x = b
    k = l.shape[0]
    x = np.empty(k)
    for i in range(k):
        t = b[i]
        for p in range(i):
            t -= l[i, p] * x[p]
        x[i] = t / l[i, i]
    return x


@njit(cache=True, nogil=True)
def _solve_lower_t(l, b):
    # back substitution: l.T @ x = b, reading l's lower storage
    k = l.shape[0]
    x = np.empty(k)
    for i in range(k - 1, -1, -1):
        t = b[i]
        for p in range(i + 1, k):
            t -= l[p, i] * x[p]
        x[i] = t / l[i, i]
    return x


@njit(cache=True, nogil=True)
def _rank1_update_inplace(l, w):
    # Givens-style factor update: L L' + w w' = L~ L~'; destroys w.
    k = l.shape[0]
    for j in range(k):
        ljj = l[j, j]
        wj = w[j]
        r = math.sqrt(ljj * ljj + wj * wj)
        c = r / ljj
        s = wj / ljj
        l[j, j] = r
        for i in range(j + 1, k):
            l[i, j] = (l[i, j] + s * w[i]) / c
            w[i] = c * w[i] - s * l[i, j]


@njit(cache=True, nogil=True)
def _gram_chunk(rows, weights, lo, hi):
    # lower-triangle Gram partial plus weighted row sum over rows[lo:hi]
    k = rows.shape[1]
    g = np.zeros((k, k))
    s = np.zeros(k)
    for idx in range(lo, hi):
        w = weights[idx]
        for a in range(k):
            va = rows[idx, a]
            s[a] += w * va
            for b in range(a + 1):
                g[a, b] += va * rows[idx, b]
    return g, s


@njit(cache=True, nogil=True)
def _update_draw(lam, lam_mu, alpha, g_lower, s, z):
    # posterior precision/mean assembly and factored Gaussian draw;
    # only lower triangles are read, so g_lower need not be mirrored.
    k = lam.shape[0]
    prec = np.empty((k, k))
    rhs = np.empty(k)
    for i in range(k):
        rhs[i] = lam_mu[i] + alpha * s[i]
        for j in range(i + 1):
            prec[i, j] = lam[i, j] + alpha * g_lower[i, j]
    l, ok = _chol_lower(prec)
    if not ok:
        return np.zeros(k), False
    y = _solve_lower(l, rhs)
    mean = _solve_lower_t(l, y)
    noise = _solve_lower_t(l, z)
    return mean + noise, True


@njit(cache=True, nogil=True)
def _rank1_sweep(l, rows, values, sqrt_alpha):
    # factor update per rating plus weighted row accumulation, fused so
    # the per-rating cost stays O(k^2) with no Python round trips
    n, k = rows.shape
    s = np.zeros(k)
    w = np.empty(k)
    for idx in range(n):
        for a in range(k):
            w[a] = sqrt_alpha * rows[idx, a]
            s[a] += values[idx] * rows[idx, a]
        _rank1_update_inplace(l, w)
    return s


@njit(cache=True, nogil=True)
def _method_rank_one(lam_chol, lam_mu, rows, values, alpha, z):
    # posterior draw maintaining the precision factor by rank-one
    # updates: O(nnz * k^2), no refactorisation
    k = lam_chol.shape[0]
    l = lam_chol.copy()
    s = _rank1_sweep(l, rows, values, math.sqrt(alpha))
    rhs = np.empty(k)
    for i in range(k):
        rhs[i] = lam_mu[i] + alpha * s[i]
    y = _solve_lower(l, rhs)
    mean = _solve_lower_t(l, y)
    noise = _solve_lower_t(l, z)
    return mean + noise


@njit(cache=True, nogil=True)
def _method_full_chol(lam, lam_mu, rows, values, alpha, z):
    # posterior draw recomputing the Gram matrix and factorising fresh
    g, s = _gram_chunk(rows, values, 0, rows.shape[0])
    draw, _ = _update_draw(lam, lam_mu, alpha, g, s, z)
    return draw


def cholesky(a):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Validates symmetry to 1e-12 absolute tolerance, symmetrizes the
    input (accumulated Gram matrices carry rounding noise), and raises
    :class:`NotPositiveDefinite` when a pivot is not strictly positive.
    """
    a = _as_matrix(a)
    if a.size and np.max(np.abs(a - a.T)) > 1e-12:
        raise ValueError("matrix is not symmetric")
    a = (a + a.T) * 0.5
    l, ok = _chol_lower(a)
    if not ok:
        raise NotPositiveDefinite("matrix is not positive definite")
    return l


def tri_solve(l, b, transposed=False):
    """Solve l @ x = b (or l.T @ x = b) for a lower-triangular l."""
    l = _require_lower(l)
    b = _as_vector(b, l.shape[0], "rhs")
    if transposed:
        return _solve_lower_t(l, b)
    return _solve_lower(l, b)


def chol_rank1_update(l, v):
    """Return the factor of L@L.T + outer(v, v) in O(k^2) time."""
    l = _require_lower(l)
    v = _as_vector(v, l.shape[0], "update vector")
    out = l.copy()
    _rank1_update_inplace(out, v.copy())
    return out


def chunk_bounds(n, chunk_size):
    """Fixed chunk boundaries: ceil(n / chunk_size) half-open ranges."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    return [(lo, min(n, lo + chunk_size)) for lo in range(0, max(n, 0), chunk_size)]


def combine_gram_partials(parts):
    """Sum (g_lower, s) partials in the order given.

    The caller must pass partials in ascending chunk order; the result is
    then independent of which worker computed each chunk.
    """
    g_total, s_total = parts[0]
    g_total = g_total.copy()
    s_total = s_total.copy()
    for g, s in parts[1:]:
        g_total += g
        s_total += s
    return g_total, s_total


def mirror_lower(g):
    """Full symmetric matrix from lower-triangle storage (exact copy)."""
    out = np.tril(g)
    out += np.tril(g, -1).T
    return out


def gram_accumulate(rows, weights, chunk_size, executor=None):
    """Gram matrix sum(v v') and weighted sum(w v) over the given rows.

    Work is split at fixed boundaries of ``chunk_size`` rows; chunk
    partials may be computed by any number of workers (pass a
    ``concurrent.futures`` executor) and are combined in ascending chunk
    order, so the result is bit-identical regardless of worker count.
    """
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if rows.ndim != 2:
        raise ValueError(f"rows must be 2-d, got shape {rows.shape}")
    if weights.ndim != 1 or weights.shape[0] != rows.shape[0]:
        raise ValueError(
            f"length mismatch: {rows.shape[0]} rows vs {weights.shape[0]} weights"
        )
    k = rows.shape[1]
    if rows.shape[0] == 0:
        return np.zeros((k, k)), np.zeros(k)
    bounds = chunk_bounds(rows.shape[0], chunk_size)
    if executor is None:
        parts = [_gram_chunk(rows, weights, lo, hi) for lo, hi in bounds]
    else:
        futures = [executor.submit(_gram_chunk, rows, weights, lo, hi) for lo, hi in bounds]
        parts = [f.result() for f in futures]
    g, s = combine_gram_partials(parts)
    return mirror_lower(g), s


def warmup(k=4):
    """Force JIT compilation of every kernel (first call is slow)."""
    eye = np.eye(k)
    z = np.zeros(k)
    l, _ = _chol_lower(eye)
    _solve_lower(l, z)
    _solve_lower_t(l, z)
    _rank1_update_inplace(l.copy(), z.copy())
    _gram_chunk(np.zeros((1, k)), np.zeros(1), 0, 1)
    _update_draw(eye, z, 1.0, np.zeros((k, k)), z, z)
    _rank1_sweep(np.eye(k), np.zeros((1, k)), np.zeros(1), 1.0)
    _method_rank_one(eye, z, np.zeros((1, k)), np.zeros(1), 1.0, z)
    _method_full_chol(eye, z, np.zeros((1, k)), np.zeros(1), 1.0, z)
