"""Rating data containers, file formats, and synthetic instances.

Ratings live in a dual-indexed compressed form (by user and by movie)
so both update phases get contiguous slices.  Loaders accept
MatrixMarket coordinate files (1-based) and CSV triplets (0-based,
``user,movie,rating``, optional header, extra columns ignored).

Posterior-mean factor matrices are written as MatrixMarket array files
(column-major) with values formatted via ``repr``, which round-trips
float64 exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import DataFormatError

__all__ = [
    "RatingsMatrix",
    "load_ratings",
    "save_ratings_mm",
    "split_train_test",
    "synthetic_ratings",
    "save_model",
    "load_model",
    "MetricsRecord",
    "write_metrics_text",
    "write_metrics_json",
]


class RatingsMatrix:
    """Sparse rating matrix indexed both by user and by movie."""

    def __init__(self, n_users, n_movies, users, movies, values):
        users = np.asarray(users, dtype=np.int64)
        movies = np.asarray(movies, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if not (users.shape == movies.shape == values.shape) or users.ndim != 1:
            raise DataFormatError("triplet arrays must be 1-d and equal length")
        if users.size:
            if users.min() < 0 or movies.min() < 0:
                raise DataFormatError("negative user or movie index")
            if users.max() >= n_users or movies.max() >= n_movies:
                raise DataFormatError(
                    f"index out of bounds for shape {n_users}x{n_movies}"
                )
            if not np.all(np.isfinite(values)):
                raise DataFormatError("non-finite rating value")
        self.n_users = int(n_users)
        self.n_movies = int(n_movies)

        order = np.lexsort((movies, users))
        u_sorted, m_sorted, v_sorted = users[order], movies[order], values[order]
        dup = (u_sorted[1:] == u_sorted[:-1]) & (m_sorted[1:] == m_sorted[:-1])
        if np.any(dup):
            i = int(np.nonzero(dup)[0][0])
            raise DataFormatError(
                f"duplicate rating for user {u_sorted[i + 1]}, movie {m_sorted[i + 1]}"
            )
        self.user_ptr = np.zeros(self.n_users + 1, dtype=np.int64)
        np.cumsum(np.bincount(u_sorted, minlength=self.n_users), out=self.user_ptr[1:])
        self.user_movies = m_sorted
        self.user_values = v_sorted

        order = np.lexsort((users, movies))
        self.movie_ptr = np.zeros(self.n_movies + 1, dtype=np.int64)
        np.cumsum(
            np.bincount(movies[order], minlength=self.n_movies), out=self.movie_ptr[1:]
        )
        self.movie_users = users[order]
        self.movie_values = values[order]

    @property
    def nnz(self):
        return int(self.user_movies.shape[0])

    def user_slice(self, u):
        """(movie indices, values) of user u's ratings."""
        lo, hi = self.user_ptr[u], self.user_ptr[u + 1]
        return self.user_movies[lo:hi], self.user_values[lo:hi]

    def movie_slice(self, m):
        """(user indices, values) of movie m's ratings."""
        lo, hi = self.movie_ptr[m], self.movie_ptr[m + 1]
        return self.movie_users[lo:hi], self.movie_values[lo:hi]

    def user_counts(self):
        return np.diff(self.user_ptr)

    def movie_counts(self):
        return np.diff(self.movie_ptr)

    def triplets(self):
        """(users, movies, values) sorted by user then movie."""
        users = np.repeat(np.arange(self.n_users), np.diff(self.user_ptr))
        return users, self.user_movies.copy(), self.user_values.copy()


def _parse_mm(f, path):
    banner = f.readline()
    fields = banner.strip().lower().split()
    if len(fields) != 5 or fields[0] != "%%matrixmarket":
        raise DataFormatError(f"{path}: bad MatrixMarket banner")
    _, obj, fmt, valtype, symmetry = fields
    if obj != "matrix" or fmt != "coordinate":
        raise DataFormatError(f"{path}: only coordinate matrices are supported")
    if valtype not in ("real", "integer"):
        raise DataFormatError(f"{path}: unsupported value type {valtype!r}")
    if symmetry != "general":
        raise DataFormatError(f"{path}: only general symmetry is supported")
    size_line = None
    for line in f:
        s = line.strip()
        if s and not s.startswith("%"):
            size_line = s
            break
    if size_line is None:
        raise DataFormatError(f"{path}: missing size line")
    try:
        n_users, n_movies, nnz = (int(tok) for tok in size_line.split())
    except ValueError:
        raise DataFormatError(f"{path}: bad size line {size_line!r}") from None
    try:
        body = np.loadtxt(f, ndmin=2, dtype=np.float64)
    except ValueError as e:
        raise DataFormatError(f"{path}: {e}") from None
    if body.size == 0:
        body = np.zeros((0, 3))
    if body.shape[0] != nnz or body.shape[1] != 3:
        raise DataFormatError(
            f"{path}: expected {nnz} 'user movie rating' entries, got shape {body.shape}"
        )
    users = body[:, 0].astype(np.int64) - 1
    movies = body[:, 1].astype(np.int64) - 1
    if nnz and (np.any(body[:, 0] != users + 1) or np.any(body[:, 1] != movies + 1)):
        raise DataFormatError(f"{path}: non-integer indices")
    return RatingsMatrix(n_users, n_movies, users, movies, body[:, 2])


def _parse_csv(f, path):
    users, movies, values = [], [], []
    reader = csv.reader(f)
    for lineno, row in enumerate(reader, 1):
        row = [tok.strip() for tok in row if tok.strip() != ""]
        if not row:
            continue
        if len(row) < 3:
            raise DataFormatError(f"{path}:{lineno}: need at least 3 columns")
        try:
            u, m = int(row[0]), int(row[1])
            r = float(row[2])
        except ValueError:
            if lineno == 1:  # header row
                continue
            raise DataFormatError(f"{path}:{lineno}: non-numeric entry") from None
        users.append(u)
        movies.append(m)
        values.append(r)
    if not users:
        raise DataFormatError(f"{path}: no ratings found")
    users = np.array(users, dtype=np.int64)
    movies = np.array(movies, dtype=np.int64)
    if users.min() < 0 or movies.min() < 0:
        raise DataFormatError(f"{path}: negative index")
    return RatingsMatrix(users.max() + 1, movies.max() + 1, users, movies, values)


def load_ratings(path):
    """Load a rating matrix from a MatrixMarket or CSV triplet file."""
    try:
        f = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise DataFormatError(f"cannot open {path}: {e}") from None
    with f:
        head = f.read(2)
        f.seek(0)
        if head == "%%":
            return _parse_mm(f, path)
        return _parse_csv(f, path)


def save_ratings_mm(path, n_users, n_movies, users, movies, values):
    """Write triplets as a MatrixMarket coordinate file (1-based)."""
    users = np.asarray(users)
    with open(path, "w", encoding="utf-8") as f:
        f.write("%%MatrixMarket matrix coordinate real general\n")
        f.write(f"{n_users} {n_movies} {len(users)}\n")
        for u, m, r in zip(users, movies, values):
            f.write(f"{int(u) + 1} {int(m) + 1} {repr(float(r))}\n")


def split_train_test(users, movies, values, fraction, gen):
    """Disjoint random split of rating triplets.

    The test set is a shuffled prefix of ``round(fraction * nnz)``
    entries; both halves keep the original triplet order, so the split
    is deterministic given the generator.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"holdout fraction must be in [0, 1), got {fraction}")
    users = np.asarray(users, dtype=np.int64)
    movies = np.asarray(movies, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    n = users.shape[0]
    n_test = int(round(n * fraction))
    perm = gen.permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    pick = lambda idx: (users[idx], movies[idx], values[idx])
    return pick(train_idx), pick(test_idx)


def synthetic_ratings(n_users, n_movies, k_true, density, noise_sd, gen):
    """Low-rank planted instance: returns triplets plus the true factors.

    Factor entries are N(0, 1/sqrt(k_true)) so that the dot products have
    unit variance; each cell is observed independently with probability
    ``density`` and observed values get N(0, noise_sd^2) noise.
    """
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must be in (0, 1], got {density}")
    scale = float(k_true) ** -0.25
    u_true = gen.standard_normal((n_users, k_true)) * scale
    v_true = gen.standard_normal((n_movies, k_true)) * scale
    mask = gen.random((n_users, n_movies)) < density
    users, movies = np.nonzero(mask)
    noise = gen.standard_normal(users.shape[0]) * noise_sd
    values = np.einsum("ij,ij->i", u_true[users], v_true[movies]) + noise
    return users, movies, values, u_true, v_true


def _write_mm_array(path, a):
    a = np.asarray(a, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as f:
        f.write("%%MatrixMarket matrix array real general\n")
        f.write(f"{a.shape[0]} {a.shape[1]}\n")
        for j in range(a.shape[1]):  # array format is column-major
            for i in range(a.shape[0]):
                f.write(repr(float(a[i, j])))
                f.write("\n")


def _read_mm_array(path):
    with open(path, "r", encoding="utf-8") as f:
        banner = f.readline().strip().lower().split()
        if len(banner) != 5 or banner[1] != "matrix" or banner[2] != "array":
            raise DataFormatError(f"{path}: not a MatrixMarket array file")
        rows, cols = (int(tok) for tok in f.readline().split())
        vals = np.loadtxt(f, dtype=np.float64, ndmin=1)
    if vals.shape[0] != rows * cols:
        raise DataFormatError(f"{path}: expected {rows * cols} values")
    return vals.reshape((cols, rows)).T


def save_model(prefix, u_mean, v_mean, meta):
    """Write posterior-mean factors and a JSON metadata sidecar."""
    _write_mm_array(f"{prefix}-U.mm", u_mean)
    _write_mm_array(f"{prefix}-V.mm", v_mean)
    with open(f"{prefix}-meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_model(prefix):
    """Inverse of :func:`save_model`; returns (u_mean, v_mean, meta)."""
    u = _read_mm_array(f"{prefix}-U.mm")
    v = _read_mm_array(f"{prefix}-V.mm")
    with open(f"{prefix}-meta.json", "r", encoding="utf-8") as f:
        meta = json.load(f)
    if u.shape[1] != v.shape[1]:
        raise DataFormatError(f"{prefix}: factor rank mismatch {u.shape} vs {v.shape}")
    return u, v, meta


@dataclass
class MetricsRecord:
    """Per-iteration progress record."""

    iteration: int
    rmse_sample: float
    rmse_avg: float
    wall_seconds: float = 0.0
    updates_per_second: float = 0.0
    compute_seconds: float = 0.0
    comm_seconds: float = 0.0
    overlap_seconds: float = 0.0


def write_metrics_text(path, records):
    """Deterministic text metrics: one line per iteration.

    Only fields that are bit-reproducible across runs, thread counts and
    node counts appear here; wall-clock figures go to the JSON sidecar.
    """
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(
                f"iter={r.iteration} rmse_sample={repr(float(r.rmse_sample))} "
                f"rmse_avg={repr(float(r.rmse_avg))}\n"
            )


def write_metrics_json(path, records, config=None):
    """Full machine-readable metrics, including timing."""
    doc = {"records": [asdict(r) for r in records]}
    if config is not None:
        doc["config"] = config
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
