"""Counter-based random streams and the distributions built on them.

Every random draw in a run comes from a short-lived Philox generator
keyed by ``(seed, iteration, side, item)``.  Streams are independent of
execution order, thread placement, and node count: any party that knows
the key reproduces the draw.  This is what makes serial, threaded, and
distributed runs produce bit-identical chains.

Key conventions (fixed; changing them changes every sampled chain):

* ``Side.HYPER`` uses ``item`` 0 for the movie-side hyperparameter draw
  and ``item`` 1 for the user-side draw of that iteration.
* ``Side.NOISE`` uses ``iteration`` 0 for user factor initialisation,
  1 for movie factor initialisation, 2 for train/test splitting and
  3 for synthetic data generation; ``item`` disambiguates within each.

Distribution helpers draw in a frozen order (e.g. the Wishart sampler
fills the Bartlett factor's sub-diagonal normals row by row, then its
diagonal chi-squares) so results are reproducible across versions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DegreesOfFreedomTooSmall

__all__ = [
    "Side",
    "StreamKey",
    "stream_for",
    "uniform",
    "std_normal",
    "chi_squared",
    "permutation",
    "bartlett_factor",
    "sample_wishart",
    "sample_mvn_prec",
]

_ITERATION_BITS = 30
_ITEM_BITS = 32


class Side(enum.IntEnum):
    USERS = 0
    MOVIES = 1
    HYPER = 2
    NOISE = 3


@dataclass(frozen=True)
class StreamKey:
    """Identifies one random stream within a run."""

    seed: int
    iteration: int
    side: Side
    item: int

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed out of range: {self.seed}")
        if not 0 <= self.iteration < 2**_ITERATION_BITS:
            raise ValueError(f"iteration out of range: {self.iteration}")
        if not 0 <= self.item < 2**_ITEM_BITS:
            raise ValueError(f"item out of range: {self.item}")
        object.__setattr__(self, "side", Side(self.side))

    def words(self):
        """The two 64-bit key words fed to the counter-based generator."""
        packed = (int(self.side) << (_ITERATION_BITS + _ITEM_BITS)) | (
            self.iteration << _ITEM_BITS
        ) | self.item
        return self.seed, packed


def stream_for(key: StreamKey) -> np.random.Generator:
    """Fresh generator for the stream named by ``key``."""
    k0, k1 = key.words()
    bits = np.random.Philox(key=np.array([k0, k1], dtype=np.uint64))
    return np.random.Generator(bits)


def uniform(gen: np.random.Generator, n: int) -> np.ndarray:
    """n doubles uniform on [0, 1)."""
    return gen.random(n)


def std_normal(gen: np.random.Generator, n: int) -> np.ndarray:
    """n standard normal doubles (ziggurat)."""
    return gen.standard_normal(n)


def chi_squared(gen: np.random.Generator, dof):
    """Chi-squared draws, one per entry of ``dof`` (scalar or array)."""
    return gen.chisquare(dof)


def permutation(gen: np.random.Generator, n: int) -> np.ndarray:
    """Uniform random permutation of range(n) (Fisher-Yates)."""
    return gen.permutation(n)


def bartlett_factor(gen: np.random.Generator, k: int, dof: float) -> np.ndarray:
    """Lower-triangular Bartlett factor A for a Wishart draw.

    Sub-diagonal entries are standard normals drawn first (row-major
    order), then the diagonal receives sqrt of chi-squared draws with
    dof, dof-1, ..., dof-k+1 degrees of freedom.
    """
    if dof <= k - 1:
        raise DegreesOfFreedomTooSmall(f"need dof > {k - 1}, got {dof}")
    a = np.zeros((k, k))
    normals = gen.standard_normal(k * (k - 1) // 2)
    pos = 0
    for i in range(1, k):
        a[i, :i] = normals[pos : pos + i]
        pos += i
    a[np.diag_indices(k)] = np.sqrt(gen.chisquare(dof - np.arange(k)))
    return a


def sample_wishart(gen: np.random.Generator, scale_chol: np.ndarray, dof: float) -> np.ndarray:
    """Wishart draw with the given scale-matrix Cholesky factor.

    Uses the Bartlett construction: with T = L_W @ A the draw is T @ T.T,
    which is symmetric positive definite by construction (never assembled
    via an explicit inverse).
    """
    scale_chol = np.ascontiguousarray(scale_chol, dtype=np.float64)
    k = scale_chol.shape[0]
    a = bartlett_factor(gen, k, dof)
    t = scale_chol @ a
    return t @ t.T


def sample_mvn_prec(gen: np.random.Generator, mean: np.ndarray, prec_chol: np.ndarray) -> np.ndarray:
    """Gaussian draw given the Cholesky factor of the precision matrix.

    Solves prec_chol.T @ x = z against a standard normal z, so no
    covariance matrix or inverse is ever formed.
    """
    from .kernels import _solve_lower_t

    mean = np.ascontiguousarray(mean, dtype=np.float64)
    z = gen.standard_normal(mean.shape[0])
    return mean + _solve_lower_t(np.ascontiguousarray(prec_chol, dtype=np.float64), z)
