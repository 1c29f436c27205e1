"""Gibbs sampler for Bayesian matrix factorisation with Gaussian noise.

Each iteration draws movie-side hyperparameters from their
normal-Wishart posterior, resamples every movie factor row, then does
the same for users, and finally scores the held-out ratings with both
the current sample and the running posterior-mean prediction.

Every stochastic quantity comes from a counter-based stream keyed by
(seed, iteration, side, item), and per-item posteriors are assembled
with fixed chunk boundaries and a fixed combine order.  Consequently a
chain is a pure function of (data, seed, rank, hyperparameters): thread
counts, execution strategies, and node counts cannot change a single
bit of it.

In distributed runs every node keeps full factor replicas but resamples
only the items it owns; freshly drawn rows are handed to an exchanger
and replicas are reconciled at a phase barrier before anyone reads
them.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .data import MetricsRecord
from .errors import NotPositiveDefinite
from .kernels import (
    _gram_chunk,
    _update_draw,
    cholesky,
    chunk_bounds,
    combine_gram_partials,
    tri_solve,
)
from .rng import Side, StreamKey, bartlett_factor, sample_mvn_prec, stream_for
from .scheduler import ActivityTracker, SchedulerPolicy, WorkStealingPool, run_items

__all__ = [
    "HyperPrior",
    "GaussianParams",
    "sample_hyper",
    "init_factors",
    "update_item",
    "predict_pairs",
    "RunReport",
    "run",
]

# stream-key conventions within Side.HYPER and Side.NOISE
_HYPER_ITEM = {Side.MOVIES: 0, Side.USERS: 1}
_INIT_ITERATION = {Side.USERS: 0, Side.MOVIES: 1}


@dataclass(frozen=True)
class HyperPrior:
    """Normal-Wishart prior over a side's Gaussian factor prior."""

    mu0: np.ndarray
    beta0: float
    nu0: float
    w0: np.ndarray

    def __post_init__(self):
        k = self.mu0.shape[0]
        if self.nu0 <= k - 1:
            raise ValueError(f"nu0 must exceed k-1={k - 1}, got {self.nu0}")
        if self.beta0 <= 0:
            raise ValueError("beta0 must be positive")

    @classmethod
    def default(cls, k):
        """mu0 = 0, beta0 = 2, nu0 = k, W0 = I."""
        return cls(mu0=np.zeros(k), beta0=2.0, nu0=float(k), w0=np.eye(k))

    def w0_inv(self):
        """Symmetric inverse of the scale matrix, computed once via its factor."""
        l = cholesky(self.w0)
        k = self.w0.shape[0]
        cols = np.empty((k, k))
        for j in range(k):
            e = np.zeros(k)
            e[j] = 1.0
            cols[:, j] = tri_solve(l, tri_solve(l, e), transposed=True)
        return (cols + cols.T) / 2.0


@dataclass(frozen=True)
class GaussianParams:
    """One side's factor prior for an iteration: N(mean, prec^-1)."""

    mean: np.ndarray
    prec: np.ndarray
    prec_chol: np.ndarray
    prec_mean: np.ndarray  # prec @ mean, reused by every item update


def sample_hyper(rows, prior: HyperPrior, gen, w0_inv=None) -> GaussianParams:
    """Draw (mu, Lambda) from their normal-Wishart posterior given rows.

    The posterior scale is handled through Cholesky factors only: with
    P the posterior *inverse* scale and T solving L_P^T T = A (Bartlett
    factor A), the precision draw is T @ T^T.  Draw order is fixed:
    Bartlett normals, Bartlett chi-squares, then the mean's normals.
    """
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    n, k = rows.shape
    if w0_inv is None:
        w0_inv = prior.w0_inv()
    beta_star = prior.beta0 + n
    nu_star = prior.nu0 + n
    if n:
        xbar = rows.mean(axis=0)
        centered = rows - xbar
        scatter = centered.T @ centered  # n times the sample covariance
        d = prior.mu0 - xbar
        mu_star = (prior.beta0 * prior.mu0 + n * xbar) / beta_star
        p_star = w0_inv + scatter + (prior.beta0 * n / beta_star) * np.outer(d, d)
    else:
        mu_star = prior.mu0.copy()
        p_star = w0_inv.copy()
    lp = cholesky(p_star)
    a = bartlett_factor(gen, k, nu_star)
    t = np.empty((k, k))
    for j in range(k):
        t[:, j] = tri_solve(lp, a[:, j], transposed=True)
    prec = t @ t.T
    prec_chol = cholesky(prec)
    mean = sample_mvn_prec(gen, mu_star, np.sqrt(beta_star) * prec_chol)
    return GaussianParams(
        mean=mean, prec=prec, prec_chol=prec_chol, prec_mean=prec @ mean
    )


def init_factors(n_items, k, seed, side: Side, scale=1.0) -> np.ndarray:
    """Scaled standard-normal starting rows, one stream per item.

    ``scale`` trades diffuseness for mixing speed: at high ``alpha`` the
    chain can stall for hundreds of iterations in a see-saw mode (one
    side's rows inflated, the other's collapsed) when started at unit
    scale, while small-norm starts join the data-aligned mode quickly.
    """
    rows = np.empty((n_items, k))
    it = _INIT_ITERATION[side]
    for i in range(n_items):
        rows[i] = stream_for(StreamKey(seed, it, Side.NOISE, i)).standard_normal(k)
    if scale != 1.0:
        rows *= scale
    return rows


def _gram_over(rows, values, chunk_size):
    bounds = chunk_bounds(rows.shape[0], chunk_size)
    if not bounds:
        k = rows.shape[1]
        return np.zeros((k, k)), np.zeros(k)
    return combine_gram_partials([_gram_chunk(rows, values, lo, hi) for lo, hi in bounds])


def _draw_row(out_rows, index, params, alpha, g, s, z):
    draw, ok = _update_draw(params.prec, params.prec_mean, alpha, g, s, z)
    if not ok:
        raise NotPositiveDefinite(f"posterior precision of item {index} not SPD")
    out_rows[index] = draw
    return draw


def update_item(out_rows, index, other_rows, rated, values, params, alpha, z, chunk_size):
    """Resample one factor row from its Gaussian conditional.

    This is the single numeric path behind every execution strategy:
    chunked Gram accumulation in ascending chunk order, posterior
    assembly, one factorisation, two triangular solves, and the noise
    solve against ``z``.  Writes the draw into ``out_rows[index]``.
    """
    gathered = other_rows[rated]
    g, s = _gram_over(gathered, values, chunk_size)
    return _draw_row(out_rows, index, params, alpha, g, s, z)


def predict_pairs(u, v, users, movies, clamp=None):
    """Dot-product predictions for (user, movie) index pairs."""
    preds = np.einsum("ij,ij->i", u[users], v[movies])
    if clamp is not None:
        np.clip(preds, clamp[0], clamp[1], out=preds)
    return preds


def _rmse(preds, truth):
    if preds.shape[0] == 0:
        return 0.0
    e = preds - truth
    # fsum is correctly rounded, so the score cannot depend on the
    # ordering of the test file
    return float(np.sqrt(math.fsum((e * e).tolist()) / e.shape[0]))


@dataclass
class RunReport:
    """Everything a completed run hands back to callers."""

    records: list
    u_mean: np.ndarray
    v_mean: np.ndarray
    u_last: np.ndarray
    v_last: np.ndarray
    n_users: int
    n_movies: int
    k: int
    seed: int
    iterations: int
    burn_in: int
    alpha: float
    clamp: tuple | None = None
    node_id: int = 0
    p: int = 1
    sampled: int = 0  # posterior samples in the mean

    @property
    def final_rmse(self):
        return self.records[-1].rmse_avg if self.records else 0.0


class _Phase:
    """Bound context for resampling one side's owned items."""

    def __init__(self, side, state, ratings, policy, alpha, seed, exchanger):
        self.side = side
        self.seed = seed
        self.policy = policy
        self.alpha = alpha
        self.exchanger = exchanger
        if side == Side.MOVIES:
            self.out, self.other = state["v"], state["u"]
            self.slicer = ratings.movie_slice
        else:
            self.out, self.other = state["u"], state["v"]
            self.slicer = ratings.user_slice
        self.params = None
        self.iteration = 0

    def task(self, index, choice):
        rated, values = self.slicer(index)
        chunk = self.policy.parallel_chunk
        if choice.method != "parallel_chol" or rated.shape[0] == 0:
            self._finish(index, _gram_over(self.other[rated], values, chunk))
            return None
        gathered = self.other[rated]
        bounds = chunk_bounds(gathered.shape[0], chunk)
        slots = [None] * len(bounds)

        def part(c, lo, hi):
            def go():
                slots[c] = _gram_chunk(gathered, values, lo, hi)
            return go

        def finish():
            self._finish(index, combine_gram_partials(slots))

        return [part(c, lo, hi) for c, (lo, hi) in enumerate(bounds)], finish

    def _finish(self, index, gram):
        g, s = gram
        z = stream_for(
            StreamKey(self.seed, self.iteration, self.side, index)
        ).standard_normal(self.out.shape[1])
        draw = _draw_row(self.out, index, self.params, self.alpha, g, s, z)
        if self.exchanger is not None:
            self.exchanger.submit(self.side, index, self.iteration, draw)


def run(
    ratings,
    *,
    k=32,
    alpha=2.0,
    iterations=100,
    burn_in=20,
    seed=0,
    test=None,
    policy=None,
    clamp=None,
    prior=None,
    node_id=0,
    part=None,
    exchanger=None,
    pool=None,
    tracker=None,
    progress=None,
    init_scale=1.0,
) -> RunReport:
    """Run the Gibbs sampler and return factors, means, and metrics.

    ``test`` is an optional triplet of index/value arrays scored every
    iteration; predictions are accumulated after ``burn_in`` iterations
    and the posterior means are the averaged factors over the same
    window.  ``part``/``exchanger`` restrict resampling to this node's
    items and reconcile replicas; with the defaults the whole problem
    runs in-process.
    """
    policy = policy or SchedulerPolicy()
    prior = prior or HyperPrior.default(k)
    tracker = tracker or ActivityTracker()
    w0_inv = prior.w0_inv()
    m, n = ratings.n_users, ratings.n_movies

    u = init_factors(m, k, seed, Side.USERS, init_scale)
    v = init_factors(n, k, seed, Side.MOVIES, init_scale)
    state = {"u": u, "v": v}

    if test is not None:
        t_users = np.asarray(test[0], dtype=np.int64)
        t_movies = np.asarray(test[1], dtype=np.int64)
        t_vals = np.asarray(test[2], dtype=np.float64)
        if t_users.size and (t_users.max() >= m or t_movies.max() >= n):
            raise ValueError("test pair index out of range")
    else:
        t_users = np.zeros(0, dtype=np.int64)
        t_movies = np.zeros(0, dtype=np.int64)
        t_vals = np.zeros(0)

    if part is not None:
        owned_u = part.owned_users(node_id)
        owned_m = part.owned_movies(node_id)
        p = part.p
    else:
        owned_u = np.arange(m)
        owned_m = np.arange(n)
        p = 1

    u_counts = ratings.user_counts()
    m_counts = ratings.movie_counts()
    user_items = [(int(i), int(u_counts[i])) for i in owned_u]
    movie_items = [(int(i), int(m_counts[i])) for i in owned_m]

    phases = {
        Side.MOVIES: _Phase(Side.MOVIES, state, ratings, policy, alpha, seed, exchanger),
        Side.USERS: _Phase(Side.USERS, state, ratings, policy, alpha, seed, exchanger),
    }

    own_pool = pool is None
    if own_pool:
        pool = WorkStealingPool(policy.threads)

    pred_sum = np.zeros(t_vals.shape[0])
    u_sum = np.zeros_like(u)
    v_sum = np.zeros_like(v)
    sampled = 0
    records = []
    try:
        for t in range(iterations):
            t0 = time.perf_counter()
            c0 = tracker.snapshot()
            for side, items in ((Side.MOVIES, movie_items), (Side.USERS, user_items)):
                gen = stream_for(StreamKey(seed, t, Side.HYPER, _HYPER_ITEM[side]))
                rows = v if side == Side.MOVIES else u
                params = sample_hyper(rows, prior, gen, w0_inv)
                ph = phases[side]
                ph.params = params
                ph.iteration = t
                run_items(pool, items, ph.task, policy, tracker)
                if exchanger is not None:
                    out = ph.out
                    exchanger.finish_phase(
                        side, t, lambda orig, vals, out=out: out.__setitem__(orig, vals)
                    )

            preds = predict_pairs(u, v, t_users, t_movies, clamp)
            rmse_sample = _rmse(preds, t_vals)
            if t >= burn_in:
                pred_sum += preds
                u_sum += u
                v_sum += v
                sampled += 1
                rmse_avg = _rmse(pred_sum / sampled, t_vals)
            else:
                rmse_avg = rmse_sample
            wall = time.perf_counter() - t0
            c1 = tracker.snapshot()
            rec = MetricsRecord(
                iteration=t,
                rmse_sample=rmse_sample,
                rmse_avg=rmse_avg,
                wall_seconds=wall,
                updates_per_second=(ratings.n_users + ratings.n_movies) / wall
                if wall > 0
                else 0.0,
                compute_seconds=c1[0] - c0[0],
                comm_seconds=c1[1] - c0[1],
                overlap_seconds=c1[2] - c0[2],
            )
            records.append(rec)
            if progress is not None:
                progress(rec)
    finally:
        if own_pool:
            pool.close()

    if sampled:
        u_mean, v_mean = u_sum / sampled, v_sum / sampled
    else:  # never reached the averaging window; last sample stands in
        u_mean, v_mean = u.copy(), v.copy()
    return RunReport(
        records=records,
        u_mean=u_mean,
        v_mean=v_mean,
        u_last=u,
        v_last=v,
        n_users=m,
        n_movies=n,
        k=k,
        seed=seed,
        iterations=iterations,
        burn_in=burn_in,
        alpha=alpha,
        clamp=clamp,
        node_id=node_id,
        p=p,
        sampled=sampled,
    )
