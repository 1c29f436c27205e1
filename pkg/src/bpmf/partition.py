"""Node-level data placement: reordering, partitioning, comm planning.

Rows and columns are never physically permuted.  A partition is a pair
of orderings (position -> original index) plus contiguous cut points in
those orderings; everything downstream keeps working in original index
space and uses the partition only to answer "who owns item i" and "what
is item i's position on the wire".

The partitioner minimises the maximum per-node workload, where workload
is a fixed cost per item plus a cost per rating.  The reorderer
clusters users and movies that interact (alternating barycenter sweeps,
recursively bisected) so that block partitions of the reordered matrix
need less item traffic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import TooManyNodes
from .rng import Side

__all__ = [
    "WorkloadModel",
    "BlockPartition",
    "partition",
    "reorder",
    "CommPlan",
    "build_comm_plan",
    "replication_plan",
]


@dataclass(frozen=True)
class WorkloadModel:
    """Per-item update cost: fixed part plus a part per rating.

    Costs are in units of K^2 operations; the fixed part covers the
    solve of the K-dimensional posterior system, which is why it
    defaults to K.
    """

    fixed_cost: float
    per_rating_cost: float = 1.0

    def __post_init__(self):
        if self.fixed_cost < 0 or self.per_rating_cost < 0:
            raise ValueError("workload costs must be non-negative")
        if self.fixed_cost == 0 and self.per_rating_cost == 0:
            raise ValueError("workload model cannot be all zero")

    @classmethod
    def for_rank(cls, k):
        return cls(fixed_cost=float(k), per_rating_cost=1.0)

    def workload(self, counts):
        """Cost of items with the given rating counts (vectorized)."""
        return self.fixed_cost + self.per_rating_cost * np.asarray(counts, dtype=np.float64)


@dataclass
class BlockPartition:
    """Contiguous ownership of permuted user and movie ranges."""

    p: int
    user_order: np.ndarray   # position -> original user id
    movie_order: np.ndarray  # position -> original movie id
    user_starts: np.ndarray  # p + 1 cut positions, user_starts[0] == 0
    movie_starts: np.ndarray

    user_rank: np.ndarray = field(init=False)   # original id -> position
    movie_rank: np.ndarray = field(init=False)
    user_owner: np.ndarray = field(init=False)  # original id -> node
    movie_owner: np.ndarray = field(init=False)

    def __post_init__(self):
        self.user_rank = _invert(self.user_order)
        self.movie_rank = _invert(self.movie_order)
        self.user_owner = self._owners(self.user_rank, self.user_starts)
        self.movie_owner = self._owners(self.movie_rank, self.movie_starts)

    @staticmethod
    def _owners(rank, starts):
        return (np.searchsorted(starts, rank, side="right") - 1).astype(np.int64)

    def owned_users(self, node):
        """Original user ids owned by ``node``."""
        return self.user_order[self.user_starts[node] : self.user_starts[node + 1]]

    def owned_movies(self, node):
        return self.movie_order[self.movie_starts[node] : self.movie_starts[node + 1]]

    def owner(self, side, index):
        arr = self.user_owner if side == Side.USERS else self.movie_owner
        return int(arr[index])

    def wire_index(self, side, index):
        """Permuted position of an original index (what goes on the wire)."""
        arr = self.user_rank if side == Side.USERS else self.movie_rank
        return int(arr[index])

    def from_wire(self, side, position):
        arr = self.user_order if side == Side.USERS else self.movie_order
        return int(arr[position])

    def node_workloads(self, ratings, model):
        """Per-node total workload under ``model`` (both sides)."""
        u = model.workload(ratings.user_counts())[self.user_order]
        m = model.workload(ratings.movie_counts())[self.movie_order]
        loads = np.zeros(self.p)
        for q in range(self.p):
            loads[q] = (
                u[self.user_starts[q] : self.user_starts[q + 1]].sum()
                + m[self.movie_starts[q] : self.movie_starts[q + 1]].sum()
            )
        return loads


def _invert(order):
    inv = np.empty_like(order)
    inv[order] = np.arange(order.shape[0], dtype=order.dtype)
    return inv


def _greedy_cuts(cum, p, limit):
    """Maximal prefixes under ``limit``; None when infeasible."""
    n = cum.shape[0] - 1
    starts = np.zeros(p + 1, dtype=np.int64)
    pos = 0
    for node in range(p):
        if node == p - 1:
            end = n
        else:
            end = int(np.searchsorted(cum, cum[pos] + limit, side="right")) - 1
            end = min(end, n - (p - node - 1))  # leave one item per later node
            end = max(end, pos + 1)
        if cum[end] - cum[pos] > limit * (1 + 1e-12):
            return None
        starts[node + 1] = end
        pos = end
    return starts


def _min_max_cuts(costs, p):
    """Cut positions minimising the largest contiguous block sum."""
    cum = np.concatenate([[0.0], np.cumsum(costs)])
    lo = max(float(np.max(costs)), cum[-1] / p)
    hi = float(cum[-1])
    best = _greedy_cuts(cum, p, hi)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        cuts = _greedy_cuts(cum, p, mid)
        if cuts is None:
            lo = mid
        else:
            best, hi = cuts, mid
    return best


def partition(ratings, p, model, user_order=None, movie_order=None):
    """Contiguous workload-balanced partition onto ``p`` nodes.

    Starts from a greedy prefix assignment against a workload budget and
    refines the budget by bisection until the largest block is minimal.
    Every node receives at least one user and one movie.
    """
    if p < 1:
        raise ValueError(f"need at least one node, got p={p}")
    if p > min(ratings.n_users, ratings.n_movies):
        raise TooManyNodes(
            f"p={p} exceeds matrix sides {ratings.n_users}x{ratings.n_movies}"
        )
    if user_order is None:
        user_order = np.arange(ratings.n_users, dtype=np.int64)
    if movie_order is None:
        movie_order = np.arange(ratings.n_movies, dtype=np.int64)
    user_costs = model.workload(ratings.user_counts())[user_order]
    movie_costs = model.workload(ratings.movie_counts())[movie_order]
    return BlockPartition(
        p=p,
        user_order=np.asarray(user_order, dtype=np.int64),
        movie_order=np.asarray(movie_order, dtype=np.int64),
        user_starts=_min_max_cuts(user_costs, p),
        movie_starts=_min_max_cuts(movie_costs, p),
    )


def _balanced_split(ids, costs):
    """Split positions so both halves are non-empty and near-equal cost."""
    cum = np.cumsum(costs)
    half = cum[-1] / 2.0
    cut = int(np.argmin(np.abs(cum[:-1] - half))) + 1
    return max(1, min(cut, len(ids) - 1))


def _sweep_block(n_users, n_movies, t_users, t_movies, sweeps):
    """Alternating barycenter ordering of one block.

    ``t_users``/``t_movies`` are the block's ratings as local indices;
    each sweep sorts users by the mean position of the movies they
    rate, then movies by the mean position of their raters.  Items with
    no ratings in the block keep their current position.
    """
    u_pos = np.arange(n_users, dtype=np.float64)
    m_pos = np.arange(n_movies, dtype=np.float64)
    u_cnt = np.bincount(t_users, minlength=n_users)
    m_cnt = np.bincount(t_movies, minlength=n_movies)
    u_div = np.maximum(u_cnt, 1)
    m_div = np.maximum(m_cnt, 1)
    for _ in range(sweeps):
        score = np.bincount(t_users, weights=m_pos[t_movies], minlength=n_users) / u_div
        u_pos = _invert_pos(np.where(u_cnt > 0, score, u_pos))
        score = np.bincount(t_movies, weights=u_pos[t_users], minlength=n_movies) / m_div
        m_pos = _invert_pos(np.where(m_cnt > 0, score, m_pos))
    u_ord = np.argsort(u_pos, kind="stable").astype(np.int64)
    m_ord = np.argsort(m_pos, kind="stable").astype(np.int64)
    return u_ord, m_ord


def _invert_pos(score):
    order = np.argsort(score, kind="stable")
    pos = np.empty(score.shape[0], dtype=np.float64)
    pos[order] = np.arange(score.shape[0], dtype=np.float64)
    return pos


def _bisect(users, movies, t_users, t_movies, model, depth, sweeps):
    if depth == 0 or len(users) < 2 or len(movies) < 2:
        return users, movies
    lu, lm = _sweep_block(len(users), len(movies), t_users, t_movies, sweeps)
    users = users[lu]
    movies = movies[lm]
    # relabel the block's ratings to the swept order
    u_new = _invert(lu)[t_users]
    m_new = _invert(lm)[t_movies]
    uc = _balanced_split(users, model.workload(np.bincount(u_new, minlength=len(users))))
    mc = _balanced_split(movies, model.workload(np.bincount(m_new, minlength=len(movies))))
    halves = []
    for right in (False, True):
        u_mask = (u_new >= uc) if right else (u_new < uc)
        m_mask = (m_new >= mc) if right else (m_new < mc)
        keep = u_mask & m_mask  # cross-block ratings do not steer deeper levels
        halves.append(
            _bisect(
                users[uc:] if right else users[:uc],
                movies[mc:] if right else movies[:mc],
                u_new[keep] - (uc if right else 0),
                m_new[keep] - (mc if right else 0),
                model,
                depth - 1,
                sweeps,
            )
        )
    return (
        np.concatenate([halves[0][0], halves[1][0]]),
        np.concatenate([halves[0][1], halves[1][1]]),
    )


def reorder(ratings, p, model=None, sweeps=10):
    """Cluster users and movies so block partitions localise traffic.

    Recursive bisection: each block is ordered by alternating
    barycenter sweeps (users sorted by the mean position of the movies
    they rate, then vice versa), cut at the workload midpoint, and the
    halves are recursed until there are enough blocks for ``p`` nodes.
    Returns ``(user_order, movie_order)``; identity when ``p == 1``.
    """
    m, n = ratings.n_users, ratings.n_movies
    if p <= 1:
        return np.arange(m, dtype=np.int64), np.arange(n, dtype=np.int64)
    if model is None:
        model = WorkloadModel(fixed_cost=0.0, per_rating_cost=1.0)
    users, movies, _ = ratings.triplets()
    depth = math.ceil(math.log2(p))
    return _bisect(
        np.arange(m, dtype=np.int64),
        np.arange(n, dtype=np.int64),
        users,
        movies,
        model,
        depth,
        sweeps,
    )


@dataclass
class CommPlan:
    """Who needs which item rows, and how many rows each link carries.

    ``user_dests[u]`` / ``movie_dests[m]`` are the nodes (never the
    owner itself) that must receive the item's freshly sampled row each
    iteration.  ``expected_users[dst, src]`` / ``expected_movies`` count
    the rows dst must receive from src per iteration; the exchange layer
    uses them to detect both missing and excess traffic.
    """

    p: int
    user_dests: list
    movie_dests: list
    expected_users: np.ndarray
    expected_movies: np.ndarray

    def dests(self, side, index):
        return self.user_dests[index] if side == Side.USERS else self.movie_dests[index]

    def expected(self, side, dst, src):
        table = self.expected_users if side == Side.USERS else self.expected_movies
        return int(table[dst, src])


def _dest_counts(p, dest_lists, owner_of_item):
    table = np.zeros((p, p), dtype=np.int64)
    for i, ds in enumerate(dest_lists):
        src = owner_of_item[i]
        for d in ds:
            table[d, src] += 1
    return table


def build_comm_plan(part, ratings):
    """Minimal destination sets implied by the rating incidences.

    A movie's row goes to every node owning at least one of its raters;
    symmetrically for users.  This is the traffic a partition *requires*
    for the item updates themselves, and what the reordering heuristic
    tries to shrink (zero on block-diagonal matrices).
    """
    p = part.p

    def side_dests(n_items, owner_of_item, rater_owner, slicer):
        dests = []
        for i in range(n_items):
            raters, _ = slicer(i)
            need = set(rater_owner[raters].tolist()) if raters.size else set()
            need.discard(int(owner_of_item[i]))
            dests.append(tuple(sorted(need)))
        return dests

    movie_dests = side_dests(
        ratings.n_movies, part.movie_owner, part.user_owner, ratings.movie_slice
    )
    user_dests = side_dests(
        ratings.n_users, part.user_owner, part.movie_owner, ratings.user_slice
    )
    return CommPlan(
        p=p,
        user_dests=user_dests,
        movie_dests=movie_dests,
        expected_users=_dest_counts(p, user_dests, part.user_owner),
        expected_movies=_dest_counts(p, movie_dests, part.movie_owner),
    )


def replication_plan(part):
    """Destination sets that keep full replicas fresh on every node.

    Every updated row goes to all peers.  The sampler runs with this
    plan because its results must be bit-identical for any node count:
    hyperparameter draws condition on *all* rows of a side, running
    prediction averages need every factor fresh, and both would silently
    drift on stale replicas under the minimal plan.  The bandwidth cost
    relative to :func:`build_comm_plan` is the price of exact
    reproducibility; at the scales this engine targets it is small.
    """
    p = part.p

    def everyone_but(owner_of_item):
        return [
            tuple(q for q in range(p) if q != owner_of_item[i])
            for i in range(owner_of_item.shape[0])
        ]

    user_dests = everyone_but(part.user_owner)
    movie_dests = everyone_but(part.movie_owner)
    return CommPlan(
        p=p,
        user_dests=user_dests,
        movie_dests=movie_dests,
        expected_users=_dest_counts(p, user_dests, part.user_owner),
        expected_movies=_dest_counts(p, movie_dests, part.movie_owner),
    )
