"""Shared-memory scheduling of per-item updates.

A fixed pool of worker threads runs one batch of item tasks per phase.
Each worker owns a deque: it pushes and pops its own work LIFO and
steals FIFO from a random victim when idle, so a few very heavy items
cannot serialise a phase.  Heavy items cooperate by expanding into
chunk subtasks plus a finisher; the chunks are ordinary stealable units
and the last one to finish runs the finisher inline.

Failures abort the whole batch without deadlocking: remaining tasks are
drained as no-ops and the first error is re-raised on the caller,
naming the failing item.

Which execution strategy an item gets is a pure function of its rating
count and the policy; the numeric result never depends on the strategy,
only the shape of the schedule does.
"""

from __future__ import annotations

import math
import random
import threading
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import PhaseAborted
from . import kernels

__all__ = [
    "AlgorithmChoice",
    "RANK_ONE",
    "FULL_CHOL",
    "parallel_chol",
    "SchedulerPolicy",
    "select_algorithm",
    "ActivityTracker",
    "BatchStats",
    "WorkStealingPool",
    "run_items",
    "benchmark_update_methods",
]


@dataclass(frozen=True)
class AlgorithmChoice:
    """How one item update is executed (never what it computes)."""

    method: str
    chunks: int = 1

    def __post_init__(self):
        if self.method not in ("rank_one", "full_chol", "parallel_chol"):
            raise ValueError(f"unknown update method {self.method!r}")
        if self.chunks < 1:
            raise ValueError("chunks must be >= 1")


RANK_ONE = AlgorithmChoice("rank_one")
FULL_CHOL = AlgorithmChoice("full_chol")


def parallel_chol(chunks):
    return AlgorithmChoice("parallel_chol", chunks)


@dataclass(frozen=True)
class SchedulerPolicy:
    """Knobs for the per-item strategy decision and the pool."""

    threads: int = 1
    rank_one_threshold: int = 1000  # ratings below this -> rank-one path
    parallel_chunk: int = 256       # ratings per stealable chunk
    force_method: str | None = None

    def __post_init__(self):
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.rank_one_threshold < 0 or self.parallel_chunk < 1:
            raise ValueError("bad policy thresholds")


def select_algorithm(nnz, policy: SchedulerPolicy) -> AlgorithmChoice:
    """Strategy for an item with ``nnz`` ratings.

    Items below the threshold take the rank-one path; heavier items are
    split into ceil(nnz / parallel_chunk) parallel chunks.  The full
    refactorisation path is only ever chosen by forcing it.
    """
    if policy.force_method == "rank_one":
        return RANK_ONE
    if policy.force_method == "full_chol":
        return FULL_CHOL
    if policy.force_method == "parallel_chol" or nnz >= policy.rank_one_threshold:
        return parallel_chol(max(1, math.ceil(nnz / policy.parallel_chunk)))
    return RANK_ONE


class ActivityTracker:
    """Wall-clock split into compute-only, comm-only and overlapped time.

    Threads bracket their activity with :meth:`computing` /
    :meth:`communicating`; each state transition charges the elapsed
    interval to whichever bucket matches the counters, in O(1).
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._n_compute = 0
        self._n_comm = 0
        self._mark = time.perf_counter()
        self.compute_seconds = 0.0
        self.comm_seconds = 0.0
        self.overlap_seconds = 0.0

    def _charge(self):
        now = time.perf_counter()
        dt = now - self._mark
        self._mark = now
        if self._n_compute and self._n_comm:
            self.overlap_seconds += dt
        elif self._n_compute:
            self.compute_seconds += dt
        elif self._n_comm:
            self.comm_seconds += dt

    def _shift(self, compute, comm):
        with self._lock:
            self._charge()
            self._n_compute += compute
            self._n_comm += comm

    class _Scope:
        def __init__(self, tracker, compute, comm):
            self._tracker, self._compute, self._comm = tracker, compute, comm

        def __enter__(self):
            self._tracker._shift(self._compute, self._comm)

        def __exit__(self, *exc):
            self._tracker._shift(-self._compute, -self._comm)

    def computing(self):
        return self._Scope(self, 1, 0)

    def communicating(self):
        return self._Scope(self, 0, 1)

    def snapshot(self):
        """(compute_seconds, comm_seconds, overlap_seconds) so far."""
        with self._lock:
            self._charge()
            return self.compute_seconds, self.comm_seconds, self.overlap_seconds


@dataclass
class BatchStats:
    """Observed execution of one batch."""

    wall_seconds: float
    busy_seconds: list
    steals: list
    executed: int

    def utilization(self):
        if self.wall_seconds <= 0 or not self.busy_seconds:
            return 1.0
        return sum(self.busy_seconds) / (len(self.busy_seconds) * self.wall_seconds)


class WorkStealingPool:
    """Persistent pool of workers with per-worker stealing deques."""

    def __init__(self, threads=1):
        if threads < 1:
            raise ValueError("threads must be >= 1")
        self.threads = threads
        self._deques = [deque() for _ in range(threads)]
        self._cv = threading.Condition()
        self._outstanding = 0
        self._active_batch = False
        self._failure = None  # (item, exception)
        self._shutdown = False
        self._tracker = None
        self._busy = [0.0] * threads
        self._steals = [0] * threads
        self._executed = 0
        # victim selection only; numeric draws never come from here
        self._pick = [random.Random(0x9E3779B9 ^ wid) for wid in range(threads)]
        self._workers = [
            threading.Thread(target=self._worker, args=(wid,), daemon=True, name=f"pool-{wid}")
            for wid in range(threads)
        ]
        for t in self._workers:
            t.start()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        with self._cv:
            self._shutdown = True
            self._cv.notify_all()
        for t in self._workers:
            t.join()

    def run_batch(self, units, tracker=None):
        """Run ``units`` (pairs of item index and callable) to completion.

        A callable may return ``(parts, finish)`` to expand into
        stealable chunk subtasks; ``finish`` runs inline after the last
        part.  Returns :class:`BatchStats`; raises :class:`PhaseAborted`
        carrying the first failing item.
        """
        units = list(units)
        start = time.perf_counter()
        with self._cv:
            if self._active_batch:
                raise RuntimeError("pool already running a batch")
            self._active_batch = True
            self._failure = None
            self._tracker = tracker
            self._outstanding = len(units)
            self._busy = [0.0] * self.threads
            self._steals = [0] * self.threads
            self._executed = 0
            for i, unit in enumerate(units):
                self._deques[i % self.threads].append(unit)
            self._cv.notify_all()
        with self._cv:
            self._cv.wait_for(lambda: self._outstanding == 0)
            self._active_batch = False
            self._tracker = None
            failure = self._failure
            stats = BatchStats(
                wall_seconds=time.perf_counter() - start,
                busy_seconds=list(self._busy),
                steals=list(self._steals),
                executed=self._executed,
            )
        if failure is not None:
            item, exc = failure
            raise PhaseAborted(item, exc) from exc
        return stats

    # worker side ---------------------------------------------------

    def _take(self, wid):
        try:
            return self._deques[wid].pop()  # own work: newest first
        except IndexError:
            pass
        victims = [v for v in range(self.threads) if v != wid]
        self._pick[wid].shuffle(victims)
        for v in victims:
            try:
                unit = self._deques[v].popleft()  # steal oldest
            except IndexError:
                continue
            self._steals[wid] += 1
            return unit
        return None

    def _worker(self, wid):
        while True:
            unit = self._take(wid)
            if unit is None:
                with self._cv:
                    if self._shutdown:
                        return
                    # timeout guards the push-vs-sleep race
                    self._cv.wait(0.02)
                continue
            self._run_unit(wid, unit)

    def _run_unit(self, wid, unit):
        item, fn = unit
        expansion = None
        t0 = time.perf_counter()
        tracker = self._tracker
        try:
            if self._failure is None:  # after a failure, drain as no-ops
                if tracker is not None:
                    with tracker.computing():
                        expansion = fn()
                else:
                    expansion = fn()
        except BaseException as exc:
            with self._cv:
                if self._failure is None:
                    self._failure = (item, exc)
        self._busy[wid] += time.perf_counter() - t0
        if expansion is not None:
            parts, finish = expansion
            gate = threading.Lock()
            left = [len(parts)]

            def chunk_unit(part):
                def run():
                    part()
                    with gate:
                        left[0] -= 1
                        last = left[0] == 0
                    if last:
                        finish()
                return run

            with self._cv:
                self._outstanding += len(parts)
                for part in parts:
                    self._deques[wid].append((item, chunk_unit(part)))
                self._cv.notify_all()
        with self._cv:
            self._executed += 1
            self._outstanding -= 1
            if self._outstanding == 0:
                self._cv.notify_all()


def run_items(pool, items, task, policy, tracker=None):
    """Schedule one phase of item updates.

    ``items`` yields ``(index, nnz)`` pairs; ``task(index, choice)``
    must either perform the update (returning None) or, for chunked
    choices, return ``(parts, finish)`` without doing the work yet.
    """
    units = []
    for index, nnz in items:
        choice = select_algorithm(nnz, policy)
        units.append((index, _bind_task(task, index, choice)))
    return pool.run_batch(units, tracker)


def _bind_task(task, index, choice):
    def run():
        return task(index, choice)
    return run


def benchmark_update_methods(k, nnz_values, threads=1, repetitions=5, seed=123):
    """Median seconds per item update for each execution method.

    Builds synthetic items of the requested sizes and times the three
    strategies on identical inputs: maintaining the factor by rank-one
    updates, recomputing Gram + fresh factorisation serially, and the
    chunked Gram fanned out across the pool.  Returns a list of
    ``{"method", "nnz", "seconds"}`` rows.
    """
    kernels.warmup(k)
    gen = np.random.Generator(np.random.Philox(key=seed))
    lam = np.eye(k)
    lam_chol = np.linalg.cholesky(lam)
    lam_mu = np.zeros(k)
    alpha = 2.0
    z = gen.standard_normal(k)
    rows_all = gen.standard_normal((max(nnz_values), k))
    vals_all = gen.standard_normal(max(nnz_values))
    out = []
    with WorkStealingPool(threads) as pool:
        for nnz in nnz_values:
            rows = np.ascontiguousarray(rows_all[:nnz])
            vals = np.ascontiguousarray(vals_all[:nnz])
            chunk = max(1, math.ceil(nnz / max(1, math.ceil(nnz / 256))))
            bounds = kernels.chunk_bounds(nnz, chunk)

            def run_parallel():
                slots = [None] * len(bounds)

                def part(c, lo, hi):
                    def go():
                        slots[c] = kernels._gram_chunk(rows, vals, lo, hi)
                    return go

                def finish():
                    g, s = kernels.combine_gram_partials(slots)
                    kernels._update_draw(lam, lam_mu, alpha, g, s, z)

                parts = [part(c, lo, hi) for c, (lo, hi) in enumerate(bounds)]
                pool.run_batch([(0, lambda: (parts, finish))])

            timers = {
                "rank_one": lambda: kernels._method_rank_one(lam_chol, lam_mu, rows, vals, alpha, z),
                "full_chol": lambda: kernels._method_full_chol(lam, lam_mu, rows, vals, alpha, z),
                "parallel_chol": run_parallel,
            }
            for method, fn in timers.items():
                fn()  # warm path once outside the timer
                samples = []
                for _ in range(repetitions):
                    t0 = time.perf_counter()
                    fn()
                    samples.append(time.perf_counter() - t0)
                samples.sort()
                out.append(
                    {"method": method, "nnz": int(nnz), "seconds": samples[len(samples) // 2]}
                )
    return out
