"""Run configuration: validation and the hostfile format.

A distributed run is described by a node count ``p``, this node's rank,
and a hostfile with one ``host:port`` line per node (line i addresses
node i).  All validation failures raise :class:`UsageError`, which the
CLI maps to exit code 1.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import UsageError
from .scheduler import SchedulerPolicy

__all__ = ["RunConfig", "parse_clamp", "load_hostfile"]


@dataclass
class RunConfig:
    train: str
    test: str | None = None
    holdout: float = 0.2
    k: int = 32
    alpha: float = 2.0
    init_scale: float = 1.0
    iterations: int = 100
    burn_in: int = 20
    seed: int = 0
    threads: int = 1
    rank_one_threshold: int = 1000
    parallel_chunk: int = 256
    buffer_capacity: int = 1024
    p: int = 1
    node_id: int = 0
    hostfile: str | None = None
    reorder: bool = True
    clamp: tuple | None = None
    metrics_out: str | None = None
    model_out: str | None = None

    def validate(self):
        checks = [
            (self.k >= 1, "k must be >= 1"),
            (self.alpha > 0, "alpha must be positive"),
            (self.init_scale > 0, "init scale must be positive"),
            (self.iterations >= 1, "iterations must be >= 1"),
            (self.burn_in >= 0, "burn-in must be >= 0"),
            (self.burn_in <= self.iterations,
             "burn-in cannot exceed the iteration count"),
            (0 <= self.seed < 2**64, "seed must fit in 64 bits"),
            (self.threads >= 1, "threads must be >= 1"),
            (self.rank_one_threshold >= 0, "rank-one threshold must be >= 0"),
            (self.parallel_chunk >= 1, "parallel chunk must be >= 1"),
            (self.buffer_capacity >= 1, "buffer capacity must be >= 1"),
            (self.p >= 1, "node count must be >= 1"),
            (0 <= self.node_id < self.p, "node id must be in [0, p)"),
            (0 <= self.holdout < 1, "holdout fraction must be in [0, 1)"),
        ]
        for ok, message in checks:
            if not ok:
                raise UsageError(message)
        if self.clamp is not None and not self.clamp[0] < self.clamp[1]:
            raise UsageError("clamp must satisfy lo < hi")
        if self.p > 1 and not self.hostfile:
            raise UsageError("distributed runs (p > 1) require --hostfile")

    def policy(self) -> SchedulerPolicy:
        return SchedulerPolicy(
            threads=self.threads,
            rank_one_threshold=self.rank_one_threshold,
            parallel_chunk=self.parallel_chunk,
        )


def parse_clamp(text):
    """``"lo:hi"`` -> (lo, hi); ``"off"`` or empty -> None."""
    if text is None or text in ("", "off"):
        return None
    parts = text.split(":")
    if len(parts) != 2:
        raise UsageError(f"clamp must look like lo:hi, got {text!r}")
    try:
        lo, hi = float(parts[0]), float(parts[1])
    except ValueError:
        raise UsageError(f"clamp bounds must be numbers, got {text!r}") from None
    if not lo < hi:
        raise UsageError(f"clamp must satisfy lo < hi, got {text!r}")
    return (lo, hi)


def load_hostfile(path, p):
    """Addresses of nodes 0..p-1: one ``host:port`` per line."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [line.strip() for line in f]
    except OSError as e:
        raise UsageError(f"cannot read hostfile {path}: {e}") from None
    lines = [line for line in lines if line]
    if len(lines) < p:
        raise UsageError(f"hostfile {path} has {len(lines)} entries, need {p}")
    addresses = []
    for i, line in enumerate(lines[:p]):
        host, sep, port = line.rpartition(":")
        if not sep or not host:
            raise UsageError(f"hostfile line {i + 1}: expected host:port, got {line!r}")
        try:
            port = int(port)
        except ValueError:
            raise UsageError(f"hostfile line {i + 1}: bad port in {line!r}") from None
        if not 0 < port < 65536:
            raise UsageError(f"hostfile line {i + 1}: port out of range in {line!r}")
        addresses.append((host, port))
    return addresses
