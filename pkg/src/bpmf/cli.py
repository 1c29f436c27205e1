"""Batch command line: train a model, report metrics, save factors.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 runtime
failure (numerics, scheduling, networking).  Per-iteration metric lines
go to stdout and are bit-reproducible for a given configuration; timing
chatter goes to stderr.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import sampler
from .comm import Exchanger, connect_tcp
from .config import RunConfig, load_hostfile, parse_clamp
from .data import (
    RatingsMatrix,
    load_ratings,
    save_model,
    split_train_test,
    write_metrics_json,
    write_metrics_text,
)
from .errors import BpmfError, DataFormatError, UsageError
from .partition import WorkloadModel, partition, reorder, replication_plan
from .rng import Side, StreamKey, stream_for
from .scheduler import ActivityTracker
from .wire import PROTOCOL_VERSION, Handshake

__all__ = ["main", "build_parser"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; we map usage to 1
        raise UsageError(message)


def build_parser():
    p = _Parser(
        prog="bpmf",
        description="Bayesian matrix factorisation by Gibbs sampling, "
        "parallel within a node and optionally distributed over TCP.",
    )
    p.add_argument("--train", required=True, help="rating matrix (MatrixMarket or CSV)")
    p.add_argument("--test", help="held-out ratings file; default: random holdout")
    p.add_argument("--holdout", type=float, default=None,
                   help="holdout fraction when no --test file (default 0.2)")
    p.add_argument("--k", type=int, default=32, help="factor rank (default 32)")
    p.add_argument("--alpha", type=float, default=2.0, help="rating precision (default 2.0)")
    p.add_argument("--init-scale", type=float, default=1.0, dest="init_scale",
                   help="scale on the standard-normal starting factors (default 1.0; "
                        "small values mix faster at high alpha)")
    p.add_argument("--iters", type=int, default=100, dest="iterations",
                   help="total Gibbs iterations (default 100)")
    p.add_argument("--burnin", type=int, default=20, dest="burn_in",
                   help="iterations discarded before averaging (default 20)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker threads per node")
    p.add_argument("--threshold", type=int, default=1000, dest="rank_one_threshold",
                   help="ratings per item below which the rank-one path is chosen")
    p.add_argument("--parallel-chunk", type=int, default=256, dest="parallel_chunk",
                   help="ratings per stealable chunk for heavy items")
    p.add_argument("--buffer-capacity", type=int, default=1024, dest="buffer_capacity",
                   help="item messages buffered per destination before a send")
    p.add_argument("--p", "--nodes", type=int, default=1, dest="p", help="cluster size")
    p.add_argument("--node-id", type=int, default=0, dest="node_id", help="this node's rank")
    p.add_argument("--hostfile", help="host:port per line, line i = node i")
    p.add_argument("--no-reorder", action="store_false", dest="reorder",
                   help="skip traffic-reducing row/column reordering")
    p.add_argument("--clamp", default=None, help="clamp predictions to lo:hi (default off)")
    p.add_argument("--metrics", dest="metrics_out",
                   help="write per-iteration metrics here (plus a .json sidecar)")
    p.add_argument("--model-out", dest="model_out",
                   help="prefix for posterior-mean factors and metadata")
    return p


def _config_from_args(args):
    if args.test is not None and args.holdout is not None:
        raise UsageError("--test and --holdout are mutually exclusive")
    cfg = RunConfig(
        train=args.train,
        test=args.test,
        holdout=0.2 if args.holdout is None else args.holdout,
        k=args.k,
        alpha=args.alpha,
        init_scale=args.init_scale,
        iterations=args.iterations,
        burn_in=args.burn_in,
        seed=args.seed,
        threads=args.threads,
        rank_one_threshold=args.rank_one_threshold,
        parallel_chunk=args.parallel_chunk,
        buffer_capacity=args.buffer_capacity,
        p=args.p,
        node_id=args.node_id,
        hostfile=args.hostfile,
        reorder=args.reorder,
        clamp=parse_clamp(args.clamp),
        metrics_out=args.metrics_out,
        model_out=args.model_out,
    )
    cfg.validate()
    return cfg


def _load_inputs(cfg):
    train = load_ratings(cfg.train)
    if cfg.test is not None:
        held = load_ratings(cfg.test)
        if held.n_users > train.n_users or held.n_movies > train.n_movies:
            raise DataFormatError(
                f"test set indexes a {held.n_users}x{held.n_movies} matrix but "
                f"training data is {train.n_users}x{train.n_movies}"
            )
        test = held.triplets()
        return train, test
    if cfg.holdout == 0:
        return train, None
    gen = stream_for(StreamKey(cfg.seed, 2, Side.NOISE, 0))
    (tr_u, tr_m, tr_v), test = split_train_test(*train.triplets(), cfg.holdout, gen)
    train_part = RatingsMatrix(train.n_users, train.n_movies, tr_u, tr_m, tr_v)
    return train_part, test


def _metrics_sidecar(path):
    return path + ".json" if not path.endswith(".txt") else path[: -len(".txt")] + ".json"


def _run(cfg):
    train, test = _load_inputs(cfg)
    policy = cfg.policy()
    tracker = ActivityTracker()
    progress = lambda rec: print(
        f"iter={rec.iteration} rmse_sample={repr(float(rec.rmse_sample))} "
        f"rmse_avg={repr(float(rec.rmse_avg))}",
        flush=True,
    )
    run_kwargs = dict(
        k=cfg.k, alpha=cfg.alpha, iterations=cfg.iterations, burn_in=cfg.burn_in,
        seed=cfg.seed, test=test, policy=policy, clamp=cfg.clamp, tracker=tracker,
        progress=progress, init_scale=cfg.init_scale,
    )

    if cfg.p == 1:
        report = sampler.run(train, **run_kwargs)
    else:
        addresses = load_hostfile(cfg.hostfile, cfg.p)
        model = WorkloadModel.for_rank(cfg.k)
        orders = reorder(train, cfg.p, model) if cfg.reorder else (None, None)
        part = partition(train, cfg.p, model, *orders)
        plan = replication_plan(part)
        handshake = Handshake(PROTOCOL_VERSION, cfg.p, cfg.k, cfg.seed)
        endpoint = connect_tcp(cfg.node_id, addresses, handshake)
        exchanger = Exchanger(
            endpoint, part, plan, cfg.k, capacity=cfg.buffer_capacity, tracker=tracker
        )
        try:
            report = sampler.run(
                train, node_id=cfg.node_id, part=part, exchanger=exchanger, **run_kwargs
            )
        finally:
            exchanger.close()

    if cfg.metrics_out:
        write_metrics_text(cfg.metrics_out, report.records)
        write_metrics_json(
            _metrics_sidecar(cfg.metrics_out),
            report.records,
            config={
                "train": cfg.train, "k": cfg.k, "alpha": cfg.alpha,
                "iterations": cfg.iterations, "burn_in": cfg.burn_in,
                "seed": cfg.seed, "threads": cfg.threads, "p": cfg.p,
                "node_id": cfg.node_id, "buffer_capacity": cfg.buffer_capacity,
            },
        )
    if cfg.model_out:
        save_model(
            cfg.model_out,
            report.u_mean,
            report.v_mean,
            meta={
                "format": "bpmf-model/1",
                "n_users": report.n_users, "n_movies": report.n_movies,
                "k": report.k, "alpha": report.alpha, "seed": report.seed,
                "iterations": report.iterations, "burn_in": report.burn_in,
                "samples_in_mean": report.sampled,
                "clamp": list(report.clamp) if report.clamp else None,
                "p": report.p, "node_id": report.node_id,
            },
        )
    wall = sum(r.wall_seconds for r in report.records)
    ups = np.mean([r.updates_per_second for r in report.records]) if report.records else 0.0
    print(
        f"node {cfg.node_id}/{cfg.p}: {cfg.iterations} iterations in {wall:.2f}s "
        f"({ups:.0f} updates/s), final rmse_avg={report.final_rmse:.6f}",
        file=sys.stderr,
    )
    return 0


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = _config_from_args(args)
        return _run(cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except BpmfError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        return 3
    except Exception as e:  # anything else is still a runtime failure
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
