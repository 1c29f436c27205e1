"""Bayesian probabilistic matrix factorisation by Gibbs sampling.

Parallel within a node (work-stealing item updates), optionally
distributed across nodes (workload-balanced block partition with
buffered asynchronous row exchange), and bit-reproducible in the seed
no matter how the work is scheduled or spread.
"""

from .comm import Exchanger, InProcessMesh, SendBuffer, connect_tcp, run_cluster_inprocess
from .data import (
    MetricsRecord,
    RatingsMatrix,
    load_model,
    load_ratings,
    save_model,
    save_ratings_mm,
    split_train_test,
    synthetic_ratings,
    write_metrics_json,
    write_metrics_text,
)
from .errors import (
    BadKind,
    BadLength,
    BpmfError,
    ConnectTimeout,
    DataFormatError,
    DegreesOfFreedomTooSmall,
    ExchangeFailure,
    HandshakeMismatch,
    NotPositiveDefinite,
    PhaseAborted,
    TooManyNodes,
    UsageError,
    WireError,
)
from .estimator import BPMF
from .kernels import cholesky, chol_rank1_update, gram_accumulate, tri_solve
from .partition import (
    BlockPartition,
    CommPlan,
    WorkloadModel,
    build_comm_plan,
    replication_plan,
    partition,
    reorder,
)
from .rng import Side, StreamKey, sample_mvn_prec, sample_wishart, stream_for
from .sampler import (
    GaussianParams,
    HyperPrior,
    RunReport,
    init_factors,
    predict_pairs,
    run,
    sample_hyper,
    update_item,
)
from .scheduler import (
    FULL_CHOL,
    RANK_ONE,
    ActivityTracker,
    AlgorithmChoice,
    BatchStats,
    SchedulerPolicy,
    WorkStealingPool,
    benchmark_update_methods,
    parallel_chol,
    run_items,
    select_algorithm,
)
from .wire import Handshake, ItemMsg, decode_item, encode_item, msg_size

__version__ = "0.1.0"
