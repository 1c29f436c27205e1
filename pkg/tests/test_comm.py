import socket
import threading

import numpy as np
import pytest

from bpmf.comm import (
    Exchanger,
    InProcessMesh,
    SendBuffer,
    connect_tcp,
    run_cluster_inprocess,
)
from bpmf.data import RatingsMatrix
from bpmf.errors import (
    BpmfError,
    ConnectTimeout,
    ExchangeFailure,
    HandshakeMismatch,
)
from bpmf.partition import (
    BlockPartition,
    CommPlan,
    WorkloadModel,
    build_comm_plan,
    partition,
)
from bpmf.rng import Side
from bpmf.scheduler import SchedulerPolicy
from bpmf.wire import KIND_USER, Handshake, ItemMsg, encode_item, msg_size

K = 2


def run_nodes(p, fn):
    """Run ``fn(node_id)`` concurrently; re-raise the first failure."""
    results = [None] * p
    errors = [None] * p

    def wrap(q):
        try:
            results[q] = fn(q)
        except BaseException as exc:
            errors[q] = exc

    threads = [threading.Thread(target=wrap, args=(q,)) for q in range(p)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for exc in errors:
        if exc is not None:
            raise exc
    return results


# --- send buffer -----------------------------------------------------


def test_buffer_five_items_capacity_two_is_three_sends():
    buf = SendBuffer(capacity=2)
    batches = [buf.append(1, bytes([i])) for i in range(5)]
    assert [b is not None for b in batches] == [False, True, False, True, False]
    assert batches[1] == b"\x00\x01" and batches[3] == b"\x02\x03"
    assert buf.flush_all() == [(1, b"\x04")]
    assert buf.flushes == 3
    assert buf.flush_all() == []  # drained


def test_buffer_keeps_destinations_separate():
    buf = SendBuffer(capacity=2)
    assert buf.append(3, b"a") is None
    assert buf.append(1, b"b") is None
    assert buf.append(3, b"c") == b"ac"
    assert buf.flush_all() == [(1, b"b")]


def test_buffer_capacity_must_be_positive():
    with pytest.raises(ValueError):
        SendBuffer(capacity=0)


# --- in-process mesh -------------------------------------------------


class Collector:
    def __init__(self, expected_bytes):
        self.data = {}
        self.errors = []
        self._want = expected_bytes
        self._done = threading.Event()
        self._lock = threading.Lock()

    def on_receive(self, src, chunk):
        with self._lock:
            self.data[src] = self.data.get(src, b"") + chunk
            if sum(len(v) for v in self.data.values()) >= self._want:
                self._done.set()

    def on_error(self, exc):
        self.errors.append(exc)
        self._done.set()

    def wait(self, timeout=5.0):
        assert self._done.wait(timeout), "did not receive the expected bytes"
        assert not self.errors, self.errors


def test_mesh_delivers_between_all_pairs():
    p = 3
    mesh = InProcessMesh(p)
    hs = Handshake(1, p, K, 0)
    eps = [mesh.endpoint(q, hs) for q in range(p)]
    collectors = [Collector(expected_bytes=2 * (p - 1)) for _ in range(p)]
    for q in range(p):
        eps[q].start(collectors[q].on_receive, collectors[q].on_error)
    for q in range(p):
        for d in range(p):
            if d != q:
                eps[q].send(d, bytes([q, d]))
    for q in range(p):
        collectors[q].wait()
        assert collectors[q].data == {
            src: bytes([src, q]) for src in range(p) if src != q
        }
    for ep in eps:
        ep.close()


def test_mesh_rejects_mismatched_handshake():
    mesh = InProcessMesh(2)
    ep0 = mesh.endpoint(0, Handshake(1, 2, 8, 0))
    mesh.endpoint(1, Handshake(1, 2, 16, 0))
    with pytest.raises(HandshakeMismatch, match="k"):
        ep0.start(lambda s, d: None, lambda e: None)


def test_mesh_times_out_waiting_for_peers():
    mesh = InProcessMesh(2)
    ep0 = mesh.endpoint(0, Handshake(1, 2, K, 0), timeout=0.2)
    with pytest.raises(ConnectTimeout):
        ep0.start(lambda s, d: None, lambda e: None)


# --- exchanger on the four-user/three-movie cluster -------------------


def toy_ratings():
    return RatingsMatrix(4, 3, [0, 1, 2, 3], [1, 0, 0, 2], [1.0] * 4)


def toy_exchangers(capacity=4, barrier_timeout=5.0):
    r = toy_ratings()
    part = partition(r, 2, WorkloadModel(0.0, 1.0))
    plan = build_comm_plan(part, r)
    mesh = InProcessMesh(2)
    hs = Handshake(1, 2, K, 0)
    eps = [mesh.endpoint(q, hs) for q in range(2)]
    exs = [
        Exchanger(eps[q], part, plan, K, capacity=capacity,
                  barrier_timeout=barrier_timeout)
        for q in range(2)
    ]
    return part, plan, exs


def row_for(side, item, iteration):
    return np.array([side * 1000.0 + item, float(iteration)])


def test_exchanger_toy_conservation_over_ten_iterations():
    part, plan, exs = toy_exchangers()
    owned = {
        (q, Side.MOVIES): list(part.owned_movies(q)) for q in range(2)
    } | {(q, Side.USERS): list(part.owned_users(q)) for q in range(2)}

    def node(q):
        seen = []
        for it in range(10):
            for side in (Side.MOVIES, Side.USERS):
                for item in owned[q, side]:
                    exs[q].submit(side, item, it, row_for(side, item, it))
                got = {}
                exs[q].finish_phase(side, it, got.__setitem__)
                seen.append((it, side, got))
        exs[q].close()
        return seen

    seen0, seen1 = run_nodes(2, node)
    for it in range(10):
        for q, seen in ((0, seen0), (1, seen1)):
            expect_m = {1: row_for(Side.MOVIES, 1, it)} if q == 0 else {
                0: row_for(Side.MOVIES, 0, it)
            }
            expect_u = {2: row_for(Side.USERS, 2, it)} if q == 0 else {
                0: row_for(Side.USERS, 0, it)
            }
            got_m = dict(seen[2 * it][2])
            got_u = dict(seen[2 * it + 1][2])
            assert got_m.keys() == expect_m.keys()
            assert got_u.keys() == expect_u.keys()
            for i, v in expect_m.items():
                assert got_m[i].tobytes() == v.tobytes()
            for i, v in expect_u.items():
                assert got_u[i].tobytes() == v.tobytes()


def test_exchanger_rejects_item_the_sender_does_not_own():
    part, plan, exs = toy_exchangers(barrier_timeout=5.0)
    # user 2 belongs to node 1, yet node 0 claims it
    forged = encode_item(
        ItemMsg(KIND_USER, part.wire_index(Side.USERS, 2), 0, row_for(0, 2, 0))
    )
    exs[0]._transport.send(1, forged)
    with pytest.raises(ExchangeFailure) as err:
        exs[1].finish_phase(Side.USERS, 0, lambda i, v: None)
    assert "does not own" in str(err.value.__cause__)
    for ex in exs:
        ex.close()


def test_exchanger_rejects_more_rows_than_planned():
    part, plan, exs = toy_exchangers()
    legit = encode_item(
        ItemMsg(KIND_USER, part.wire_index(Side.USERS, 0), 0, row_for(0, 0, 0))
    )
    exs[0]._transport.send(1, legit + legit)  # plan says exactly one
    with pytest.raises(ExchangeFailure) as err:
        exs[1].finish_phase(Side.USERS, 0, lambda i, v: None)
    assert "exceeded the plan" in str(err.value.__cause__)
    for ex in exs:
        ex.close()


def test_exchanger_barrier_times_out_when_peer_is_silent():
    part, plan, exs = toy_exchangers(barrier_timeout=0.4)
    with pytest.raises(ExchangeFailure, match="timed out"):
        exs[1].finish_phase(Side.USERS, 0, lambda i, v: None)
    for ex in exs:
        ex.close()


def test_exchanger_batches_submissions_through_the_buffer():
    # five users on node 0, all needed by node 1; capacity 2 -> 3 sends
    part = BlockPartition(
        p=2,
        user_order=np.arange(6),
        movie_order=np.arange(2),
        user_starts=np.array([0, 5, 6]),
        movie_starts=np.array([0, 1, 2]),
    )
    expected_users = np.zeros((2, 2), dtype=np.int64)
    expected_users[1, 0] = 5
    plan = CommPlan(
        p=2,
        user_dests=[(1,)] * 5 + [()],
        movie_dests=[(), ()],
        expected_users=expected_users,
        expected_movies=np.zeros((2, 2), dtype=np.int64),
    )
    mesh = InProcessMesh(2)
    hs = Handshake(1, 2, K, 0)
    eps = [mesh.endpoint(q, hs) for q in range(2)]
    sent = []
    real_send = eps[0].send
    eps[0].send = lambda dst, data: (sent.append((dst, len(data))), real_send(dst, data))
    exs = [Exchanger(eps[q], part, plan, K, capacity=2) for q in range(2)]

    for item in range(5):
        exs[0].submit(Side.USERS, item, 0, row_for(0, item, 0))
    assert len(sent) == 2  # two full batches during the phase
    exs[0].finish_phase(Side.USERS, 0, lambda i, v: None)
    assert len(sent) == 3  # plus one flush at the barrier
    record = msg_size(K)
    assert [n for _, n in sent] == [2 * record, 2 * record, 1 * record]

    got = {}
    exs[1].finish_phase(Side.USERS, 0, got.__setitem__)
    assert sorted(got) == [0, 1, 2, 3, 4]
    for ex in exs:
        ex.close()


# --- TCP transport ----------------------------------------------------


def free_ports(n):
    socks = [socket.socket() for _ in range(n)]
    try:
        for s in socks:
            s.bind(("127.0.0.1", 0))
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


def tcp_addresses(p):
    return [("127.0.0.1", port) for port in free_ports(p)]


def test_tcp_mesh_carries_bytes_both_ways():
    addrs = tcp_addresses(2)
    hs = Handshake(1, 2, K, 7)
    blob = bytes(range(100))
    both_done = threading.Barrier(2)  # nobody closes until both received

    def node(q):
        ep = connect_tcp(q, addrs, hs, timeout=10.0)
        col = Collector(expected_bytes=len(blob))
        ep.start(col.on_receive, col.on_error)
        ep.send(1 - q, blob)
        col.wait()
        both_done.wait(timeout=5.0)
        ep.close()
        return col.data

    data0, data1 = run_nodes(2, node)
    assert data0 == {1: blob}
    assert data1 == {0: blob}


def test_tcp_handshake_mismatch_refuses_the_link():
    addrs = tcp_addresses(2)
    outcomes = [None, None]

    def node(q):
        hs = Handshake(1, 2, K, seed=q)  # seeds disagree
        try:
            ep = connect_tcp(q, addrs, hs, timeout=10.0)
            ep.close()
        except BpmfError as exc:
            outcomes[q] = exc

    run_nodes(2, node)
    assert all(o is not None for o in outcomes)
    assert any(
        isinstance(o, HandshakeMismatch) and "seed" in str(o) for o in outcomes
    )


def test_exchanger_over_tcp_matches_the_plan():
    r = toy_ratings()
    part = partition(r, 2, WorkloadModel(0.0, 1.0))
    plan = build_comm_plan(part, r)
    addrs = tcp_addresses(2)
    hs = Handshake(1, 2, K, 0)
    owned = {
        (q, Side.MOVIES): list(part.owned_movies(q)) for q in range(2)
    } | {(q, Side.USERS): list(part.owned_users(q)) for q in range(2)}

    def node(q):
        ep = connect_tcp(q, addrs, hs, timeout=10.0)
        ex = Exchanger(ep, part, plan, K, capacity=1, barrier_timeout=15.0)
        seen = []
        try:
            for it in range(2):
                for side in (Side.MOVIES, Side.USERS):
                    for item in owned[q, side]:
                        ex.submit(side, item, it, row_for(side, item, it))
                    got = {}
                    ex.finish_phase(side, it, got.__setitem__)
                    seen.append(got)
        finally:
            ex.close()
        return seen

    seen0, seen1 = run_nodes(2, node)
    assert sorted(seen0[0]) == [1] and sorted(seen1[0]) == [0]  # movies, it 0
    assert sorted(seen0[1]) == [2] and sorted(seen1[1]) == [0]  # users, it 0
    assert seen0[2][1].tobytes() == row_for(Side.MOVIES, 1, 1).tobytes()


# --- whole-cluster smoke ----------------------------------------------


def test_cluster_of_two_matches_single_node(planted):
    train, test = planted(30, 20, 4, 0.3, 0.1, seed=9)
    kwargs = dict(
        k=4, alpha=2.0, iterations=6, burn_in=2, seed=9,
        policy=SchedulerPolicy(threads=1),
    )
    solo = run_cluster_inprocess(train, 1, test=test, **kwargs)[0]
    duo = run_cluster_inprocess(train, 2, test=test, **kwargs)
    for rep in (duo[0], duo[1]):
        assert [r.rmse_avg for r in rep.records] == [
            r.rmse_avg for r in solo.records
        ]
        assert rep.u_mean.tobytes() == solo.u_mean.tobytes()
        assert rep.v_mean.tobytes() == solo.v_mean.tobytes()
