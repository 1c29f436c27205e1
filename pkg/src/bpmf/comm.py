"""Inter-node item exchange: transports, buffering, and barriers.

Freshly sampled rows are submitted during a phase, packed into
per-destination buffers, and shipped in batches; production never
blocks on the network (TCP writes happen on a dedicated sender
thread).  Receivers carve fixed-size records out of the byte stream as
they arrive and park them keyed by (side, iteration); nothing touches
the factor replicas until the owner of those replicas reaches the
matching phase barrier and applies the batch itself.  That deferral is
what keeps replicas readable while a faster peer races one phase
ahead.

The phase barrier waits until exactly the planned number of rows has
arrived from each peer; missing traffic times out and excess or
malformed traffic fails immediately, both as :class:`ExchangeFailure`.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time

from .errors import ConnectTimeout, ExchangeFailure
from .rng import Side
from .wire import (
    HANDSHAKE_SIZE,
    KIND_MOVIE,
    KIND_USER,
    Handshake,
    ItemMsg,
    decode_item,
    encode_item,
    msg_size,
)

__all__ = [
    "SendBuffer",
    "InProcessMesh",
    "connect_tcp",
    "Exchanger",
    "run_cluster_inprocess",
]

_SIDE_KIND = {Side.USERS: KIND_USER, Side.MOVIES: KIND_MOVIE}
_KIND_SIDE = {KIND_USER: Side.USERS, KIND_MOVIE: Side.MOVIES}


class SendBuffer:
    """Per-destination batching of encoded messages.

    ``append`` returns the batch to transmit once ``capacity`` messages
    for that destination have accumulated; ``flush_all`` drains the
    rest.  ``flushes`` counts transmissions handed out.
    """

    def __init__(self, capacity=1024):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.flushes = 0
        self._bufs = {}

    def append(self, dst, payload):
        buf = self._bufs.setdefault(dst, [])
        buf.append(payload)
        if len(buf) >= self.capacity:
            return self._drain(dst)
        return None

    def _drain(self, dst):
        buf = self._bufs.get(dst)
        if not buf:
            return None
        self.flushes += 1
        out = b"".join(buf)
        buf.clear()
        return out

    def flush_all(self):
        out = []
        for dst in sorted(self._bufs):
            data = self._drain(dst)
            if data:
                out.append((dst, data))
        return out


class InProcessMesh:
    """Loopback transport: ``p`` endpoints joined by queues.

    Endpoints still perform the handshake barrier so configuration
    mismatches fail the same way they would over TCP.
    """

    def __init__(self, p):
        self.p = p
        self._queues = [queue.Queue() for _ in range(p)]
        self._handshakes = {}
        self._cv = threading.Condition()

    def endpoint(self, node_id, handshake, timeout=10.0):
        with self._cv:
            self._handshakes[node_id] = handshake
            self._cv.notify_all()
        return _InProcEndpoint(self, node_id, handshake, timeout)

    def _await_peers(self, node_id, handshake, timeout):
        with self._cv:
            if not self._cv.wait_for(lambda: len(self._handshakes) == self.p, timeout):
                raise ConnectTimeout(
                    f"node {node_id}: only {len(self._handshakes)}/{self.p} nodes joined"
                )
            for other in sorted(self._handshakes):
                if other != node_id:
                    handshake.check(self._handshakes[other])


class _InProcEndpoint:
    def __init__(self, mesh, node_id, handshake, timeout):
        self._mesh = mesh
        self.node_id = node_id
        self.p = mesh.p
        self._handshake = handshake
        self._timeout = timeout
        self._thread = None

    def start(self, on_receive, on_error):
        self._mesh._await_peers(self.node_id, self._handshake, self._timeout)

        def pump():
            q = self._mesh._queues[self.node_id]
            while True:
                src, data = q.get()
                if src < 0:
                    return
                try:
                    on_receive(src, data)
                except BaseException as exc:  # decode/protocol failures
                    on_error(exc)

        self._thread = threading.Thread(target=pump, daemon=True, name=f"inproc-{self.node_id}")
        self._thread.start()

    def send(self, dst, data):
        self._mesh._queues[dst].put((self.node_id, data))

    def close(self):
        if self._thread is not None:
            self._mesh._queues[self.node_id].put((-1, b""))
            self._thread.join()
            self._thread = None


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ExchangeFailure("peer closed connection during setup")
        buf += chunk
    return bytes(buf)


def connect_tcp(node_id, addresses, handshake, timeout=30.0):
    """Join a TCP mesh; returns an endpoint once every link is up.

    ``addresses`` lists (host, port) per node, in node order.  Each node
    initiates connections to lower-numbered peers and accepts from
    higher-numbered ones.  Every link opens with the 16-byte handshake
    (initiator first, then its 4-byte node id; acceptor replies with its
    own handshake); any field disagreement raises before data flows.
    """
    p = len(addresses)
    deadline = time.monotonic() + timeout
    listener = socket.create_server(
        ("0.0.0.0", addresses[node_id][1]), reuse_port=False, backlog=p
    )
    listener.settimeout(1.0)
    socks = {}
    failures = []

    def acceptor():
        want = p - 1 - node_id
        while want and time.monotonic() < deadline:
            try:
                sock, _ = listener.accept()
            except socket.timeout:
                continue
            try:
                theirs = Handshake.decode(_recv_exact(sock, HANDSHAKE_SIZE))
                (peer,) = struct.unpack("<I", _recv_exact(sock, 4))
                handshake.check(theirs)
                sock.sendall(handshake.encode())
            except BaseException as exc:
                failures.append(exc)
                sock.close()
                return
            socks[peer] = sock
            want -= 1
        if want:
            failures.append(ConnectTimeout(f"node {node_id}: {want} peers never connected"))

    accept_thread = threading.Thread(target=acceptor, daemon=True)
    accept_thread.start()
    try:
        for peer in range(node_id):
            sock = None
            while sock is None:
                if time.monotonic() >= deadline:
                    raise ConnectTimeout(f"node {node_id}: cannot reach node {peer}")
                try:
                    sock = socket.create_connection(addresses[peer], timeout=1.0)
                except OSError:
                    time.sleep(0.05)
            sock.sendall(handshake.encode() + struct.pack("<I", node_id))
            theirs = Handshake.decode(_recv_exact(sock, HANDSHAKE_SIZE))
            handshake.check(theirs)
            socks[peer] = sock
        accept_thread.join(timeout=max(0.0, deadline - time.monotonic()) + 2.0)
        if failures:
            raise failures[0]
        if len(socks) != p - 1:
            raise ConnectTimeout(f"node {node_id}: mesh incomplete ({len(socks)}/{p - 1})")
    except BaseException:
        for sock in socks.values():
            sock.close()
        listener.close()
        raise
    listener.close()
    for sock in socks.values():
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return _TcpEndpoint(node_id, p, socks)


class _TcpEndpoint:
    """Mesh endpoint with a dedicated sender thread per node.

    ``send`` only enqueues, so the sampling threads never block on
    socket backpressure; receiver threads deliver raw chunks upward.
    """

    def __init__(self, node_id, p, socks):
        self.node_id = node_id
        self.p = p
        self._socks = socks
        self._sendq = queue.SimpleQueue()
        self._threads = []
        self._closing = threading.Event()

    def start(self, on_receive, on_error):
        def sender():
            while True:
                item = self._sendq.get()
                if item is None:
                    return
                dst, data = item
                try:
                    self._socks[dst].sendall(data)
                except OSError as exc:
                    if not self._closing.is_set():
                        on_error(ExchangeFailure(f"send to node {dst} failed: {exc}"))
                        return

        def receiver(src, sock):
            while True:
                try:
                    chunk = sock.recv(1 << 16)
                except OSError:
                    return
                if not chunk:
                    if not self._closing.is_set():
                        on_error(ExchangeFailure(f"node {src} closed the connection"))
                    return
                try:
                    on_receive(src, chunk)
                except BaseException as exc:
                    on_error(exc)
                    return

        self._threads = [threading.Thread(target=sender, daemon=True, name=f"tcp-send-{self.node_id}")]
        for src, sock in self._socks.items():
            self._threads.append(
                threading.Thread(target=receiver, args=(src, sock), daemon=True,
                                 name=f"tcp-recv-{self.node_id}-{src}")
            )
        for t in self._threads:
            t.start()

    def send(self, dst, data):
        self._sendq.put((dst, data))

    def close(self):
        self._closing.set()
        self._sendq.put(None)
        for sock in self._socks.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        for t in self._threads:
            t.join(timeout=5.0)


class Exchanger:
    """Protocol layer: plans, counting, deferred application.

    Rows submitted during a phase are encoded once, buffered per
    destination, and shipped asynchronously.  Arriving rows are parked;
    :meth:`finish_phase` flushes the buffers, waits until the plan's
    expected count from every peer has arrived, and only then applies
    the received rows through the caller's ``apply`` function.
    """

    def __init__(self, transport, part, plan, k, capacity=1024, tracker=None,
                 barrier_timeout=120.0):
        self.node = transport.node_id
        self.p = transport.p
        self._transport = transport
        self._part = part
        self._plan = plan
        self._k = k
        self._record = msg_size(k)
        self._timeout = barrier_timeout
        self._tracker = tracker
        self._send_lock = threading.Lock()
        self._buffer = SendBuffer(capacity)
        self._cv = threading.Condition()
        self._counts = {}   # (side, iteration) -> per-src arrival counts
        self._pending = {}  # (side, iteration) -> [(orig_index, values), ...]
        self._tails = {}    # src -> partial record bytes
        self._error = None
        transport.start(self._on_receive, self._on_error)

    def _comm(self):
        if self._tracker is None:
            from contextlib import nullcontext
            return nullcontext()
        return self._tracker.communicating()

    def submit(self, side, orig_index, iteration, values):
        """Queue one freshly sampled row for everyone who needs it."""
        dests = self._plan.dests(side, orig_index)
        if not dests:
            return
        msg = encode_item(
            ItemMsg(_SIDE_KIND[side], self._part.wire_index(side, orig_index),
                    iteration, values)
        )
        with self._comm():
            sends = []
            with self._send_lock:
                for dst in dests:
                    out = self._buffer.append(dst, msg)
                    if out:
                        sends.append((dst, out))
            for dst, data in sends:
                self._transport.send(dst, data)

    def finish_phase(self, side, iteration, apply):
        """Flush, wait for the planned inbound rows, apply them."""
        with self._comm():
            with self._send_lock:
                sends = self._buffer.flush_all()
            for dst, data in sends:
                self._transport.send(dst, data)
        expected = [self._plan.expected(side, self.node, src) for src in range(self.p)]
        key = (side, iteration)

        def satisfied():
            if self._error is not None:
                return True
            have = self._counts.get(key)
            return all(
                (0 if have is None else have[src]) >= expected[src]
                for src in range(self.p)
            )

        with self._cv:
            if not self._cv.wait_for(satisfied, self._timeout):
                have = self._counts.get(key, [0] * self.p)
                raise ExchangeFailure(
                    f"node {self.node}: {side.name} barrier at iteration {iteration} "
                    f"timed out (have {list(have)}, expected {expected})"
                )
            if self._error is not None:
                raise ExchangeFailure(f"node {self.node}: exchange failed") from self._error
            rows = self._pending.pop(key, [])
            self._counts.pop(key, None)
        with self._comm():
            for orig, values in rows:
                apply(orig, values)

    def close(self):
        self._transport.close()

    # transport-thread side -----------------------------------------

    def _on_receive(self, src, chunk):
        with self._comm():
            tail = self._tails.setdefault(src, bytearray())
            tail += chunk
            while len(tail) >= self._record:
                msg = decode_item(bytes(tail[: self._record]), self._k)
                del tail[: self._record]
                self._admit(src, msg)

    def _admit(self, src, msg):
        side = _KIND_SIDE[msg.kind]
        orig = self._part.from_wire(side, msg.index)
        if self._part.owner(side, orig) != src:
            raise ExchangeFailure(
                f"node {src} sent {side.name} item {orig} it does not own"
            )
        key = (side, msg.iteration)
        limit = self._plan.expected(side, self.node, src)
        with self._cv:
            counts = self._counts.setdefault(key, [0] * self.p)
            counts[src] += 1
            if counts[src] > limit:
                raise ExchangeFailure(
                    f"node {src} exceeded the plan for {side.name} "
                    f"iteration {msg.iteration}: {counts[src]} > {limit}"
                )
            self._pending.setdefault(key, []).append((orig, msg.values))
            self._cv.notify_all()

    def _on_error(self, exc):
        with self._cv:
            if self._error is None:
                self._error = exc
            self._cv.notify_all()


def run_cluster_inprocess(ratings, p, *, test=None, capacity=1024, reorder_items=True,
                          model=None, **run_kwargs):
    """Run a ``p``-node cluster inside one process (one thread per node).

    Builds the shared partition and communication plan, wires the nodes
    through an in-process mesh, and returns the per-node reports in
    node order.  ``run_kwargs`` are forwarded to :func:`bpmf.sampler.run`.
    """
    from . import sampler
    from .partition import WorkloadModel, partition, reorder, replication_plan
    from .scheduler import ActivityTracker, SchedulerPolicy, WorkStealingPool
    from .wire import PROTOCOL_VERSION

    k = run_kwargs.get("k", 32)
    seed = run_kwargs.get("seed", 0)
    policy = run_kwargs.get("policy") or SchedulerPolicy()
    run_kwargs["policy"] = policy
    model = model or WorkloadModel.for_rank(k)
    orders = reorder(ratings, p, model) if reorder_items else (None, None)
    part = partition(ratings, p, model, *orders)
    plan = replication_plan(part)
    mesh = InProcessMesh(p)
    handshake = Handshake(PROTOCOL_VERSION, p, k, seed)

    reports = [None] * p
    errors = [None] * p

    def node(q):
        try:
            tracker = ActivityTracker()
            endpoint = mesh.endpoint(q, handshake)
            exchanger = Exchanger(endpoint, part, plan, k, capacity=capacity,
                                  tracker=tracker)
            try:
                with WorkStealingPool(policy.threads) as pool:
                    reports[q] = sampler.run(
                        ratings, test=test, node_id=q, part=part,
                        exchanger=exchanger, pool=pool, tracker=tracker,
                        **run_kwargs,
                    )
            finally:
                exchanger.close()
        except BaseException as exc:
            errors[q] = exc

    threads = [threading.Thread(target=node, args=(q,), name=f"node-{q}") for q in range(p)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for exc in errors:
        if exc is not None:
            raise exc
    return reports
