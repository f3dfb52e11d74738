"""Sensor, edge and sink roles, and the networks that carry them.

Roles never call each other: every interaction is a datagram through a
network object, and every control interaction goes through the codec.
Two networks exist. :class:`UdpNetwork` gives each role a thread and real
sockets. :class:`SimNetwork` runs the same roles on a virtual clock in one
thread, which makes whole runs reproducible byte for byte.
"""

from __future__ import annotations

import collections
import logging
import selectors
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

from edgecast.control import (
    Ack,
    AckStatus,
    AckTracker,
    DecodeError,
    MsgType,
    PolicyUpdate,
    QualityNotify,
    Reconciler,
    SinkRegister,
    StreamThreshold,
    decode,
    encode,
    is_control,
)
from edgecast.edge import EdgeDataPlane, EdgeError, EgressBackpressure, PolicyStore, StreamConfig
from edgecast.errors import EdgecastError
from edgecast.metrics import Counters, FlowCounters
from edgecast.qoc import DEFAULT_DETECTION_TABLE, DetectionTable
from edgecast.sensor import SensorPipeline, StreamSource, UnknownStream
from edgecast.ts import TS_PACKET_SIZE, iter_units

log = logging.getLogger(__name__)

Address = tuple[str, int]

SOCKET_BUFFER = 4 * 1024 * 1024
MAX_DATAGRAM = 65536


class BindError(EdgecastError):
    pass


# ------------------------------------------------------------------ roles


class Role:
    """Base: an inbox of deferred calls run on the role's own context."""

    name = "role"

    def __init__(self, net):
        self.net = net
        self.inbox: collections.deque = collections.deque()

    def addresses(self) -> list[Address]:
        raise NotImplementedError

    def post(self, fn: Callable[[float], None]) -> None:
        self.inbox.append(fn)

    def run_inbox(self, now: float) -> None:
        inbox = self.inbox
        while inbox:
            inbox.popleft()(now)

    def on_datagram(self, local: Address, src: Address, data: bytes, now: float) -> None:
        raise NotImplementedError

    def tick(self, now: float) -> None:
        self.run_inbox(now)

    def idle(self) -> bool:
        return not self.inbox


class SensorRole(Role):
    """Frame-paced transmitter that also listens for quality notifications."""

    def __init__(self, source: StreamSource, address: Address, edge_ingress: Address, net,
                 counters: FlowCounters | None = None):
        super().__init__(net)
        self.name = f"sensor-{source.stream_id}"
        self.source = source
        self.address = address
        self.edge_ingress = edge_ingress
        self.pipeline = SensorPipeline(source, counters)
        self.interval = 1.0 / source.fps
        self.frames = source.frames(-1) if source.synthetic is not None else source.frames()
        self.next_frame: float | None = None
        self.sent_frames: list[tuple] = []
        self.notifications: list[dict] = []

    @property
    def stream_id(self) -> int:
        return self.source.stream_id

    @property
    def counters(self) -> FlowCounters:
        return self.pipeline.counters

    def addresses(self) -> list[Address]:
        return [self.address]

    def start_streaming(self, now: float) -> None:
        self.next_frame = now

    def stop_streaming(self, now: float) -> None:
        self.next_frame = None

    def on_datagram(self, local, src, data, now):
        try:
            msg = decode(data)
        except DecodeError as exc:
            log.debug("%s: bad control datagram: %s", self.name, exc)
            return
        if not isinstance(msg, (QualityNotify, PolicyUpdate)):
            return
        status = AckStatus.OK
        try:
            self.pipeline.notify(msg)
        except UnknownStream:
            status = AckStatus.UNKNOWN_STREAM
        except TypeError:
            status = AckStatus.INVALID
        else:
            keep = msg.keep if isinstance(msg, QualityNotify) else None
            self.notifications.append({"at": now, "keep": keep, "paused": keep is None})
        self.net.send(self.address, src, encode(Ack(msg.type, status, msg.stream_id)))

    def tick(self, now):
        self.run_inbox(now)
        while self.next_frame is not None and now >= self.next_frame:
            frame = next(self.frames, None)
            if frame is None:
                self.next_frame = None
                break
            stamp = self.next_frame
            if frame.index >= 0:
                self.sent_frames.append((frame.index, frame.cls, len(frame.packets)))
                self.next_frame += self.interval
            for datagram in self.pipeline.frame(frame, stamp):
                self.net.send(self.address, self.edge_ingress, datagram)


class EdgeRole(Role):
    """Ingress sockets feeding the data plane, plus the control port."""

    name = "edge"

    def __init__(self, streams: dict[int, StreamConfig], host: str, control: Address, net,
                 counters: Counters | None = None, table: DetectionTable = DEFAULT_DETECTION_TABLE,
                 queue_size: int = 1024):
        super().__init__(net)
        self.streams = dict(streams)
        self.host = host
        self.control = control
        self.queue_size = queue_size
        self.counters = counters if counters is not None else Counters()
        self.store = PolicyStore()
        self.reconciler = Reconciler(self.streams, table, self.store.snapshot)
        self.tracker = AckTracker(lambda payload, addr: net.send(self.control, addr, payload))
        self.plane = EdgeDataPlane(self.store, self._sender, self.counters)
        self.ingress = {(host, cfg.ingress_port): cfg.ingress_port for cfg in self.streams.values()}
        self.commits: list[dict] = []
        self.rejections: list[dict] = []
        self.bad_control = 0

    def addresses(self) -> list[Address]:
        return [self.control, *self.ingress]

    def _sender(self, stream_id: int, egress_id: int, addr):
        if addr is None:
            def nowhere(datagram):
                raise EgressBackpressure(f"egress {egress_id} has no address")
            return nowhere
        src = (self.host, self.streams[stream_id].ingress_port)
        return self.net.egress(src, tuple(addr), self.queue_size)

    def start(self, now: float) -> None:
        self._reconcile([], now)

    def _reconcile(self, registrations: list[SinkRegister], now: float):
        # operator updates may have advanced the store since the last pass;
        # a reconcile rebuilds every entry from the registrations
        self.reconciler.policy = self.store.snapshot
        tx = self.reconciler.reconcile(registrations)
        self.store.commit(tx.policy)
        self.commits.append({"at": now, "version": tx.policy.version})
        for msg in tx.notifications:
            addr = self.streams[msg.stream_id].sensor_address
            if addr is not None:
                self.tracker.submit(msg, addr, now)
        # every live sink hears its own rule for each stream it consumes
        for pid, reg in sorted(self.reconciler.registrations.items()):
            for st in reg.streams:
                delta = tx.solution.suppression.get(st.stream_id, {}).get(pid)
                if delta is not None:
                    self.tracker.submit(PolicyUpdate.of(st.stream_id, {pid: delta}), reg.address, now)
        return tx

    def on_datagram(self, local, src, data, now):
        port = self.ingress.get(local)
        if port is not None:
            self.plane.process(port, data, now)
            return
        try:
            msg = decode(data)
        except DecodeError as exc:
            self.bad_control += 1
            log.debug("edge: bad control datagram from %s: %s", src, exc)
            return
        if isinstance(msg, Ack):
            self.tracker.on_ack(msg, src)
            return
        status = AckStatus.OK
        ref = AckTracker.ref_of(msg)
        if isinstance(msg, SinkRegister):
            tx = self._reconcile([msg], now)
            reason = tx.rejected.get(msg.process_id)
            if reason is not None:
                status = (AckStatus.UNKNOWN_STREAM if reason.startswith("unknown stream")
                          else AckStatus.INFEASIBLE)
                self.rejections.append({"at": now, "process_id": msg.process_id, "reason": reason})
                log.warning("rejected registration of process %d: %s", msg.process_id, reason)
        elif isinstance(msg, PolicyUpdate):
            known = self.store.snapshot.egresses
            if any(e not in known for e, _ in msg.egresses):
                status = AckStatus.INVALID
            else:
                try:
                    policy = self.store.update(msg)
                    self.commits.append({"at": now, "version": policy.version})
                except EdgeError:
                    status = AckStatus.INVALID
        else:
            status = AckStatus.INVALID
        self.net.send(self.control, src, encode(Ack(msg.type, status, ref)))

    def tick(self, now):
        self.run_inbox(now)
        self.plane.poll(now)
        self.tracker.tick(now)

    def idle(self) -> bool:
        return super().idle() and self.tracker.idle


class SinkRole(Role):
    """A computation process: registers its thresholds and counts what arrives."""

    def __init__(self, process_id: int, address: Address, streams: Iterable[StreamThreshold],
                 edge_control: Address, stream_by_source: dict[Address, int], net,
                 counters: Counters | None = None):
        super().__init__(net)
        self.name = f"sink-{process_id}"
        self.process_id = process_id
        self.address = address
        self.streams = tuple(streams)
        self.edge_control = edge_control
        self.stream_by_source = dict(stream_by_source)
        self.counters = counters if counters is not None else Counters()
        self.tracker = AckTracker(lambda payload, addr: net.send(self.address, addr, payload))
        self.status: AckStatus | None = None
        self.policy: dict[int, float] = {}
        self.stray = 0

    def addresses(self) -> list[Address]:
        return [self.address]

    def register(self, now: float, streams: Iterable[StreamThreshold] | None = None) -> None:
        if streams is not None:
            self.streams = tuple(streams)
        msg = SinkRegister(self.process_id, self.address[0], self.address[1], self.streams)
        self.tracker.submit(msg, self.edge_control, now)

    def deregister(self, now: float) -> None:
        self.register(now, ())

    def set_threshold(self, now: float, threshold: StreamThreshold) -> None:
        others = [s for s in self.streams if s.stream_id != threshold.stream_id]
        self.register(now, sorted([*others, threshold], key=lambda s: s.stream_id))

    def on_datagram(self, local, src, data, now):
        if is_control(data):
            try:
                msg = decode(data)
            except DecodeError:
                return
            if isinstance(msg, Ack):
                settled = self.tracker.on_ack(msg, src)
                if isinstance(settled, SinkRegister):
                    self.status = AckStatus(msg.status)
            elif isinstance(msg, PolicyUpdate):
                self.policy[msg.stream_id] = msg.deltas.get(self.process_id, 0.0)
                self.net.send(self.address, src, encode(Ack(msg.type, AckStatus.OK, msg.stream_id)))
            return
        stream_id = self.stream_by_source.get(src)
        if stream_id is None:
            self.stray += 1
            return
        c = self.counters.sink(stream_id, self.process_id)
        c.received += len(data) // TS_PACKET_SIZE
        c.datagrams += 1
        observe = c.ledger.observe
        for unit in iter_units(data):
            observe(unit)

    def tick(self, now):
        self.run_inbox(now)
        self.tracker.tick(now)

    def idle(self) -> bool:
        return super().idle() and self.tracker.idle


class OperatorRole(Role):
    """Sends operator PolicyUpdates to the edge (scenario timeline actions)."""

    name = "operator"

    def __init__(self, address: Address, edge_control: Address, net):
        super().__init__(net)
        self.address = address
        self.edge_control = edge_control
        self.tracker = AckTracker(lambda payload, addr: net.send(self.address, addr, payload))
        self.replies: list[Ack] = []

    def addresses(self) -> list[Address]:
        return [self.address]

    def send_policy(self, now: float, stream_id: int, deltas: dict[int, float]) -> None:
        self.tracker.submit(PolicyUpdate.of(stream_id, deltas), self.edge_control, now)

    def on_datagram(self, local, src, data, now):
        try:
            msg = decode(data)
        except DecodeError:
            return
        if isinstance(msg, Ack) and self.tracker.on_ack(msg, src) is not None:
            self.replies.append(msg)

    def tick(self, now):
        self.run_inbox(now)
        self.tracker.tick(now)

    def idle(self) -> bool:
        return super().idle() and self.tracker.idle


# --------------------------------------------------------------- networks


class SimNetwork:
    """Deterministic in-process datagram network on a stepped virtual clock.

    Datagrams are queued and delivered in send order after every role has
    ticked; zero latency, no loss, no reordering.
    """

    def __init__(self, step: float = 0.001, start: float = 0.0):
        self.step = step
        self._base = start
        self._k = 0
        self.routes: dict[Address, Role] = {}
        self.roles: list[Role] = []
        self.queue: collections.deque = collections.deque()
        self.undeliverable = 0
        self._next_port = 40000

    def now(self) -> float:
        return self._base + self._k * self.step

    def rebase(self, origin: float = 0.0) -> None:
        self._base, self._k = origin, 0

    def bind(self, role: Role) -> list[Address]:
        bound = []
        for addr in role.addresses():
            if addr[1] == 0:
                self._next_port += 1
                addr = (addr[0], self._next_port)
            if addr in self.routes:
                raise BindError(f"address {addr[0]}:{addr[1]} already bound")
            self.routes[addr] = role
            bound.append(addr)
        self.roles.append(role)
        return bound

    def send(self, src: Address, dst: Address, data: bytes) -> None:
        self.queue.append((src, tuple(dst), bytes(data)))

    def egress(self, src: Address, dst: Address, capacity: int) -> Callable[[bytes], None]:
        def send(datagram: bytes) -> None:
            self.queue.append((src, dst, datagram))
        return send

    def deliver(self) -> None:
        now = self.now()
        queue = self.queue
        while queue:
            src, dst, data = queue.popleft()
            role = self.routes.get(dst)
            if role is None:
                self.undeliverable += 1
                continue
            role.on_datagram(dst, src, data, now)

    def _step(self) -> None:
        now = self.now()
        for role in self.roles:
            role.tick(now)
        self.deliver()
        self._k += 1

    def advance_to(self, t: float) -> None:
        while self.now() < t - 1e-12:
            self._step()

    def settle(self, done: Callable[[], bool], limit: float) -> bool:
        deadline = self.now() + limit
        while self.now() < deadline:
            self._step()
            if done():
                return True
        return done()

    def start(self) -> None:
        pass

    def stop(self) -> None:
        self.deliver()


class EgressQueue:
    """Bounded per-egress datagram queue drained by the network's sender thread."""

    __slots__ = ("sock", "dst", "items", "capacity", "wake", "send_errors", "peak")

    def __init__(self, sock: socket.socket, dst: Address, capacity: int, wake: threading.Event):
        self.sock = sock
        self.dst = dst
        self.items: collections.deque = collections.deque()
        self.capacity = capacity
        self.wake = wake
        self.send_errors = 0
        self.peak = 0

    def __call__(self, datagram: bytes) -> None:
        items = self.items
        n = len(items)
        if n >= self.capacity:
            raise EgressBackpressure(f"egress queue to {self.dst} full")
        items.append(datagram)
        if n == 0:
            self.wake.set()
        elif n >= self.peak:
            self.peak = n + 1

    def drain(self) -> int:
        items = self.items
        sendto = self.sock.sendto
        dst = self.dst
        n = 0
        while items:
            datagram = items.popleft()
            try:
                sendto(datagram, dst)
            except OSError:
                self.send_errors += 1
            n += 1
        return n


class UdpNetwork:
    """Real UDP sockets; one thread per role plus one egress sender thread."""

    def __init__(self, start: float = 0.0, poll: float = 0.001):
        self.poll = poll
        self._t0 = time.monotonic() - start
        self.sockets: dict[Address, socket.socket] = {}
        self.owner: dict[Address, Role] = {}
        self.roles: list[Role] = []
        self.queues: list[EgressQueue] = []
        self.wake = threading.Event()
        self.stopping = threading.Event()
        self.threads: list[threading.Thread] = []
        self.send_errors = 0
        self.errors: list[BaseException] = []

    def now(self) -> float:
        return time.monotonic() - self._t0

    def rebase(self, origin: float = 0.0) -> None:
        self._t0 = time.monotonic() - origin

    def bind(self, role: Role) -> list[Address]:
        bound = []
        for addr in role.addresses():
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            for opt in (socket.SO_RCVBUF, socket.SO_SNDBUF):
                try:
                    sock.setsockopt(socket.SOL_SOCKET, opt, SOCKET_BUFFER)
                except OSError:
                    pass
            try:
                sock.bind(addr)
            except OSError as exc:
                sock.close()
                raise BindError(f"cannot bind {addr[0]}:{addr[1]}: {exc}") from None
            sock.setblocking(False)
            actual = sock.getsockname()[:2]
            self.sockets[actual] = sock
            self.owner[actual] = role
            bound.append(actual)
        self.roles.append(role)
        return bound

    def send(self, src: Address, dst: Address, data: bytes) -> None:
        try:
            self.sockets[src].sendto(data, dst)
        except OSError as exc:
            self.send_errors += 1
            log.debug("send %s -> %s failed: %s", src, dst, exc)

    def egress(self, src: Address, dst: Address, capacity: int) -> EgressQueue:
        q = EgressQueue(self.sockets[src], dst, capacity, self.wake)
        self.queues.append(q)
        return q

    def _role_loop(self, role: Role) -> None:
        sel = selectors.DefaultSelector()
        for addr, sock in self.sockets.items():
            if self.owner[addr] is role:
                sel.register(sock, selectors.EVENT_READ, addr)
        on_datagram = role.on_datagram
        now = self.now
        try:
            while not self.stopping.is_set():
                for key, _ in sel.select(self.poll):
                    sock = key.fileobj
                    local = key.data
                    for _ in range(256):
                        try:
                            data, src = sock.recvfrom(MAX_DATAGRAM)
                        except (BlockingIOError, InterruptedError):
                            break
                        except OSError:
                            break
                        on_datagram(local, src, data, now())
                role.tick(now())
        except BaseException as exc:  # surfaced by the runner
            log.exception("%s crashed", role.name)
            self.errors.append(exc)
        finally:
            sel.close()

    def _sender_loop(self) -> None:
        wake = self.wake
        while True:
            wake.wait(0.01)
            wake.clear()
            busy = True
            while busy:
                busy = False
                for q in self.queues:
                    if q.items:
                        q.drain()
                        busy = True
            if self.stopping.is_set() and not any(q.items for q in self.queues):
                return

    def start(self) -> None:
        for role in self.roles:
            t = threading.Thread(target=self._role_loop, args=(role,), name=role.name, daemon=True)
            self.threads.append(t)
        self.threads.append(threading.Thread(target=self._sender_loop, name="egress", daemon=True))
        for t in self.threads:
            t.start()

    def advance_to(self, t: float) -> None:
        while True:
            remaining = t - self.now()
            if remaining <= 0:
                return
            time.sleep(min(remaining, 0.05))

    def settle(self, done: Callable[[], bool], limit: float) -> bool:
        deadline = time.monotonic() + limit
        while time.monotonic() < deadline:
            if done():
                return True
            time.sleep(0.01)
        return done()

    def stop(self) -> None:
        self.stopping.set()
        self.wake.set()
        for t in self.threads:
            t.join(timeout=2.0)
        for sock in self.sockets.values():
            sock.close()
        self.send_errors += sum(q.send_errors for q in self.queues)


# ---------------------------------------------------------------- helpers


@dataclass
class Topology:
    """All roles of one run, wired to one network."""

    net: object
    edge: EdgeRole
    sensors: dict[int, SensorRole] = field(default_factory=dict)
    sinks: dict[int, SinkRole] = field(default_factory=dict)
    operator: OperatorRole | None = None

    @property
    def roles(self) -> list[Role]:
        out: list[Role] = [*self.sensors.values(), self.edge, *self.sinks.values()]
        if self.operator is not None:
            out.append(self.operator)
        return out

    def idle(self) -> bool:
        return all(role.idle() for role in self.roles)


def on_role(role: Role, fn: Callable[..., None], *args) -> None:
    """Run ``fn(now, *args)`` on the role's own context at its next tick."""
    role.post(lambda now: fn(now, *args))
