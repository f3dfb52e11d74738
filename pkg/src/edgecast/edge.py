"""Edge data plane: classify, decide per egress, clone and batch.

The policy map is an immutable, versioned snapshot. Writers build a new
map and swap the reference; the data plane reads the reference once per
datagram, so a datagram is never processed under two versions.
"""

from __future__ import annotations

import enum
import logging
import threading
import time
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, NamedTuple

from edgecast.errors import EdgecastError
from edgecast.metrics import Counters, LinkCounters
from edgecast.qoc import QualityMatrix, edge_suppression
from edgecast.suppression import DiffusionSlot
from edgecast.ts import (
    MAX_UNITS_PER_DATAGRAM,
    Classifier,
    FrameClass,
    TsPacket,
    scan_datagram,
)

log = logging.getLogger(__name__)

FLUSH_INTERVAL = 0.005


class EdgeError(EdgecastError):
    pass


class InvalidDelta(EdgeError, ValueError):
    pass


class EgressBackpressure(EdgeError):
    """The egress queue is full; the datagram was not accepted."""


class Action(enum.IntEnum):
    FORWARD = 0
    SUPPRESS = 1


@dataclass(frozen=True)
class EgressRule:
    egress_id: int
    delta: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.delta <= 1.0:
            raise InvalidDelta(f"delta {self.delta} for egress {self.egress_id} outside [0, 1]")


@dataclass(frozen=True)
class PolicyEntry:
    rules: tuple[EgressRule, ...] = ()
    video_pids: frozenset = frozenset()
    forward_all: tuple = field(init=False, repr=False, compare=False)
    _passthrough: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        rules = tuple(self.rules)
        ids = [r.egress_id for r in rules]
        if len(set(ids)) != len(ids):
            raise EdgeError(f"duplicate egress ids in entry: {ids}")
        object.__setattr__(self, "rules", rules)
        object.__setattr__(self, "video_pids", frozenset(self.video_pids))
        forward_all = tuple((e, Action.FORWARD) for e in ids)
        object.__setattr__(self, "forward_all", forward_all)
        object.__setattr__(self, "_passthrough",
                           tuple(EgressDecision(c, forward_all) for c in FrameClass))

    @property
    def egress_ids(self) -> tuple[int, ...]:
        return tuple(r.egress_id for r in self.rules)

    def deltas(self) -> dict[int, float]:
        return {r.egress_id: r.delta for r in self.rules}


@dataclass(frozen=True)
class StreamConfig:
    stream_id: int
    ingress_port: int
    video_pids: frozenset = frozenset()
    sensor_address: tuple[str, int] | None = None
    rate: object = None  # qoc.RateModel, used for bandwidth predictions

    def __post_init__(self) -> None:
        object.__setattr__(self, "video_pids", frozenset(self.video_pids))


@dataclass(frozen=True)
class PolicyMap:
    """(ingress port, stream) -> egress rules, plus egress addresses."""

    version: int = 0
    entries: Mapping[tuple[int, int], PolicyEntry] = field(default_factory=dict)
    egresses: Mapping[int, tuple[str, int]] = field(default_factory=dict)
    routes: Mapping[int, tuple[int, PolicyEntry]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        entries = dict(self.entries)
        routes = {}
        for (port, stream_id), entry in entries.items():
            if port in routes:
                raise EdgeError(f"ingress port {port} mapped to two streams")
            routes[port] = (stream_id, entry)
        object.__setattr__(self, "entries", MappingProxyType(entries))
        object.__setattr__(self, "egresses", MappingProxyType(dict(self.egresses)))
        object.__setattr__(self, "routes", MappingProxyType(routes))

    @classmethod
    def empty(cls) -> "PolicyMap":
        return cls(0)

    def replaced(self, entries: Mapping | None = None,
                 egresses: Mapping | None = None) -> "PolicyMap":
        return PolicyMap(
            self.version + 1,
            self.entries if entries is None else entries,
            self.egresses if egresses is None else egresses,
        )

    def entry_for_stream(self, stream_id: int) -> tuple[int, PolicyEntry] | None:
        for (port, sid), entry in self.entries.items():
            if sid == stream_id:
                return port, entry
        return None

    def content(self) -> tuple:
        """Everything except the version, in canonical order."""
        return (
            tuple(sorted((k, e.rules, tuple(sorted(e.video_pids))) for k, e in self.entries.items())),
            tuple(sorted(self.egresses.items())),
        )


@dataclass(frozen=True)
class StreamUpdate:
    """Change to one stream's entry.

    By default ``deltas`` are merged into the existing rules (adding new
    egresses); ``replace`` swaps the whole rule list and ``remove`` drops
    egress ids. ``ingress_port`` is required when the stream is new.
    """

    stream_id: int
    deltas: Mapping[int, float] = field(default_factory=dict)
    ingress_port: int | None = None
    video_pids: frozenset | None = None
    replace: bool = False
    remove: tuple[int, ...] = ()
    drop_stream: bool = False


def apply_policy_update(policy: PolicyMap, update) -> PolicyMap:
    if hasattr(update, "to_stream_update"):
        update = update.to_stream_update()
    for egress_id, delta in update.deltas.items():
        if not 0.0 <= delta <= 1.0:
            raise InvalidDelta(f"delta {delta} for egress {egress_id} outside [0, 1]")

    entries = dict(policy.entries)
    found = policy.entry_for_stream(update.stream_id)
    if update.drop_stream:
        if found is not None:
            del entries[(found[0], update.stream_id)]
        return policy.replaced(entries)

    if found is None:
        if update.ingress_port is None:
            raise EdgeError(f"stream {update.stream_id} unknown and no ingress port given")
        port, current = update.ingress_port, PolicyEntry()
    else:
        port, current = found
        if update.ingress_port is not None and update.ingress_port != port:
            del entries[(port, update.stream_id)]
            port = update.ingress_port

    rules = {} if update.replace else current.deltas()
    for egress_id in update.remove:
        rules.pop(egress_id, None)
    rules.update(update.deltas)
    pids = current.video_pids if update.video_pids is None else update.video_pids
    entries[(port, update.stream_id)] = PolicyEntry(
        tuple(EgressRule(e, d) for e, d in sorted(rules.items())), pids)
    return policy.replaced(entries)


class PolicyStore:
    """Single-writer holder of the current map; readers just read ``snapshot``."""

    def __init__(self, policy: PolicyMap | None = None):
        self.snapshot = policy if policy is not None else PolicyMap.empty()
        self._lock = threading.Lock()
        self.history: list[int] = [self.snapshot.version]

    def commit(self, policy: PolicyMap) -> PolicyMap:
        with self._lock:
            if policy.version <= self.snapshot.version:
                raise EdgeError(
                    f"version {policy.version} does not advance {self.snapshot.version}")
            self.snapshot = policy
            self.history.append(policy.version)
            return policy

    def update(self, update) -> PolicyMap:
        with self._lock:
            policy = apply_policy_update(self.snapshot, update)
            self.snapshot = policy
            self.history.append(policy.version)
            return policy


# ----------------------------------------------------------------- control


def edge_control(sensors: Mapping[int, StreamConfig] | Iterable[StreamConfig],
                 processes: Mapping[int, tuple[str, int]] | Iterable[int],
                 omega: QualityMatrix,
                 current: PolicyMap | None = None) -> tuple[PolicyMap, dict, dict]:
    """Build interface lists, effective qualities and residual deltas.

    Streams that no listed process uses are left out of the map; their
    sensors are expected to pause.
    """
    if not isinstance(sensors, Mapping):
        sensors = {s.stream_id: s for s in sensors}
    if isinstance(processes, Mapping):
        addresses = dict(processes)
        known = set(addresses)
    else:
        addresses = {}
        known = set(processes)

    cells = {}
    for (stream_id, proc), q in omega.cells.items():
        if stream_id not in sensors:
            raise EdgeError(f"quality matrix names unknown stream {stream_id}")
        if proc not in known:
            raise EdgeError(f"quality matrix names unknown process {proc}")
        cells[(stream_id, proc)] = q
    q_eff, delta = edge_suppression(QualityMatrix(cells))

    entries = {}
    for stream_id in sorted(q_eff):
        cfg = sensors[stream_id]
        rules = tuple(EgressRule(proc, d) for proc, d in sorted(delta[stream_id].items()))
        entries[(cfg.ingress_port, stream_id)] = PolicyEntry(rules, cfg.video_pids)
    base = current if current is not None else PolicyMap.empty()
    return base.replaced(entries, addresses or base.egresses), q_eff, delta


# ------------------------------------------------------------- data path


class EgressDecision(NamedTuple):
    cls: FrameClass
    actions: tuple[tuple[int, Action], ...]

    def forwarded(self) -> list[int]:
        return [e for e, a in self.actions if a is Action.FORWARD]


class SuppressionState:
    """Error-diffusion slots for one stream, one per egress."""

    def __init__(self, stream_id: int = 0):
        self.stream_id = stream_id
        self.slots: dict[int, DiffusionSlot] = {}

    def slot(self, egress_id: int) -> DiffusionSlot:
        s = self.slots.get(egress_id)
        if s is None:
            s = self.slots[egress_id] = DiffusionSlot()
        return s


def decide(pkt: TsPacket, cls: FrameClass, entry: PolicyEntry,
           state: SuppressionState) -> tuple[EgressDecision, SuppressionState]:
    """Only differential packets are ever suppressed; everything else is cloned to all."""
    if cls is not FrameClass.DIFFERENTIAL:
        return entry._passthrough[cls], state
    slots = state.slots
    actions = []
    for rule in entry.rules:
        slot = slots.get(rule.egress_id)
        if slot is None:
            slot = state.slot(rule.egress_id)
        if slot.step(rule.delta):
            actions.append((rule.egress_id, Action.SUPPRESS))
        else:
            actions.append((rule.egress_id, Action.FORWARD))
    return EgressDecision(cls, tuple(actions)), state


class EgressPort:
    """Batches forwarded units for one (stream, egress) into datagrams.

    Units are held as views into the ingress buffer; the only copy is the
    join that assembles an outgoing datagram.
    """

    def __init__(self, egress_id: int, send: Callable[[bytes], None],
                 link: LinkCounters | None = None, batch: int = MAX_UNITS_PER_DATAGRAM,
                 flush_interval: float = FLUSH_INTERVAL):
        if not 1 <= batch <= MAX_UNITS_PER_DATAGRAM:
            raise ValueError(f"batch must be in [1, {MAX_UNITS_PER_DATAGRAM}]")
        self.egress_id = egress_id
        self.send = send
        self.link = link if link is not None else LinkCounters()
        self.batch = batch
        self.flush_interval = flush_interval
        self.pending: list = []
        self.opened_at = 0.0

    def push(self, unit, now: float) -> None:
        pending = self.pending
        if not pending:
            self.opened_at = now
        pending.append(unit)
        if len(pending) >= self.batch:
            self.flush(now)

    def flush(self, now: float) -> int:
        pending = self.pending
        if not pending:
            return 0
        n = len(pending)
        datagram = b"".join(pending)
        self.pending = []
        link = self.link
        try:
            self.send(datagram)
        except EgressBackpressure:
            link.overflow_dropped += n
            return 0
        link.emitted += n
        link.datagrams_out += 1
        link.windows.add(len(datagram), now)
        return n

    def due(self, now: float) -> bool:
        return bool(self.pending) and now - self.opened_at >= self.flush_interval


def fan_out(pkt: TsPacket, decision: EgressDecision, ports: Mapping[int, EgressPort],
            now: float = 0.0) -> int:
    """Clone ``pkt`` into every forwarding egress; returns the number of copies."""
    n = 0
    raw = pkt.raw
    forward = Action.FORWARD
    for egress_id, action in decision.actions:
        if action is forward:
            # EgressPort.push, inlined for the per-packet path
            port = ports[egress_id]
            pending = port.pending
            if not pending:
                port.opened_at = now
            pending.append(raw)
            if len(pending) >= port.batch:
                port.flush(now)
            n += 1
    return n


class _StreamPath:
    __slots__ = ("stream_id", "classifier", "suppression", "flow", "version",
                 "entry", "ports")

    def __init__(self, stream_id: int, flow):
        self.stream_id = stream_id
        self.classifier: Classifier | None = None
        self.suppression = SuppressionState(stream_id)
        self.flow = flow
        self.version = -1
        self.entry: PolicyEntry | None = None
        self.ports: dict[int, EgressPort] = {}


class EdgeDataPlane:
    """Socket-free edge pipeline: datagram in, per-egress datagrams out.

    ``sink_factory(stream_id, egress_id, address)`` returns the callable that
    takes an assembled datagram for that egress; it may raise
    :class:`EgressBackpressure`.
    """

    def __init__(self, store: PolicyStore,
                 sink_factory: Callable[[int, int, tuple | None], Callable[[bytes], None]],
                 counters: Counters | None = None, batch: int = MAX_UNITS_PER_DATAGRAM,
                 flush_interval: float = FLUSH_INTERVAL):
        self.store = store
        self.sink_factory = sink_factory
        self.counters = counters if counters is not None else Counters()
        self.batch = batch
        self.flush_interval = flush_interval
        self.paths: dict[int, _StreamPath] = {}
        self._ports: dict[tuple[int, int, tuple | None], EgressPort] = {}
        self.unrouted = 0
        self.bad_datagrams = 0

    def _path(self, stream_id: int, entry: PolicyEntry, policy: PolicyMap) -> _StreamPath:
        path = self.paths.get(stream_id)
        if path is None:
            path = self.paths[stream_id] = _StreamPath(stream_id, self.counters.edge(stream_id))
        if path.version != policy.version:
            if path.classifier is None or path.classifier.video_pids != entry.video_pids:
                path.classifier = Classifier(entry.video_pids)
            ports = {}
            for rule in entry.rules:
                addr = policy.egresses.get(rule.egress_id)
                key = (stream_id, rule.egress_id, addr)
                port = self._ports.get(key)
                if port is None:
                    port = self._ports[key] = EgressPort(
                        rule.egress_id, self.sink_factory(stream_id, rule.egress_id, addr),
                        self.counters.link(stream_id, rule.egress_id),
                        self.batch, self.flush_interval)
                ports[rule.egress_id] = port
            # egresses that left the entry flush what they hold
            for eid, old in path.ports.items():
                if ports.get(eid) is not old:
                    old.flush(time.monotonic())
            path.ports = ports
            path.entry = entry
            path.version = policy.version
        return path

    def process(self, ingress_port: int, payload, now: float | None = None) -> int:
        """Run one ingress datagram through classify/decide/fan-out."""
        policy = self.store.snapshot
        route = policy.routes.get(ingress_port)
        if route is None:
            self.unrouted += 1
            return 0
        stream_id, entry = route
        now = time.monotonic() if now is None else now
        try:
            packets = scan_datagram(payload)
        except EdgecastError as exc:
            self.bad_datagrams += 1
            log.debug("dropping datagram on port %d: %s", ingress_port, exc)
            return 0
        path = self._path(stream_id, entry, policy)
        classify = path.classifier.classify
        suppression = path.suppression
        ports = path.ports
        flow = path.flow
        counts = [0] * len(FrameClass)
        # one snapshot per datagram, so every egress sees the same ingress
        # counts; per-egress suppression comes from the diffusion slots
        slots = [(port.link, suppression.slot(eid)) for eid, port in ports.items()]
        dropped_before = [slot.dropped for _, slot in slots]
        for pkt in packets:
            cls = classify(pkt)
            counts[cls] += 1
            if ports:
                decision, _ = decide(pkt, cls, entry, suppression)
                fan_out(pkt, decision, ports, now)

        for c, n in enumerate(counts):
            flow.packets_in[c] += n
        if not ports:
            flow.orphaned += len(packets)
        diff = FrameClass.DIFFERENTIAL
        for (link, slot), before in zip(slots, dropped_before):
            dropped = slot.dropped - before
            link_in = link.packets_in
            cloned = link.cloned
            for c, n in enumerate(counts):
                link_in[c] += n
                cloned[c] += n
            cloned[diff] -= dropped
            link.policy_suppressed += dropped
        flow.mark(now)
        flow.windows.add(len(payload), now)
        flow.continuity_gaps = path.classifier.continuity_gaps
        flow.unknown_class = path.classifier.unclassified
        return len(packets)

    def poll(self, now: float | None = None) -> int:
        """Flush batches whose timer expired."""
        now = time.monotonic() if now is None else now
        n = 0
        for port in self._ports.values():
            if port.due(now):
                n += port.flush(now)
        return n

    def flush_all(self, now: float | None = None) -> int:
        now = time.monotonic() if now is None else now
        return sum(port.flush(now) for port in self._ports.values())
