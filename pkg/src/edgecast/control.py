"""Control-plane wire format, reconciliation and ack/retry delivery.

Every message starts with a 4-byte preamble::

    0x45 0x43 | version (1) | type

followed by a fixed little-endian body:

==============  =====================================================
QualityNotify   stream_id u16, keep u16 (keep/65535)
PolicyUpdate    stream_id u16, count u8, count x (egress_id u16, delta u16)
SinkRegister    process_id u16, ipv4 4 bytes, port u16, count u8,
                count x (stream_id u16, threshold u16, strategy u8)
Ack             acked_type u8, status u8, ref u16
==============  =====================================================

Fractions are fixed point over 65535. A SinkRegister with no streams
deregisters the process. A PolicyUpdate with no egresses tells a sensor that
nobody consumes its stream.
"""

from __future__ import annotations

import enum
import ipaddress
import logging
import math
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Union

from edgecast.edge import EgressRule, PolicyEntry, PolicyMap, StreamConfig, StreamUpdate
from edgecast.errors import EdgecastError
from edgecast.qoc import (
    DEFAULT_DETECTION_TABLE,
    STRATEGIES,
    DetectionTable,
    Infeasible,
    Requirement,
    solve_min_bandwidth,
)

log = logging.getLogger(__name__)

MAGIC = b"EC"
VERSION = 1
FIXED_ONE = 65535
DEFAULT_CONTROL_PORT = 9900

RETRY_ATTEMPTS = 3
RETRY_SPACING = 0.5

_PREAMBLE = struct.Struct("<2sBB")
_NOTIFY = struct.Struct("<HH")
_POLICY_HEAD = struct.Struct("<HB")
_POLICY_ITEM = struct.Struct("<HH")
_SINK_HEAD = struct.Struct("<H4sHB")
_SINK_ITEM = struct.Struct("<HHB")
_ACK = struct.Struct("<BBH")


class MsgType(enum.IntEnum):
    QUALITY_NOTIFY = 1
    POLICY_UPDATE = 2
    SINK_REGISTER = 3
    ACK = 4


class AckStatus(enum.IntEnum):
    OK = 0
    INFEASIBLE = 1
    UNKNOWN_STREAM = 2
    INVALID = 3


class DecodeError(EdgecastError):
    pass


class BadMagic(DecodeError):
    pass


class BadVersion(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class UnknownType(DecodeError):
    pass


class TrailingBytes(DecodeError):
    pass


class InvalidField(DecodeError):
    pass


def to_fixed(value: float) -> int:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"fraction {value} outside [0, 1]")
    return round(value * FIXED_ONE)


def to_fixed_floor(value: float) -> int:
    """Round down onto the grid; used for thresholds so a table value stays feasible."""
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"fraction {value} outside [0, 1]")
    return min(FIXED_ONE, math.floor(value * FIXED_ONE + 1e-9))


def from_fixed(value: int) -> float:
    return value / FIXED_ONE


def _check_u16(name: str, value: int) -> None:
    if not 0 <= value <= 0xFFFF:
        raise ValueError(f"{name}={value} does not fit in 16 bits")


@dataclass(frozen=True)
class QualityNotify:
    stream_id: int
    keep_fixed: int

    type = MsgType.QUALITY_NOTIFY

    def __post_init__(self) -> None:
        _check_u16("stream_id", self.stream_id)
        _check_u16("keep_fixed", self.keep_fixed)

    @classmethod
    def of(cls, stream_id: int, keep: float) -> "QualityNotify":
        return cls(stream_id, to_fixed(keep))

    @property
    def keep(self) -> float:
        return from_fixed(self.keep_fixed)


@dataclass(frozen=True)
class PolicyUpdate:
    stream_id: int
    egresses: tuple[tuple[int, int], ...] = ()  # (egress_id, delta_fixed)

    type = MsgType.POLICY_UPDATE

    def __post_init__(self) -> None:
        _check_u16("stream_id", self.stream_id)
        object.__setattr__(self, "egresses", tuple((int(e), int(d)) for e, d in self.egresses))
        if len(self.egresses) > 0xFF:
            raise ValueError("at most 255 egresses per update")
        for egress_id, delta in self.egresses:
            _check_u16("egress_id", egress_id)
            _check_u16("delta_fixed", delta)

    @classmethod
    def of(cls, stream_id: int, deltas: Mapping[int, float]) -> "PolicyUpdate":
        return cls(stream_id, tuple((e, to_fixed(d)) for e, d in sorted(deltas.items())))

    @property
    def deltas(self) -> dict[int, float]:
        return {e: from_fixed(d) for e, d in self.egresses}

    def to_stream_update(self) -> StreamUpdate:
        # a full update: the listed egresses replace whatever was there
        return StreamUpdate(self.stream_id, self.deltas, replace=True)


@dataclass(frozen=True)
class StreamThreshold:
    stream_id: int
    threshold_fixed: int
    strategy: str = "differential"

    def __post_init__(self) -> None:
        _check_u16("stream_id", self.stream_id)
        _check_u16("threshold_fixed", self.threshold_fixed)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")

    @classmethod
    def of(cls, stream_id: int, threshold: float, strategy: str = "differential") -> "StreamThreshold":
        return cls(stream_id, to_fixed_floor(threshold), strategy)

    @property
    def threshold(self) -> float:
        return from_fixed(self.threshold_fixed)

    def requirement(self) -> Requirement:
        return Requirement(self.threshold, self.strategy)


@dataclass(frozen=True)
class SinkRegister:
    process_id: int
    host: str
    port: int
    streams: tuple[StreamThreshold, ...] = ()

    type = MsgType.SINK_REGISTER

    def __post_init__(self) -> None:
        _check_u16("process_id", self.process_id)
        _check_u16("port", self.port)
        ipaddress.IPv4Address(self.host)
        object.__setattr__(self, "streams", tuple(self.streams))
        if len(self.streams) > 0xFF:
            raise ValueError("at most 255 streams per registration")

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)

    @property
    def is_deregistration(self) -> bool:
        return not self.streams


@dataclass(frozen=True)
class Ack:
    acked_type: int
    status: int = AckStatus.OK
    ref: int = 0

    type = MsgType.ACK

    def __post_init__(self) -> None:
        if not (0 <= self.acked_type <= 0xFF and 0 <= self.status <= 0xFF):
            raise ValueError("acked_type and status are single bytes")
        _check_u16("ref", self.ref)


ControlMessage = Union[QualityNotify, PolicyUpdate, SinkRegister, Ack]

_STRATEGY_CODES = {"uniform": 0, "differential": 1}
_STRATEGY_NAMES = {v: k for k, v in _STRATEGY_CODES.items()}


def encode(msg: ControlMessage) -> bytes:
    head = _PREAMBLE.pack(MAGIC, VERSION, msg.type)
    if isinstance(msg, QualityNotify):
        return head + _NOTIFY.pack(msg.stream_id, msg.keep_fixed)
    if isinstance(msg, PolicyUpdate):
        body = [_POLICY_HEAD.pack(msg.stream_id, len(msg.egresses))]
        body += [_POLICY_ITEM.pack(e, d) for e, d in msg.egresses]
        return head + b"".join(body)
    if isinstance(msg, SinkRegister):
        body = [_SINK_HEAD.pack(msg.process_id, ipaddress.IPv4Address(msg.host).packed,
                                msg.port, len(msg.streams))]
        body += [_SINK_ITEM.pack(s.stream_id, s.threshold_fixed, _STRATEGY_CODES[s.strategy])
                 for s in msg.streams]
        return head + b"".join(body)
    if isinstance(msg, Ack):
        return head + _ACK.pack(msg.acked_type, msg.status, msg.ref)
    raise TypeError(f"not a control message: {msg!r}")


def _expect(data: bytes, size: int) -> None:
    if len(data) < size:
        raise Truncated(f"need {size} bytes, got {len(data)}")
    if len(data) > size:
        raise TrailingBytes(f"{len(data) - size} unexpected trailing bytes")


def decode(data: bytes) -> ControlMessage:
    data = bytes(data)
    if len(data) < 2:
        raise Truncated("message shorter than its magic")
    if data[:2] != MAGIC:
        raise BadMagic(f"bad magic {data[:2].hex()}")
    if len(data) < _PREAMBLE.size:
        raise Truncated("message shorter than its preamble")
    _, version, mtype = _PREAMBLE.unpack_from(data)
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    off = _PREAMBLE.size

    if mtype == MsgType.QUALITY_NOTIFY:
        _expect(data, off + _NOTIFY.size)
        return QualityNotify(*_NOTIFY.unpack_from(data, off))

    if mtype == MsgType.POLICY_UPDATE:
        if len(data) < off + _POLICY_HEAD.size:
            raise Truncated("policy update header cut short")
        stream_id, count = _POLICY_HEAD.unpack_from(data, off)
        off += _POLICY_HEAD.size
        _expect(data, off + count * _POLICY_ITEM.size)
        items = tuple(_POLICY_ITEM.unpack_from(data, off + k * _POLICY_ITEM.size)
                      for k in range(count))
        return PolicyUpdate(stream_id, items)

    if mtype == MsgType.SINK_REGISTER:
        if len(data) < off + _SINK_HEAD.size:
            raise Truncated("sink registration header cut short")
        process_id, addr, port, count = _SINK_HEAD.unpack_from(data, off)
        off += _SINK_HEAD.size
        _expect(data, off + count * _SINK_ITEM.size)
        streams = []
        for k in range(count):
            stream_id, threshold, code = _SINK_ITEM.unpack_from(data, off + k * _SINK_ITEM.size)
            if code not in _STRATEGY_NAMES:
                raise InvalidField(f"unknown strategy code {code}")
            streams.append(StreamThreshold(stream_id, threshold, _STRATEGY_NAMES[code]))
        return SinkRegister(process_id, str(ipaddress.IPv4Address(addr)), port, tuple(streams))

    if mtype == MsgType.ACK:
        _expect(data, off + _ACK.size)
        return Ack(*_ACK.unpack_from(data, off))

    raise UnknownType(f"unknown message type {mtype}")


def is_control(data: bytes) -> bool:
    """Control datagrams and TS datagrams can share a socket: TS starts with 0x47."""
    return data[:2] == MAGIC


# ---------------------------------------------------------------- reconcile


@dataclass
class Transaction:
    """Outcome of one reconcile pass: one new policy map version."""

    policy: PolicyMap
    notifications: list[ControlMessage] = field(default_factory=list)
    rejected: dict[int, str] = field(default_factory=dict)
    solution: object = None


class Reconciler:
    """Single writer of the policy map.

    Holds sink registrations, solves for qualities and suppression factors,
    and emits the map plus the sensor notifications that changed.
    """

    def __init__(self, streams: Mapping[int, StreamConfig],
                 table: DetectionTable = DEFAULT_DETECTION_TABLE, policy=None):
        self.streams = dict(streams)
        self.table = table
        self.registrations: dict[int, SinkRegister] = {}
        self.policy = policy if policy is not None else PolicyMap.empty()
        # stream -> keep last told to the sensor; None means paused
        self.notified: dict[int, float | None] = {}
        self._lock = threading.Lock()

    def register(self, msg: SinkRegister) -> str | None:
        """Validate and record a registration; return a rejection reason or None."""
        if msg.is_deregistration:
            self.registrations.pop(msg.process_id, None)
            return None
        for st in msg.streams:
            if st.stream_id not in self.streams:
                return f"unknown stream {st.stream_id}"
            try:
                solve_min_bandwidth({(st.stream_id, msg.process_id): st.requirement()}, self.table)
            except Infeasible as exc:
                return str(exc)
        self.registrations[msg.process_id] = msg
        return None

    def thresholds(self) -> dict[tuple[int, int], Requirement]:
        out = {}
        for pid, reg in sorted(self.registrations.items()):
            for st in reg.streams:
                out[(st.stream_id, pid)] = st.requirement()
        return out

    def reconcile(self, registrations: list[SinkRegister] = ()) -> Transaction:
        with self._lock:
            rejected = {}
            for msg in registrations:
                reason = self.register(msg)
                if reason is not None:
                    rejected[msg.process_id] = reason
            rates = {s: c.rate for s, c in self.streams.items() if c.rate is not None}
            solution = solve_min_bandwidth(self.thresholds(), self.table)
            if rates and set(solution.q_eff) <= set(rates):
                solution = solve_min_bandwidth(self.thresholds(), self.table, rates)

            entries = {}
            for stream_id in sorted(solution.q_eff):
                cfg = self.streams[stream_id]
                rules = tuple(EgressRule(proc, delta)
                              for proc, delta in sorted(solution.suppression[stream_id].items()))
                entries[(cfg.ingress_port, stream_id)] = PolicyEntry(rules, cfg.video_pids)
            egresses = {pid: reg.address for pid, reg in self.registrations.items()}
            self.policy = self.policy.replaced(entries, egresses)

            notifications = []
            for stream_id in sorted(self.streams):
                q = solution.q_eff.get(stream_id)
                keep = None if q is None else from_fixed(to_fixed(q.differential_keep))
                if stream_id in self.notified and self.notified[stream_id] == keep:
                    continue
                self.notified[stream_id] = keep
                if keep is None:
                    notifications.append(PolicyUpdate(stream_id, ()))
                else:
                    notifications.append(QualityNotify.of(stream_id, keep))
            return Transaction(self.policy, notifications, rejected, solution)


def policy_messages(policy) -> list[PolicyUpdate]:
    """Canonical wire form of a policy map (one update per stream)."""
    return [PolicyUpdate.of(stream_id, {r.egress_id: r.delta for r in entry.rules})
            for (_, stream_id), entry in sorted(policy.entries.items())]


# ------------------------------------------------------------ ack / retry


Address = tuple[str, int]


class AckTracker:
    """Non-blocking ack/retry bookkeeping for outgoing control messages.

    ``submit`` sends at once and arms a retry; ``tick`` resends anything
    whose spacing elapsed and flags a destination once the attempts are
    used up. Messages are keyed by (destination, ref), so a newer message on
    the same stream or process supersedes one still awaiting its Ack.
    """

    def __init__(self, send: Callable[[bytes, Address], None], attempts: int = RETRY_ATTEMPTS,
                 spacing: float = RETRY_SPACING):
        self.send = send
        self.attempts = attempts
        self.spacing = spacing
        self.pending: dict[tuple[Address, int], _Outstanding] = {}
        self.acked: list[tuple[Address, ControlMessage, Ack]] = []
        self.flagged: list[tuple[Address, ControlMessage]] = []
        self._lock = threading.Lock()

    @staticmethod
    def ref_of(msg: ControlMessage) -> int:
        if isinstance(msg, (QualityNotify, PolicyUpdate)):
            return msg.stream_id
        if isinstance(msg, SinkRegister):
            return msg.process_id
        return 0

    def submit(self, msg: ControlMessage, addr: Address, now: float) -> None:
        addr = tuple(addr)
        payload = encode(msg)
        with self._lock:
            self.pending[(addr, self.ref_of(msg))] = _Outstanding(msg, payload, 1, now + self.spacing)
        self.send(payload, addr)

    def on_ack(self, ack: Ack, addr: Address) -> ControlMessage | None:
        """Match an Ack; returns the message it settles, or None if stale."""
        key = (tuple(addr), ack.ref)
        with self._lock:
            out = self.pending.get(key)
            if out is None or int(out.msg.type) != ack.acked_type:
                return None
            del self.pending[key]
            self.acked.append((key[0], out.msg, ack))
        return out.msg

    def tick(self, now: float) -> int:
        resend = []
        with self._lock:
            for key, out in list(self.pending.items()):
                if now < out.due:
                    continue
                if out.attempts >= self.attempts:
                    del self.pending[key]
                    self.flagged.append((key[0], out.msg))
                    log.warning("flagging %s: %s unacknowledged after %d attempts",
                                key[0], out.msg, self.attempts)
                    continue
                out.attempts += 1
                out.due = now + self.spacing
                resend.append((out.payload, key[0]))
        for payload, addr in resend:
            self.send(payload, addr)
        return len(resend)

    @property
    def idle(self) -> bool:
        return not self.pending


@dataclass
class _Outstanding:
    msg: ControlMessage
    payload: bytes
    attempts: int
    due: float


def request(msg: ControlMessage, addr: Address, timeout: float = RETRY_SPACING,
            attempts: int = RETRY_ATTEMPTS, bind: Address = ("127.0.0.1", 0)) -> Ack | None:
    """One-shot client call over a private socket: send, await Ack, retry."""
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
        sock.bind(bind)
        sock.settimeout(timeout)
        payload = encode(msg)
        for _ in range(attempts):
            sock.sendto(payload, addr)
            deadline = time.monotonic() + timeout
            while time.monotonic() < deadline:
                try:
                    data, _ = sock.recvfrom(2048)
                except socket.timeout:
                    break
                try:
                    reply = decode(data)
                except DecodeError:
                    continue
                if isinstance(reply, Ack) and reply.acked_type == msg.type:
                    return reply
    return None
