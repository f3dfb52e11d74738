"""MPEG-TS header parsing and frame-class inspection.

Only the 4-byte header, the adaptation field and, on the first packet of a
video PES unit, the PES/NAL headers are ever read. Everything else in the
payload is opaque.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass
from typing import Iterable, Union

from edgecast.errors import EdgecastError

TS_PACKET_SIZE = 188
SYNC_BYTE = 0x47
MAX_UNITS_PER_DATAGRAM = 7

PAT_PID = 0x0000
NULL_PID = 0x1FFF

# H.264 nal_unit_type values
NAL_SLICE = 1
NAL_IDR = 5
NAL_SEI = 6
NAL_SPS = 7
NAL_PPS = 8
NAL_AUD = 9

START_CODE = b"\x00\x00\x01"

Buffer = Union[bytes, bytearray, memoryview]


class TsError(EdgecastError):
    pass


class SyncLoss(TsError):
    """Byte 0 of a packet is not 0x47."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class Malformed(TsError):
    pass


class BadFraming(TsError):
    pass


class FrameClass(enum.IntEnum):
    # int-valued so counters can be plain lists indexed by class
    REFERENCE = 0
    DIFFERENTIAL = 1
    NON_VIDEO = 2
    UNKNOWN = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @property
    def suppressible(self) -> bool:
        return self is FrameClass.DIFFERENTIAL


@dataclass(slots=True, eq=False)
class TsPacket:
    """One parsed 188-byte transport stream unit.

    ``raw`` may be a memoryview into a larger datagram; it is never copied
    by the parser.
    """

    raw: Buffer
    transport_error: bool
    pusi: bool
    pid: int
    adaptation_field_control: int
    continuity_counter: int
    random_access: bool | None
    payload_offset: int | None

    @property
    def sync_byte(self) -> int:
        return self.raw[0]

    @property
    def has_payload(self) -> bool:
        return self.payload_offset is not None

    @property
    def payload(self) -> bytes:
        if self.payload_offset is None:
            return b""
        return bytes(self.raw[self.payload_offset:])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TsPacket):
            return NotImplemented
        return bytes(self.raw) == bytes(other.raw)

    def __repr__(self) -> str:
        return (
            f"TsPacket(pid=0x{self.pid:04X}, pusi={self.pusi}, "
            f"afc={self.adaptation_field_control}, cc={self.continuity_counter})"
        )


def parse_ts_packet(raw: Buffer) -> TsPacket:
    if len(raw) != TS_PACKET_SIZE:
        raise Malformed(f"TS packet must be {TS_PACKET_SIZE} bytes, got {len(raw)}")
    if raw[0] != SYNC_BYTE:
        raise SyncLoss(f"sync byte 0x{raw[0]:02X} != 0x47")
    b1 = raw[1]
    b3 = raw[3]
    afc = (b3 >> 4) & 0x3
    random_access = None
    payload_offset = None
    if afc == 1:
        payload_offset = 4
    elif afc & 0x2:
        af_len = raw[4]
        if 5 + af_len > TS_PACKET_SIZE:
            raise Malformed(f"adaptation field length {af_len} overruns packet")
        random_access = bool(raw[5] & 0x40) if af_len else False
        if afc == 3:
            payload_offset = 5 + af_len
    return TsPacket(
        raw,
        bool(b1 & 0x80),
        bool(b1 & 0x40),
        ((b1 & 0x1F) << 8) | raw[2],
        afc,
        b3 & 0x0F,
        random_access,
        payload_offset,
    )


def scan_datagram(payload: Buffer) -> list[TsPacket]:
    """Split a datagram into TS packets by jumping from header to header."""
    size = len(payload)
    if size == 0 or size % TS_PACKET_SIZE:
        raise BadFraming(f"datagram length {size} is not a positive multiple of 188")
    view = memoryview(payload)
    packets = []
    for index, start in enumerate(range(0, size, TS_PACKET_SIZE)):
        try:
            packets.append(parse_ts_packet(view[start:start + TS_PACKET_SIZE]))
        except SyncLoss as exc:
            raise SyncLoss(f"packet {index}: {exc}", index=index) from None
    return packets


def iter_units(data: Buffer) -> Iterable[memoryview]:
    view = memoryview(data)
    for start in range(0, len(view) - TS_PACKET_SIZE + 1, TS_PACKET_SIZE):
        yield view[start:start + TS_PACKET_SIZE]


def classify_payload(payload: bytes) -> FrameClass:
    """Classify the first packet of a PES unit by its leading NAL unit.

    Search is bounded to this one packet's payload; if no video PES header
    or no slice/parameter-set NAL is found, the answer is UNKNOWN.
    """
    pos = payload.find(START_CODE)
    while pos >= 0:
        if pos + 9 > len(payload):
            return FrameClass.UNKNOWN
        if 0xE0 <= payload[pos + 3] <= 0xEF:
            break
        pos = payload.find(START_CODE, pos + 1)
    else:
        return FrameClass.UNKNOWN

    es_start = pos + 9 + payload[pos + 8]
    pos = payload.find(START_CODE, es_start)
    while 0 <= pos < len(payload) - 3:
        nal_type = payload[pos + 3] & 0x1F
        if nal_type in (NAL_IDR, NAL_SPS, NAL_PPS):
            return FrameClass.REFERENCE
        if nal_type == NAL_SLICE:
            return FrameClass.DIFFERENTIAL
        pos = payload.find(START_CODE, pos + 3)
    return FrameClass.UNKNOWN


@dataclass(slots=True)
class PidState:
    pid: int
    is_video: bool
    current_class: FrameClass = FrameClass.UNKNOWN
    last_continuity: int | None = None
    frame_index: int = 0
    continuity_gaps: int = 0
    unclassified: int = 0

    def __post_init__(self) -> None:
        if not self.is_video:
            self.current_class = FrameClass.NON_VIDEO

    def reset(self) -> None:
        self.current_class = FrameClass.UNKNOWN if self.is_video else FrameClass.NON_VIDEO
        self.last_continuity = None


def _advance(state: PidState, pkt: TsPacket) -> FrameClass:
    # continuity is monitored only; it never feeds into the class
    cc = pkt.continuity_counter
    last = state.last_continuity
    if last is not None:
        if pkt.payload_offset is not None:
            if cc != (last + 1) & 0x0F and cc != last:
                state.continuity_gaps += 1
        elif cc != last:
            state.continuity_gaps += 1
    state.last_continuity = cc

    if not pkt.pusi:
        return state.current_class
    state.frame_index += 1
    if not state.is_video:
        return state.current_class

    if pkt.random_access:
        cls = FrameClass.REFERENCE
    elif pkt.payload_offset is None:
        cls = FrameClass.UNKNOWN
    else:
        cls = classify_payload(bytes(pkt.raw[pkt.payload_offset:]))
    if cls is FrameClass.UNKNOWN:
        state.unclassified += 1
    state.current_class = cls
    return cls


def classify_packet(state: PidState, pkt: TsPacket) -> tuple[FrameClass, PidState]:
    """Pure classification step: returns the class and a new state."""
    if pkt.pid != state.pid:
        raise ValueError(f"packet PID 0x{pkt.pid:04X} does not match state PID 0x{state.pid:04X}")
    new_state = copy.copy(state)
    return _advance(new_state, pkt), new_state


class Classifier:
    """Per-ingest-path classifier holding one PidState per PID seen."""

    def __init__(self, video_pids: Iterable[int] = ()):
        self.video_pids = frozenset(video_pids)
        self.states: dict[int, PidState] = {}

    def state_for(self, pid: int) -> PidState:
        state = self.states.get(pid)
        if state is None:
            state = self.states[pid] = PidState(pid, pid in self.video_pids)
        return state

    def classify(self, pkt: TsPacket) -> FrameClass:
        state = self.states.get(pkt.pid)
        if state is None:
            state = self.state_for(pkt.pid)
        return _advance(state, pkt)

    @property
    def continuity_gaps(self) -> int:
        return sum(s.continuity_gaps for s in self.states.values())

    @property
    def unclassified(self) -> int:
        return sum(s.unclassified for s in self.states.values())

    def reset(self) -> None:
        for state in self.states.values():
            state.reset()


def classify_stream(data: Buffer, video_pids: Iterable[int]) -> list[tuple[TsPacket, FrameClass]]:
    """Classify a raw capture of concatenated packets (for replay and tests)."""
    classifier = Classifier(video_pids)
    out = []
    for unit in iter_units(data):
        pkt = parse_ts_packet(unit)
        out.append((pkt, classifier.classify(pkt)))
    return out


# stream_type values that carry video (MPEG-1/2, MPEG-4 part 2, H.264, HEVC)
VIDEO_STREAM_TYPES = frozenset({0x01, 0x02, 0x10, 0x1B, 0x24})


def _section(pkt: TsPacket) -> bytes | None:
    if not pkt.pusi or pkt.payload_offset is None:
        return None
    payload = bytes(pkt.raw[pkt.payload_offset:])
    start = 1 + payload[0]
    if start + 3 > len(payload):
        return None
    length = ((payload[start + 1] & 0x0F) << 8) | payload[start + 2]
    return payload[start:start + 3 + length]


def discover_video_pids(data: Buffer) -> frozenset:
    """Find video PIDs from the PAT and PMTs (single-packet sections only)."""
    pmt_pids: set[int] = set()
    video: set[int] = set()
    seen_pmts: set[int] = set()
    for unit in iter_units(data):
        try:
            pkt = parse_ts_packet(unit)
        except TsError:
            continue
        if pkt.pid == PAT_PID and not pmt_pids:
            sec = _section(pkt)
            if sec is None or len(sec) < 12 or sec[0] != 0x00:
                continue
            for off in range(8, len(sec) - 4, 4):
                program = (sec[off] << 8) | sec[off + 1]
                if program:
                    pmt_pids.add(((sec[off + 2] & 0x1F) << 8) | sec[off + 3])
        elif pkt.pid in pmt_pids and pkt.pid not in seen_pmts:
            sec = _section(pkt)
            if sec is None or len(sec) < 16 or sec[0] != 0x02:
                continue
            seen_pmts.add(pkt.pid)
            info_len = ((sec[10] & 0x0F) << 8) | sec[11]
            off = 12 + info_len
            while off + 5 <= len(sec) - 4:
                stream_type = sec[off]
                pid = ((sec[off + 1] & 0x1F) << 8) | sec[off + 2]
                es_len = ((sec[off + 3] & 0x0F) << 8) | sec[off + 4]
                if stream_type in VIDEO_STREAM_TYPES:
                    video.add(pid)
                off += 5 + es_len
            if seen_pmts == pmt_pids:
                break
    return frozenset(video)
