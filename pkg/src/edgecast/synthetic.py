"""Deterministic synthetic H.264-in-MPEG-TS streams.

A stream is one PAT and one PMT packet followed by GOPs: an IDR frame
(AUD, SPS, PPS, IDR slice) then ``gop - 1`` non-IDR frames. Each video
packet ends with a 12-byte frame tag so a receiver can rebuild the frame
ledger without access to the sender::

    frame_index u32 | position u16 | count u16 | kind u8 | b"FTG"

The tag sits at the tail of the payload, after any PES/NAL headers, so it
never affects classification.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from typing import Iterator

from edgecast.qoc import RateModel
from edgecast.ts import SYNC_BYTE, TS_PACKET_SIZE, FrameClass

TAG = struct.Struct(">IHHB3s")
TAG_MAGIC = b"FTG"
TAG_REFERENCE = 1
TAG_DIFFERENTIAL = 2

PTS_CLOCK = 90_000

_AUD = b"\x00\x00\x00\x01\x09\xf0"
_SPS = b"\x00\x00\x00\x01\x67\x42\xc0\x1e\xd9\x00\xa0\x2f\xf9\x70\x11\x00"
_PPS = b"\x00\x00\x00\x01\x68\xce\x3c\x80"
_IDR = b"\x00\x00\x00\x01\x65\x88\x84\x00"
_SLICE = b"\x00\x00\x00\x01\x41\x9a\x02\x04"


def _crc_table() -> list[int]:
    table = []
    for i in range(256):
        crc = i << 24
        for _ in range(8):
            crc = ((crc << 1) ^ 0x04C11DB7) if crc & 0x80000000 else (crc << 1)
        table.append(crc & 0xFFFFFFFF)
    return table


_CRC_TABLE = _crc_table()


def crc32_mpeg2(data: bytes) -> int:
    crc = 0xFFFFFFFF
    for byte in data:
        crc = ((crc << 8) & 0xFFFFFFFF) ^ _CRC_TABLE[((crc >> 24) ^ byte) & 0xFF]
    return crc


@dataclass(frozen=True)
class SyntheticSpec:
    gop: int = 12
    packets_per_frame: int = 3
    reference_multiplier: float = 1.0
    fps: float = 30.0
    frames: int = 24
    video_pid: int = 0x0100
    pmt_pid: int = 0x1000
    program_number: int = 1
    seed: int = 0
    random_access_flag: bool = False

    def __post_init__(self) -> None:
        if self.gop < 1:
            raise ValueError("GOP length must be at least 1")
        if self.packets_per_frame < 1:
            raise ValueError("packets_per_frame must be at least 1")
        if self.reference_multiplier <= 0 or self.fps <= 0 or self.frames < 0:
            raise ValueError("reference_multiplier and fps must be positive, frames nonnegative")
        if len({self.video_pid, self.pmt_pid, 0}) != 3:
            raise ValueError("video, PMT and PAT PIDs must differ")

    @property
    def reference_packets(self) -> int:
        return max(1, round(self.packets_per_frame * self.reference_multiplier))

    def frame_class(self, index: int) -> FrameClass:
        return FrameClass.REFERENCE if index % self.gop == 0 else FrameClass.DIFFERENTIAL

    def frame_packets(self, index: int) -> int:
        if index % self.gop == 0:
            return self.reference_packets
        return self.packets_per_frame

    @property
    def video_pids(self) -> frozenset:
        return frozenset({self.video_pid})

    def rate_model(self) -> RateModel:
        """Steady-state bit rates (the one-off PAT/PMT pair is ignored)."""
        bits = TS_PACKET_SIZE * 8
        gops_per_second = self.fps / self.gop
        ref = self.reference_packets * bits * gops_per_second
        diff = (self.gop - 1) * self.packets_per_frame * bits * gops_per_second
        return RateModel(ref, diff)


@dataclass(frozen=True)
class Frame:
    """One access unit worth of packets; PSI uses index -1."""

    index: int
    cls: FrameClass
    packets: tuple[bytes, ...]


@dataclass(frozen=True)
class FrameTag:
    frame_index: int
    position: int
    count: int
    cls: FrameClass


def read_tag(unit) -> FrameTag | None:
    tail = bytes(unit[-TAG.size:])
    frame_index, position, count, kind, magic = TAG.unpack(tail)
    if magic != TAG_MAGIC:
        return None
    cls = FrameClass.REFERENCE if kind == TAG_REFERENCE else FrameClass.DIFFERENTIAL
    return FrameTag(frame_index, position, count, cls)


def _header(pid: int, pusi: bool, cc: int, adaptation: bytes | None = None) -> bytes:
    afc = 0x3 if adaptation is not None else 0x1
    head = bytes([
        SYNC_BYTE,
        (0x40 if pusi else 0) | (pid >> 8),
        pid & 0xFF,
        (afc << 4) | (cc & 0x0F),
    ])
    if adaptation is not None:
        head += bytes([len(adaptation)]) + adaptation
    return head


def _section(table_id: int, body: bytes) -> bytes:
    length = len(body) + 4
    head = bytes([table_id, 0xB0 | (length >> 8), length & 0xFF])
    crc = crc32_mpeg2(head + body)
    return head + body + struct.pack(">I", crc)


def _psi_packet(pid: int, section: bytes) -> bytes:
    payload = b"\x00" + section
    pkt = _header(pid, True, 0) + payload
    return pkt + b"\xff" * (TS_PACKET_SIZE - len(pkt))


def psi_packets(spec: SyntheticSpec) -> tuple[bytes, bytes]:
    pat = _section(0x00, struct.pack(">HBBBHH", 1, 0xC1, 0, 0,
                                     spec.program_number, 0xE000 | spec.pmt_pid))
    pmt = _section(0x02, struct.pack(">HBBBHH", spec.program_number, 0xC1, 0, 0,
                                     0xE000 | spec.video_pid, 0xF000)
                   + struct.pack(">BHH", 0x1B, 0xE000 | spec.video_pid, 0xF000))
    return _psi_packet(0, pat), _psi_packet(spec.pmt_pid, pmt)


def _pes_header(pts: int) -> bytes:
    pts_bytes = bytes([
        0x21 | ((pts >> 29) & 0x0E),
        (pts >> 22) & 0xFF,
        0x01 | ((pts >> 14) & 0xFE),
        (pts >> 7) & 0xFF,
        0x01 | ((pts << 1) & 0xFE),
    ])
    return b"\x00\x00\x01\xe0\x00\x00\x80\x80\x05" + pts_bytes


class _Builder:
    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.rng = random.Random(spec.seed)
        self.cc = 0

    def frame(self, index: int) -> Frame:
        spec = self.spec
        cls = spec.frame_class(index)
        count = spec.frame_packets(index)
        kind = TAG_REFERENCE if cls is FrameClass.REFERENCE else TAG_DIFFERENTIAL
        packets = []
        for position in range(count):
            first = position == 0
            adaptation = None
            lead = b""
            if first:
                if cls is FrameClass.REFERENCE and spec.random_access_flag:
                    adaptation = b"\x40"
                pts = int(index * PTS_CLOCK / spec.fps) & ((1 << 33) - 1)
                nals = _AUD + (_SPS + _PPS + _IDR if cls is FrameClass.REFERENCE else _SLICE)
                lead = _pes_header(pts) + nals
            head = _header(spec.video_pid, first, self.cc, adaptation)
            self.cc = (self.cc + 1) & 0x0F
            tag = TAG.pack(index & 0xFFFFFFFF, position, count, kind, TAG_MAGIC)
            filler = TS_PACKET_SIZE - len(head) - len(lead) - len(tag)
            packets.append(head + lead + self.rng.randbytes(filler) + tag)
        return Frame(index, cls, tuple(packets))


def synthetic_frames(spec: SyntheticSpec, frames: int | None = None) -> Iterator[Frame]:
    """PSI pseudo-frame first, then the video frames.

    ``frames`` overrides ``spec.frames``; a negative count never ends.
    """
    pat, pmt = psi_packets(spec)
    yield Frame(-1, FrameClass.NON_VIDEO, (pat, pmt))
    builder = _Builder(spec)
    index = 0
    limit = spec.frames if frames is None else frames
    while limit < 0 or index < limit:
        yield builder.frame(index)
        index += 1


def generate_synthetic(spec: SyntheticSpec) -> list[bytes]:
    return [pkt for frame in synthetic_frames(spec) for pkt in frame.packets]


def expected_frames(spec: SyntheticSpec, frames: int | None = None) -> list[tuple[int, FrameClass, int]]:
    """Ground-truth (index, class, packet count) for the video frames."""
    limit = spec.frames if frames is None else frames
    return [(i, spec.frame_class(i), spec.frame_packets(i)) for i in range(limit)]
