"""Sensor side: suppress differential packets down to the notified quality.

The sensor runs the same classifier as the edge. A quality notification is
latched and only takes effect at the next frame start, so a frame is never
thinned under two different keep fractions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from edgecast.control import ControlMessage, PolicyUpdate, QualityNotify, decode
from edgecast.errors import EdgecastError
from edgecast.metrics import FlowCounters
from edgecast.qoc import Q_FULL, StreamQuality
from edgecast.suppression import DiffusionSlot
from edgecast.synthetic import Frame, SyntheticSpec, synthetic_frames
from edgecast.ts import (
    MAX_UNITS_PER_DATAGRAM,
    TS_PACKET_SIZE,
    Classifier,
    FrameClass,
    iter_units,
    parse_ts_packet,
)

_UNSET = object()


class UnknownStream(EdgecastError):
    pass


@dataclass(frozen=True)
class StreamSource:
    """Either a synthetic stream or a raw TS capture to replay."""

    stream_id: int
    synthetic: SyntheticSpec | None = None
    replay_path: str | None = None
    video_pids: frozenset = frozenset()
    fps: float = 30.0

    def __post_init__(self) -> None:
        if (self.synthetic is None) == (self.replay_path is None):
            raise ValueError("a source is either synthetic or a replay file")
        pids = self.synthetic.video_pids if self.synthetic is not None else self.video_pids
        object.__setattr__(self, "video_pids", frozenset(pids))
        if self.synthetic is not None:
            object.__setattr__(self, "fps", self.synthetic.fps)

    def frames(self, count: int | None = None) -> Iterator[Frame]:
        if self.synthetic is not None:
            return synthetic_frames(self.synthetic, count)
        return replay_frames(Path(self.replay_path).read_bytes(), self.video_pids)


def replay_frames(data: bytes, video_pids: Iterable[int]) -> Iterator[Frame]:
    """Cut a capture into frames at each video PUSI; leading packets form frame -1."""
    classifier = Classifier(video_pids)
    current: list[bytes] = []
    cls = FrameClass.NON_VIDEO
    index = -1
    for unit in iter_units(data):
        pkt = parse_ts_packet(unit)
        pcls = classifier.classify(pkt)
        if pkt.pusi and pkt.pid in classifier.video_pids:
            if current:
                yield Frame(index, cls, tuple(current))
            index += 1
            cls = pcls
            current = []
        current.append(bytes(unit))
    if current:
        yield Frame(index, cls, tuple(current))


@dataclass
class SensorQuality:
    """Quality state of one sensor stream.

    ``q_eff`` None means nobody consumes the stream and nothing is sent.
    """

    stream_id: int
    q_eff: StreamQuality | None = Q_FULL
    slot: DiffusionSlot = field(default_factory=DiffusionSlot)
    pending: object = _UNSET
    notifications: int = 0

    @property
    def paused(self) -> bool:
        return self.q_eff is None

    @property
    def loss_tolerance(self) -> float:
        return 0.0 if self.q_eff is None else 1.0 - self.q_eff.differential_keep

    def latch(self) -> bool:
        """Apply a pending notification; call only at a frame boundary."""
        if self.pending is _UNSET:
            return False
        self.q_eff = self.pending
        self.pending = _UNSET
        return True


def handle_quality_notify(quality: SensorQuality, msg: ControlMessage | bytes) -> SensorQuality:
    """Stage a new effective quality; it applies at the next frame start.

    A PolicyUpdate with no egresses for this stream pauses it.
    """
    if isinstance(msg, (bytes, bytearray, memoryview)):
        msg = decode(msg)
    if not isinstance(msg, (QualityNotify, PolicyUpdate)):
        raise TypeError(f"sensor cannot handle {type(msg).__name__}")
    if msg.stream_id != quality.stream_id:
        raise UnknownStream(f"stream {msg.stream_id} is not served here ({quality.stream_id})")
    if isinstance(msg, QualityNotify):
        quality.pending = StreamQuality(msg.keep)
    elif not msg.egresses:
        quality.pending = None
    else:
        raise TypeError("a PolicyUpdate sent to a sensor must carry no egresses")
    quality.notifications += 1
    return quality


def sensor_control(units: Iterable, quality: SensorQuality, video_pids: Iterable[int] = (),
                   classifier: Classifier | None = None,
                   counters: FlowCounters | None = None) -> list:
    """Filter one sequence of TS units; returns the units to transmit.

    Reference and non-video packets always pass; differential packets are
    dropped at rate ``1 - keep`` by error diffusion.
    """
    classifier = classifier if classifier is not None else Classifier(video_pids)
    out = []
    slot = quality.slot
    for unit in units:
        pkt = parse_ts_packet(unit)
        if pkt.pusi and pkt.pid in classifier.video_pids:
            quality.latch()
        cls = classifier.classify(pkt)
        if counters is not None:
            counters.packets_in[cls] += 1
        if quality.q_eff is None:
            if counters is not None:
                counters.suppressed += 1
            continue
        if cls is FrameClass.DIFFERENTIAL and slot.step(quality.loss_tolerance):
            if counters is not None:
                counters.suppressed += 1
            continue
        if counters is not None:
            counters.packets_out[cls] += 1
        out.append(unit)
    return out


def frame_datagrams(units: list, per_datagram: int = MAX_UNITS_PER_DATAGRAM) -> list[bytes]:
    """Pack units k at a time (k <= 7) into datagram payloads."""
    if not 1 <= per_datagram <= MAX_UNITS_PER_DATAGRAM:
        raise ValueError(f"per_datagram must be in [1, {MAX_UNITS_PER_DATAGRAM}]")
    return [b"".join(units[i:i + per_datagram]) for i in range(0, len(units), per_datagram)]


class SensorPipeline:
    """Frame-at-a-time transmit logic shared by the UDP and simulated runners."""

    def __init__(self, source: StreamSource, counters: FlowCounters | None = None,
                 per_datagram: int = MAX_UNITS_PER_DATAGRAM):
        self.source = source
        self.quality = SensorQuality(source.stream_id)
        self.classifier = Classifier(source.video_pids)
        self.counters = counters if counters is not None else FlowCounters()
        self.per_datagram = per_datagram

    def notify(self, msg: ControlMessage | bytes) -> None:
        handle_quality_notify(self.quality, msg)

    def frame(self, frame: Frame, now: float) -> list[bytes]:
        """Datagrams to send for one frame (empty while paused)."""
        # every frame start is a boundary, including the PSI pseudo-frame
        self.quality.latch()
        units = sensor_control(frame.packets, self.quality, classifier=self.classifier,
                               counters=self.counters)
        datagrams = frame_datagrams(units, self.per_datagram) if units else []
        if datagrams:
            c = self.counters
            c.datagrams_out += len(datagrams)
            c.mark(now)
            c.windows.add(len(units) * TS_PACKET_SIZE, now)
        return datagrams
