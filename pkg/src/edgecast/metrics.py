"""Counters, quality and CPU proxies, and report emission.

Picture quality is approximated by the decodable-frame ratio: a frame
counts only if all of its packets arrived and so did every frame back to
the reference frame it depends on. CPU cost is a linear model over packet
counters.
"""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from edgecast.synthetic import FrameTag, SyntheticSpec, expected_frames, read_tag
from edgecast.ts import TS_PACKET_SIZE, FrameClass

N_CLASSES = len(FrameClass)
WINDOW_SECONDS = 1.0


def _by_class(counts: Sequence[int]) -> dict[str, int]:
    return {cls.label: counts[cls] for cls in FrameClass}


class WindowedBytes:
    """Byte totals in fixed 1-second windows measured from ``origin``."""

    def __init__(self, origin: float = 0.0, width: float = WINDOW_SECONDS):
        self.origin = origin
        self.width = width
        self.windows: dict[int, int] = {}

    def add(self, nbytes: int, now: float) -> None:
        key = int((now - self.origin) // self.width)
        self.windows[key] = self.windows.get(key, 0) + nbytes

    def bitrates(self) -> list[float]:
        if not self.windows:
            return []
        last = max(self.windows)
        return [self.windows.get(k, 0) * 8 / self.width for k in range(0, last + 1)]


@dataclass
class FlowCounters:
    """One sensor's transmit path, or one stream's edge ingress."""

    packets_in: list = field(default_factory=lambda: [0] * N_CLASSES)
    packets_out: list = field(default_factory=lambda: [0] * N_CLASSES)
    suppressed: int = 0
    unknown_class: int = 0
    continuity_gaps: int = 0
    orphaned: int = 0
    datagrams_out: int = 0
    first_time: float | None = None
    last_time: float | None = None
    windows: WindowedBytes = field(default_factory=WindowedBytes)

    @property
    def total_in(self) -> int:
        return sum(self.packets_in)

    @property
    def total_out(self) -> int:
        return sum(self.packets_out)

    @property
    def bytes_in(self) -> int:
        return TS_PACKET_SIZE * self.total_in

    @property
    def bytes_out(self) -> int:
        return TS_PACKET_SIZE * self.total_out

    def mark(self, now: float) -> None:
        if self.first_time is None:
            self.first_time = now
        self.last_time = now

    def realized_keep(self) -> float | None:
        n = self.packets_in[FrameClass.DIFFERENTIAL]
        if not n:
            return None
        return self.packets_out[FrameClass.DIFFERENTIAL] / n

    def to_dict(self) -> dict:
        return {
            "packets_in": _by_class(self.packets_in),
            "packets_out": _by_class(self.packets_out),
            "bytes_in": self.bytes_in,
            "bytes_out": self.bytes_out,
            "suppressed": self.suppressed,
            "unknown_class": self.unknown_class,
            "continuity_gaps": self.continuity_gaps,
            "orphaned": self.orphaned,
            "datagrams_out": self.datagrams_out,
            "realized_differential_keep": self.realized_keep(),
            "window_bitrates": self.windows.bitrates(),
        }


@dataclass
class LinkCounters:
    """Accounting for one (stream, egress) pair at the edge.

    ``cloned`` counts forward decisions; a cloned unit is then either
    emitted, dropped for backpressure, or still pending in a batch.
    """

    packets_in: list = field(default_factory=lambda: [0] * N_CLASSES)
    cloned: list = field(default_factory=lambda: [0] * N_CLASSES)
    policy_suppressed: int = 0
    overflow_dropped: int = 0
    emitted: int = 0
    datagrams_out: int = 0
    windows: WindowedBytes = field(default_factory=WindowedBytes)

    @property
    def total_in(self) -> int:
        return sum(self.packets_in)

    @property
    def forwarded(self) -> int:
        return self.emitted

    @property
    def pending(self) -> int:
        return sum(self.cloned) - self.emitted - self.overflow_dropped

    @property
    def bytes_out(self) -> int:
        return TS_PACKET_SIZE * self.emitted

    def realized_drop(self) -> float | None:
        n = self.packets_in[FrameClass.DIFFERENTIAL]
        if not n:
            return None
        return self.policy_suppressed / n

    def conserved(self) -> bool:
        """packets in == forwarded + suppressed + overflow-dropped (+ still batched)."""
        return (self.pending >= 0
                and self.total_in == sum(self.cloned) + self.policy_suppressed)

    def to_dict(self) -> dict:
        return {
            "packets_in": _by_class(self.packets_in),
            "cloned": _by_class(self.cloned),
            "forwarded": self.emitted,
            "bytes_out": self.bytes_out,
            "policy_suppressed": self.policy_suppressed,
            "overflow_dropped": self.overflow_dropped,
            "datagrams_out": self.datagrams_out,
            "realized_differential_drop": self.realized_drop(),
            "window_bitrates": self.windows.bitrates(),
        }


class Counters:
    def __init__(self, origin: float = 0.0):
        self.origin = origin
        self.sensors: dict[int, FlowCounters] = {}
        self.ingress: dict[int, FlowCounters] = {}
        self.links: dict[tuple[int, int], LinkCounters] = {}
        self.sinks: dict[tuple[int, int], "SinkCounters"] = {}

    def sensor(self, stream_id: int) -> FlowCounters:
        c = self.sensors.get(stream_id)
        if c is None:
            c = self.sensors[stream_id] = FlowCounters(windows=WindowedBytes(self.origin))
        return c

    def edge(self, stream_id: int) -> FlowCounters:
        c = self.ingress.get(stream_id)
        if c is None:
            c = self.ingress[stream_id] = FlowCounters(windows=WindowedBytes(self.origin))
        return c

    def link(self, stream_id: int, egress_id: int) -> LinkCounters:
        key = (stream_id, egress_id)
        c = self.links.get(key)
        if c is None:
            c = self.links[key] = LinkCounters(windows=WindowedBytes(self.origin))
        return c

    def sink(self, stream_id: int, egress_id: int) -> "SinkCounters":
        key = (stream_id, egress_id)
        c = self.sinks.get(key)
        if c is None:
            c = self.sinks[key] = SinkCounters()
        return c


# ------------------------------------------------------------ decodability


@dataclass
class FrameRecord:
    index: int
    cls: FrameClass
    expected: int
    received: int = 0

    @property
    def delivered(self) -> bool:
        return self.received >= self.expected


def decodable_flags(frames: Iterable[FrameRecord]) -> list[bool]:
    flags = []
    chain = False
    for frame in sorted(frames, key=lambda f: f.index):
        if frame.cls is FrameClass.REFERENCE:
            chain = frame.delivered
        else:
            chain = chain and frame.delivered
        flags.append(chain)
    return flags


def decodable_ratio(frames: Iterable[FrameRecord]) -> float:
    flags = decodable_flags(frames)
    if not flags:
        raise ValueError("empty frame ledger")
    return sum(flags) / len(flags)


class FrameLedger:
    """Receiver-side frame ledger rebuilt from the synthetic frame tags."""

    def __init__(self):
        self.frames: dict[int, FrameRecord] = {}
        self.untagged = 0

    def observe(self, unit) -> FrameTag | None:
        tag = read_tag(unit)
        if tag is None:
            self.untagged += 1
            return None
        rec = self.frames.get(tag.frame_index)
        if rec is None:
            rec = self.frames[tag.frame_index] = FrameRecord(tag.frame_index, tag.cls, tag.count)
        rec.received += 1
        return tag

    def finalize(self, expected: Iterable[tuple[int, FrameClass, int]]) -> list[FrameRecord]:
        """Merge with the sender's frame list so wholly lost frames count too."""
        out = []
        for index, cls, count in expected:
            rec = self.frames.get(index)
            out.append(FrameRecord(index, cls, count, rec.received if rec else 0))
        return out


@dataclass
class SinkCounters:
    received: int = 0
    datagrams: int = 0
    ledger: FrameLedger = field(default_factory=FrameLedger)


# ------------------------------------------------------ strategy comparison


def packet_layout(spec: SyntheticSpec) -> list[tuple[int, FrameClass]]:
    """(frame index, class) of every video packet in transmission order."""
    layout = []
    for index, cls, count in expected_frames(spec):
        layout += [(index, cls)] * count
    return layout


def ratio_after_drops(spec: SyntheticSpec, dropped: Iterable[int],
                      layout: list[tuple[int, FrameClass]] | None = None) -> float:
    layout = layout if layout is not None else packet_layout(spec)
    records = {i: FrameRecord(i, cls, n) for i, cls, n in expected_frames(spec)}
    dropped = set(dropped)
    for pos, (index, _) in enumerate(layout):
        if pos not in dropped:
            records[index].received += 1
    return decodable_ratio(records.values())


def uniform_drop_pattern(layout: Sequence[tuple[int, FrameClass]], n_drop: int,
                         rng: random.Random) -> set[int]:
    return set(rng.sample(range(len(layout)), n_drop))


def selective_drop_pattern(layout: Sequence[tuple[int, FrameClass]], n_drop: int,
                           rng: random.Random) -> set[int]:
    """Spend the loss budget on differential packets first, then on the rest."""
    diff = [i for i, (_, cls) in enumerate(layout) if cls is FrameClass.DIFFERENTIAL]
    if n_drop <= len(diff):
        return set(rng.sample(diff, n_drop))
    rest = [i for i, (_, cls) in enumerate(layout) if cls is not FrameClass.DIFFERENTIAL]
    return set(diff) | set(rng.sample(rest, n_drop - len(diff)))


def compare_strategies(spec: SyntheticSpec, loss_fraction: float,
                       seeds: Iterable[int] = range(10)) -> tuple[float, float]:
    """Mean decodable ratio under uniform and differential-first dropping.

    Both strategies remove the same number of video packets,
    ``round(loss_fraction * n)``.
    """
    if not 0.0 <= loss_fraction <= 1.0:
        raise ValueError("loss_fraction must be in [0, 1]")
    layout = packet_layout(spec)
    n_drop = round(loss_fraction * len(layout))
    uniform, selective = [], []
    for seed in seeds:
        rng = random.Random(seed)
        uniform.append(ratio_after_drops(spec, uniform_drop_pattern(layout, n_drop, rng), layout))
        rng = random.Random(seed)
        selective.append(ratio_after_drops(spec, selective_drop_pattern(layout, n_drop, rng), layout))
    if not uniform:
        raise ValueError("need at least one seed")
    return sum(uniform) / len(uniform), sum(selective) / len(selective)


# ----------------------------------------------------------------- CPU proxy


@dataclass(frozen=True)
class CpuProxy:
    """Deterministic stand-in for edge CPU time, in abstract cost units."""

    c_parse: float = 1.0
    c_decide: float = 0.25
    c_clone: float = 0.5

    def cost(self, ingested: int, decisions: int, clones: int) -> dict[str, float]:
        parts = {
            "parse": self.c_parse * ingested,
            "decide": self.c_decide * decisions,
            "clone": self.c_clone * clones,
        }
        parts["total"] = parts["parse"] + parts["decide"] + parts["clone"]
        return parts

    def from_counters(self, counters: Counters) -> dict[str, float]:
        ingested = sum(c.total_in for c in counters.ingress.values())
        decisions = sum(c.total_in for c in counters.links.values())
        clones = sum(sum(c.cloned) for c in counters.links.values())
        return self.cost(ingested, decisions, clones)


# -------------------------------------------------------------------- report


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def emit_report(counters: Counters, config: Mapping, *, cpu: CpuProxy = CpuProxy(),
                configured: Mapping | None = None, predictions: Mapping | None = None,
                expected: Mapping[int, list] | None = None, duration: float | None = None) -> dict:
    """Assemble the run report.

    ``configured`` carries ``{"keep": {stream: keep}, "delta": {(stream, egress): delta}}``;
    ``expected`` maps a stream, or a (stream, egress) pair, to its
    ground-truth frame list for the decodability proxy; ``duration`` is the measurement window in seconds.
    """
    configured = configured or {}
    keeps = configured.get("keep", {})
    deltas = configured.get("delta", {})

    sensors = []
    measured_saved = 0.0
    for stream_id, c in sorted(counters.sensors.items()):
        entry = {"stream_id": stream_id, **c.to_dict(), "configured_keep": keeps.get(stream_id)}
        if duration:
            entry["bitrate_in"] = c.bytes_in * 8 / duration
            entry["bitrate_out"] = c.bytes_out * 8 / duration
            measured_saved += (c.bytes_in - c.bytes_out) * 8 / duration
        sensors.append(entry)

    edges = [{"stream_id": s, **c.to_dict()} for s, c in sorted(counters.ingress.items())]

    egresses = []
    decodable = {}
    for (stream_id, egress_id), c in sorted(counters.links.items()):
        entry = {"stream_id": stream_id, "egress_id": egress_id, **c.to_dict(),
                 "configured_delta": deltas.get((stream_id, egress_id))}
        sink = counters.sinks.get((stream_id, egress_id))
        ratio = None
        if sink is not None:
            entry["sink_received"] = sink.received
            frames = None
            if expected:
                frames = expected.get((stream_id, egress_id), expected.get(stream_id))
            if frames:
                ratio = decodable_ratio(sink.ledger.finalize(frames))
        entry["decodable_ratio"] = ratio
        decodable[f"{stream_id}:{egress_id}"] = ratio
        egresses.append(entry)

    preds = dict(predictions or {})
    if duration:
        preds["measured_saved"] = measured_saved if counters.sensors else None

    report = {
        "config": dict(config),
        "sensors": sensors,
        "edges": edges,
        "egresses": egresses,
        "proxies": {"cpu": cpu.from_counters(counters), "decodable_ratio": decodable},
        "predictions": preds,
    }
    return _clean(report)


def write_report(report: Mapping, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def write_plot_csv(rows: Iterable[tuple[float, str, float]], path: str | Path) -> Path:
    """Curve data as (x, series, value) rows."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "series", "value"])
        for x, series, value in rows:
            writer.writerow([x, series, value])
    return path


def strategy_curve(spec: SyntheticSpec, losses: Iterable[float],
                   seeds: Iterable[int] = range(10)) -> list[tuple[float, str, float]]:
    seeds = list(seeds)
    rows = []
    for loss in losses:
        uniform, selective = compare_strategies(spec, loss, seeds)
        rows.append((loss, "uniform", uniform))
        rows.append((loss, "selective", selective))
    return rows
