"""Quality/bandwidth arithmetic and the loss-to-detection lookup.

A stream's quality is one number: the fraction of differential-frame packets
that survive. Reference-frame and PSI packets are always retained, so the
bandwidth of a stream is affine in that fraction (see :class:`RateModel`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

from edgecast.errors import EdgecastError

UNIFORM = "uniform"
DIFFERENTIAL = "differential"
STRATEGIES = (UNIFORM, DIFFERENTIAL)

# largest loss percentage reported when every loss satisfies a threshold
MAX_LOSS_PERCENT = 100.0


class QocError(EdgecastError):
    pass


class EmptyRequirement(QocError):
    """No computation process uses the stream."""


class Infeasible(QocError):
    """A detection threshold cannot be met even at zero loss."""


@dataclass(frozen=True, order=True)
class StreamQuality:
    differential_keep: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.differential_keep <= 1.0:
            raise ValueError(f"differential_keep must be in [0, 1], got {self.differential_keep}")

    @property
    def loss_tolerance(self) -> float:
        return 1.0 - self.differential_keep

    @property
    def is_full(self) -> bool:
        return self.differential_keep == 1.0


Q_FULL = StreamQuality(1.0)


@dataclass(frozen=True)
class RateModel:
    """Bandwidth of one stream: ``S(Q) = ref_rate + Q.differential_keep * diff_rate``.

    ``ref_rate`` covers reference-frame and non-video packets, which are
    never suppressed. Rates are in bits per second.
    """

    ref_rate: float
    diff_rate: float

    def __post_init__(self) -> None:
        if self.ref_rate < 0 or self.diff_rate < 0:
            raise ValueError("rates must be nonnegative")

    def bandwidth(self, quality: StreamQuality = Q_FULL) -> float:
        return self.ref_rate + quality.differential_keep * self.diff_rate

    @property
    def full_rate(self) -> float:
        return self.ref_rate + self.diff_rate

    @property
    def differential_share(self) -> float:
        total = self.full_rate
        return self.diff_rate / total if total else 0.0


def bandwidth_full(rates: Sequence[RateModel], processes: int) -> float:
    """Cost of naive streaming: every process gets its own full-quality copy."""
    if not rates or processes < 1:
        raise ValueError("need at least one stream and one process")
    return processes * sum(r.bandwidth(Q_FULL) for r in rates)


def effective_quality(row: Iterable[StreamQuality]) -> StreamQuality:
    """Join of the requirements on one stream: keep whatever anyone needs."""
    keeps = [q.differential_keep for q in row]
    if not keeps:
        raise EmptyRequirement("no process uses this stream")
    return StreamQuality(max(keeps))


def bandwidth_saved(rates: Sequence[RateModel], q_eff: Sequence[StreamQuality]) -> float:
    if len(rates) != len(q_eff):
        raise ValueError("q_eff must have one entry per stream")
    full = sum(r.bandwidth(Q_FULL) for r in rates)
    eff = sum(r.bandwidth(q) for r, q in zip(rates, q_eff))
    return full - eff


@dataclass(frozen=True)
class DetectionRow:
    loss_percent: float
    uniform: float
    differential: float

    def detection(self, strategy: str) -> float:
        if strategy == UNIFORM:
            return self.uniform
        if strategy == DIFFERENTIAL:
            return self.differential
        raise ValueError(f"unknown strategy {strategy!r}")


@dataclass(frozen=True)
class DetectionTable:
    """Object-detection rate as a function of packet-loss percentage."""

    rows: tuple[DetectionRow, ...]

    def __post_init__(self) -> None:
        rows = self.rows
        if not rows:
            raise ValueError("detection table is empty")
        for prev, cur in zip(rows, rows[1:]):
            if cur.loss_percent <= prev.loss_percent:
                raise ValueError("loss percentages must be strictly increasing")
            if cur.uniform > prev.uniform or cur.differential > prev.differential:
                raise ValueError("detection rates must be nonincreasing in loss")
        for row in rows:
            if not (0 <= row.uniform <= 1 and 0 <= row.differential <= 1):
                raise ValueError("detection rates must lie in [0, 1]")
            if row.differential < row.uniform:
                raise ValueError("differential detection must dominate uniform detection")

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[float, float, float]]) -> "DetectionTable":
        return cls(tuple(DetectionRow(float(a), float(b), float(c)) for a, b, c in rows))

    @classmethod
    def load(cls, path: str | Path) -> "DetectionTable":
        """Read whitespace- or comma-separated ``loss uniform differential`` rows.

        Blank lines and ``#`` comments are ignored; a non-numeric first line
        is treated as a header.
        """
        rows = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.replace(",", " ").split()
            try:
                values = [float(f) for f in fields]
            except ValueError:
                if not rows:
                    continue
                raise ValueError(f"{path}:{lineno}: non-numeric row") from None
            if len(values) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(values)}")
            rows.append(values)
        return cls.from_rows(rows)

    def dump(self) -> str:
        lines = ["# loss_percent uniform differential"]
        lines += [f"{r.loss_percent} {r.uniform} {r.differential}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def points(self, strategy: str) -> list[tuple[float, float]]:
        return [(r.loss_percent, r.detection(strategy)) for r in self.rows]


DEFAULT_DETECTION_TABLE = DetectionTable.from_rows([
    (0.5, 0.95, 0.99),
    (1.0, 0.84, 0.96),
    (2.0, 0.46, 0.74),
    (5.0, 0.10, 0.40),
])


def detection_lookup(loss_percent: float, strategy: str,
                     table: DetectionTable = DEFAULT_DETECTION_TABLE) -> float:
    """Piecewise-linear interpolation, clamped to the first/last row."""
    if loss_percent < 0:
        raise ValueError("loss_percent must be nonnegative")
    pts = table.points(strategy)
    if loss_percent <= pts[0][0]:
        return pts[0][1]
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if loss_percent == x1:
            return y1
        if loss_percent < x1:
            return y0 + (y1 - y0) * (loss_percent - x0) / (x1 - x0)
    return pts[-1][1]


def max_tolerable_loss(threshold: float, strategy: str,
                       table: DetectionTable = DEFAULT_DETECTION_TABLE) -> float:
    """Largest loss percentage whose interpolated detection still meets ``threshold``.

    Returns ``MAX_LOSS_PERCENT`` when even the last row meets it, since the
    clamped lookup is then satisfied at every loss.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    pts = table.points(strategy)
    if threshold > pts[0][1]:
        raise Infeasible(
            f"detection threshold {threshold} exceeds {pts[0][1]} ({strategy}) at zero loss")
    if threshold <= pts[-1][1]:
        return MAX_LOSS_PERCENT
    k = max(i for i, (_, y) in enumerate(pts) if y >= threshold)
    (x0, y0), (x1, y1) = pts[k], pts[k + 1]
    if y0 == threshold:
        return x0
    return x0 + (y0 - threshold) * (x1 - x0) / (y0 - y1)


def keep_for_loss(loss_percent: float) -> float:
    """Differential keep fraction that realizes a tolerated loss percentage."""
    return min(1.0, max(0.0, 1.0 - loss_percent / 100.0))


@dataclass(frozen=True)
class Requirement:
    threshold: float
    strategy: str = DIFFERENTIAL

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass(frozen=True)
class QualityMatrix:
    """Sparse stream-by-process requirement matrix; a missing cell means unused."""

    cells: Mapping[tuple[Hashable, Hashable], StreamQuality] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "cells", dict(self.cells))

    @property
    def streams(self) -> list:
        return sorted({i for i, _ in self.cells})

    @property
    def processes(self) -> list:
        return sorted({j for _, j in self.cells})

    def row(self, stream) -> dict:
        return {j: q for (i, j), q in sorted(self.cells.items()) if i == stream}

    def __getitem__(self, key: tuple) -> StreamQuality:
        return self.cells[key]

    def __contains__(self, key: object) -> bool:
        return key in self.cells


def edge_suppression(omega: QualityMatrix) -> tuple[dict, dict]:
    """Effective quality per stream and the residual edge drop per (stream, process).

    The residual delta is relative to the already-thinned arriving stream,
    so ``q_eff.keep * (1 - delta) == omega.keep``.
    """
    q_eff = {}
    delta = {}
    for stream in omega.streams:
        row = omega.row(stream)
        q = effective_quality(row.values())
        q_eff[stream] = q
        delta[stream] = {}
        for proc, need in row.items():
            if q.differential_keep == 0 or need.differential_keep >= q.differential_keep:
                delta[stream][proc] = 0.0
            else:
                delta[stream][proc] = 1.0 - need.differential_keep / q.differential_keep
    return q_eff, delta


@dataclass(frozen=True)
class Solution:
    omega: QualityMatrix
    q_eff: dict
    suppression: dict
    sensor_bandwidth: float | None = None

    def realized_keep(self, stream, process) -> float:
        return self.q_eff[stream].differential_keep * (1.0 - self.suppression[stream][process])


def solve_min_bandwidth(thresholds: Mapping[tuple, Requirement | float],
                        table: DetectionTable = DEFAULT_DETECTION_TABLE,
                        rates: Mapping[Hashable, RateModel] | None = None) -> Solution:
    """Cheapest per-stream qualities that keep every process above its threshold.

    Each (stream, process) threshold is inverted through the detection table
    into a tolerated loss, hence a minimum keep fraction; the sensor sends
    the join of those and the edge thins the rest per egress.
    """
    cells = {}
    for key, req in thresholds.items():
        if not isinstance(req, Requirement):
            req = Requirement(float(req))
        loss = max_tolerable_loss(req.threshold, req.strategy, table)
        cells[key] = StreamQuality(keep_for_loss(loss))
    omega = QualityMatrix(cells)
    q_eff, delta = edge_suppression(omega)
    bandwidth = None
    if rates is not None:
        bandwidth = sum(rates[i].bandwidth(q) for i, q in q_eff.items())
    return Solution(omega, q_eff, delta, bandwidth)
