"""Scenario files: JSON description of sensors, sinks and a timeline.

Example::

    {
      "duration": 10, "seed": 0, "mode": "udp",
      "edge": {"host": "127.0.0.1", "control_port": 9900},
      "sensors": [{"stream_id": 1, "address": "127.0.0.1:9101", "ingress_port": 9201,
                   "synthetic": {"gop": 12, "packets_per_frame": 116,
                                 "reference_multiplier": 2.75}}],
      "processes": [{"process_id": 1, "address": "127.0.0.1:9301",
                     "streams": [{"stream_id": 1, "threshold": 0.96}]}],
      "timeline": [{"at": 5, "action": "set_threshold", "process_id": 1,
                    "stream_id": 1, "threshold": 0.74}],
      "report": "report.json"
    }

Thresholds are quantized (downward) to the wire's 1/65535 grid on load, so a static
check and a live run solve exactly the same problem.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from edgecast.control import DEFAULT_CONTROL_PORT, StreamThreshold
from edgecast.edge import StreamConfig
from edgecast.errors import EdgecastError
from edgecast.qoc import (
    DEFAULT_DETECTION_TABLE,
    STRATEGIES,
    DetectionTable,
    Infeasible,
    Q_FULL,
    QocError,
    RateModel,
    Solution,
    solve_min_bandwidth,
)
from edgecast.sensor import StreamSource
from edgecast.synthetic import SyntheticSpec

MODES = ("udp", "simulate")
ACTIONS = ("register", "deregister", "set_threshold", "policy")
DEFAULT_QUEUE_SIZE = 1024

Address = tuple[str, int]


class ScenarioError(EdgecastError):
    """Carries every problem found, not just the first."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


def parse_address(value: Any) -> Address:
    if isinstance(value, (list, tuple)) and len(value) == 2:
        host, port = value
    elif isinstance(value, str) and ":" in value:
        host, _, port = value.rpartition(":")
    else:
        raise ValueError(f"address {value!r} is not host:port")
    port = int(port)
    if not 0 < port < 65536:
        raise ValueError(f"port {port} out of range")
    return (str(host), port)


def format_address(addr: Address) -> str:
    return f"{addr[0]}:{addr[1]}"


@dataclass(frozen=True)
class SensorSpec:
    stream_id: int
    address: Address
    ingress_port: int
    source: StreamSource

    @property
    def rate(self) -> RateModel | None:
        if self.source.synthetic is None:
            return None
        return self.source.synthetic.rate_model()


@dataclass(frozen=True)
class ProcessSpec:
    process_id: int
    address: Address
    streams: tuple[StreamThreshold, ...]
    registered: bool = True


@dataclass(frozen=True)
class TimelineAction:
    at: float
    action: str
    params: Mapping = field(default_factory=dict)


@dataclass(frozen=True)
class EdgeSpec:
    host: str = "127.0.0.1"
    control_port: int = DEFAULT_CONTROL_PORT
    queue_size: int = DEFAULT_QUEUE_SIZE

    @property
    def control_address(self) -> Address:
        return (self.host, self.control_port)


@dataclass(frozen=True)
class Scenario:
    sensors: tuple[SensorSpec, ...]
    processes: tuple[ProcessSpec, ...]
    duration: float
    edge: EdgeSpec = EdgeSpec()
    table: DetectionTable = DEFAULT_DETECTION_TABLE
    timeline: tuple[TimelineAction, ...] = ()
    seed: int = 0
    mode: str = "udp"
    report: str | None = None
    raw: Mapping = field(default_factory=dict, compare=False)

    def stream_configs(self) -> dict[int, StreamConfig]:
        return {s.stream_id: StreamConfig(s.stream_id, s.ingress_port, s.source.video_pids,
                                          s.address, s.rate)
                for s in self.sensors}

    def rates(self) -> dict[int, RateModel]:
        return {s.stream_id: s.rate for s in self.sensors if s.rate is not None}

    def process(self, process_id: int) -> ProcessSpec:
        for p in self.processes:
            if p.process_id == process_id:
                return p
        raise KeyError(process_id)

    def with_overrides(self, duration: float | None = None, seed: int | None = None,
                       report: str | None = None, mode: str | None = None) -> "Scenario":
        """Re-derive the scenario with CLI overrides applied (and re-validated)."""
        raw = dict(self.raw)
        if duration is not None:
            raw["duration"] = duration
        if seed is not None:
            raw["seed"] = seed
        if report is not None:
            raw["report"] = report
        if mode is not None:
            raw["mode"] = mode
        return parse_scenario(raw, base=self._base)

    _base: Path | None = field(default=None, compare=False, repr=False)


def _thresholds(entries: Any, where: str, problems: list[str]) -> tuple[StreamThreshold, ...]:
    out = []
    for item in entries or ():
        try:
            strategy = item.get("strategy", "differential")
            if strategy not in STRATEGIES:
                raise ValueError(f"unknown strategy {strategy!r}")
            threshold = float(item["threshold"])
            if not 0.0 <= threshold <= 1.0:
                raise ValueError(f"threshold {threshold} outside [0, 1]")
            out.append(StreamThreshold.of(int(item["stream_id"]), threshold, strategy))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"{where}: bad stream entry {item!r}: {exc}")
    return tuple(out)


def _source(item: Mapping, stream_id: int, seed: int, base: Path | None) -> StreamSource:
    if "synthetic" in item and "replay" in item:
        raise ValueError("give either synthetic or replay, not both")
    if "replay" in item:
        path = Path(item["replay"])
        if base is not None and not path.is_absolute():
            path = base / path
        if not path.is_file():
            raise ValueError(f"replay file {path} not found")
        pids = item.get("video_pids")
        if not pids:
            raise ValueError("replay sources need video_pids")
        return StreamSource(stream_id, replay_path=str(path), video_pids=frozenset(pids),
                            fps=float(item.get("fps", 30.0)))
    params = dict(item.get("synthetic") or {})
    params.setdefault("seed", seed * 1000 + stream_id)
    params["frames"] = 0  # runs are open-ended; the runner stops at the duration
    return StreamSource(stream_id, synthetic=SyntheticSpec(**params))


def parse_scenario(doc: Mapping, base: Path | None = None) -> Scenario:
    """Validate a scenario document; raises ScenarioError listing all violations."""
    problems: list[str] = []
    if not isinstance(doc, Mapping):
        raise ScenarioError(["scenario must be a JSON object"])

    try:
        duration = float(doc.get("duration", 0))
        if not duration > 0:
            problems.append(f"duration must be > 0, got {duration}")
    except (TypeError, ValueError):
        problems.append(f"duration {doc.get('duration')!r} is not a number")
        duration = 0.0
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        problems.append(f"seed {seed!r} is not an integer")
        seed = 0
    mode = doc.get("mode", "udp")
    if mode not in MODES:
        problems.append(f"mode {mode!r} not one of {MODES}")

    edge_doc = doc.get("edge") or {}
    edge = EdgeSpec()
    try:
        edge = EdgeSpec(str(edge_doc.get("host", edge.host)),
                        int(edge_doc.get("control_port", edge.control_port)),
                        int(edge_doc.get("queue_size", edge.queue_size)))
        if edge.queue_size < 1:
            problems.append("edge.queue_size must be positive")
    except (TypeError, ValueError) as exc:
        problems.append(f"edge: {exc}")

    table = DEFAULT_DETECTION_TABLE
    if doc.get("detection_table"):
        path = Path(doc["detection_table"])
        if base is not None and not path.is_absolute():
            path = base / path
        try:
            table = DetectionTable.load(path)
        except (OSError, ValueError, QocError) as exc:
            problems.append(f"detection_table: {exc}")

    addresses: dict[Address, str] = {}

    def claim(addr: Address, owner: str) -> None:
        if addr in addresses:
            problems.append(f"address {format_address(addr)} used by both {addresses[addr]} and {owner}")
        else:
            addresses[addr] = owner

    claim(edge.control_address, "edge control")

    sensors = []
    for n, item in enumerate(doc.get("sensors") or ()):
        where = f"sensors[{n}]"
        try:
            stream_id = int(item["stream_id"])
            spec = SensorSpec(stream_id, parse_address(item["address"]), int(item["ingress_port"]),
                              _source(item, stream_id, seed, base))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"{where}: {exc}")
            continue
        if any(s.stream_id == spec.stream_id for s in sensors):
            problems.append(f"{where}: duplicate stream_id {spec.stream_id}")
        claim(spec.address, f"sensor {spec.stream_id}")
        claim((edge.host, spec.ingress_port), f"edge ingress for stream {spec.stream_id}")
        sensors.append(spec)
    stream_ids = {s.stream_id for s in sensors}

    processes = []
    for n, item in enumerate(doc.get("processes") or ()):
        where = f"processes[{n}]"
        try:
            proc = ProcessSpec(int(item["process_id"]), parse_address(item["address"]),
                               _thresholds(item.get("streams"), where, problems),
                               bool(item.get("registered", True)))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"{where}: {exc}")
            continue
        if any(p.process_id == proc.process_id for p in processes):
            problems.append(f"{where}: duplicate process_id {proc.process_id}")
        claim(proc.address, f"process {proc.process_id}")
        for st in proc.streams:
            if st.stream_id not in stream_ids:
                problems.append(f"{where}: unknown stream {st.stream_id}")
            else:
                try:
                    solve_min_bandwidth({(st.stream_id, proc.process_id): st.requirement()}, table)
                except Infeasible as exc:
                    problems.append(f"{where}: stream {st.stream_id}: {exc}")
        processes.append(proc)
    process_ids = {p.process_id for p in processes}

    timeline = []
    last = float("-inf")
    for n, item in enumerate(doc.get("timeline") or ()):
        where = f"timeline[{n}]"
        try:
            at = float(item["at"])
            action = item["action"]
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"{where}: {exc}")
            continue
        if at < last:
            problems.append(f"{where}: timeline not sorted ({at} after {last})")
        last = max(last, at)
        if not 0 <= at < max(duration, 0):
            problems.append(f"{where}: offset {at} outside [0, duration)")
        if action not in ACTIONS:
            problems.append(f"{where}: unknown action {action!r}")
            continue
        params = {k: v for k, v in item.items() if k not in ("at", "action")}
        if action in ("register", "deregister", "set_threshold"):
            if params.get("process_id") not in process_ids:
                problems.append(f"{where}: unknown process {params.get('process_id')!r}")
        if action == "set_threshold":
            sts = _thresholds([params], where, problems)
            if sts and sts[0].stream_id not in stream_ids:
                problems.append(f"{where}: unknown stream {sts[0].stream_id}")
            elif sts:
                try:
                    solve_min_bandwidth({(sts[0].stream_id, 0): sts[0].requirement()}, table)
                except Infeasible as exc:
                    problems.append(f"{where}: {exc}")
                params = {"process_id": params["process_id"], "threshold": sts[0]}
        if action == "policy":
            try:
                deltas = {int(k): float(v) for k, v in dict(params["deltas"]).items()}
                if any(not 0 <= d <= 1 for d in deltas.values()):
                    raise ValueError("deltas must lie in [0, 1]")
                if int(params["stream_id"]) not in stream_ids:
                    raise ValueError(f"unknown stream {params['stream_id']}")
                params = {"stream_id": int(params["stream_id"]), "deltas": deltas}
            except (KeyError, TypeError, ValueError) as exc:
                problems.append(f"{where}: {exc}")
        timeline.append(TimelineAction(at, action, params))

    if problems:
        raise ScenarioError(problems)
    return Scenario(tuple(sensors), tuple(processes), duration, edge, table, tuple(timeline),
                    seed, mode, doc.get("report"), dict(doc), base)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ScenarioError([f"cannot read {path}: {exc}"]) from None
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"{path}: invalid JSON: {exc}"]) from None
    return parse_scenario(doc, base=path.parent)


def initial_thresholds(scenario: Scenario) -> dict:
    return {(st.stream_id, p.process_id): st.requirement()
            for p in scenario.processes if p.registered for st in p.streams}


def plan(scenario: Scenario) -> dict:
    """Static solve for the processes registered at start: what ``check`` prints."""
    rates = scenario.rates()
    solution: Solution = solve_min_bandwidth(initial_thresholds(scenario), scenario.table)
    streams = {}
    total_full = total_eff = 0.0
    for spec in scenario.sensors:
        sid = spec.stream_id
        q = solution.q_eff.get(sid)
        rate = rates.get(sid)
        entry = {
            "keep": None if q is None else q.differential_keep,
            "paused": q is None,
            "omega": {str(p): solution.omega[(sid, p)].differential_keep
                      for (s, p) in sorted(solution.omega.cells) if s == sid},
            "delta": {str(p): d for p, d in sorted(solution.suppression.get(sid, {}).items())},
        }
        if rate is not None:
            full = rate.bandwidth(Q_FULL)
            eff = 0.0 if q is None else rate.bandwidth(q)
            entry.update(full_bps=full, effective_bps=eff, saved_bps=full - eff)
            if q is not None:
                total_full += full
                total_eff += eff
            # per-egress bitrate after the edge's residual suppression
            entry["egress_bps"] = {
                str(p): rate.ref_rate + rate.diff_rate * solution.realized_keep(sid, p)
                for p in sorted(solution.suppression.get(sid, {}))}
        streams[str(sid)] = entry
    # naive replication: every (stream, process) pair carries the full stream
    replicated = sum(rates[s].full_rate for (s, _) in solution.omega.cells if s in rates)
    return {
        "streams": streams,
        "replicated_full_bps": replicated,
        "sensor_bps_full": total_full,
        "sensor_bps_effective": total_eff,
        "predicted_saved_bps": total_full - total_eff,
    }
