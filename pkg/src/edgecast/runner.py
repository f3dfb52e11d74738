"""Run a scenario end to end and assemble its report."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from edgecast.control import AckStatus
from edgecast.errors import EdgecastError
from edgecast.metrics import Counters, CpuProxy, emit_report, write_report
from edgecast.runtime import (
    EdgeRole,
    OperatorRole,
    SensorRole,
    SimNetwork,
    SinkRole,
    Topology,
    UdpNetwork,
    on_role,
)
from edgecast.scenario import Scenario, plan

log = logging.getLogger(__name__)

SETUP_SECONDS = 5.0
DRAIN_SECONDS = 0.3


class RunError(EdgecastError):
    pass


@dataclass
class RunResult:
    report: dict
    path: Path | None
    topology: Topology
    counters: Counters


def build_topology(scenario: Scenario, net, counters: Counters) -> Topology:
    configs = scenario.stream_configs()
    edge = EdgeRole(configs, scenario.edge.host, scenario.edge.control_address, net, counters,
                    scenario.table, scenario.edge.queue_size)
    topo = Topology(net, edge)
    by_source = {(scenario.edge.host, s.ingress_port): s.stream_id for s in scenario.sensors}
    for spec in scenario.sensors:
        topo.sensors[spec.stream_id] = SensorRole(
            spec.source, spec.address, (scenario.edge.host, spec.ingress_port), net,
            counters.sensor(spec.stream_id))
    for proc in scenario.processes:
        topo.sinks[proc.process_id] = SinkRole(proc.process_id, proc.address, proc.streams,
                                               scenario.edge.control_address, by_source, net, counters)
    if any(a.action == "policy" for a in scenario.timeline):
        topo.operator = OperatorRole((scenario.edge.host, 0), scenario.edge.control_address, net)
    for role in topo.roles:
        bound = net.bind(role)
        if isinstance(role, OperatorRole):
            role.address = bound[0]
    return topo


def _apply(topo: Topology, action) -> None:
    p = action.params
    if action.action == "register":
        sink = topo.sinks[p["process_id"]]
        on_role(sink, sink.register)
    elif action.action == "deregister":
        sink = topo.sinks[p["process_id"]]
        on_role(sink, sink.deregister)
    elif action.action == "set_threshold":
        sink = topo.sinks[p["process_id"]]
        on_role(sink, sink.set_threshold, p["threshold"])
    elif action.action == "policy":
        op = topo.operator
        on_role(op, op.send_policy, p["stream_id"], p["deltas"])


def run_scenario(scenario: Scenario, report_path: str | Path | None = None) -> RunResult:
    """Reconcile, notify, stream, suppress, fan out and measure for the duration."""
    counters = Counters(origin=0.0)
    net = SimNetwork(start=-SETUP_SECONDS) if scenario.mode == "simulate" \
        else UdpNetwork(start=-SETUP_SECONDS)
    topo = build_topology(scenario, net, counters)
    try:
        net.start()
        # setup: empty reconcile (pauses every sensor), then the initial sinks
        on_role(topo.edge, topo.edge.start)
        for proc in scenario.processes:
            if proc.registered:
                sink = topo.sinks[proc.process_id]
                on_role(sink, sink.register)
        if not net.settle(topo.idle, SETUP_SECONDS - 0.5):
            log.warning("control plane did not settle before streaming started")
        net.rebase(0.0)

        for sensor in topo.sensors.values():
            on_role(sensor, sensor.start_streaming)
        for action in scenario.timeline:
            net.advance_to(action.at)
            _apply(topo, action)
        net.advance_to(scenario.duration)
        for sensor in topo.sensors.values():
            on_role(sensor, sensor.stop_streaming)
        net.advance_to(scenario.duration + DRAIN_SECONDS)
        on_role(topo.edge, lambda now: topo.edge.plane.flush_all(now))
        net.advance_to(scenario.duration + 2 * DRAIN_SECONDS)
    finally:
        net.stop()
    errors = getattr(net, "errors", [])
    if errors:
        raise RunError(f"role crashed: {errors[0]!r}")

    report = build_report(scenario, topo, counters)
    path = report_path or scenario.report
    written = None
    if path:
        base = scenario._base if report_path is None and scenario._base is not None else Path(".")
        target = Path(path)
        written = write_report(report, target if target.is_absolute() else base / target)
    return RunResult(report, written, topo, counters)


def build_report(scenario: Scenario, topo: Topology, counters: Counters) -> dict:
    edge = topo.edge
    policy = edge.store.snapshot
    keeps = {}
    for sid, sensor in topo.sensors.items():
        q = sensor.pipeline.quality.q_eff
        keeps[sid] = None if q is None else q.differential_keep
    deltas = {(sid, r.egress_id): r.delta
              for (_, sid), entry in policy.entries.items() for r in entry.rules}

    # each egress is judged on the frames sent while it could have received them
    expected = {}
    for (sid, pid), sink in counters.sinks.items():
        frames = topo.sensors[sid].sent_frames if sid in topo.sensors else []
        seen = sink.ledger.frames
        if seen and frames:
            first = min(seen)
            expected[(sid, pid)] = [f for f in frames if f[0] >= first]

    predictions = plan(scenario)
    report = emit_report(counters, scenario.raw, cpu=CpuProxy(),
                         configured={"keep": keeps, "delta": deltas}, predictions=predictions,
                         expected=expected, duration=scenario.duration)
    for entry in report["sensors"]:
        sensor = topo.sensors.get(entry["stream_id"])
        if sensor is not None:
            entry["notifications"] = sensor.notifications
            entry["frames_sent"] = len(sensor.sent_frames)
            entry["paused"] = sensor.pipeline.quality.paused
    report["control"] = {
        "policy_version": policy.version,
        "commits": edge.commits,
        "rejections": edge.rejections,
        "flagged": [{"address": f"{a[0]}:{a[1]}", "type": int(m.type)}
                    for a, m in edge.tracker.flagged],
        "sinks": {str(pid): {"status": None if s.status is None else AckStatus(s.status).name.lower(),
                             "deltas": {str(k): v for k, v in sorted(s.policy.items())}}
                  for pid, s in sorted(topo.sinks.items())},
        "mode": scenario.mode,
    }
    return report
