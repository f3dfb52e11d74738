"""Command line: ``edgecast run|check|replay-classify``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from edgecast import __version__
from edgecast.errors import EdgecastError
from edgecast.qoc import QocError
from edgecast.runner import run_scenario
from edgecast.runtime import BindError
from edgecast.scenario import ScenarioError, load_scenario, plan
from edgecast.ts import Classifier, TsError, discover_video_pids, iter_units, parse_ts_packet

log = logging.getLogger("edgecast")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INVALID = 2


def _setup_logging() -> None:
    level = os.environ.get("EDGECAST_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _load(args):
    scenario = load_scenario(args.scenario)
    return scenario.with_overrides(duration=args.duration, seed=args.seed,
                                   mode=getattr(args, "mode", None))


def _fmt(value, scale: float = 1.0, digits: int = 6) -> str:
    if value is None:
        return "-"
    return f"{value / scale:.{digits}f}"


def cmd_check(args) -> int:
    try:
        scenario = _load(args)
        predicted = plan(scenario)
    except ScenarioError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return EXIT_INVALID
    except QocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.json:
        print(json.dumps(predicted, indent=2, sort_keys=True))
        return EXIT_OK

    print(f"scenario ok: {len(scenario.sensors)} sensor(s), {len(scenario.processes)} process(es), "
          f"{scenario.duration:g} s, mode {scenario.mode}")
    print()
    print("omega (keep per stream/process)")
    for sid, entry in predicted["streams"].items():
        cells = ", ".join(f"p{p}={_fmt(k)}" for p, k in entry["omega"].items()) or "(unused)"
        print(f"  stream {sid}: {cells}")
    print()
    print(f"{'stream':>6} {'q_eff':>10} {'full Mbps':>10} {'eff Mbps':>10} {'saved Mbps':>10}  delta")
    for sid, entry in predicted["streams"].items():
        q = "paused" if entry["paused"] else _fmt(entry["keep"])
        deltas = ", ".join(f"p{p}={_fmt(d)}" for p, d in entry["delta"].items()) or "-"
        print(f"{sid:>6} {q:>10} {_fmt(entry.get('full_bps'), 1e6, 3):>10} "
              f"{_fmt(entry.get('effective_bps'), 1e6, 3):>10} "
              f"{_fmt(entry.get('saved_bps'), 1e6, 3):>10}  {deltas}")
    print()
    print(f"replicated full: {_fmt(predicted['replicated_full_bps'], 1e6, 3)} Mbps, "
          f"sensor effective: {_fmt(predicted['sensor_bps_effective'], 1e6, 3)} Mbps, "
          f"saved: {_fmt(predicted['predicted_saved_bps'], 1e6, 3)} Mbps")
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        scenario = _load(args)
    except ScenarioError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return EXIT_INVALID
    try:
        result = run_scenario(scenario, args.report)
    except BindError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except EdgecastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    report = result.report
    saved = report["predictions"].get("measured_saved")
    print(f"measured saved: {_fmt(saved, 1e6, 3)} Mbps "
          f"(predicted {_fmt(report['predictions']['predicted_saved_bps'], 1e6, 3)} Mbps)")
    if result.path is not None:
        print(f"report: {result.path}")
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    rejected = report["control"]["rejections"]
    return EXIT_RUNTIME if rejected else EXIT_OK


def cmd_replay_classify(args) -> int:
    path = Path(args.file)
    try:
        data = path.read_bytes()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    pids = frozenset(args.video_pid) if args.video_pid else discover_video_pids(data)
    if not pids:
        print("warning: no video PIDs found in PAT/PMT; use --video-pid", file=sys.stderr)
    classifier = Classifier(pids)
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(["index", "pid", "pusi", "cc", "class"])
        for index, unit in enumerate(iter_units(data)):
            try:
                pkt = parse_ts_packet(unit)
            except TsError as exc:
                print(f"error: packet {index}: {exc}", file=sys.stderr)
                return EXIT_RUNTIME
            cls = classifier.classify(pkt)
            writer.writerow([index, pkt.pid, int(pkt.pusi), pkt.continuity_counter, cls.label])
    finally:
        if out is not sys.stdout:
            out.close()
    if len(data) % 188:
        print(f"warning: {len(data) % 188} trailing bytes ignored", file=sys.stderr)
    return EXIT_OK


def _pid(text: str) -> int:
    return int(text, 0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgecast", description=__doc__)
    parser.add_argument("--version", action="version", version=f"edgecast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p):
        p.add_argument("scenario", help="scenario JSON file")
        p.add_argument("--duration", type=float, help="override the run duration (s)")
        p.add_argument("--seed", type=int, help="override the scenario seed")

    p = sub.add_parser("run", help="run a scenario and write its report")
    scenario_args(p)
    p.add_argument("--report", help="report path (default: the scenario's 'report' key)")
    p.add_argument("--mode", choices=("udp", "simulate"), help="override the scenario mode")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check", help="validate a scenario and print the predicted plan")
    scenario_args(p)
    p.add_argument("--json", action="store_true", help="print the plan as JSON")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("replay-classify", help="print per-packet classes of a TS file as CSV")
    p.add_argument("file")
    p.add_argument("--video-pid", type=_pid, action="append",
                   help="video PID (repeatable); default: read from PAT/PMT")
    p.add_argument("--output", "-o", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_replay_classify)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
