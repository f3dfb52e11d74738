"""Edge throughput smoke test over loopback UDP.

The sender and the sinks run as separate OS processes; the edge runs in
the calling process with the same role and network classes a scenario run
uses. The sender paces precomputed datagrams at a fixed bit rate.
"""

from __future__ import annotations

import multiprocessing as mp
import socket
import time
from dataclasses import dataclass

from edgecast.edge import EgressRule, PolicyEntry, PolicyMap, StreamConfig
from edgecast.metrics import Counters
from edgecast.runtime import SOCKET_BUFFER, EdgeRole, UdpNetwork
from edgecast.sensor import frame_datagrams
from edgecast.synthetic import SyntheticSpec, synthetic_frames

HOST = "127.0.0.1"
BURST_INTERVAL = 0.002


def _udp_socket(bind=(HOST, 0)) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    for opt in (socket.SO_RCVBUF, socket.SO_SNDBUF):
        try:
            sock.setsockopt(socket.SOL_SOCKET, opt, SOCKET_BUFFER)
        except OSError:
            pass
    sock.bind(bind)
    return sock


def _sink_main(sock: socket.socket, stop_at: float, conn) -> None:
    sock.settimeout(0.1)
    nbytes = datagrams = 0
    buf = bytearray(65536)
    while time.time() < stop_at:
        try:
            n = sock.recv_into(buf)
        except socket.timeout:
            continue
        nbytes += n
        datagrams += 1
    conn.send((nbytes, datagrams))
    conn.close()


def _sender_main(dst, rate_bps: float, start_at: float, duration: float, spec: SyntheticSpec,
                 conn) -> None:
    sock = _udp_socket()
    datagrams = []
    for frame in synthetic_frames(spec):
        datagrams.extend(frame_datagrams(list(frame.packets)))
    n_total = len(datagrams)
    sendto = sock.sendto
    sent_bytes = sent = 0
    while time.time() < start_at:
        time.sleep(0.001)
    t0 = time.monotonic()
    k = 0
    while True:
        elapsed = time.monotonic() - t0
        if elapsed >= duration:
            break
        due = rate_bps * elapsed / 8
        while sent_bytes < due:
            datagram = datagrams[k]
            k = k + 1 if k + 1 < n_total else 1  # index 0 holds the PSI pair
            try:
                sendto(datagram, dst)
            except OSError:
                pass
            sent_bytes += len(datagram)
            sent += 1
        time.sleep(BURST_INTERVAL)
    conn.send((sent_bytes, sent, time.monotonic() - t0))
    conn.close()


@dataclass
class SmokeResult:
    duration: float
    offered_bps: float
    ingress_bps: float
    ingress_bytes: int
    egress: dict
    overflow_dropped: int
    send_errors: int
    sink_bytes: list
    peak_queue: int
    queue_size: int

    @property
    def passed(self) -> bool:
        return self.overflow_dropped == 0


def throughput_smoke(duration: float = 30.0, rate_mbps: float = 110.0, fanout: int = 2,
                     queue_size: int = 1024, ingress_port: int = 0) -> SmokeResult:
    ctx = mp.get_context("fork")
    sink_socks = [_udp_socket() for _ in range(fanout)]
    sink_addrs = [s.getsockname()[:2] for s in sink_socks]

    net = UdpNetwork()
    probe = _udp_socket((HOST, ingress_port))
    port = probe.getsockname()[1]
    probe.close()
    streams = {1: StreamConfig(1, port, frozenset({0x100}))}
    counters = Counters(origin=0.0)
    edge = EdgeRole(streams, HOST, (HOST, 0), net, counters, queue_size=queue_size)
    edge.control = net.bind(edge)[0]
    rules = tuple(EgressRule(i + 1, 0.0) for i in range(fanout))
    edge.store.commit(PolicyMap(1, {(port, 1): PolicyEntry(rules, {0x100})},
                                {i + 1: addr for i, addr in enumerate(sink_addrs)}))

    lead = 1.0
    start_at = time.time() + lead
    stop_at = start_at + duration + 1.5
    pipes, procs = [], []
    for sock in sink_socks:
        parent, child = ctx.Pipe(duplex=False)
        proc = ctx.Process(target=_sink_main, args=(sock, stop_at, child), daemon=True)
        procs.append(proc)
        pipes.append(parent)
    spec = SyntheticSpec(gop=12, packets_per_frame=116, reference_multiplier=2.75, frames=120)
    sparent, schild = ctx.Pipe(duplex=False)
    sender = ctx.Process(target=_sender_main,
                         args=((HOST, port), rate_mbps * 1e6, start_at, duration, spec, schild),
                         daemon=True)
    for proc in procs:
        proc.start()
    for sock in sink_socks:
        sock.close()
    net.start()
    sender.start()
    try:
        net.rebase(-(start_at - time.time()))
        net.advance_to(duration + 1.0)
        edge.post(lambda now: edge.plane.flush_all(now))
        net.advance_to(duration + 1.2)
        sent_bytes, _, _ = sparent.recv()
        sink_bytes = [p.recv()[0] for p in pipes]
    finally:
        net.stop()
        for proc in (*procs, sender):
            proc.join(timeout=5)
            if proc.is_alive():
                proc.terminate()

    flow = counters.ingress.get(1)
    ingress_bytes = flow.bytes_in if flow is not None else 0
    egress = {eid: link.to_dict() for (_, eid), link in counters.links.items()}
    overflow = sum(link.overflow_dropped for link in counters.links.values())
    return SmokeResult(duration, sent_bytes * 8 / duration, ingress_bytes * 8 / duration,
                       ingress_bytes, egress, overflow, net.send_errors, sink_bytes,
                       max((q.peak for q in net.queues), default=0), queue_size)
