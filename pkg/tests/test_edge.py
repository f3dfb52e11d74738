from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgecast.edge import (
    Action,
    EdgeDataPlane,
    EdgeError,
    EgressBackpressure,
    EgressPort,
    EgressRule,
    InvalidDelta,
    PolicyEntry,
    PolicyMap,
    PolicyStore,
    StreamConfig,
    StreamUpdate,
    SuppressionState,
    apply_policy_update,
    decide,
    edge_control,
    fan_out,
)
from edgecast.metrics import Counters
from edgecast.qoc import QualityMatrix, StreamQuality
from edgecast.sensor import frame_datagrams
from edgecast.synthetic import SyntheticSpec, generate_synthetic
from edgecast.ts import FrameClass, parse_ts_packet

PORT = 5000
PIDS = frozenset({0x100})


def entry(*deltas):
    return PolicyEntry(tuple(EgressRule(i, d) for i, d in enumerate(deltas)), PIDS)


def capture_plane(policy, **kw):
    sent = {}

    def factory(stream_id, egress_id, addr):
        sent[egress_id] = out = []
        return out.append

    store = PolicyStore(policy)
    plane = EdgeDataPlane(store, factory, Counters(), **kw)
    return plane, store, sent


def policy_for(*deltas, version=1):
    return PolicyMap(version, {(PORT, 1): entry(*deltas)},
                     {i: ("127.0.0.1", 7000 + i) for i in range(len(deltas))})


def stream_datagrams(spec):
    return frame_datagrams(generate_synthetic(spec))


class TestDecide:
    def test_reference_never_suppressed(self):
        pkt = parse_ts_packet(generate_synthetic(SyntheticSpec(frames=1))[2])
        e = entry(0.9, 0.9)
        state = SuppressionState()
        for _ in range(50):
            d, state = decide(pkt, FrameClass.REFERENCE, e, state)
            assert [a for _, a in d.actions] == [Action.FORWARD, Action.FORWARD]

    def test_half_alternates(self):
        pkt = parse_ts_packet(generate_synthetic(SyntheticSpec(frames=2))[-1])
        e = entry(0.5)
        state = SuppressionState()
        actions = []
        for _ in range(10):
            d, state = decide(pkt, FrameClass.DIFFERENTIAL, e, state)
            actions.append(d.actions[0][1])
        assert actions == [Action.FORWARD, Action.SUPPRESS] * 5

    def test_zero_delta_forwards(self):
        pkt = parse_ts_packet(generate_synthetic(SyntheticSpec(frames=2))[-1])
        d, _ = decide(pkt, FrameClass.DIFFERENTIAL, entry(0.0), SuppressionState())
        assert d.forwarded() == [0]

    @given(st.lists(st.sampled_from(list(FrameClass)), max_size=200),
           st.lists(st.floats(0, 1), min_size=1, max_size=4))
    def test_one_action_per_egress_and_only_differential_suppressed(self, classes, deltas):
        pkt = parse_ts_packet(generate_synthetic(SyntheticSpec(frames=1))[2])
        e = entry(*deltas)
        state = SuppressionState()
        for cls in classes:
            d, state = decide(pkt, cls, e, state)
            assert [eid for eid, _ in d.actions] == list(range(len(deltas)))
            if cls is not FrameClass.DIFFERENTIAL:
                assert all(a is Action.FORWARD for _, a in d.actions)

    @given(st.integers(1, 3000), st.sampled_from([0.0, 0.1, 0.25, 0.3, 0.5, 0.75, 1.0]))
    def test_rate_exactness(self, n, delta):
        pkt = parse_ts_packet(generate_synthetic(SyntheticSpec(frames=2))[-1])
        e = entry(delta)
        state = SuppressionState()
        suppressed = 0
        for _ in range(n):
            d, state = decide(pkt, FrameClass.DIFFERENTIAL, e, state)
            suppressed += d.actions[0][1] is Action.SUPPRESS
        exact = Fraction(str(delta)) * n
        assert suppressed in (exact.numerator // exact.denominator, -(-exact.numerator // exact.denominator))


class TestFanOut:
    def test_copies_are_byte_identical(self):
        raw = generate_synthetic(SyntheticSpec(frames=1))[2]
        pkt = parse_ts_packet(memoryview(raw))
        out = {i: [] for i in range(3)}
        ports = {i: EgressPort(i, out[i].append, batch=1) for i in range(3)}
        from edgecast.edge import EgressDecision
        d = EgressDecision(FrameClass.DIFFERENTIAL,
                           ((0, Action.FORWARD), (1, Action.FORWARD), (2, Action.SUPPRESS)))
        assert fan_out(pkt, d, ports) == 2
        assert out[0] == [raw] and out[1] == [raw] and out[2] == []

    def test_batching_and_timer(self):
        out = []
        port = EgressPort(0, out.append, batch=7, flush_interval=0.005)
        for i in range(10):
            port.push(b"\x47" + bytes([i]) * 187, now=0.0)
        assert len(out) == 1 and len(out[0]) == 7 * 188
        assert not port.due(0.004) and port.due(0.006)
        port.flush(0.006)
        assert len(out[1]) == 3 * 188

    def test_backpressure_counts_overflow(self):
        def full(_):
            raise EgressBackpressure("full")
        port = EgressPort(0, full, batch=2)
        port.push(b"x" * 188, 0)
        port.push(b"x" * 188, 0)
        assert port.link.overflow_dropped == 2 and port.link.emitted == 0

    def test_bad_batch(self):
        with pytest.raises(ValueError):
            EgressPort(0, print, batch=8)


class TestDataPlane:
    def test_zero_delta_transparency_and_order(self):
        spec = SyntheticSpec(gop=12, packets_per_frame=5, frames=100)
        ingress = stream_datagrams(spec)
        plane, _, sent = capture_plane(policy_for(0.0, 0.5))
        for i, dg in enumerate(ingress):
            plane.process(PORT, dg, now=i * 0.001)
        plane.flush_all()
        assert b"".join(sent[0]) == b"".join(ingress)
        # the thinned egress is an ordered subsequence of the ingress
        units = [b"".join(sent[1])[k:k + 188] for k in range(0, len(b"".join(sent[1])), 188)]
        src = iter(b"".join(ingress)[k:k + 188] for k in range(0, len(b"".join(ingress)), 188))
        assert all(any(u == s for s in src) for u in units)

    def test_conservation_and_counts(self):
        spec = SyntheticSpec(gop=12, packets_per_frame=5, frames=60)
        plane, _, _ = capture_plane(policy_for(0.0, 0.25, 1.0))
        for dg in stream_datagrams(spec):
            plane.process(PORT, dg, now=0.0)
        plane.flush_all(0.0)
        for (_, eid), link in plane.counters.links.items():
            assert link.conserved() and link.pending == 0
            assert link.total_in == link.forwarded + link.policy_suppressed + link.overflow_dropped
            assert link.packets_in[FrameClass.REFERENCE] == link.cloned[FrameClass.REFERENCE]
        assert plane.counters.links[(1, 2)].cloned[FrameClass.DIFFERENTIAL] == 0

    def test_orphaned_when_no_egress(self):
        policy = PolicyMap(1, {(PORT, 1): PolicyEntry((), PIDS)})
        plane, _, _ = capture_plane(policy)
        plane.process(PORT, stream_datagrams(SyntheticSpec(frames=2))[0])
        assert plane.counters.ingress[1].orphaned > 0

    def test_unrouted_and_bad_datagrams(self):
        plane, _, _ = capture_plane(policy_for(0.0))
        assert plane.process(PORT + 1, b"\x47" * 188) == 0 and plane.unrouted == 1
        assert plane.process(PORT, b"\x47" * 100) == 0 and plane.bad_datagrams == 1

    def test_snapshot_switch_between_datagrams(self):
        spec = SyntheticSpec(gop=4, packets_per_frame=7, frames=8)
        dgs = stream_datagrams(spec)
        plane, store, sent = capture_plane(policy_for(0.0), batch=7)
        plane.process(PORT, dgs[0])
        store.update(StreamUpdate(1, {1: 0.0}))
        assert 1 not in sent  # the new egress has no address yet, so no port until mapped
        store.commit(store.snapshot.replaced(egresses={0: ("h", 1), 1: ("h", 2)}))
        for dg in dgs[1:]:
            plane.process(PORT, dg)
        plane.flush_all()
        # egress 1 sees exactly the datagrams after the switch, whole
        assert b"".join(sent[1]) == b"".join(dgs[1:])

    def test_removed_egress_flushes(self):
        dgs = stream_datagrams(SyntheticSpec(gop=4, packets_per_frame=3, frames=12))
        plane, store, sent = capture_plane(policy_for(0.0, 0.0), batch=7)
        plane.process(PORT, dgs[1][:188 * 2])
        store.update(StreamUpdate(1, remove=(1,)))
        plane.process(PORT, dgs[2])
        assert sum(len(d) for d in sent[1]) == 2 * 188


class TestPolicy:
    def test_versions_increase(self):
        p0 = PolicyMap.empty()
        p1 = apply_policy_update(p0, StreamUpdate(1, {0: 0.5}, ingress_port=PORT, video_pids=PIDS))
        p2 = apply_policy_update(p1, StreamUpdate(1, {1: 0.25}))
        assert (p0.version, p1.version, p2.version) == (0, 1, 2)
        assert p2.entries[(PORT, 1)].deltas() == {0: 0.5, 1: 0.25}

    def test_invalid_delta(self):
        with pytest.raises(InvalidDelta):
            apply_policy_update(PolicyMap.empty(), StreamUpdate(1, {0: 1.5}, ingress_port=PORT))
        with pytest.raises(InvalidDelta):
            EgressRule(0, -0.1)

    def test_unknown_stream_needs_port(self):
        with pytest.raises(EdgeError):
            apply_policy_update(PolicyMap.empty(), StreamUpdate(9, {0: 0.1}))

    def test_duplicate_egress(self):
        with pytest.raises(EdgeError):
            PolicyEntry((EgressRule(1, 0), EgressRule(1, 0.5)))

    def test_store_rejects_stale_version(self):
        store = PolicyStore()
        store.commit(PolicyMap(1))
        with pytest.raises(EdgeError):
            store.commit(PolicyMap(1))

    def test_map_is_read_only(self):
        with pytest.raises(TypeError):
            policy_for(0.0).entries[(1, 1)] = None


class TestEdgeControl:
    SENSORS = [StreamConfig(1, 5001, PIDS), StreamConfig(2, 5002, PIDS)]

    def test_interface_list_membership(self):
        omega = QualityMatrix({(1, 1): StreamQuality(1.0), (1, 2): StreamQuality(1.0)})
        policy, q_eff, delta = edge_control(self.SENSORS, [1, 2, 3], omega)
        assert policy.entries[(5001, 1)].egress_ids == (1, 2)
        assert 2 not in q_eff and (5002, 2) not in policy.entries

    def test_full_quality_no_suppression(self):
        omega = QualityMatrix({(s, p): StreamQuality(1.0) for s in (1, 2) for p in (1, 2)})
        _, q_eff, delta = edge_control(self.SENSORS, [1, 2], omega)
        assert all(q.is_full for q in q_eff.values())
        assert all(d == 0 for row in delta.values() for d in row.values())

    def test_residual_delta(self):
        omega = QualityMatrix({(1, 1): StreamQuality(0.99), (1, 2): StreamQuality(0.98)})
        policy, q_eff, delta = edge_control(self.SENSORS, [1, 2], omega, PolicyMap.empty())
        assert q_eff[1].differential_keep == 0.99
        assert delta[1] == {1: 0.0, 2: pytest.approx(0.010101, abs=1e-6)}
        assert policy.version == 1

    def test_unknown_members(self):
        with pytest.raises(EdgeError):
            edge_control(self.SENSORS, [1], QualityMatrix({(3, 1): StreamQuality(1.0)}))
        with pytest.raises(EdgeError):
            edge_control(self.SENSORS, [1], QualityMatrix({(1, 5): StreamQuality(1.0)}))
