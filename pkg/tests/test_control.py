import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgecast.control import (
    Ack,
    AckTracker,
    BadMagic,
    BadVersion,
    DecodeError,
    InvalidField,
    MsgType,
    PolicyUpdate,
    QualityNotify,
    Reconciler,
    SinkRegister,
    StreamThreshold,
    TrailingBytes,
    Truncated,
    UnknownType,
    decode,
    encode,
    is_control,
    policy_messages,
)
from edgecast.edge import StreamConfig, apply_policy_update, PolicyMap

u16 = st.integers(0, 0xFFFF)
ipv4 = st.tuples(*[st.integers(0, 255)] * 4).map(lambda t: ".".join(map(str, t)))

quality_notify = st.builds(QualityNotify, u16, u16)
policy_update = st.builds(PolicyUpdate, u16, st.lists(st.tuples(u16, u16), max_size=20).map(tuple))
stream_threshold = st.builds(StreamThreshold, u16, u16, st.sampled_from(["uniform", "differential"]))
sink_register = st.builds(SinkRegister, u16, ipv4, u16, st.lists(stream_threshold, max_size=10).map(tuple))
ack = st.builds(Ack, st.integers(0, 255), st.integers(0, 255), u16)
messages = st.one_of(quality_notify, policy_update, sink_register, ack)


@given(messages)
def test_round_trip(msg):
    assert decode(encode(msg)) == msg


def test_quality_notify_layout():
    assert encode(QualityNotify.of(3, 1.0)) == bytes.fromhex("4543010103 00ffff".replace(" ", ""))
    assert encode(QualityNotify.of(3, 0.0))[-2:] == b"\x00\x00"
    assert decode(bytes.fromhex("45430101030000ff")) == QualityNotify(3, 0xFF00)


def test_other_layouts():
    assert encode(PolicyUpdate(2, ((7, 0x8000),))) == bytes.fromhex("454301020200010700" + "0080")
    assert encode(Ack(MsgType.SINK_REGISTER, 1, 5)) == bytes.fromhex("4543010403010500")
    reg = SinkRegister(1, "127.0.0.1", 9301, (StreamThreshold(1, 0xFFFF, "uniform"),))
    assert encode(reg) == bytes.fromhex("45430103" "0100" "7f000001" "5524" "01" "0100" "ffff" "00")


MALFORMED = [
    (b"\x00\x43\x01\x01\x03\x00\xff\xff", BadMagic),
    (b"E", Truncated),
    (b"EC\x02\x01\x03\x00\xff\xff", BadVersion),
    (b"EC\x01", Truncated),
    (b"EC\x01\x01\x03\x00\xff", Truncated),
    (b"EC\x01\x01\x03\x00\xff\xff\x00", TrailingBytes),
    (b"EC\x01\x09\x00", UnknownType),
    (b"EC\x01\x02\x01\x00\x02\x01\x00\x00\x00", Truncated),
    (b"EC\x01\x03\x01\x00\x7f\x00\x00\x01\x00\x01\x01\x01\x00\xff\xff\x07", InvalidField),
    (b"EC\x01\x04\x01\x00", Truncated),
    (b"\x47\x01\x00\x10", BadMagic),
]


@pytest.mark.parametrize("data,error", MALFORMED)
def test_malformed(data, error):
    with pytest.raises(error):
        decode(data)
    assert issubclass(error, DecodeError)


@given(messages, st.integers(1, 200))
def test_truncation_always_detected(msg, cut):
    data = encode(msg)
    cut = min(cut, len(data) - 1)
    with pytest.raises(DecodeError):
        decode(data[:len(data) - cut] if cut else data[:-1])


def test_field_validation():
    with pytest.raises(ValueError):
        QualityNotify(70000, 0)
    with pytest.raises(ValueError):
        SinkRegister(1, "not-an-ip", 1)
    with pytest.raises(ValueError):
        StreamThreshold(1, 1, "random")
    with pytest.raises(ValueError):
        QualityNotify.of(1, 1.2)


def test_is_control():
    assert is_control(encode(Ack(1)))
    assert not is_control(b"\x47" + bytes(187))


def test_policy_update_applies_as_replacement():
    base = apply_policy_update(PolicyMap.empty(), _stream_update(1, {1: 0.5, 2: 0.5}))
    after = apply_policy_update(base, PolicyUpdate.of(1, {3: 0.25}))
    assert after.entries[(9201, 1)].deltas() == {3: pytest.approx(0.25, abs=1e-4)}


def _stream_update(stream, deltas):
    from edgecast.edge import StreamUpdate
    return StreamUpdate(stream, deltas, ingress_port=9201)


STREAMS = {1: StreamConfig(1, 9201, {0x100}, ("127.0.0.1", 9101)),
           2: StreamConfig(2, 9202, {0x100}, ("127.0.0.1", 9102))}


def register(pid, *streams, port=None):
    return SinkRegister(pid, "127.0.0.1", port or 9300 + pid,
                        tuple(StreamThreshold.of(s, t) for s, t in streams))


class TestReconcile:
    def test_registration_notifies_keep(self):
        r = Reconciler(STREAMS)
        tx = r.reconcile([register(1, (1, 0.96))])
        notify = {m.stream_id: m for m in tx.notifications}
        assert isinstance(notify[1], QualityNotify)
        assert abs(notify[1].keep - 0.99) <= 1 / 65535
        assert notify[2] == PolicyUpdate(2, ())  # unused stream: pause
        assert tx.policy.entries[(9201, 1)].egress_ids == (1,)
        assert tx.policy.egresses[1] == ("127.0.0.1", 9301)

    def test_one_version_per_reconcile(self):
        r = Reconciler(STREAMS)
        versions = [r.reconcile([register(1, (1, 0.9))]).policy.version,
                    r.reconcile([register(2, (1, 0.9)), register(3, (2, 0.74))]).policy.version,
                    r.reconcile().policy.version]
        assert versions == [1, 2, 3]

    def test_deregistration_pauses(self):
        r = Reconciler(STREAMS)
        r.reconcile([register(1, (1, 0.96))])
        tx = r.reconcile([register(1)])
        assert tx.policy.entries == {}
        assert tx.notifications == [PolicyUpdate(1, ())]

    def test_symmetry(self):
        tx = Reconciler(STREAMS).reconcile([register(1, (1, 0.85)), register(2, (1, 0.85))])
        deltas = tx.policy.entries[(9201, 1)].deltas()
        assert deltas[1] == deltas[2]
        assert [m for m in tx.notifications if m.stream_id == 1][0].keep < 1

    def test_infeasible_and_unknown_rejected(self):
        tx = Reconciler(STREAMS).reconcile([register(1, (1, 0.999)), register(2, (7, 0.5))])
        assert "exceeds" in tx.rejected[1]
        assert "unknown stream" in tx.rejected[2]
        assert tx.policy.entries == {}

    @given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 2),
                              st.sampled_from([0.96, 0.9, 0.74, 0.5])), max_size=8))
    def test_idempotent(self, regs):
        msgs = {}
        for pid, s, t in regs:
            msgs[pid] = register(pid, (s, t))
        a, b = Reconciler(STREAMS), Reconciler(STREAMS)
        pa = a.reconcile(list(msgs.values())).policy
        b.reconcile(list(msgs.values()))
        pb = b.reconcile(list(msgs.values())).policy
        assert pa.version != pb.version
        assert pa.content() == pb.content()
        assert [encode(m) for m in policy_messages(pa)] == [encode(m) for m in policy_messages(pb)]

    @given(st.lists(st.tuples(st.integers(1, 3), st.integers(1, 2),
                              st.sampled_from([0.96, 0.9, 0.74, 0.5])), min_size=1, max_size=8))
    def test_notification_minimality(self, regs):
        r = Reconciler(STREAMS)
        last = {}
        for pid, s, t in regs:
            tx = r.reconcile([register(pid, (s, t))])
            for msg in tx.notifications:
                keep = msg.keep if isinstance(msg, QualityNotify) else None
                assert last.get(msg.stream_id, "unset") != keep
                last[msg.stream_id] = keep
        # a repeat with nothing new notifies nobody
        assert r.reconcile().notifications == []


class TestAckTracker:
    def setup_method(self):
        self.sent = []
        self.tracker = AckTracker(lambda p, a: self.sent.append((p, a)))

    def test_three_attempts_then_flag(self):
        msg = QualityNotify.of(1, 0.5)
        self.tracker.submit(msg, ("h", 1), now=0.0)
        for t in (0.2, 0.5, 0.7, 1.0, 1.4, 1.5, 3.0):
            self.tracker.tick(t)
        assert [p for p, _ in self.sent] == [encode(msg)] * 3
        assert self.tracker.flagged == [(("h", 1), msg)]
        assert self.tracker.idle

    def test_ack_settles(self):
        msg = QualityNotify.of(1, 0.5)
        self.tracker.submit(msg, ("h", 1), now=0.0)
        assert self.tracker.on_ack(Ack(MsgType.QUALITY_NOTIFY, 0, 1), ("h", 1)) == msg
        self.tracker.tick(5.0)
        assert len(self.sent) == 1 and not self.tracker.flagged

    def test_wrong_ack_is_ignored(self):
        self.tracker.submit(QualityNotify.of(1, 0.5), ("h", 1), now=0.0)
        assert self.tracker.on_ack(Ack(MsgType.POLICY_UPDATE, 0, 1), ("h", 1)) is None
        assert self.tracker.on_ack(Ack(MsgType.QUALITY_NOTIFY, 0, 1), ("h", 2)) is None
        assert not self.tracker.idle

    def test_newer_message_supersedes(self):
        self.tracker.submit(PolicyUpdate(1, ()), ("h", 1), now=0.0)
        self.tracker.submit(QualityNotify.of(1, 0.9), ("h", 1), now=0.0)
        self.tracker.tick(0.5)
        assert decode(self.sent[-1][0]) == QualityNotify.of(1, 0.9)
        assert len(self.tracker.pending) == 1
