import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgecast.control import Ack, PolicyUpdate, QualityNotify, encode
from edgecast.metrics import FlowCounters
from edgecast.qoc import StreamQuality
from edgecast.sensor import (
    SensorPipeline,
    SensorQuality,
    StreamSource,
    UnknownStream,
    frame_datagrams,
    handle_quality_notify,
    replay_frames,
    sensor_control,
)
from edgecast.synthetic import SyntheticSpec, generate_synthetic, synthetic_frames
from edgecast.ts import FrameClass, classify_stream


def classes_of(units, pids):
    return [c for _, c in classify_stream(b"".join(units), pids)]


def test_full_quality_is_identity(small_spec):
    units = generate_synthetic(small_spec)
    assert sensor_control(units, SensorQuality(1), small_spec.video_pids) == units


def test_half_keep_sends_exactly_half():
    spec = SyntheticSpec(gop=101, packets_per_frame=1, frames=101)
    units = generate_synthetic(spec)
    q = SensorQuality(1, StreamQuality(0.5))
    out = sensor_control(units, q, spec.video_pids)
    assert classes_of(out, spec.video_pids).count(FrameClass.DIFFERENTIAL) == 50


def test_zero_keep_leaves_reference_and_psi(small_spec):
    units = generate_synthetic(small_spec)
    out = sensor_control(units, SensorQuality(1, StreamQuality(0.0)), small_spec.video_pids)
    classes = classes_of(out, small_spec.video_pids)
    assert set(classes) == {FrameClass.REFERENCE, FrameClass.NON_VIDEO}
    assert len(out) == 2 + 2 * 3


@given(st.floats(0, 1), st.integers(1, 6), st.integers(2, 15))
def test_never_removes_reference_or_psi(keep, ppf, gop):
    spec = SyntheticSpec(gop=gop, packets_per_frame=ppf, frames=2 * gop)
    units = generate_synthetic(spec)
    counters = FlowCounters()
    sensor_control(units, SensorQuality(1, StreamQuality(keep)), spec.video_pids, counters=counters)
    for cls in (FrameClass.REFERENCE, FrameClass.NON_VIDEO):
        assert counters.packets_out[cls] == counters.packets_in[cls]


def test_notify_converges():
    spec = SyntheticSpec(gop=100, packets_per_frame=10, frames=1100)
    pipe = SensorPipeline(StreamSource(1, synthetic=spec))
    pipe.notify(QualityNotify.of(1, 0.75))
    for frame in synthetic_frames(spec):
        pipe.frame(frame, 0.0)
    c = pipe.counters
    assert c.packets_in[FrameClass.DIFFERENTIAL] >= 10_000
    assert c.realized_keep() == pytest.approx(0.75, abs=0.005)


def test_foreign_stream_rejected():
    with pytest.raises(UnknownStream):
        handle_quality_notify(SensorQuality(1), QualityNotify.of(2, 0.5))


def test_duplicate_notify_is_idempotent():
    spec = SyntheticSpec(gop=12, packets_per_frame=4, frames=48)
    outs = []
    for repeats in (1, 3):
        pipe = SensorPipeline(StreamSource(1, synthetic=spec))
        for _ in range(repeats):
            pipe.notify(encode(QualityNotify.of(1, 0.6)))
        outs.append([dg for f in synthetic_frames(spec) for dg in pipe.frame(f, 0.0)])
    assert outs[0] == outs[1]


def test_pause_and_resume():
    q = SensorQuality(1)
    handle_quality_notify(q, PolicyUpdate(1, ()))
    q.latch()
    assert q.paused
    handle_quality_notify(q, QualityNotify.of(1, 1.0))
    q.latch()
    assert not q.paused


def test_sensor_rejects_other_messages():
    with pytest.raises(TypeError):
        handle_quality_notify(SensorQuality(1), Ack(1))
    with pytest.raises(TypeError):
        handle_quality_notify(SensorQuality(1), PolicyUpdate.of(1, {3: 0.5}))


def test_quality_change_is_frame_aligned():
    spec = SyntheticSpec(gop=12, packets_per_frame=10, frames=24)
    units = generate_synthetic(spec)
    q = SensorQuality(1)
    video = spec.video_pids
    # the notification lands mid-frame: after the 2nd packet of frame 1
    first, rest = units[:2 + 10 + 2], units[2 + 10 + 2:]
    out = sensor_control(first, q, video)
    handle_quality_notify(q, QualityNotify.of(1, 0.0))
    out += sensor_control(rest, q, video, classifier=_replayed(first, video))
    # frame 1 is still sent whole; frame 2 on is thinned
    per_frame = {}
    from edgecast.synthetic import read_tag
    for unit in out:
        tag = read_tag(unit)
        if tag:
            per_frame[tag.frame_index] = per_frame.get(tag.frame_index, 0) + 1
    assert per_frame[1] == 10
    assert 2 not in per_frame and per_frame[12] == 10


def _replayed(units, pids):
    from edgecast.ts import Classifier, parse_ts_packet
    c = Classifier(pids)
    for u in units:
        c.classify(parse_ts_packet(u))
    return c


def test_frame_datagrams():
    units = [bytes([0x47]) + bytes(187)] * 15
    dgs = frame_datagrams(units)
    assert [len(d) // 188 for d in dgs] == [7, 7, 1]
    with pytest.raises(ValueError):
        frame_datagrams(units, 8)


def test_replay_frames_matches_synthetic(tmp_path, small_spec):
    data = b"".join(generate_synthetic(small_spec))
    frames = list(replay_frames(data, small_spec.video_pids))
    assert [f.index for f in frames] == list(range(-1, small_spec.frames))
    assert [f.cls for f in frames[1:3]] == [FrameClass.REFERENCE, FrameClass.DIFFERENTIAL]
    path = tmp_path / "cap.ts"
    path.write_bytes(data)
    src = StreamSource(4, replay_path=str(path), video_pids=small_spec.video_pids)
    assert sum(len(f.packets) for f in src.frames()) == 74


def test_source_needs_exactly_one_kind(small_spec):
    with pytest.raises(ValueError):
        StreamSource(1)
    with pytest.raises(ValueError):
        StreamSource(1, synthetic=small_spec, replay_path="x.ts")
