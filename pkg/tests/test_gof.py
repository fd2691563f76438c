import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splatstream.errors import FormatError, ParameterError, RangeError, TruncationError
from splatstream.gof import (build_deformation, gof_from_bytes, gof_to_bytes,
                             reconstruct_frame, segment_gofs, split_foreground, track_size_bytes)
from splatstream.model import FrameSequence, GaussianCloud, raw_size_bytes
from splatstream.synth import ClusterSpec, SceneSpec, gen_sequence, random_cloud

from helpers import check_fidelity, random_rigid_spec, sequence_with_ids


def test_segment_exact():
    assert segment_gofs(90, 30) == [range(0, 30), range(30, 60), range(60, 90)]


def test_segment_remainder():
    r = segment_gofs(100, 30)
    assert len(r) == 4 and len(r[-1]) == 10


def test_segment_guard():
    with pytest.raises(ParameterError):
        segment_gofs(10, 0)


def test_empty_input():
    with pytest.raises(ParameterError):
        build_deformation([])


def test_static_all_zero(rng):
    c = random_cloud(100, rng)
    gof = build_deformation([c] * 5)
    for rec in gof.track.records[1:]:
        assert rec.match_count == 100
        assert not rec.pos_q.any() and not rec.opacity_q.any() and not rec.dc_q.any()
        assert len(rec.births) == 0 and len(rec.deaths) == 0
    for k in range(5):
        assert reconstruct_frame(gof, k) == c


def test_translation_decodes(rng):
    c = random_cloud(200, rng, extent=2.0)
    t = 0.05
    frames = [c.replace(positions=c.positions.astype(np.float64) + (k * t, 0, 0))
              for k in range(6)]
    gof = build_deformation(frames)
    step = gof.track.pos_step
    for k, rec in enumerate(gof.track.records):
        assert rec.match_count == 200
        d = gof.track.decode_positions(rec)
        assert np.all(np.abs(d - (k * t, 0, 0)) <= step + 1e-7)


def test_late_primitive_is_birth(rng):
    base = random_cloud(50, rng)
    extra = random_cloud(1, rng).replace(positions=[[10.0, 10.0, 10.0]])
    frames = [base] * 3 + [GaussianCloud.concat([base, extra])] * 3
    gof = build_deformation(frames)
    for k, rec in enumerate(gof.track.records):
        assert len(rec.births) == (1 if k >= 3 else 0)
    assert gof.track.records[3].births == extra


def test_reconstruct_guards(rng):
    c = random_cloud(10, rng)
    gof = build_deformation([c, c])
    assert reconstruct_frame(gof, 0) is gof.keyframe
    with pytest.raises(RangeError):
        reconstruct_frame(gof, 2)
    with pytest.raises(RangeError):
        reconstruct_frame(gof, -1)


def test_random_gof_roundtrip():
    rng = np.random.default_rng(7)
    for _ in range(5):
        seq, ids = sequence_with_ids(random_rigid_spec(rng), 10)
        check_fidelity(seq, ids)


def test_attribute_deltas(rng):
    c = random_cloud(80, rng)
    op = np.clip(c.opacities + 0.1, 0.01, 0.99)
    sh = c.sh.copy()
    sh[:, 0, :] += 0.25
    d = c.replace(opacity_logit=np.log(op / (1 - op)), sh=sh)
    gof = build_deformation([c, d])
    out = reconstruct_frame(gof, 1)
    assert np.abs(out.opacities - d.opacities).max() <= 1 / 32767 + 1e-6
    assert np.abs(out.sh_dc - d.sh_dc).max() <= 2 / 32767 + 1e-6


def test_scale_change_forces_death_and_birth(rng):
    c = random_cloud(20, rng)
    ls = c.log_scale.copy()
    ls[3] += np.log(1.5)
    gof = build_deformation([c, c.replace(log_scale=ls)])
    rec = gof.track.records[1]
    assert list(rec.deaths) == [3]
    assert len(rec.births) == 1


def test_split_static_and_infinite(rng):
    c = random_cloud(40, rng)
    gof = build_deformation([c] * 4)
    assert len(split_foreground(gof, 0.01).fg_indices) == 0
    assert len(split_foreground(gof, np.inf).fg_indices) == 0


def test_split_moving_cluster():
    spec = SceneSpec([ClusterSpec(count=60, spread=(2, 2, 2)),
                      ClusterSpec(center=(6, 0, 0), count=25, spread=(0.3, 0.3, 0.3),
                                  velocity=(1.0, 0, 0))], seed=11)
    seq = gen_sequence(spec, 4, fps=3.0)  # moves 1.0 units over the GoF
    gof = build_deformation(seq)
    split = split_foreground(gof, 0.1)
    assert list(split.fg_indices) == list(range(60, 85))
    assert len(split.foreground) + len(split.background) == len(gof.keyframe)


def test_split_dying_is_foreground():
    spec = SceneSpec([ClusterSpec(count=30), ClusterSpec(center=(5, 5, 5), count=5,
                                                         death_frame=2)], seed=2)
    gof = build_deformation(gen_sequence(spec, 3, 30))
    assert list(split_foreground(gof, 1.0).fg_indices) == list(range(30, 35))


def test_split_guard(rng):
    gof = build_deformation([random_cloud(5, rng)])
    with pytest.raises(ParameterError):
        split_foreground(gof, -1)


def test_container_roundtrip():
    rng = np.random.default_rng(3)
    seq, _ = sequence_with_ids(random_rigid_spec(rng), 6)
    gof = build_deformation(seq, fps=24, index=7)
    blob = gof_to_bytes(gof)
    back = gof_from_bytes(blob)
    assert back.index == 7 and back.fps == 24 and back.frame_count == 6
    for k in range(6):
        assert reconstruct_frame(back, k) == reconstruct_frame(gof, k)
    assert gof_to_bytes(back) == blob
    with pytest.raises(TruncationError):
        gof_from_bytes(blob[:-3])
    with pytest.raises(FormatError):
        gof_from_bytes(b"XXXX" + blob[4:])


def test_track_size_matches_serialisation():
    rng = np.random.default_rng(5)
    seq, _ = sequence_with_ids(random_rigid_spec(rng), 5)
    gof = build_deformation(seq)
    from splatstream.gof import track_to_bytes
    assert track_size_bytes(gof.track) == len(track_to_bytes(gof.track))


@given(st.integers(2, 8), st.integers(1, 200), st.integers(0, 2 ** 31))
def test_static_track_smaller_than_raw(frames, n, seed):
    c = random_cloud(n, np.random.default_rng(seed))
    gof = build_deformation([c] * frames)
    assert track_size_bytes(gof.track) <= raw_size_bytes(c) * (frames - 1)


@given(st.integers(0, 2 ** 31))
def test_coverage_property(seed):
    rng = np.random.default_rng(seed)
    seq, ids = sequence_with_ids(random_rigid_spec(rng, 4), 4)
    gof = check_fidelity(seq, ids)
    assert [len(reconstruct_frame(gof, k)) for k in range(4)] == [len(f) for f in seq.frames]


def test_frame_sequence_input(rng):
    c = random_cloud(10, rng)
    gof = build_deformation(FrameSequence([c, c], 15))
    assert gof.duration_s == pytest.approx(2 / 15)
    assert build_deformation(FrameSequence([c, c], 15), fps=30).duration_s == pytest.approx(2 / 30)
