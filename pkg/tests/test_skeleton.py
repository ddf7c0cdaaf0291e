import logging
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lienet import liegroup as lg
from lienet.errors import DegenerateBone, InconsistentJointCount, MalformedFile, UnknownLabel
from lienet.skeleton import (
    DEFAULT_LENGTHS,
    ExtractionStats,
    LieSequence,
    SkeletonSequence,
    SkeletonTopology,
    edge_vector,
    frame_to_lie,
    frames_to_lie,
    load_skeleton_file,
    pair_index,
    read_feature_cache,
    relative_rotation,
    resample_sequence,
    write_feature_cache,
    write_skeleton_file,
)
from lienet.synth import DEFAULT_TOPOLOGY

CHAIN3 = SkeletonTopology(4, ((0, 1), (1, 2), (2, 3)))


def g3d_topology():
    # 20 joints, 19 bones in a tree
    parents = [0, 1, 2, 2, 4, 5, 6, 2, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18]
    return SkeletonTopology(20, tuple((p, j + 1) for j, p in enumerate(parents)))


def random_pose(rng, topology=DEFAULT_TOPOLOGY):
    return rng.standard_normal((topology.joint_count, 3))


# -- edges and pair rotations ---------------------------------------------------

def test_edge_vector_examples():
    topo = SkeletonTopology(2, ((0, 1),))
    np.testing.assert_array_equal(edge_vector([[0, 0, 0], [1, 0, 0]], topo, 0), [1, 0, 0])
    np.testing.assert_array_equal(edge_vector([[1, 1, 1], [1, 1, 1]], topo, 0), [0, 0, 0])
    np.testing.assert_array_equal(edge_vector([[1, 2, 3], [4, 6, 3]], topo, 0), [3, 4, 0])


def test_relative_rotation_parallel_is_identity():
    np.testing.assert_allclose(relative_rotation([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]), np.eye(3), atol=1e-15)


def test_relative_rotation_quarter_turn():
    r = relative_rotation([1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    np.testing.assert_allclose(r, lg.rotation_from_axis_angle([0, 0, 1], np.pi / 2), atol=1e-15)


def test_relative_rotation_antiparallel():
    r = relative_rotation([1.0, 0.0, 0.0], [-1.0, 0.0, 0.0])
    expected = lg.rotation_from_axis_angle([0, 0, 1], np.pi - lg.DELTA_THETA)
    np.testing.assert_allclose(r, expected, atol=1e-15)
    mapped = r @ np.array([1.0, 0.0, 0.0])
    assert np.arccos(np.clip(-mapped[0], -1, 1)) <= lg.DELTA_THETA * 1.0001
    # edge collinear with z uses the y axis as the perpendicular
    rz = relative_rotation([0.0, 0.0, 1.0], [0.0, 0.0, -1.0])
    np.testing.assert_allclose(rz @ [0.0, 1.0, 0.0], [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(rz, lg.rotation_from_axis_angle([0, 1, 0], np.pi - lg.DELTA_THETA), atol=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_relative_rotation_maps_direction(seed):
    rng = np.random.default_rng(seed)
    em, en = rng.standard_normal(3), rng.standard_normal(3)
    r = relative_rotation(em, en)
    assert lg.is_rotation(r)
    np.testing.assert_allclose(r @ (em / np.linalg.norm(em)), en / np.linalg.norm(en), atol=1e-8)


def test_relative_rotation_degenerate():
    with pytest.raises(DegenerateBone):
        relative_rotation([0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    with pytest.raises(DegenerateBone):
        relative_rotation([1.0, 0.0, 0.0], [1e-9, 0.0, 0.0])


# -- frames ---------------------------------------------------------------------------

def test_pair_index_order():
    assert pair_index(3) == [(0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1)]
    assert pair_index(4) == pair_index(4)


def test_all_bones_along_x_give_identity():
    topo = SkeletonTopology(4, ((0, 1), (1, 2), (2, 3)))
    frame = np.array([[0, 0, 0], [1, 0, 0], [3, 0, 0], [3.5, 0, 0]], dtype=float)
    np.testing.assert_allclose(frame_to_lie(frame, topo), np.tile(np.eye(3), (6, 1, 1)), atol=1e-15)


def test_feature_counts():
    rng = np.random.default_rng(0)
    assert frame_to_lie(rng.standard_normal((4, 3)), CHAIN3).shape == (6, 3, 3)
    topo = g3d_topology()
    assert topo.bone_count == 19
    out = frame_to_lie(rng.standard_normal((20, 3)), topo)
    assert out.shape == (342, 3, 3) == (2 * len(list(combinations(range(19), 2))), 3, 3)
    assert lg.is_rotation(out)


def test_pair_rotations_are_consistent():
    # R_mn and R_nm encode the same relative angle between bones m and n
    rng = np.random.default_rng(1)
    frame = random_pose(rng)
    out = frame_to_lie(frame, DEFAULT_TOPOLOGY)
    starts = np.array([s for s, _ in DEFAULT_TOPOLOGY.bones])
    ends = np.array([e for _, e in DEFAULT_TOPOLOGY.bones])
    edges = frame[ends] - frame[starts]
    for k, (m, n) in enumerate(pair_index(DEFAULT_TOPOLOGY.bone_count)):
        cos = edges[m] @ edges[n] / np.linalg.norm(edges[m]) / np.linalg.norm(edges[n])
        assert lg.rotation_angle(out[k]) == pytest.approx(np.arccos(cos), abs=1e-9)


def test_wrong_joint_count():
    with pytest.raises(InconsistentJointCount):
        frame_to_lie(np.zeros((3, 3)), CHAIN3)


def test_degenerate_bone_becomes_identity(caplog):
    frame = np.array([[0, 0, 0], [1, 0, 0], [1, 0, 0], [1, 1, 0]], dtype=float)
    stats = ExtractionStats()
    with caplog.at_level(logging.WARNING):
        out = frame_to_lie(frame, CHAIN3, stats)
    # bone 1 is zero-length: pairs (0,1),(1,0),(1,2),(2,1) fall back
    assert stats.degenerate_pairs == 4
    for k, (m, n) in enumerate(pair_index(3)):
        if 1 in (m, n):
            np.testing.assert_array_equal(out[k], np.eye(3))
    assert "degenerate" in caplog.text


def _random_similarity(rng):
    return lg.random_rotation(rng), rng.uniform(-100, 100, 3), rng.uniform(0.1, 10)


def test_view_invariance_100_trials():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        frame = random_pose(rng)
        q, _, _ = _random_similarity(rng)
        diff = frame_to_lie(frame @ q.T, DEFAULT_TOPOLOGY) - frame_to_lie(frame, DEFAULT_TOPOLOGY)
        worst = max(worst, np.abs(diff).max())
    assert worst < 1e-8


def test_translation_invariance():
    rng = np.random.default_rng(3)
    for _ in range(100):
        frame = random_pose(rng)
        off = rng.uniform(-100, 100, 3)
        diff = frame_to_lie(frame + off, DEFAULT_TOPOLOGY) - frame_to_lie(frame, DEFAULT_TOPOLOGY)
        # subtraction of large offsets rounds edge vectors at the 1e-14 level
        assert np.abs(diff).max() < 1e-12


def test_translation_invariance_exact_for_representable_offsets():
    rng = np.random.default_rng(4)
    frame = np.round(random_pose(rng) * 64) / 64
    out = frame_to_lie(frame + np.array([8.0, -16.0, 4.0]), DEFAULT_TOPOLOGY)
    np.testing.assert_array_equal(out, frame_to_lie(frame, DEFAULT_TOPOLOGY))


def test_scale_invariance():
    rng = np.random.default_rng(5)
    for _ in range(100):
        frame = random_pose(rng)
        c = rng.uniform(0.01, 100)
        diff = frame_to_lie(c * frame, DEFAULT_TOPOLOGY) - frame_to_lie(frame, DEFAULT_TOPOLOGY)
        assert np.abs(diff).max() < 1e-10


def test_sequence_matches_per_frame():
    rng = np.random.default_rng(6)
    pos = rng.standard_normal((5, DEFAULT_TOPOLOGY.joint_count, 3))
    batch = frames_to_lie(pos, DEFAULT_TOPOLOGY)
    for t in range(5):
        np.testing.assert_array_equal(batch[t], frame_to_lie(pos[t], DEFAULT_TOPOLOGY))


# -- resampling ---------------------------------------------------------------------

def _lie_sequence(rng, t, mhat=4):
    return LieSequence(lg.random_rotation(rng, (t, mhat)), "a", "s")


def test_resample_same_length_is_identity():
    seq = _lie_sequence(np.random.default_rng(7), 6)
    np.testing.assert_array_equal(resample_sequence(seq, 6).frames, seq.frames)


def test_resample_single_frame():
    seq = _lie_sequence(np.random.default_rng(8), 1)
    out = resample_sequence(seq, 5)
    assert out.length == 5
    for f in out.frames:
        np.testing.assert_array_equal(f, seq.frames[0])


def test_resample_geodesic_midpoint():
    rz = lg.rotation_from_axis_angle([0, 0, 1], np.pi / 2)
    seq = LieSequence(np.stack([np.eye(3)[None], rz[None]]))
    out = resample_sequence(seq, 3)
    np.testing.assert_allclose(out.frames[1, 0], lg.rotation_from_axis_angle([0, 0, 1], np.pi / 4), atol=1e-12)
    np.testing.assert_array_equal(out.frames[0], seq.frames[0])
    np.testing.assert_array_equal(out.frames[-1], seq.frames[-1])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_resample_length_endpoints_idempotent(t, n, seed):
    rng = np.random.default_rng(seed)
    seq = LieSequence(lg.exp_map(lg.hat(0.5 * rng.standard_normal((t, 3, 3)))))
    out = resample_sequence(seq, n)
    assert out.length == n
    assert lg.is_rotation(out.frames)
    np.testing.assert_array_equal(out.frames[0], seq.frames[0])
    if n > 1:
        np.testing.assert_array_equal(out.frames[-1], seq.frames[-1])
    np.testing.assert_allclose(resample_sequence(out, n).frames, out.frames, atol=1e-9)


def test_resample_near_pi_falls_back_to_nearest():
    r1 = lg.rotation_from_axis_angle([0, 0, 1], np.pi)
    seq = LieSequence(np.stack([np.eye(3)[None], r1[None]]))
    stats = ExtractionStats()
    out = resample_sequence(seq, 4, stats=stats)
    assert stats.near_pi_fallbacks == 2
    np.testing.assert_array_equal(out.frames[1, 0], np.eye(3))
    np.testing.assert_array_equal(out.frames[2, 0], r1)


def test_resample_nearest_mode():
    seq = _lie_sequence(np.random.default_rng(9), 3)
    out = resample_sequence(seq, 5, mode="nearest")
    for j, src in enumerate([0, 1, 1, 2, 2]):
        np.testing.assert_array_equal(out.frames[j], seq.frames[src])


def test_default_lengths():
    assert DEFAULT_LENGTHS == {"g3d": 100, "hdm05": 16, "ntu": 64}


# -- file formats --------------------------------------------------------------------

def test_skeleton_file_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    seqs = [SkeletonSequence(rng.standard_normal((2, 4, 3)), "wave", "s1"),
            SkeletonSequence(rng.standard_normal((3, 4, 3)), "kick", "s2")]
    path = tmp_path / "a.skel"
    write_skeleton_file(path, CHAIN3, seqs)
    topo, loaded = load_skeleton_file(path)
    assert topo == CHAIN3
    assert [s.label for s in loaded] == ["wave", "kick"]
    for a, b in zip(seqs, loaded):
        np.testing.assert_array_equal(a.positions, b.positions)


def _write(tmp_path, text):
    path = tmp_path / "x.skel"
    path.write_text(text, encoding="utf-8")
    return path


GOOD_HEADER = "SKEL v1 joints=2 bones=1\nbones: 0-1\n"


def test_load_two_frame_file(tmp_path):
    path = _write(tmp_path, GOOD_HEADER + "seq a label=x frames=2\n0 0 0 1 0 0\n0 0 0 0 1 0\n")
    topo, seqs = load_skeleton_file(path)
    assert topo.bone_count == 1 and len(seqs) == 1 and seqs[0].positions.shape == (2, 2, 3)


def test_load_wrong_coordinate_count(tmp_path):
    path = _write(tmp_path, GOOD_HEADER + "seq a label=x frames=2\n0 0 0 1 0 0\n0 0 0 1 0\n")
    with pytest.raises(InconsistentJointCount, match=r"x.skel:5: frame 1"):
        load_skeleton_file(path)


@pytest.mark.parametrize("body, where", [
    ("seq a label=x frames=2\n0 0 0 1 0 0\n", ":3:"),
    ("seq a label=x frames=0\n", ":3:"),
    ("", ":2:"),
    ("seq a label=x frames=1\n0 0 0 1 0 zz\n", ":4:"),
    ("garbage\n", ":3:"),
])
def test_load_malformed_bodies(tmp_path, body, where):
    with pytest.raises(MalformedFile, match=where):
        load_skeleton_file(_write(tmp_path, GOOD_HEADER + body))


def test_load_bad_header(tmp_path):
    with pytest.raises(MalformedFile, match=":1:"):
        load_skeleton_file(_write(tmp_path, "SKEL v2 joints=2 bones=1\nbones: 0-1\n"))
    with pytest.raises(MalformedFile, match=":2:"):
        load_skeleton_file(_write(tmp_path, "SKEL v1 joints=2 bones=1\nbones: 0-2\n"))


def test_load_labels(tmp_path):
    path = _write(tmp_path, GOOD_HEADER + "seq a label= frames=1\n0 0 0 1 0 0\n")
    with pytest.raises(UnknownLabel):
        load_skeleton_file(path)
    path = _write(tmp_path, GOOD_HEADER + "seq a label=x frames=1\n0 0 0 1 0 0\n")
    with pytest.raises(UnknownLabel):
        load_skeleton_file(path, labels={"y"})


def test_feature_cache_round_trip(tmp_path):
    seq = _lie_sequence(np.random.default_rng(11), 5, 20)
    path = tmp_path / "a.lief"
    write_feature_cache(path, seq)
    data = path.read_bytes()
    assert data[:4] == b"LIEF"
    assert np.frombuffer(data[4:16], "<u4").tolist() == [1, 20, 5]
    assert len(data) == 16 + 5 * 20 * 72
    back = read_feature_cache(path)
    np.testing.assert_array_equal(back.frames, seq.frames)


def test_feature_cache_rejects_truncation(tmp_path):
    seq = _lie_sequence(np.random.default_rng(12), 2)
    path = tmp_path / "a.lief"
    write_feature_cache(path, seq)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(MalformedFile):
        read_feature_cache(path)
    path.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(MalformedFile):
        read_feature_cache(path)
