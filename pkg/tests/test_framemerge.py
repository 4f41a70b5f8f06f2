"""Transform estimation and frame merging."""

import logging
import math

import numpy as np
import pytest

from markerswarm.geom import Pose6D, quat_angle, rotation_angle_between, wrap_angles
from markerswarm.mapstore import GlobalMap, MapContractError, MapEntry
from markerswarm.framemerge import (
    FrameTransform,
    estimate_transform,
    find_matches,
    fuse_duplicate_entries,
    merge_frames,
    refine_transform,
)


def random_transform(rng):
    return Pose6D.from_euler(
        rng.uniform(-5, 5, size=3),
        [rng.uniform(-3, 3), rng.uniform(-1.3, 1.3), rng.uniform(-3, 3)],
    )


def random_marker_pose(rng, collinear=False, index=0):
    if collinear:
        t = np.array([1.0, 2.0, 0.5]) + index * np.array([0.7, -0.3, 0.2])
    else:
        t = rng.uniform(-2, 2, size=3)
    return Pose6D.from_euler(t, [rng.uniform(-3, 3), rng.uniform(-1.2, 1.2), rng.uniform(-3, 3)])


def pose_error(a: Pose6D, b: Pose6D):
    return float(np.linalg.norm(a.t - b.t)), rotation_angle_between(a.q, b.q)


class TestEstimateTransformExact:
    @pytest.mark.parametrize("support", [1, 2, 3, 10])
    def test_exact_recovery_zero_noise(self, support):
        rng = np.random.default_rng(600 + support)
        for _ in range(100):
            truth = random_transform(rng)
            pairs = []
            for k in range(support):
                pose_b = random_marker_pose(rng, index=k)
                pairs.append((truth.compose(pose_b), pose_b))
            ft = estimate_transform(pairs, from_frame=2, to_frame=1)
            dt, dr = pose_error(ft.rt, truth)
            assert dt < 1e-9 and dr < 1e-9
            assert ft.residual < 1e-9
            assert ft.support == support
            assert abs(ft.scale - 1.0) < 1e-9 or support == 1

    def test_exact_recovery_collinear_triples(self):
        # rank-1 position spread exercises the orientation fallback
        rng = np.random.default_rng(61)
        for _ in range(100):
            truth = random_transform(rng)
            pairs = []
            for k in range(3):
                pose_b = random_marker_pose(rng, collinear=True, index=k)
                pairs.append((truth.compose(pose_b), pose_b))
            ft = estimate_transform(pairs)
            dt, dr = pose_error(ft.rt, truth)
            assert dt < 1e-9 and dr < 1e-9

    def test_zero_pairs_rejected(self):
        with pytest.raises(ValueError):
            estimate_transform([])


class TestEstimateTransformNoise:
    def test_translation_error_decreases_with_support(self):
        rng = np.random.default_rng(62)
        sigma = 0.01
        medians = {}
        for support in (3, 6, 12):
            errors = []
            for _ in range(300):
                truth = random_transform(rng)
                pairs = []
                for _ in range(support):
                    pose_b = random_marker_pose(rng)
                    pose_a = truth.compose(pose_b)
                    noisy_a = Pose6D(pose_a.t + sigma * rng.standard_normal(3), pose_a.q)
                    pairs.append((noisy_a, pose_b))
                ft = estimate_transform(pairs)
                errors.append(np.linalg.norm(ft.rt.t - truth.t))
            medians[support] = float(np.median(errors))
        assert medians[3] > medians[6] > medians[12]

    def test_rotation_always_proper(self):
        # near-planar clouds with heavy noise provoke the reflection case
        rng = np.random.default_rng(63)
        for _ in range(300):
            truth = random_transform(rng)
            pairs = []
            for _ in range(4):
                t = np.append(rng.uniform(-2, 2, size=2), 0.0)
                pose_b = Pose6D.from_euler(t, [0, 0, rng.uniform(-3, 3)])
                pose_a = truth.compose(pose_b)
                noisy_a = Pose6D(pose_a.t + 0.3 * rng.standard_normal(3), pose_a.q)
                pairs.append((noisy_a, pose_b))
            ft = estimate_transform(pairs)
            assert np.linalg.det(ft.rt.rotation()) == pytest.approx(1.0, abs=1e-9)

    def test_scale_diagnostic_flags_non_rigid_data(self, caplog):
        rng = np.random.default_rng(64)
        truth = random_transform(rng)
        pairs = []
        for _ in range(5):
            pose_b = random_marker_pose(rng)
            stretched = Pose6D(truth.apply(pose_b.t) * 1.12, truth.compose(pose_b).q)
            pairs.append((stretched, pose_b))
        with caplog.at_level(logging.WARNING, logger="markerswarm.framemerge"):
            ft = estimate_transform(pairs)
        assert not (0.95 <= ft.scale <= 1.05)
        assert any("scale" in rec.message for rec in caplog.records)


class TestFindMatches:
    def test_intersection_with_pending_observations_sorted(self):
        gmap = GlobalMap()
        gmap.register_drone(0, 0)
        gmap.register_drone(1, 1)
        for marker_id in (8, 2, 5):
            gmap.insert_marker(0, marker_id, Pose6D.identity(), np.eye(6) * 0.01, 0.0)
        gmap.insert_marker(1, 3, Pose6D.identity(), np.eye(6) * 0.01, 0.0)
        pending = {8: Pose6D.identity(), 2: Pose6D.identity(), 99: Pose6D.identity()}
        assert find_matches(gmap, 0, 1, pending) == [2, 8]
        assert find_matches(gmap, 0, 1, {}) == []

    def test_same_frame_query_rejected(self):
        gmap = GlobalMap()
        gmap.register_drone(0, 0)
        gmap.insert_marker(0, 4, Pose6D.identity(), np.eye(6) * 0.01, 0.0)
        with pytest.raises(ValueError):
            find_matches(gmap, 0, 0, {})


def build_two_frame_map(rng, n_in_loser=3):
    gmap = GlobalMap()
    gmap.register_drone(0, 0)
    gmap.register_drone(1, 1)
    gmap.register_drone(2, 1)
    loser_entries = {}
    for k in range(n_in_loser):
        pose = random_marker_pose(rng, index=k)
        cov = np.diag([0.01] * 3 + [0.001] * 3)
        gmap.insert_marker(1, 10 + k, pose, cov, now=float(k))
        loser_entries[10 + k] = pose
    gmap.insert_marker(0, 1, random_marker_pose(rng), np.diag([0.02] * 3 + [0.002] * 3), 0.0)
    return gmap, loser_entries


class TestMergeFrames:
    def test_entries_reexpressed_and_drones_reassigned(self):
        rng = np.random.default_rng(65)
        gmap, loser_entries = build_two_frame_map(rng)
        rt = random_transform(rng)
        ft = FrameTransform(1, 0, rt, 0.0, 1, 1.0)
        record, moved = merge_frames(gmap, winner=0, loser=1, transform=ft)
        assert moved == [1, 2]
        assert gmap.frames == {0}
        for marker_id, old_pose in loser_entries.items():
            entry = gmap.lookup(marker_id)
            assert entry.frame == 0
            dt, dr = pose_error(entry.pose, rt.compose(old_pose))
            assert dt < 1e-12 and dr < 1e-12
            # transport preserves the uncertainty volume
            assert abs(np.trace(entry.cov) - (0.03 + 0.003)) < 1e-12
        assert record.pre_merge_poses.keys() == loser_entries.keys()

    def test_untouched_winner_entries(self):
        rng = np.random.default_rng(66)
        gmap, _ = build_two_frame_map(rng)
        before = gmap.lookup(1).pose
        ft = FrameTransform(1, 0, random_transform(rng), 0.0, 1, 1.0)
        merge_frames(gmap, 0, 1, ft)
        dt, dr = pose_error(gmap.lookup(1).pose, before)
        assert dt == 0.0 and dr < 1e-15

    def test_self_merge_rejected(self):
        rng = np.random.default_rng(67)
        gmap, _ = build_two_frame_map(rng)
        ft = FrameTransform(0, 0, Pose6D.identity(), 0.0, 1, 1.0)
        with pytest.raises(MapContractError):
            merge_frames(gmap, 0, 0, ft)

    def test_higher_id_cannot_win(self):
        rng = np.random.default_rng(68)
        gmap, _ = build_two_frame_map(rng)
        ft = FrameTransform(0, 1, Pose6D.identity(), 0.0, 1, 1.0)
        with pytest.raises(MapContractError):
            merge_frames(gmap, winner=1, loser=0, transform=ft)

    def test_chain_of_merges_leaves_one_frame(self):
        rng = np.random.default_rng(69)
        gmap = GlobalMap()
        k = 4  # k+1 frames, k merges
        for frame in range(k + 1):
            gmap.register_drone(frame, frame)
            gmap.insert_marker(frame, 20 + frame, random_marker_pose(rng), np.eye(6) * 0.01, 0.0)
        for loser in range(k, 0, -1):
            ft = FrameTransform(loser, 0, random_transform(rng), 0.0, 1, 1.0)
            merge_frames(gmap, 0, loser, ft)
        assert gmap.frames == {0}
        assert all(e.frame == 0 for e in gmap.entries.values())


class TestFuseDuplicateEntries:
    def test_obs_count_is_max_and_pose_fused(self):
        twin = MapEntry(5, 0, Pose6D.from_vector([0, 0, 0, 0, 0, 0]), np.eye(6) * 0.1, 4, 1.0)
        moved = MapEntry(5, 0, Pose6D.from_vector([1, 0, 0, 0, 0, 0]), np.eye(6) * 0.1, 2, 3.0)
        fused = fuse_duplicate_entries(twin, moved)
        assert fused.obs_count == 4
        assert fused.last_seen == 3.0
        assert fused.pose.t[0] == pytest.approx(0.5, abs=1e-12)
        assert np.trace(fused.cov) < np.trace(twin.cov)


class TestRefineTransform:
    def _merged_map(self, rng, true_rt, noise=0.0):
        """Two markers in the loser frame; merge on the first only."""
        gmap = GlobalMap()
        gmap.register_drone(0, 0)
        gmap.register_drone(1, 1)
        poses_b = {30: random_marker_pose(rng, index=0), 31: random_marker_pose(rng, index=1)}
        for marker_id, pose in poses_b.items():
            gmap.insert_marker(1, marker_id, pose, np.eye(6) * 0.01, 0.0)

        def observe_in_winner(marker_id):
            exact = true_rt.compose(poses_b[marker_id])
            if noise == 0.0:
                return exact
            return Pose6D(exact.t + noise * rng.standard_normal(3), exact.q)

        first = [(30, observe_in_winner(30), poses_b[30])]
        ft = estimate_transform([(w, l) for _, w, l in first], 1, 0)
        record, _ = merge_frames(gmap, 0, 1, ft, pairs=first)
        return gmap, record, observe_in_winner

    def test_consistent_second_match_is_noop(self):
        rng = np.random.default_rng(70)
        true_rt = random_transform(rng)
        gmap, record, observe = self._merged_map(rng, true_rt, noise=0.0)
        before = {m: gmap.lookup(m).pose for m in (30, 31)}
        result = refine_transform(gmap, record, [(31, observe(31))])
        assert result is None
        for marker_id, pose in before.items():
            dt, dr = pose_error(gmap.lookup(marker_id).pose, pose)
            assert dt == 0.0 and dr < 1e-15

    def test_no_new_matches_is_noop(self):
        rng = np.random.default_rng(71)
        gmap, record, observe = self._merged_map(rng, random_transform(rng))
        assert refine_transform(gmap, record, []) is None
        assert refine_transform(gmap, record, [(30, observe(30))]) is None  # already paired

    def test_noisy_second_match_reduces_residual(self):
        rng = np.random.default_rng(72)
        true_rt = random_transform(rng)
        gmap, record, observe = self._merged_map(rng, true_rt, noise=0.02)
        old_rt = record.transform.rt
        refined = refine_transform(gmap, record, [(31, observe(31))], eps_translation=1e-6)
        assert refined is not None
        pair_set = [(w, l) for _, w, l in record.pairs]

        def rms(rt):
            return math.sqrt(
                np.mean([np.sum((rt.apply(l.t) - w.t) ** 2) for w, l in pair_set])
            )

        assert rms(refined.rt) <= rms(old_rt) + 1e-12
        # entries carried the correction delta: net effect re-expresses the
        # pre-merge pose through the refined transform
        want = refined.rt.compose(record.pre_merge_poses[30])
        dt, _ = pose_error(gmap.lookup(30).pose, want)
        assert dt < 1e-9
