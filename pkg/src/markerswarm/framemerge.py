"""Coordinate-frame matching, merging and post-merge refinement.

Two drones that have never seen a common marker live in unrelated frames.
The first shared marker id yields pose pairs (same physical marker
expressed in both frames), from which a rigid transform is estimated:

* three or more pairs with non-collinear positions: orthogonal Procrustes
  on the positions (SVD, reflection corrected to det +1);
* fewer pairs, or a degenerate spread: fall back to the marker
  orientations, averaging the per-pair candidate transforms
  ``pose_in_a * inverse(pose_in_b)``.

The frame with the lower id always wins a merge; the loser's entries are
re-expressed through the transform and its drones are reassigned. Each
merge is recorded so that later matches against pre-merge entries can
refine the transform and re-transform the affected markers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from markerswarm.geom import (
    Pose6D,
    quat_angle,
    quat_chordal_mean,
    rot_to_quat,
    transport_covariance,
)
from markerswarm.mapstore import GlobalMap, MapContractError, MapEntry, fuse_pose

log = logging.getLogger(__name__)

SCALE_BAND = (0.95, 1.05)  # rigid-transform sanity band for the scale diagnostic
COLLINEAR_REL_TOL = 1e-6
REFINE_EPS_TRANSLATION = 1e-3  # m
REFINE_EPS_ROTATION = 1e-3  # rad


@dataclass(frozen=True)
class FrameTransform:
    """Rigid transform taking poses in ``from_frame`` to ``to_frame``."""

    from_frame: int
    to_frame: int
    rt: Pose6D
    residual: float  # RMS position error over the supporting pairs
    support: int  # number of marker pairs used
    scale: float  # spread ratio diagnostic, 1.0 for a perfectly rigid fit

    def to_dict(self) -> dict:
        return {
            "from": int(self.from_frame),
            "to": int(self.to_frame),
            "rt": self.rt.to_dict(),
            "residual": float(self.residual),
            "support": int(self.support),
            "scale": float(self.scale),
        }

    @staticmethod
    def from_dict(data: dict) -> "FrameTransform":
        return FrameTransform(
            from_frame=int(data["from"]),
            to_frame=int(data["to"]),
            rt=Pose6D.from_dict(data["rt"]),
            residual=float(data["residual"]),
            support=int(data["support"]),
            scale=float(data["scale"]),
        )


def find_matches(
    gmap: GlobalMap, frame_a: int, frame_b: int, pending_obs: dict[int, Pose6D]
) -> list[int]:
    """Marker ids known in frame_a that frame_b has evidence for, sorted.

    Evidence is either a map entry in frame_b (unreachable while the store
    enforces one-frame-per-marker, but cheap to honor) or a pending
    observation expressed in frame_b.
    """
    if frame_a == frame_b:
        raise ValueError(f"match query needs two distinct frames, got {frame_a} twice")
    matches = []
    for marker_id, entry in gmap.entries.items():
        if entry.frame != frame_a:
            continue
        other = marker_id in pending_obs
        if not other:
            twin = gmap.lookup(marker_id)
            other = twin is not None and twin.frame == frame_b
        if other:
            matches.append(marker_id)
    return sorted(matches)


def estimate_transform(
    pairs: list[tuple[Pose6D, Pose6D]], from_frame: int = -1, to_frame: int = -1
) -> FrameTransform:
    """Fit rt such that rt * pose_in_b approximates pose_in_a.

    ``pairs`` holds (pose_in_a, pose_in_b) for the same physical markers.
    """
    if not pairs:
        raise ValueError("cannot estimate a transform from zero pairs")
    a_pts = np.array([p.t for p, _ in pairs])
    b_pts = np.array([p.t for _, p in pairs])
    n = len(pairs)

    use_kabsch = False
    if n >= 3:
        spread = np.linalg.svd(b_pts - b_pts.mean(axis=0), compute_uv=False)
        use_kabsch = spread[1] > COLLINEAR_REL_TOL * max(spread[0], 1.0)

    if use_kabsch:
        centroid_a = a_pts.mean(axis=0)
        centroid_b = b_pts.mean(axis=0)
        h = (b_pts - centroid_b).T @ (a_pts - centroid_a)
        u, _, vt = np.linalg.svd(h)
        d = np.sign(np.linalg.det(vt.T @ u.T))
        rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
        rt = Pose6D(centroid_a - rot @ centroid_b, rot_to_quat(rot))
    else:
        # too few or degenerate positions: lean on the marker orientations
        candidates = [pa.compose(pb.inverse()) for pa, pb in pairs]
        q_mean = quat_chordal_mean([c.q for c in candidates])
        t_mean = np.mean([c.t for c in candidates], axis=0)
        rt = Pose6D(t_mean, q_mean)

    residual = float(
        np.sqrt(np.mean([np.sum((rt.apply(b) - a) ** 2) for a, b in zip(a_pts, b_pts)]))
    )

    scale = 1.0
    if n >= 2:
        spread_b = float(np.sum((b_pts - b_pts.mean(axis=0)) ** 2))
        spread_a = float(np.sum((a_pts - a_pts.mean(axis=0)) ** 2))
        if spread_b > 1e-18:
            scale = float(np.sqrt(spread_a / spread_b))
    if not (SCALE_BAND[0] <= scale <= SCALE_BAND[1]):
        log.warning(
            "rigid fit scale %.4f outside %s (support %d, frames %d->%d)",
            scale, SCALE_BAND, n, from_frame, to_frame,
        )
    return FrameTransform(from_frame, to_frame, rt, residual, n, scale)


@dataclass
class MergeRecord:
    """Everything needed to refine one executed merge later."""

    winner: int
    loser: int
    transform: FrameTransform
    # (marker_id, pose_in_winner, pose_in_loser) pairs backing the transform
    pairs: list[tuple[int, Pose6D, Pose6D]]
    # loser-frame poses of every transformed entry, frozen at merge time
    pre_merge_poses: dict[int, Pose6D] = field(default_factory=dict)

    def paired_ids(self) -> set[int]:
        return {marker_id for marker_id, _, _ in self.pairs}


def fuse_duplicate_entries(twin: MapEntry, moved: MapEntry) -> MapEntry:
    """Resolve one marker held by both sides of a merge.

    ``moved`` is the loser's entry already re-expressed in the winner
    frame. Poses fuse under the mapstore rules; the surviving observation
    count is the max of the two (the marker is not better known than its
    best-observed copy was).
    """
    fused_pose, fused_cov = fuse_pose(twin.pose, twin.cov, moved.pose, moved.cov)
    return MapEntry(
        twin.marker_id,
        twin.frame,
        fused_pose,
        fused_cov,
        obs_count=max(twin.obs_count, moved.obs_count),
        last_seen=max(twin.last_seen, moved.last_seen),
    )


def merge_frames(
    gmap: GlobalMap,
    winner: int,
    loser: int,
    transform: FrameTransform,
    pairs: list[tuple[int, Pose6D, Pose6D]] | None = None,
) -> tuple[MergeRecord, list[int]]:
    """Fold the loser frame into the winner through ``transform``.

    Loser entries are re-expressed (pose composed, covariance transported).
    Should both frames somehow hold the same marker the duplicates are
    fused via :func:`fuse_duplicate_entries`; the store's one-frame-per-
    marker invariant normally makes that branch unreachable. Drones in the
    loser frame are reassigned; the returned list names them so the caller
    can broadcast the merge. Returns the merge record for later refinement.
    """
    if winner == loser:
        raise MapContractError(f"self-merge of frame {winner}")
    if loser < winner:
        raise MapContractError(f"frame {winner} cannot win over lower id {loser}")
    if transform.from_frame != loser or transform.to_frame != winner:
        raise MapContractError(
            f"transform maps {transform.from_frame}->{transform.to_frame}, "
            f"expected {loser}->{winner}"
        )
    rt = transform.rt
    rot = rt.rotation()
    pre_merge: dict[int, Pose6D] = {}
    for entry in gmap.entries_in_frame(loser):
        pre_merge[entry.marker_id] = entry.pose
        moved = replace(
            entry,
            frame=winner,
            pose=rt.compose(entry.pose),
            cov=transport_covariance(entry.cov, rot),
        )
        twin = gmap.lookup(entry.marker_id)
        if twin is not None and twin is not entry and twin.frame == winner:
            moved = fuse_duplicate_entries(twin, moved)
        gmap.replace_entry(moved)
    moved_drones = gmap.reassign_frame(loser, winner)
    record = MergeRecord(
        winner=winner,
        loser=loser,
        transform=transform,
        pairs=list(pairs or []),
        pre_merge_poses=pre_merge,
    )
    return record, moved_drones


def refine_transform(
    gmap: GlobalMap,
    record: MergeRecord,
    new_matches: list[tuple[int, Pose6D]],
    eps_translation: float = REFINE_EPS_TRANSLATION,
    eps_rotation: float = REFINE_EPS_ROTATION,
) -> FrameTransform | None:
    """Re-estimate a past merge when fresh matches of its entries appear.

    ``new_matches`` holds (marker_id, pose_in_winner) for markers that were
    transformed by the merge; their pre-merge loser poses complete the new
    pairs. If the re-estimated transform differs from the applied one by
    more than the thresholds, every transformed entry is corrected by the
    delta and the record is updated. Returns the new transform when a
    correction was applied, None for a no-op.
    """
    known = record.paired_ids()
    added = False
    for marker_id, pose_in_winner in new_matches:
        if marker_id in known or marker_id not in record.pre_merge_poses:
            continue
        record.pairs.append((marker_id, pose_in_winner, record.pre_merge_poses[marker_id]))
        known.add(marker_id)
        added = True
    if not added:
        return None

    refit = estimate_transform(
        [(pw, pl) for _, pw, pl in record.pairs], record.loser, record.winner
    )
    delta = refit.rt.compose(record.transform.rt.inverse())
    if (
        float(np.linalg.norm(delta.t)) <= eps_translation
        and quat_angle(delta.q) <= eps_rotation
    ):
        return None

    rot = delta.rotation()
    for marker_id in record.pre_merge_poses:
        entry = gmap.lookup(marker_id)
        if entry is None:
            continue
        gmap.replace_entry(
            replace(
                entry,
                pose=delta.compose(entry.pose),
                cov=transport_covariance(entry.cov, rot),
            )
        )
    record.transform = refit
    return refit
