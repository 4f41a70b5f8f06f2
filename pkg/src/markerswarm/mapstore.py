"""Ground-station marker map: one entry per marker id, grouped by frame.

Every drone is registered to exactly one coordinate frame and every entry
lives in a live frame. A fresh marker enters the map with the pose implied
by its first observation and is then refined by the next few observations
(information-form position fusion, covariance-trace-weighted slerp for the
orientation). After ``n_fuse`` observations the entry freezes: later
corrections flow through bundle adjustment only, which keeps a stable map
under sensor noise once a marker is well established.

The store itself is not thread safe; the ground station serializes all
mutations through its command queue.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from markerswarm.geom import Pose6D, check_covariance, quat_slerp, symmetrize
from markerswarm.worldsim import MARKER_ID_MAX

DEFAULT_N_FUSE = 5


class MapContractError(Exception):
    """Raised when a caller violates a map invariant (duplicate insert,
    dead frame, out-of-range id, unknown marker)."""


@dataclass(frozen=True)
class MapEntry:
    marker_id: int
    frame: int
    pose: Pose6D
    cov: np.ndarray
    obs_count: int
    last_seen: float

    def __post_init__(self) -> None:
        cov = check_covariance(np.array(self.cov, dtype=float), f"marker {self.marker_id} cov")
        cov.flags.writeable = False
        object.__setattr__(self, "cov", cov)

    def to_dict(self) -> dict:
        return {
            "marker_id": int(self.marker_id),
            "frame": int(self.frame),
            "pose": self.pose.to_dict(),
            "cov": [float(v) for v in self.cov.reshape(-1)],
            "obs_count": int(self.obs_count),
        }

    @staticmethod
    def from_dict(data: dict, last_seen: float = 0.0) -> "MapEntry":
        return MapEntry(
            marker_id=int(data["marker_id"]),
            frame=int(data["frame"]),
            pose=Pose6D.from_dict(data["pose"]),
            cov=np.asarray(data["cov"], dtype=float).reshape(6, 6),
            obs_count=int(data["obs_count"]),
            last_seen=last_seen,
        )


def fuse_pose(
    pose_old: Pose6D, cov_old: np.ndarray, pose_new: Pose6D, cov_new: np.ndarray
) -> tuple[Pose6D, np.ndarray]:
    """Fuse two pose estimates of the same marker.

    Position blocks combine in information form (precisions add, means are
    precision-weighted). Orientation is a spherical interpolation toward
    the new quaternion with weight tr(old angle cov) / (tr old + tr new),
    so a poorly known entry moves almost all the way to a sharp new
    observation and vice versa. Position and orientation are treated as
    independent: cross blocks of the fused covariance are zero.
    """
    p_old, p_new = cov_old[:3, :3], cov_new[:3, :3]
    a_old, a_new = cov_old[3:, 3:], cov_new[3:, 3:]

    info_old = np.linalg.inv(p_old)
    info_new = np.linalg.inv(p_new)
    p_fused = np.linalg.inv(info_old + info_new)
    t_fused = p_fused @ (info_old @ pose_old.t + info_new @ pose_new.t)

    tr_old, tr_new = np.trace(a_old), np.trace(a_new)
    weight_new = tr_old / (tr_old + tr_new)
    q_fused = quat_slerp(pose_old.q, pose_new.q, weight_new)

    a_fused = np.linalg.inv(np.linalg.inv(a_old) + np.linalg.inv(a_new))

    cov = np.zeros((6, 6))
    cov[:3, :3] = symmetrize(p_fused)
    cov[3:, 3:] = symmetrize(a_fused)
    return Pose6D(t_fused, q_fused), cov


class GlobalMap:
    """All marker entries plus the frame registry, keyed by marker id."""

    def __init__(self, n_fuse: int = DEFAULT_N_FUSE) -> None:
        if n_fuse < 1:
            raise ValueError(f"n_fuse {n_fuse} must be >= 1")
        self.n_fuse = int(n_fuse)
        self.entries: dict[int, MapEntry] = {}
        self.frames: set[int] = set()
        self.membership: dict[int, int] = {}  # drone id -> frame id

    # -- frames and drones --------------------------------------------

    def register_drone(self, drone_id: int, frame: int) -> None:
        self.frames.add(int(frame))
        self.membership[int(drone_id)] = int(frame)

    def reassign_frame(self, loser: int, winner: int) -> list[int]:
        """Move every drone in ``loser`` to ``winner``; retire ``loser``."""
        if winner not in self.frames:
            raise MapContractError(f"winner frame {winner} is not live")
        moved = sorted(d for d, f in self.membership.items() if f == loser)
        for drone_id in moved:
            self.membership[drone_id] = winner
        self.frames.discard(loser)
        return moved

    def frame_of(self, drone_id: int) -> int:
        return self.membership[drone_id]

    def entries_in_frame(self, frame: int) -> list[MapEntry]:
        return sorted(
            (e for e in self.entries.values() if e.frame == frame), key=lambda e: e.marker_id
        )

    # -- entries ------------------------------------------------------

    def lookup(self, marker_id: int) -> MapEntry | None:
        return self.entries.get(int(marker_id))

    def insert_marker(
        self, frame: int, marker_id: int, pose: Pose6D, cov: np.ndarray, now: float
    ) -> MapEntry:
        marker_id = int(marker_id)
        if not (0 <= marker_id <= MARKER_ID_MAX):
            raise MapContractError(f"marker id {marker_id} outside 0..{MARKER_ID_MAX}")
        if marker_id in self.entries:
            raise MapContractError(f"marker {marker_id} already mapped")
        if frame not in self.frames:
            raise MapContractError(f"frame {frame} is not live")
        entry = MapEntry(marker_id, int(frame), pose, cov, obs_count=1, last_seen=float(now))
        self.entries[marker_id] = entry
        return entry

    def fuse_observation(
        self, marker_id: int, pose: Pose6D, cov: np.ndarray, now: float
    ) -> MapEntry:
        """Fold one more observation into an existing entry.

        Entries with ``obs_count >= n_fuse`` are frozen: the pose stays put
        and only ``last_seen`` advances.
        """
        entry = self.lookup(marker_id)
        if entry is None:
            raise MapContractError(f"marker {marker_id} not in map")
        if entry.obs_count >= self.n_fuse:
            updated = replace(entry, last_seen=float(now))
        else:
            fused_pose, fused_cov = fuse_pose(entry.pose, entry.cov, pose, np.asarray(cov, float))
            updated = MapEntry(
                entry.marker_id,
                entry.frame,
                fused_pose,
                fused_cov,
                obs_count=entry.obs_count + 1,
                last_seen=float(now),
            )
        self.entries[marker_id] = updated
        return updated

    def replace_entry(self, entry: MapEntry) -> None:
        """Overwrite an entry wholesale (frame merges, bundle adjustment)."""
        if entry.frame not in self.frames:
            raise MapContractError(f"frame {entry.frame} is not live")
        self.entries[entry.marker_id] = entry

    def remove_entry(self, marker_id: int) -> MapEntry:
        return self.entries.pop(int(marker_id))

    # -- export -------------------------------------------------------

    def snapshot(self) -> list[dict]:
        """Wire/file form, sorted by marker id for deterministic output."""
        return [self.entries[k].to_dict() for k in sorted(self.entries)]

    def __len__(self) -> int:
        return len(self.entries)
