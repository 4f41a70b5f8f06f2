"""Ground-truth world: marker field, drone kinematics, simulated sensors.

The truth model is deliberately simple. Drones are velocity-driven points
with yaw; the attitude controller is assumed perfect, so true roll and
pitch are pinned to zero (estimators still carry all six degrees of
freedom). Cameras detect fiducial markers inside a view cone and report the
marker pose relative to the camera, corrupted by range-dependent Gaussian
noise. Odometry is a finite-difference body-velocity sensor.

All randomness flows through per-drone counter-based generators
(:func:`drone_rng`), so draws depend only on (seed, drone id, call order)
and never on scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from markerswarm.geom import Pose6D, wrap_angle, wrap_angles

MARKER_ID_MAX = 1023  # 1024 distinct marker patterns, ids 0..1023
MAX_STEP_DT = 0.5


def drone_rng(seed: int, drone_id: int) -> np.random.Generator:
    """Independent counter-based stream for one drone.

    Philox is keyed, not sequential, so streams for different drones cannot
    collide and the draw sequence is a pure function of (seed, drone_id).
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), int(drone_id)))))


@dataclass(frozen=True)
class World:
    """Static marker field inside an axis-aligned flight volume."""

    markers: dict[int, Pose6D]
    bounds_min: np.ndarray
    bounds_max: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.bounds_min, dtype=float).reshape(3)
        hi = np.asarray(self.bounds_max, dtype=float).reshape(3)
        if not np.all(lo < hi):
            raise ValueError(f"degenerate bounds {lo} .. {hi}")
        for marker_id in self.markers:
            if not (0 <= marker_id <= MARKER_ID_MAX):
                raise ValueError(f"marker id {marker_id} outside 0..{MARKER_ID_MAX}")
        object.__setattr__(self, "bounds_min", lo)
        object.__setattr__(self, "bounds_max", hi)


@dataclass(frozen=True)
class DroneTruth:
    """True state of one drone; roll and pitch are exactly zero."""

    drone_id: int
    pose: Pose6D


@dataclass(frozen=True)
class VelocityCommand:
    """Body-frame linear velocity plus yaw rate."""

    v_body: np.ndarray
    yaw_rate: float = 0.0

    def __post_init__(self) -> None:
        v = np.asarray(self.v_body, dtype=float).reshape(3)
        object.__setattr__(self, "v_body", v)

    @staticmethod
    def hover() -> "VelocityCommand":
        return VelocityCommand(np.zeros(3), 0.0)


@dataclass(frozen=True)
class CameraParams:
    """Rigid camera on the drone body; optical axis is camera +z."""

    name: str
    extrinsics: Pose6D
    fov_half_angle: float
    max_range: float

    def __post_init__(self) -> None:
        if not (0.0 < self.fov_half_angle < math.pi / 2):
            raise ValueError(f"fov half-angle {self.fov_half_angle} outside (0, pi/2)")
        if self.max_range <= 0.0:
            raise ValueError(f"max range {self.max_range} must be positive")


@dataclass(frozen=True)
class MarkerDetection:
    drone_id: int
    marker_id: int
    camera: str
    rel_pose: Pose6D  # marker pose in the camera frame
    range: float  # == |rel_pose.t|
    timestamp: float

    def to_dict(self) -> dict:
        return {
            "drone_id": self.drone_id,
            "marker_id": self.marker_id,
            "camera": self.camera,
            "rel_pose": self.rel_pose.to_dict(),
            "range": float(self.range),
            "timestamp": float(self.timestamp),
        }

    @staticmethod
    def from_dict(data: dict) -> "MarkerDetection":
        return MarkerDetection(
            drone_id=int(data["drone_id"]),
            marker_id=int(data["marker_id"]),
            camera=str(data["camera"]),
            rel_pose=Pose6D.from_dict(data["rel_pose"]),
            range=float(data["range"]),
            timestamp=float(data["timestamp"]),
        )


@dataclass(frozen=True)
class OdometryReading:
    drone_id: int
    dt: float
    v_body: np.ndarray
    euler_rates: np.ndarray
    timestamp: float


@dataclass(frozen=True)
class SensorNoise:
    """Detection noise grows linearly with range; odometry noise is flat."""

    pos_base: float = 0.02  # m
    pos_per_m: float = 0.01  # m per m of range
    ang_base: float = 0.01  # rad
    ang_per_m: float = 0.005  # rad per m of range
    odom_vel_sigma: float = 0.05  # m/s
    odom_rate_sigma: float = 0.02  # rad/s
    dropout: float = 0.0  # false-negative probability per would-be detection

    def pos_sigma(self, rng_range: float) -> float:
        return self.pos_base + self.pos_per_m * rng_range

    def ang_sigma(self, rng_range: float) -> float:
        return self.ang_base + self.ang_per_m * rng_range


def step_drone(truth: DroneTruth, cmd: VelocityCommand, dt: float, world: World) -> DroneTruth:
    """Advance one drone by dt seconds under a velocity command.

    Position integrates the body velocity rotated into the world frame by
    the pose at the start of the interval, then clamps to the flight
    volume. Yaw integrates the yaw rate; roll/pitch stay zero.
    """
    if not (0.0 < dt <= MAX_STEP_DT):
        raise ValueError(f"dt {dt} outside (0, {MAX_STEP_DT}]")
    if not (np.all(np.isfinite(cmd.v_body)) and math.isfinite(cmd.yaw_rate)):
        raise ValueError(f"non-finite command {cmd}")
    pos = truth.pose.apply(cmd.v_body * dt)
    pos = np.clip(pos, world.bounds_min, world.bounds_max)
    yaw = wrap_angle(truth.pose.euler[2] + cmd.yaw_rate * dt)
    return DroneTruth(truth.drone_id, Pose6D.from_euler(pos, [0.0, 0.0, yaw]))


def sense_markers(
    truth: DroneTruth,
    world: World,
    cam: CameraParams,
    noise: SensorNoise,
    rng: np.random.Generator,
    now: float,
) -> list[MarkerDetection]:
    """Detections of all markers inside the camera cone, noisy, id-sorted.

    Marker ids are never corrupted; noise only perturbs the relative pose.
    A dropout draw can suppress an otherwise valid detection (false
    negative). Visibility depends on truth alone, so the number and order
    of RNG draws is deterministic for a given truth trajectory.
    """
    cam_in_world = truth.pose.compose(cam.extrinsics)
    world_in_cam = cam_in_world.inverse()
    cos_fov = math.cos(cam.fov_half_angle)
    out: list[MarkerDetection] = []
    for marker_id in sorted(world.markers):
        rel = world_in_cam.compose(world.markers[marker_id])
        dist = float(np.linalg.norm(rel.t))
        if dist <= 0.0 or dist > cam.max_range:
            continue
        if rel.t[2] < dist * cos_fov:
            continue
        if noise.dropout > 0.0 and rng.uniform() < noise.dropout:
            continue
        sigma_p = noise.pos_sigma(dist)
        sigma_a = noise.ang_sigma(dist)
        if sigma_p > 0.0 or sigma_a > 0.0:
            t = rel.t + sigma_p * rng.standard_normal(3)
            euler = wrap_angles(rel.euler + sigma_a * rng.standard_normal(3))
            rel = Pose6D.from_euler(t, euler)
        out.append(
            MarkerDetection(
                drone_id=truth.drone_id,
                marker_id=marker_id,
                camera=cam.name,
                rel_pose=rel,
                range=float(np.linalg.norm(rel.t)),
                timestamp=now,
            )
        )
    return out


def sense_odometry(
    prev: DroneTruth,
    curr: DroneTruth,
    dt: float,
    noise: SensorNoise,
    rng: np.random.Generator,
    now: float,
) -> OdometryReading:
    """Finite-difference odometry over one step, in the starting body frame.

    Exact for the step_drone motion model at zero noise: rotating the true
    displacement back through the start pose recovers the commanded body
    velocity even when the flight-volume clamp shortened the step.
    """
    if dt <= 0.0:
        raise ValueError(f"dt {dt} must be positive")
    delta = curr.pose.t - prev.pose.t
    rot = prev.pose.rotation()
    v_body = rot.T @ delta / dt
    rates = wrap_angles(curr.pose.euler - prev.pose.euler) / dt
    if noise.odom_vel_sigma > 0.0 or noise.odom_rate_sigma > 0.0:
        v_body = v_body + noise.odom_vel_sigma * rng.standard_normal(3)
        rates = rates + noise.odom_rate_sigma * rng.standard_normal(3)
    return OdometryReading(
        drone_id=curr.drone_id,
        dt=dt,
        v_body=v_body,
        euler_rates=rates,
        timestamp=now,
    )


# --- standard camera rigs -------------------------------------------------


def downward_camera(fov_half_angle: float = 0.9, max_range: float = 4.0) -> CameraParams:
    """Camera looking along body -z (roll the optics by pi)."""
    return CameraParams(
        name="down",
        extrinsics=Pose6D.from_euler([0.0, 0.0, 0.0], [math.pi, 0.0, 0.0]),
        fov_half_angle=fov_half_angle,
        max_range=max_range,
    )


def forward_camera(fov_half_angle: float = 0.8, max_range: float = 5.0) -> CameraParams:
    """Camera looking along body +x (pitch the optics by pi/2)."""
    return CameraParams(
        name="forward",
        extrinsics=Pose6D.from_euler([0.0, 0.0, 0.0], [0.0, math.pi / 2, 0.0]),
        fov_half_angle=fov_half_angle,
        max_range=max_range,
    )
