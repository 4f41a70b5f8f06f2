"""Per-drone extended Kalman filter over the 6-DOF pose.

State vector (x, y, z, alpha, beta, gamma): position plus roll/pitch/yaw in
the drone's coordinate frame. Prediction integrates body-frame odometry;
corrections come from detections of markers whose map pose is already
known, treated as direct pose observations (H = identity). Per-axis
measurement errors are modeled as independent, so detection noise is a
strictly positive diagonal that grows linearly with range.

Multiple detections in one tick are applied as sequential updates in
detection order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
from scipy.stats import chi2

from markerswarm.geom import (
    Pose6D,
    check_covariance,
    euler_rot_derivatives,
    symmetrize,
    transport_covariance,
    wrap_angles,
)
from markerswarm.worldsim import CameraParams, MarkerDetection, OdometryReading

STATE_DIM = 6


@dataclass(frozen=True)
class EkfConfig:
    # continuous-time diagonal process noise, per second
    q_pos: float = 2.5e-3  # m^2 / s
    q_ang: float = 4.0e-4  # rad^2 / s
    # assumed detection noise, sigma = base + per_m * range
    det_pos_base: float = 0.02
    det_pos_per_m: float = 0.01
    det_ang_base: float = 0.01
    det_ang_per_m: float = 0.005
    # innovation gate; disable for the ungated paper-faithful mode
    gate_enabled: bool = True
    gate_quantile: float = 0.999

    @cached_property
    def gate_threshold(self) -> float:
        return float(chi2.ppf(self.gate_quantile, STATE_DIM))

    @cached_property
    def process_noise(self) -> np.ndarray:
        q = np.diag([self.q_pos] * 3 + [self.q_ang] * 3).astype(float)
        q.flags.writeable = False
        return q


@dataclass(frozen=True)
class EkfState:
    mean: np.ndarray  # (6,)
    cov: np.ndarray  # (6, 6)
    frame: int
    timestamp: float

    def __post_init__(self) -> None:
        mean = np.array(self.mean, dtype=float).reshape(STATE_DIM)
        cov = check_covariance(np.array(self.cov, dtype=float), "ekf covariance")
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def pose(self) -> Pose6D:
        return Pose6D.from_vector(self.mean)

    @staticmethod
    def from_pose(pose: Pose6D, cov: np.ndarray, frame: int, timestamp: float) -> "EkfState":
        return EkfState(pose.to_vector(), cov, frame, timestamp)

    def to_dict(self) -> dict:
        return {
            "mean": [float(v) for v in self.mean],
            "cov": [float(v) for v in self.cov.reshape(-1)],
            "frame": int(self.frame),
            "timestamp": float(self.timestamp),
        }

    @staticmethod
    def from_dict(data: dict) -> "EkfState":
        return EkfState(
            np.asarray(data["mean"], dtype=float),
            np.asarray(data["cov"], dtype=float).reshape(STATE_DIM, STATE_DIM),
            int(data["frame"]),
            float(data["timestamp"]),
        )


@dataclass(frozen=True)
class PoseObservation:
    """Direct pose observation derived from one marker detection."""

    pose: Pose6D
    cov: np.ndarray
    marker_id: int

    def __post_init__(self) -> None:
        cov = check_covariance(np.array(self.cov, dtype=float), "observation covariance")
        cov.flags.writeable = False
        object.__setattr__(self, "cov", cov)


def predict_jacobian(mean: np.ndarray, v_body: np.ndarray, dt: float) -> np.ndarray:
    """State-transition Jacobian of the odometry integration.

    Position rows couple to the angles through d(R(e) v)/de; everything
    else is identity.
    """
    _, derivs = euler_rot_derivatives(mean[3:])
    jac = np.eye(STATE_DIM)
    for k in range(3):
        jac[:3, 3 + k] = derivs[k] @ v_body * dt
    return jac


def predict(state: EkfState, odo: OdometryReading, config: EkfConfig) -> EkfState:
    """Integrate one odometry reading; covariance grows by F P F^T + Q dt."""
    if not (
        np.all(np.isfinite(odo.v_body))
        and np.all(np.isfinite(odo.euler_rates))
        and np.isfinite(odo.dt)
        and odo.dt > 0.0
    ):
        raise ValueError(f"non-finite or non-positive odometry {odo}")
    dt = float(odo.dt)
    rot, _ = euler_rot_derivatives(state.mean[3:])
    mean = state.mean.copy()
    mean[:3] = mean[:3] + rot @ odo.v_body * dt
    mean[3:] = wrap_angles(mean[3:] + odo.euler_rates * dt)
    jac = predict_jacobian(state.mean, odo.v_body, dt)
    cov = symmetrize(jac @ state.cov @ jac.T + config.process_noise * dt)
    return EkfState(mean, cov, state.frame, state.timestamp + dt)


def detection_noise(det: MarkerDetection, config: EkfConfig) -> np.ndarray:
    """Diagonal measurement covariance for one detection at its range."""
    sigma_p = config.det_pos_base + config.det_pos_per_m * det.range
    sigma_a = config.det_ang_base + config.det_ang_per_m * det.range
    if sigma_p <= 0.0 or sigma_a <= 0.0:
        raise ValueError(f"detection noise must be strictly positive, got {sigma_p}, {sigma_a}")
    return np.diag([sigma_p**2] * 3 + [sigma_a**2] * 3)


def observation_from_marker(
    det: MarkerDetection, entry, cam: CameraParams, config: EkfConfig
) -> PoseObservation:
    """Invert a detection of a known marker into a drone-pose observation.

    ``entry`` is the marker's map record (``pose`` and ``cov`` in the
    drone's frame). The detection noise is transported into the frame by
    the observed pose's rotation; map uncertainty adds on top.
    """
    pose = entry.pose.compose(det.rel_pose.inverse()).compose(cam.extrinsics.inverse())
    cov = transport_covariance(detection_noise(det, config), pose.rotation()) + entry.cov
    return PoseObservation(pose=pose, cov=symmetrize(cov), marker_id=det.marker_id)


def innovation(state: EkfState, obs: PoseObservation) -> np.ndarray:
    diff = obs.pose.to_vector() - state.mean
    diff[3:] = wrap_angles(diff[3:])
    return diff


def update(state: EkfState, obs: PoseObservation, config: EkfConfig) -> tuple[EkfState, bool]:
    """One measurement update; returns (state, accepted).

    The observation is rejected (state returned unchanged) when its
    Mahalanobis distance exceeds the configured chi-square gate.
    """
    y = innovation(state, obs)
    s = symmetrize(state.cov + obs.cov)
    s_inv_y = np.linalg.solve(s, y)
    if config.gate_enabled and float(y @ s_inv_y) > config.gate_threshold:
        return state, False
    gain = np.linalg.solve(s, state.cov).T  # P S^-1, via symmetric S
    mean = state.mean + gain @ y
    mean[3:] = wrap_angles(mean[3:])
    ident = np.eye(STATE_DIM)
    # Joseph form keeps the posterior symmetric PSD under roundoff
    cov = (ident - gain) @ state.cov @ (ident - gain).T + gain @ obs.cov @ gain.T
    return EkfState(mean, symmetrize(cov), state.frame, state.timestamp), True


def remap_frame(state: EkfState, rt: Pose6D, new_frame: int) -> EkfState:
    """Re-express the state in another frame after a merge (rt: old -> new)."""
    pose = rt.compose(state.pose)
    cov = transport_covariance(state.cov, rt.rotation())
    return EkfState(pose.to_vector(), cov, new_frame, state.timestamp)


def nees(state: EkfState, truth: np.ndarray) -> float:
    """Normalized estimation error squared against a true state vector."""
    err = state.mean - np.asarray(truth, dtype=float).reshape(STATE_DIM)
    err[3:] = wrap_angles(err[3:])
    return float(err @ np.linalg.solve(state.cov, err))
