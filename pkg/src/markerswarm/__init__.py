"""Cooperative marker-map building for a small quadrotor swarm.

Simulated drones localize against fiducial markers with a per-drone EKF,
report observations to a ground station that maintains one map with
per-drone coordinate frames, merges frames when a shared marker is spotted,
and periodically unbiases the map with keypose bundle adjustment.
"""

from markerswarm.geom import Pose6D, transport_covariance, wrap_angle

__version__ = "0.1.0"

__all__ = ["Pose6D", "transport_covariance", "wrap_angle", "__version__"]
