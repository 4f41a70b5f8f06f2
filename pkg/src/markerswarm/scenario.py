"""Scenario files: the single JSON input describing a run.

A scenario fixes the world (bounds, markers), the fleet (per-drone true
start pose, believed start pose, cameras), sensor noise, filter settings,
the exploration policy, fusion and adjustment knobs, the tick rate and the
duration. Everything a run needs besides the seed lives here, so one file
plus one integer reproduces a run bit for bit in lockstep mode.

The believed start pose (``ekf_start_pose``) is where the drone thinks it
wakes up; it defines the origin of that drone's coordinate frame. Leaving
it out means the drone knows its true start. Giving every drone the
identity belief reproduces the setting where each drone builds its map
relative to its own takeoff point and the frames only meet through shared
markers.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from markerswarm.bundle import D_KEY_DEFAULT, THETA_KEY_DEFAULT
from markerswarm.ekf import EkfConfig
from markerswarm.geom import Pose6D
from markerswarm.mapstore import DEFAULT_N_FUSE
from markerswarm.worldsim import (
    MAX_STEP_DT,
    CameraParams,
    SensorNoise,
    World,
    downward_camera,
    forward_camera,
)


class ScenarioError(Exception):
    """The scenario file is missing, malformed, or self-inconsistent."""


_VEC3 = {
    "type": "array",
    "items": {"type": "number"},
    "minItems": 3,
    "maxItems": 3,
}
_POSE = {
    "type": "object",
    "properties": {"t": _VEC3, "euler": _VEC3},
    "required": ["t", "euler"],
    "additionalProperties": False,
}
_CAMERA = {
    "type": "object",
    "properties": {
        "extrinsics": _POSE,
        "fov_half_angle": {"type": "number", "exclusiveMinimum": 0},
        "max_range": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["extrinsics", "fov_half_angle", "max_range"],
    "additionalProperties": False,
}
_NONNEG = {"type": "number", "minimum": 0}

SCENARIO_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "duration": _NONNEG,
        "tick_rate": {"type": "number", "exclusiveMinimum": 0},
        "bounds": {
            "type": "object",
            "properties": {"min": _VEC3, "max": _VEC3},
            "required": ["min", "max"],
            "additionalProperties": False,
        },
        "markers": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "id": {"type": "integer", "minimum": 0, "maximum": 1023},
                    "pose": _POSE,
                },
                "required": ["id", "pose"],
                "additionalProperties": False,
            },
        },
        "drones": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "start_pose": _POSE,
                    "ekf_start_pose": _POSE,
                    "cameras": {
                        "type": "array",
                        "items": {"type": "string"},
                        "minItems": 1,
                    },
                },
                "required": ["id", "start_pose"],
                "additionalProperties": False,
            },
        },
        "cameras": {
            "type": "object",
            "additionalProperties": _CAMERA,
        },
        "noise": {
            "type": "object",
            "properties": {
                "pos_base": _NONNEG,
                "pos_per_m": _NONNEG,
                "ang_base": _NONNEG,
                "ang_per_m": _NONNEG,
                "odom_vel_sigma": _NONNEG,
                "odom_rate_sigma": _NONNEG,
                "dropout": {"type": "number", "minimum": 0, "maximum": 1},
            },
            "additionalProperties": False,
        },
        "ekf": {
            "type": "object",
            "properties": {
                "q_pos": _NONNEG,
                "q_ang": _NONNEG,
                "gate_enabled": {"type": "boolean"},
                "gate_quantile": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "init_sigma": {
                    "type": "array",
                    "items": _NONNEG,
                    "minItems": 6,
                    "maxItems": 6,
                },
            },
            "additionalProperties": False,
        },
        "policy": {
            "type": "object",
            "properties": {
                "cell_size": {"type": "number", "exclusiveMinimum": 0},
                "altitude": {"type": "number"},
                "speed": {"type": "number", "exclusiveMinimum": 0},
                "yaw_rate": _NONNEG,
                "r_visit": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "fusion": {
            "type": "object",
            "properties": {"n_fuse": {"type": "integer", "minimum": 1}},
            "additionalProperties": False,
        },
        "ba": {
            "type": "object",
            "properties": {
                "enabled": {"type": "boolean"},
                "every_keyposes": {"type": "integer", "minimum": 1},
                "max_iterations": {"type": "integer", "minimum": 1},
                "d_key": {"type": "number", "exclusiveMinimum": 0},
                "theta_key": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "port": {"type": "integer", "minimum": 1024, "maximum": 65535},
    },
    "required": ["name", "seed", "duration", "tick_rate", "bounds", "markers", "drones"],
    "additionalProperties": False,
}


@dataclass(frozen=True)
class DroneSetup:
    drone_id: int
    start_pose: Pose6D  # ground truth at t=0
    ekf_start_pose: Pose6D  # believed start; origin of this drone's frame
    cameras: tuple[str, ...]


@dataclass(frozen=True)
class PolicyConfig:
    cell_size: float = 1.2
    altitude: float = 1.5
    speed: float = 0.8
    yaw_rate: float = 0.0
    r_visit: float = 0.3


@dataclass(frozen=True)
class BaSettings:
    enabled: bool = True
    every_keyposes: int = 10
    max_iterations: int = 100
    d_key: float = D_KEY_DEFAULT
    theta_key: float = THETA_KEY_DEFAULT


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    duration: float
    tick_rate: float
    world: World
    drones: tuple[DroneSetup, ...]
    cameras: dict[str, CameraParams]
    noise: SensorNoise
    ekf: EkfConfig
    init_sigma: np.ndarray
    policy: PolicyConfig
    n_fuse: int
    ba: BaSettings
    port: int | None
    digest: str

    @property
    def dt(self) -> float:
        return 1.0 / self.tick_rate

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration * self.tick_rate))

    def drone_cameras(self, setup: DroneSetup) -> list[CameraParams]:
        return [self.cameras[name] for name in setup.cameras]


def _pose(data: dict) -> Pose6D:
    return Pose6D.from_dict(data)


def scenario_digest(raw: dict) -> str:
    """sha256 over the canonical JSON encoding of the raw scenario."""
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def parse_scenario(raw: dict) -> Scenario:
    """Validate a loaded scenario document and resolve all defaults."""
    try:
        jsonschema.validate(raw, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as err:
        raise ScenarioError(f"schema violation at {list(err.absolute_path)}: {err.message}") from err

    dt = 1.0 / raw["tick_rate"]
    if dt > MAX_STEP_DT:
        raise ScenarioError(f"tick_rate {raw['tick_rate']} gives dt {dt:.3f} > {MAX_STEP_DT}")

    marker_ids = [m["id"] for m in raw["markers"]]
    if len(set(marker_ids)) != len(marker_ids):
        raise ScenarioError("duplicate marker ids")
    try:
        world = World(
            markers={m["id"]: _pose(m["pose"]) for m in raw["markers"]},
            bounds_min=np.asarray(raw["bounds"]["min"], dtype=float),
            bounds_max=np.asarray(raw["bounds"]["max"], dtype=float),
        )
    except ValueError as err:
        raise ScenarioError(str(err)) from err

    cameras: dict[str, CameraParams] = {}
    cam_block = raw.get("cameras")
    if cam_block is None:
        cameras = {"down": downward_camera(), "forward": forward_camera()}
    else:
        for name in sorted(cam_block):
            fields = cam_block[name]
            try:
                cameras[name] = CameraParams(
                    name=name,
                    extrinsics=_pose(fields["extrinsics"]),
                    fov_half_angle=float(fields["fov_half_angle"]),
                    max_range=float(fields["max_range"]),
                )
            except ValueError as err:
                raise ScenarioError(f"camera {name}: {err}") from err

    drone_ids = [d["id"] for d in raw["drones"]]
    if len(set(drone_ids)) != len(drone_ids):
        raise ScenarioError("duplicate drone ids")
    drones = []
    for entry in sorted(raw["drones"], key=lambda d: d["id"]):
        start = _pose(entry["start_pose"])
        believed = _pose(entry["ekf_start_pose"]) if "ekf_start_pose" in entry else start
        names = tuple(entry.get("cameras", ["down"]))
        missing = [n for n in names if n not in cameras]
        if missing:
            raise ScenarioError(f"drone {entry['id']} references unknown cameras {missing}")
        drones.append(DroneSetup(entry["id"], start, believed, names))

    noise_block = raw.get("noise", {})
    noise = SensorNoise(**noise_block)

    ekf_block = dict(raw.get("ekf", {}))
    init_sigma = np.asarray(ekf_block.pop("init_sigma", [0.0] * 6), dtype=float)
    ekf = EkfConfig(
        det_pos_base=noise.pos_base if noise.pos_base > 0 else EkfConfig.det_pos_base,
        det_pos_per_m=noise.pos_per_m,
        det_ang_base=noise.ang_base if noise.ang_base > 0 else EkfConfig.det_ang_base,
        det_ang_per_m=noise.ang_per_m,
        **ekf_block,
    )

    policy = PolicyConfig(**raw.get("policy", {}))
    ba = BaSettings(**raw.get("ba", {}))
    n_fuse = raw.get("fusion", {}).get("n_fuse", DEFAULT_N_FUSE)

    return Scenario(
        name=raw["name"],
        seed=int(raw["seed"]),
        duration=float(raw["duration"]),
        tick_rate=float(raw["tick_rate"]),
        world=world,
        drones=tuple(drones),
        cameras=cameras,
        noise=noise,
        ekf=ekf,
        init_sigma=init_sigma,
        policy=policy,
        n_fuse=n_fuse,
        ba=ba,
        port=raw.get("port"),
        digest=scenario_digest(raw),
    )


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except OSError as err:
        raise ScenarioError(f"cannot read scenario: {err}") from err
    except json.JSONDecodeError as err:
        raise ScenarioError(f"scenario is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ScenarioError("scenario document must be a JSON object")
    return parse_scenario(raw)
