"""The per-drone node and the ground station.

Each drone runs one NavptsNode: a sense-estimate-decide loop that owns the
drone's EKF and talks to the single GroundStation only through protocol
messages. The station owns the global map, executes merges and bundle
adjustment, and broadcasts map updates back. Neither side ever touches the
other's state directly, so the same objects run single-threaded in
lockstep or on separate threads.
"""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from markerswarm.bundle import (
    BaConfig,
    BaProblem,
    Keypose,
    KeyposeObservation,
    optimize,
    select_keypose,
)
from markerswarm.ekf import (
    EkfState,
    detection_noise,
    observation_from_marker,
    predict,
    remap_frame,
    update,
)
from markerswarm.framemerge import (
    estimate_transform,
    find_matches,
    merge_frames,
    refine_transform,
)
from markerswarm.geom import Pose6D, transport_covariance
from markerswarm.mapstore import GlobalMap, MapContractError, MapEntry
from markerswarm.scenario import DroneSetup, PolicyConfig, Scenario
from markerswarm.swarm import protocol
from markerswarm.swarm.protocol import (
    Decoded,
    FrameMerged,
    Hello,
    KeyposeCommit,
    MapSnapshot,
    MarkerObs,
    PoseReport,
    ProtocolError,
    SequenceGuard,
    Shutdown,
)
from markerswarm.worldsim import MarkerDetection, OdometryReading, VelocityCommand

log = logging.getLogger(__name__)


PROGRESS_EPS = 0.02  # m of net approach that counts as progress
STALL_LIMIT = 15  # calls without progress before a target is abandoned


class SweepPolicy:
    """Grid sweep over the flight volume at a fixed altitude.

    The horizontal bounds are partitioned into square cells; the policy
    always flies toward the nearest unvisited cell center (ties broken by
    cell index), marks a cell visited on arrival within r_visit, and
    starts over when every cell has been seen. Commanded speed is bounded
    and tapers near the target so the drone settles instead of orbiting.

    The grid lives in the drone's own (believed) frame, which may be
    offset from the physical volume; a cell center can then sit beyond a
    wall. A target the drone stops closing in on for STALL_LIMIT
    consecutive calls is written off as visited, so the sweep always
    makes progress even against unreachable cells.
    """

    def __init__(self, bounds_min, bounds_max, config: PolicyConfig) -> None:
        lo = np.asarray(bounds_min, dtype=float)
        hi = np.asarray(bounds_max, dtype=float)
        self.config = config
        cell = config.cell_size
        xs = _cell_centers(lo[0], hi[0], cell)
        ys = _cell_centers(lo[1], hi[1], cell)
        altitude = float(np.clip(config.altitude, lo[2], hi[2]))
        self.cells = [np.array([x, y, altitude]) for y in ys for x in xs]
        self.visited: set[int] = set()
        self._target: int | None = None
        self._best_distance = float("inf")
        self._no_progress = 0

    def choose_destination(self, pose: Pose6D, map_view=None) -> VelocityCommand:
        position = pose.t
        for index, center in enumerate(self.cells):
            if index not in self.visited and (
                float(np.linalg.norm(position - center)) <= self.config.r_visit
            ):
                self.visited.add(index)

        while True:
            if len(self.visited) == len(self.cells):
                self.visited.clear()
            best = min(
                (i for i in range(len(self.cells)) if i not in self.visited),
                key=lambda i: (float(np.linalg.norm(self.cells[i] - position)), i),
            )
            if best != self._target:
                self._target = best
                self._best_distance = float("inf")
                self._no_progress = 0
            distance = float(np.linalg.norm(self.cells[best] - position))
            if distance < self._best_distance - PROGRESS_EPS:
                self._best_distance = distance
                self._no_progress = 0
                break
            self._no_progress += 1
            if self._no_progress < STALL_LIMIT:
                break
            self.visited.add(best)
            self._target = None

        delta = self.cells[best] - position
        if distance < 1e-9:
            return VelocityCommand(np.zeros(3), self.config.yaw_rate)
        speed = min(self.config.speed, distance)
        v_world = delta / distance * speed
        v_body = pose.rotation().T @ v_world
        return VelocityCommand(v_body, self.config.yaw_rate)


def _cell_centers(lo: float, hi: float, cell: float) -> list[float]:
    span = hi - lo
    count = max(1, int(span // cell))
    # spread the cells evenly so the grid always covers the full span
    width = span / count
    return [lo + width * (i + 0.5) for i in range(count)]


class NavptsNode:
    """One drone's estimation and behavior loop.

    A tick runs four phases in order: ingest sensors, correct the EKF and
    forward what the station needs, apply inbound map/merge messages, and
    emit the next velocity command.
    """

    def __init__(
        self,
        setup: DroneSetup,
        scenario: Scenario,
        station_link: protocol.Endpoint,
        inbox,
    ) -> None:
        self.drone_id = setup.drone_id
        self.frame = setup.drone_id
        self.ekf_config = scenario.ekf
        self.n_fuse = scenario.n_fuse
        self.d_key = scenario.ba.d_key
        self.theta_key = scenario.ba.theta_key
        self.cameras = {name: scenario.cameras[name] for name in setup.cameras}
        init_cov = np.diag(np.square(scenario.init_sigma))
        self.state = EkfState.from_pose(setup.ekf_start_pose, init_cov, self.frame, 0.0)
        self.map_view: dict[int, MapEntry] = {}
        self.policy = SweepPolicy(
            scenario.world.bounds_min, scenario.world.bounds_max, scenario.policy
        )
        self.link = station_link
        self.inbox = inbox
        self.guard = SequenceGuard()
        self.last_keypose: Pose6D | None = None
        self.trajectory: list[dict] = []
        self.counters = {"updates": 0, "gated": 0, "forwarded": 0, "keyposes": 0}

    def hello(self) -> None:
        self.link.send(Hello(self.drone_id, self.state.pose))

    def tick(
        self,
        tick: int,
        now: float,
        odometry: OdometryReading,
        detections: list[MarkerDetection],
        dt: float,
    ) -> VelocityCommand:
        # SP: sensor readings arrive as arguments, already id-sorted per camera
        # VJ: predict, then correct against frame-local known markers
        self.state = predict(self.state, odometry, self.ekf_config)
        keypose_obs = []
        for det in detections:
            cam = self.cameras[det.camera]
            entry = self.map_view.get(det.marker_id)
            if entry is not None and entry.frame == self.frame:
                obs = observation_from_marker(det, entry, cam, self.ekf_config)
                self.state, accepted = update(self.state, obs, self.ekf_config)
                self.counters["updates" if accepted else "gated"] += 1
                if entry.obs_count < self.n_fuse:
                    self._forward(det, now)
            else:
                # unknown or cross-frame: the station decides what it means
                self._forward(det, now)
            keypose_obs.append(
                KeyposeObservation(
                    marker_id=det.marker_id,
                    rel_pose=det.rel_pose,
                    noise_cov=detection_noise(det, self.ekf_config),
                    cam_extrinsics=cam.extrinsics,
                )
            )

        if detections and select_keypose(
            self.state.pose, self.last_keypose, len(detections), self.d_key, self.theta_key
        ):
            kp = Keypose(self.drone_id, self.frame, self.state.pose, now, tuple(keypose_obs))
            self.link.send(KeyposeCommit(kp))
            self.last_keypose = self.state.pose
            self.counters["keyposes"] += 1

        # WM: apply whatever the station broadcast since the last tick
        for line in self.inbox.drain():
            self._apply_line(line)

        self.trajectory.append(
            {"tick": tick, "time": now, "pose": self.state.pose, "frame": self.frame}
        )
        self.link.send(PoseReport(self.drone_id, self.state))

        # BG: next destination
        return self.policy.choose_destination(self.state.pose, self.map_view)

    def _forward(self, det: MarkerDetection, now: float) -> None:
        self.link.send(MarkerObs(self.drone_id, det, self.state.pose, self.state.cov, now))
        self.counters["forwarded"] += 1

    def _apply_line(self, line: str) -> None:
        try:
            decoded = decode_guarded(line, self.guard)
        except ProtocolError as err:
            log.warning("drone %d dropped a bad line: %s", self.drone_id, err)
            return
        if decoded is None:
            return
        msg = decoded.msg
        if isinstance(msg, MapSnapshot):
            self.map_view = {e.marker_id: e for e in msg.entries}
        elif isinstance(msg, FrameMerged):
            if self.frame == msg.loser:
                self.frame = msg.winner
                self.state = remap_frame(self.state, msg.rt, msg.winner)
                if self.last_keypose is not None:
                    self.last_keypose = msg.rt.compose(self.last_keypose)
                for row in self.trajectory:
                    if row["frame"] == msg.loser:
                        row["pose"] = msg.rt.compose(row["pose"])
                        row["frame"] = msg.winner
        elif isinstance(msg, Shutdown):
            pass
        else:
            log.debug("drone %d ignoring %s", self.drone_id, type(msg).__name__)


def decode_guarded(line: str, guard: SequenceGuard) -> Decoded | None:
    """Decode one line and apply the sequence guard; None if stale."""
    decoded = protocol.decode(line)
    if not guard.accept(decoded.sender, decoded.seq):
        return None
    return decoded


class GroundStation:
    """Single owner of the global map, merges, keyposes and adjustment.

    Mutations happen only inside handle_line, so running it from one
    station thread (or inline in lockstep) serializes everything. A
    malformed or stale line is logged and dropped; the station never
    raises out of handle_line.
    """

    def __init__(self, scenario: Scenario, links: dict[int, protocol.Endpoint]) -> None:
        self.scenario = scenario
        self.gmap = GlobalMap(n_fuse=scenario.n_fuse)
        self.cameras = scenario.cameras
        self.ekf_config = scenario.ekf
        self.ba = scenario.ba
        self.links = links
        self.guard = SequenceGuard()
        self.keypose_log: list[Keypose] = []
        self.keyposes_since_ba: dict[int, int] = {}
        self.records: list = []  # active MergeRecords, winner frames still live
        self.merge_events: list[dict] = []
        self.ba_reports: list[dict] = []
        self.last_report: dict[int, EkfState] = {}
        self.counters = {
            "handled": 0,
            "malformed": 0,
            "stale": 0,
            "errors": 0,
            "refines": 0,
        }
        self._dirty = False
        self.done: set[int] = set()

    # -- inbound ------------------------------------------------------

    def handle_line(self, line: str) -> None:
        try:
            decoded = protocol.decode(line)
        except ProtocolError as err:
            self.counters["malformed"] += 1
            log.warning("station dropped a malformed line: %s", err)
            return
        if not self.guard.accept(decoded.sender, decoded.seq):
            self.counters["stale"] += 1
            return
        try:
            self._dispatch(decoded.msg, decoded.sender)
            self.counters["handled"] += 1
        except Exception:
            self.counters["errors"] += 1
            log.exception("station failed on %s", type(decoded.msg).__name__)

    def _dispatch(self, msg, sender: int) -> None:
        if isinstance(msg, Hello):
            self.gmap.register_drone(msg.drone_id, frame=msg.drone_id)
        elif isinstance(msg, PoseReport):
            self.last_report[msg.drone_id] = msg.ekf_state
        elif isinstance(msg, MarkerObs):
            self._process_marker_obs(msg)
        elif isinstance(msg, KeyposeCommit):
            self._process_keypose(msg.keypose)
        elif isinstance(msg, Shutdown):
            self.done.add(sender)
        else:
            log.debug("station ignoring %s", type(msg).__name__)

    # -- marker observations -------------------------------------------

    def _process_marker_obs(self, m: MarkerObs) -> None:
        cam = self.cameras.get(m.detection.camera)
        if cam is None:
            raise ProtocolError(f"unknown camera {m.detection.camera!r}")
        frame = self.gmap.frame_of(m.drone_id)
        camera_pose = m.ekf_pose.compose(cam.extrinsics)
        pose_in_frame = camera_pose.compose(m.detection.rel_pose)
        cov = (
            transport_covariance(
                detection_noise(m.detection, self.ekf_config), camera_pose.rotation()
            )
            + m.ekf_cov
        )
        marker_id = m.detection.marker_id
        entry = self.gmap.lookup(marker_id)
        if entry is None:
            self.gmap.insert_marker(frame, marker_id, pose_in_frame, cov, m.timestamp)
            self._dirty = True
        elif entry.frame == frame:
            self.gmap.fuse_observation(marker_id, pose_in_frame, cov, m.timestamp)
            self._check_refine(marker_id, pose_in_frame, frame)
            self._dirty = True
        else:
            self._merge_on_overlap(frame, entry, pose_in_frame, cov, m.timestamp)

    def _merge_on_overlap(
        self,
        obs_frame: int,
        entry: MapEntry,
        pose_obs: Pose6D,
        cov_obs: np.ndarray,
        now: float,
    ) -> None:
        """A marker known in another frame was seen: fold the frames."""
        known_frame = entry.frame
        winner = min(obs_frame, known_frame)
        loser = max(obs_frame, known_frame)
        matches = find_matches(self.gmap, known_frame, obs_frame, {entry.marker_id: pose_obs})
        if entry.marker_id not in matches:
            raise MapContractError(f"marker {entry.marker_id} not in its own match set")
        if known_frame == winner:
            pose_w, pose_l = entry.pose, pose_obs
        else:
            pose_w, pose_l = pose_obs, entry.pose
        transform = estimate_transform([(pose_w, pose_l)], from_frame=loser, to_frame=winner)
        record, moved_drones = merge_frames(
            self.gmap, winner, loser, transform, pairs=[(entry.marker_id, pose_w, pose_l)]
        )
        # records anchored in the dying frame cannot be refined any more
        self.records = [r for r in self.records if r.winner != loser]
        self.records.append(record)
        self.merge_events.append(
            {
                "time": float(now),
                "winner": winner,
                "loser": loser,
                "moved_drones": moved_drones,
                "transform": transform.to_dict(),
            }
        )
        for kp_index, kp in enumerate(self.keypose_log):
            if kp.frame == loser:
                self.keypose_log[kp_index] = replace(
                    kp, frame=winner, pose=transform.rt.compose(kp.pose)
                )
        self.keyposes_since_ba[winner] = self.keyposes_since_ba.get(
            winner, 0
        ) + self.keyposes_since_ba.pop(loser, 0)
        self.broadcast(FrameMerged(loser, winner, transform.rt))
        # the triggering observation itself still counts as an observation
        if obs_frame == winner:
            pose_fused, cov_fused = pose_obs, cov_obs
        else:
            pose_fused = transform.rt.compose(pose_obs)
            cov_fused = transport_covariance(cov_obs, transform.rt.rotation())
        self.gmap.fuse_observation(entry.marker_id, pose_fused, cov_fused, now)
        self._dirty = True
        self._run_ba(winner, trigger="merge", now=now)

    def _check_refine(self, marker_id: int, pose_in_frame: Pose6D, frame: int) -> None:
        for record in self.records:
            if (
                record.winner == frame
                and marker_id in record.pre_merge_poses
                and marker_id not in record.paired_ids()
            ):
                refit = refine_transform(self.gmap, record, [(marker_id, pose_in_frame)])
                if refit is not None:
                    self.counters["refines"] += 1
                    log.info(
                        "refined merge %d->%d on marker %d (support %d)",
                        record.loser, record.winner, marker_id, refit.support,
                    )

    # -- keyposes and adjustment ---------------------------------------

    def _process_keypose(self, kp: Keypose) -> None:
        frame = kp.frame
        pose = kp.pose
        # a commit can race a merge broadcast; chase the frame forward
        seen = set()
        while frame not in self.gmap.frames:
            hop = next(
                (r for r in reversed(self.records) if r.loser == frame), None
            )
            if hop is None or frame in seen:
                log.warning("dropping keypose for dead frame %d", frame)
                return
            seen.add(frame)
            pose = hop.transform.rt.compose(pose)
            frame = hop.winner
        kp = replace(kp, frame=frame, pose=pose)
        self.keypose_log.append(kp)
        count = self.keyposes_since_ba.get(frame, 0) + 1
        self.keyposes_since_ba[frame] = count
        if self.ba.enabled and count >= self.ba.every_keyposes:
            self._run_ba(frame, trigger="keypose_interval", now=kp.timestamp)

    def _run_ba(self, frame: int, trigger: str, now: float) -> None:
        if not self.ba.enabled:
            return
        self.keyposes_since_ba[frame] = 0
        keyposes = [kp for kp in self.keypose_log if kp.frame == frame]
        markers = {e.marker_id: e.pose for e in self.gmap.entries_in_frame(frame)}
        if not keyposes or not markers:
            return
        try:
            problem = BaProblem(keyposes, markers)
        except ValueError as err:
            log.debug("skipping adjustment of frame %d: %s", frame, err)
            return
        result = optimize(problem, BaConfig(max_iterations=self.ba.max_iterations))
        self.ba_reports.append(
            {**result.to_dict(), "frame": frame, "trigger": trigger, "time": float(now)}
        )
        if result.aborted:
            log.warning("adjustment of frame %d aborted: %s", frame, result.message)
            return
        for marker_id, pose in result.markers.items():
            current = self.gmap.lookup(marker_id)
            if current is not None and current.frame == frame:
                self.gmap.replace_entry(replace(current, pose=pose))
        adjusted = {(kp.drone_id, kp.timestamp): kp for kp in result.keyposes}
        self.keypose_log = [
            adjusted.get((kp.drone_id, kp.timestamp), kp) for kp in self.keypose_log
        ]
        self._dirty = True

    # -- outbound -------------------------------------------------------

    def broadcast(self, msg) -> None:
        for link in self.links.values():
            link.send(msg)

    def flush(self) -> None:
        """Broadcast a fresh snapshot if the map changed since the last one."""
        if self._dirty:
            entries = tuple(self.gmap.entries[k] for k in sorted(self.gmap.entries))
            self.broadcast(MapSnapshot(entries))
            self._dirty = False
