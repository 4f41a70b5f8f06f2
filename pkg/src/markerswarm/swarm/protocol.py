"""Wire protocol between drone nodes and the ground station.

Messages are newline-delimited JSON, one message per line, UTF-8. The
envelope carries three fields on every line: "type" (the message name),
"sender" (drone id, or -1 for the station) and "seq" (unsigned 64-bit,
strictly increasing per sender). Payload fields sit flat beside the
envelope fields, named exactly like the dataclass attributes.

The same encoded lines travel over in-process queues or local stream
sockets; both transports below speak the one codec, so tests exercising
either path exercise the same bytes.
"""

from __future__ import annotations

import json
import queue
import socket
from dataclasses import dataclass

import numpy as np

from markerswarm.bundle import Keypose
from markerswarm.ekf import EkfState
from markerswarm.geom import Pose6D
from markerswarm.mapstore import MapEntry
from markerswarm.worldsim import MarkerDetection

STATION_ID = -1
SEQ_MAX = 2**64 - 1


class ProtocolError(Exception):
    """A line that cannot be decoded into a valid message."""


@dataclass(frozen=True)
class Hello:
    drone_id: int
    start_pose: Pose6D


@dataclass(frozen=True)
class MarkerObs:
    drone_id: int
    detection: MarkerDetection
    ekf_pose: Pose6D
    ekf_cov: np.ndarray  # 6x6
    timestamp: float


@dataclass(frozen=True)
class PoseReport:
    drone_id: int
    ekf_state: EkfState


@dataclass(frozen=True)
class MapSnapshot:
    entries: tuple[MapEntry, ...]


@dataclass(frozen=True)
class FrameMerged:
    loser: int
    winner: int
    rt: Pose6D


@dataclass(frozen=True)
class KeyposeCommit:
    keypose: Keypose


@dataclass(frozen=True)
class Shutdown:
    pass


@dataclass(frozen=True)
class Decoded:
    msg: object
    sender: int
    seq: int


def _payload(msg) -> dict:
    if isinstance(msg, Hello):
        return {"drone_id": msg.drone_id, "start_pose": msg.start_pose.to_dict()}
    if isinstance(msg, MarkerObs):
        return {
            "drone_id": msg.drone_id,
            "detection": msg.detection.to_dict(),
            "ekf_pose": msg.ekf_pose.to_dict(),
            "ekf_cov": [float(v) for v in np.asarray(msg.ekf_cov).reshape(-1)],
            "timestamp": float(msg.timestamp),
        }
    if isinstance(msg, PoseReport):
        return {"drone_id": msg.drone_id, "ekf_state": msg.ekf_state.to_dict()}
    if isinstance(msg, MapSnapshot):
        return {"entries": [e.to_dict() for e in msg.entries]}
    if isinstance(msg, FrameMerged):
        return {"loser": msg.loser, "winner": msg.winner, "rt": msg.rt.to_dict()}
    if isinstance(msg, KeyposeCommit):
        return {"keypose": msg.keypose.to_dict()}
    if isinstance(msg, Shutdown):
        return {}
    raise ProtocolError(f"not a protocol message: {type(msg).__name__}")


def _parse_hello(p: dict) -> Hello:
    return Hello(int(p["drone_id"]), Pose6D.from_dict(p["start_pose"]))


def _parse_marker_obs(p: dict) -> MarkerObs:
    return MarkerObs(
        drone_id=int(p["drone_id"]),
        detection=MarkerDetection.from_dict(p["detection"]),
        ekf_pose=Pose6D.from_dict(p["ekf_pose"]),
        ekf_cov=np.asarray(p["ekf_cov"], dtype=float).reshape(6, 6),
        timestamp=float(p["timestamp"]),
    )


def _parse_pose_report(p: dict) -> PoseReport:
    return PoseReport(int(p["drone_id"]), EkfState.from_dict(p["ekf_state"]))


def _parse_map_snapshot(p: dict) -> MapSnapshot:
    return MapSnapshot(tuple(MapEntry.from_dict(e) for e in p["entries"]))


def _parse_frame_merged(p: dict) -> FrameMerged:
    return FrameMerged(int(p["loser"]), int(p["winner"]), Pose6D.from_dict(p["rt"]))


def _parse_keypose_commit(p: dict) -> KeyposeCommit:
    return KeyposeCommit(Keypose.from_dict(p["keypose"]))


_PARSERS = {
    "Hello": _parse_hello,
    "MarkerObs": _parse_marker_obs,
    "PoseReport": _parse_pose_report,
    "MapSnapshot": _parse_map_snapshot,
    "FrameMerged": _parse_frame_merged,
    "KeyposeCommit": _parse_keypose_commit,
    "Shutdown": lambda p: Shutdown(),
}


def encode(msg, sender: int, seq: int) -> str:
    """One message as a single JSON line (no trailing newline)."""
    if not (0 <= seq <= SEQ_MAX):
        raise ProtocolError(f"sequence number {seq} outside unsigned 64-bit range")
    frame = {"type": type(msg).__name__, "sender": int(sender), "seq": int(seq)}
    frame.update(_payload(msg))
    return json.dumps(frame, sort_keys=True, separators=(",", ":"))


def decode(line: str) -> Decoded:
    try:
        frame = json.loads(line)
    except json.JSONDecodeError as err:
        raise ProtocolError(f"not JSON: {err}") from err
    if not isinstance(frame, dict):
        raise ProtocolError("message line must be a JSON object")
    try:
        kind = frame["type"]
        sender = int(frame["sender"])
        seq = int(frame["seq"])
        parser = _PARSERS[kind]
    except (KeyError, TypeError, ValueError) as err:
        raise ProtocolError(f"bad envelope: {err!r}") from err
    if not (0 <= seq <= SEQ_MAX):
        raise ProtocolError(f"sequence number {seq} outside unsigned 64-bit range")
    try:
        msg = parser(frame)
    except ProtocolError:
        raise
    except Exception as err:
        raise ProtocolError(f"bad {kind} payload: {err!r}") from err
    return Decoded(msg, sender, seq)


class SequenceGuard:
    """Per-sender monotonicity check; replayed or stale lines are rejected."""

    def __init__(self) -> None:
        self._last: dict[int, int] = {}
        self.dropped = 0

    def accept(self, sender: int, seq: int) -> bool:
        last = self._last.get(sender)
        if last is not None and seq <= last:
            self.dropped += 1
            return False
        self._last[sender] = seq
        return True


class QueueTransport:
    """One-directional mailbox of encoded lines, in-process."""

    def __init__(self, maxsize: int = 0) -> None:
        self._queue: queue.Queue[str] = queue.Queue(maxsize)

    def send_line(self, line: str) -> None:
        self._queue.put(line)

    def drain(self) -> list[str]:
        lines = []
        while True:
            try:
                lines.append(self._queue.get_nowait())
            except queue.Empty:
                return lines

    def recv_line(self, timeout: float | None = None) -> str | None:
        try:
            return self._queue.get(timeout=timeout)
        except queue.Empty:
            return None


class SocketTransport:
    """The same line protocol over a connected stream socket."""

    def __init__(self, sock: socket.socket) -> None:
        self._sock = sock
        self._buffer = b""
        self._lines: list[str] = []

    def send_line(self, line: str) -> None:
        self._sock.sendall(line.encode("utf-8") + b"\n")

    def _pump(self, timeout: float | None) -> None:
        self._sock.settimeout(timeout)
        try:
            chunk = self._sock.recv(65536)
        except (socket.timeout, BlockingIOError):
            return
        if chunk:
            self._buffer += chunk
            *complete, self._buffer = self._buffer.split(b"\n")
            self._lines.extend(part.decode("utf-8") for part in complete if part)

    def drain(self) -> list[str]:
        self._pump(timeout=0.0)
        lines, self._lines = self._lines, []
        return lines

    def recv_line(self, timeout: float | None = None) -> str | None:
        if not self._lines:
            self._pump(timeout)
        if self._lines:
            return self._lines.pop(0)
        return None

    def close(self) -> None:
        self._sock.close()


class Endpoint:
    """Outbound side of a link: stamps sender id and sequence numbers."""

    def __init__(self, sender: int, transport) -> None:
        self.sender = int(sender)
        self.transport = transport
        self._seq = 0

    def send(self, msg) -> None:
        self._seq += 1
        self.transport.send_line(encode(msg, self.sender, self._seq))
