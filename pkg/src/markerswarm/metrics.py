"""Run evaluation: frame-aligned error metrics from a report dict.

The estimated map lives in arbitrary per-run frames (each anchored at a
drone's believed start), so raw coordinates are meaningless against
ground truth. Every metric therefore first fits a rigid transform from
the estimated frame to the truth frame over all mapped markers, then
measures what survives the alignment: marker position and orientation
RMSE, and per-drone absolute trajectory error under the same transform.

Everything here recomputes from the report's raw fields; the "metrics"
key embedded in a report must be reproducible by calling compute_metrics
on that same report.
"""

from __future__ import annotations

import numpy as np

from markerswarm.framemerge import estimate_transform
from markerswarm.geom import Pose6D, rotation_angle_between


def _rmse(values) -> float | None:
    values = list(values)
    if not values:
        return None
    return float(np.sqrt(np.mean(np.square(values))))


def compute_metrics(report: dict) -> dict:
    """Metrics dict for one run report; all values JSON-native.

    Per live frame with at least one marker that exists in ground truth:
    fit estimate-to-truth, then marker position RMSE (m), marker
    orientation RMSE (rad) and per-drone trajectory position RMSE (m)
    over the ticks spent in that frame. When exactly one frame holds
    markers the same numbers are mirrored at the top level.
    """
    truth_markers = {
        int(mid): Pose6D.from_dict(d) for mid, d in report["world"]["markers"].items()
    }
    by_frame: dict[int, list[dict]] = {}
    for entry in report["map"]:
        by_frame.setdefault(int(entry["frame"]), []).append(entry)

    frames_out: dict[str, dict] = {}
    for frame in sorted(by_frame):
        entries = sorted(by_frame[frame], key=lambda e: e["marker_id"])
        pairs = []
        mapped = []
        for entry in entries:
            marker_id = int(entry["marker_id"])
            if marker_id not in truth_markers:
                continue
            estimated = Pose6D.from_dict(entry["pose"])
            pairs.append((truth_markers[marker_id], estimated))
            mapped.append(marker_id)
        if not pairs:
            continue
        rt = estimate_transform(pairs, from_frame=frame, to_frame=-1).rt

        position_errors = [np.linalg.norm(rt.apply(est.t) - truth.t) for truth, est in pairs]
        angle_errors = [
            rotation_angle_between(rt.compose(est).q, truth.q) for truth, est in pairs
        ]

        ate: dict[str, float] = {}
        for drone_id, rows in sorted(report["trajectories"].items()):
            errors = []
            for row in rows:
                if int(row["frame"]) != frame:
                    continue
                est_t = np.asarray(row["estimate"]["t"], dtype=float)
                truth_t = np.asarray(row["truth"]["t"], dtype=float)
                errors.append(np.linalg.norm(rt.apply(est_t) - truth_t))
            value = _rmse(errors)
            if value is not None:
                ate[drone_id] = value

        frames_out[str(frame)] = {
            "marker_count": len(pairs),
            "marker_ids": mapped,
            "marker_position_rmse": _rmse(position_errors),
            "marker_orientation_rmse": _rmse(angle_errors),
            "ate": ate,
        }

    metrics: dict = {
        "frames": frames_out,
        "frame_count": len(report["frames"]),
        "mapped_markers": sum(f["marker_count"] for f in frames_out.values()),
        "true_markers": len(truth_markers),
        "merge_count": len(report["merge_events"]),
        "ba_runs": len(report["ba_reports"]),
        "ba_iterations": int(sum(r["iterations"] for r in report["ba_reports"])),
    }
    if len(frames_out) == 1:
        only = next(iter(frames_out.values()))
        metrics["marker_position_rmse"] = only["marker_position_rmse"]
        metrics["marker_orientation_rmse"] = only["marker_orientation_rmse"]
        metrics["ate"] = only["ate"]
    else:
        metrics["marker_position_rmse"] = None
        metrics["marker_orientation_rmse"] = None
        metrics["ate"] = {}
    return metrics
