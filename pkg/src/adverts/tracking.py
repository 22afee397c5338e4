"""Camera tracking: keyframe structure solve, non-keyframe registration,
and joint bundle refinement.

Flow: the user annotates a few keyframes with matched track points; features
are detected and matched between keyframes to densify the track set; the
first keyframe pair seeds the reconstruction (essential matrix + cheirality,
first camera at identity, unit baseline); remaining keyframes register via
PnP; non-keyframes match against their two nearest keyframes and register
via PnP against the triangulated tracks; a final sparse bundle adjustment
refines everything. Manual annotations carry 10x observation weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bundle import bundle_adjust, project_residuals
from .errors import GeometryError, InsufficientDataError, TrackingError
from .features import FeatureSet, detect_features, match_features
from .geometry import (
    CameraPose,
    Intrinsics,
    axis_angle_from_rotation,
    relative_pose_from_matches,
    rotation_from_axis_angle,
    solve_pose_pnp,
    triangulate,
)

MANUAL_WEIGHT = 10.0
MIN_SHARED_TRACKS = 8
MIN_PNP_CORRESPONDENCES = 6


@dataclass
class KeyframeAnnotation:
    frame_index: int
    points: list  # [(track_id, u, v), ...]

    def to_dict(self):
        return {"frame_index": self.frame_index, "points": [[t, float(u), float(v)] for t, u, v in self.points]}

    @classmethod
    def from_dict(cls, d):
        return cls(frame_index=d["frame_index"], points=[(p[0], p[1], p[2]) for p in d["points"]])


class TrackGraph:
    """Observations per track across frames, plus solved 3D points."""

    def __init__(self):
        self.tracks: dict[str, dict[int, np.ndarray]] = {}
        self.points3: dict[str, np.ndarray] = {}
        self.manual: set[str] = set()

    def add_observation(self, track_id: str, frame_index: int, uv, manual: bool = False):
        obs = self.tracks.setdefault(track_id, {})
        if frame_index not in obs:  # first sighting wins on conflicts
            obs[frame_index] = np.asarray(uv, dtype=np.float64)
        if manual:
            self.manual.add(track_id)

    def observations_in(self, frame_index: int):
        return {
            tid: obs[frame_index] for tid, obs in self.tracks.items() if frame_index in obs
        }

    def shared_tracks(self, fa: int, fb: int):
        return [tid for tid, obs in self.tracks.items() if fa in obs and fb in obs]


@dataclass
class CameraSolve:
    poses: dict[int, CameraPose]
    mean_residuals: dict[int, float]
    keyframes: list[int]
    low_confidence: list[int] = field(default_factory=list)
    gauge_note: str = "first keyframe at identity; first keyframe baseline = 1"

    def pose_list(self, frame_count: int) -> list[CameraPose]:
        return [self.poses[i] for i in range(frame_count)]

    def to_dict(self) -> dict:
        return {
            "gauge_note": self.gauge_note,
            "keyframes": self.keyframes,
            "low_confidence": self.low_confidence,
            "frames": [
                {
                    "frame_index": i,
                    "pose": self.poses[i].to_dict(),
                    "mean_residual": self.mean_residuals.get(i, 0.0),
                }
                for i in sorted(self.poses)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraSolve":
        poses = {}
        residuals = {}
        for rec in d["frames"]:
            poses[rec["frame_index"]] = CameraPose.from_dict(rec["pose"])
            residuals[rec["frame_index"]] = rec.get("mean_residual", 0.0)
        return cls(
            poses=poses,
            mean_residuals=residuals,
            keyframes=d.get("keyframes", []),
            low_confidence=d.get("low_confidence", []),
            gauge_note=d.get("gauge_note", ""),
        )


# ---------------------------------------------------------------------------
# keyframe structure solve


def build_track_graph(annotations: list[KeyframeAnnotation], features: dict[int, FeatureSet]):
    """Merge manual annotations with automatic keyframe-pair matches.

    Returns (graph, feature_track_map, warnings): the map links
    (frame_index, feature_idx) to its auto track id for later non-keyframe
    registration.
    """
    warnings: list[str] = []
    graph = TrackGraph()
    seen_per_track: dict[str, int] = {}
    for ann in annotations:
        for tid, u, v in ann.points:
            seen_per_track[tid] = seen_per_track.get(tid, 0) + 1
    for ann in annotations:
        for tid, u, v in ann.points:
            if seen_per_track[tid] < 2:
                warnings.append(
                    f"track {tid!r} annotated only in keyframe {ann.frame_index}; excluded"
                )
                continue
            graph.add_observation(tid, ann.frame_index, (u, v), manual=True)

    # auto tracks: union-find over (frame, feature index) across keyframe pairs
    kfs = sorted(features)
    parent: dict[tuple[int, int], tuple[int, int]] = {}

    def find(x):
        while parent.get(x, x) != x:
            parent[x] = parent.get(parent[x], parent[x])
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for i, fa in enumerate(kfs):
        for fb in kfs[i + 1 :]:
            for ia, ib, _ in match_features(features[fa], features[fb]):
                union((fa, ia), (fb, ib))

    clusters: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for node in list(parent) + [
        (f, i) for f in kfs for i in range(len(features[f]))
    ]:
        clusters.setdefault(find(node), []).append(node)

    feature_track: dict[tuple[int, int], str] = {}
    counter = 0
    for root in sorted(clusters):
        nodes = sorted(set(clusters[root]))
        frames_seen = {f for f, _ in nodes}
        if len(frames_seen) < 2:
            continue
        tid = f"auto-{counter:05d}"
        counter += 1
        for f, idx in nodes:
            uv = features[f].keypoints[idx, :2]
            graph.add_observation(tid, f, uv)
            feature_track[(f, idx)] = tid
    return graph, feature_track, warnings


@dataclass
class KeyframeSolve:
    graph: TrackGraph
    poses: dict[int, CameraPose]
    warnings: list[str]
    feature_track: dict  # (keyframe, feature idx) -> auto track id


def solve_keyframes(
    annotations: list[KeyframeAnnotation],
    features: dict[int, FeatureSet],
    k: Intrinsics,
    refine: bool = True,
) -> KeyframeSolve:
    """Solve keyframe poses and triangulate the track graph."""
    if len(annotations) < 2:
        raise TrackingError("need at least two annotated keyframes")
    kf_indices = sorted(a.frame_index for a in annotations)
    if len(set(kf_indices)) != len(kf_indices):
        raise TrackingError("duplicate keyframe annotations")

    graph, feature_track, warnings = build_track_graph(annotations, features)

    # seed pair: the earliest adjacent pair sharing enough tracks
    seed = None
    for i in range(len(kf_indices) - 1):
        for j in range(i + 1, len(kf_indices)):
            fa, fb = kf_indices[i], kf_indices[j]
            if len(graph.shared_tracks(fa, fb)) >= MIN_SHARED_TRACKS:
                seed = (fa, fb)
                break
        if seed:
            break
    if seed is None:
        raise TrackingError(
            f"no keyframe pair shares >= {MIN_SHARED_TRACKS} tracks; annotate more points"
        )
    fa, fb = seed
    shared = graph.shared_tracks(fa, fb)
    uva = np.array([graph.tracks[t][fa] for t in shared])
    uvb = np.array([graph.tracks[t][fb] for t in shared])
    pose_b = relative_pose_from_matches(uva, uvb, k)
    poses: dict[int, CameraPose] = {fa: CameraPose.identity(), fb: pose_b}

    _triangulate_tracks(graph, poses, k)

    # register remaining keyframes against solved structure, nearest first
    remaining = [f for f in kf_indices if f not in poses]
    while remaining:
        best, best_corr = None, None
        for f in remaining:
            corr = _correspondences_for(graph, f)
            if best_corr is None or len(corr) > len(best_corr):
                best, best_corr = f, corr
        if len(best_corr) < 4:
            raise TrackingError(
                f"keyframe {best} shares too few solved tracks ({len(best_corr)}) to register"
            )
        pose, _ = solve_pose_pnp(best_corr, k)
        poses[best] = pose
        remaining.remove(best)
        _triangulate_tracks(graph, poses, k)

    if refine:
        poses = _refine_keyframes(graph, poses, k, kf_indices)
        _triangulate_tracks(graph, poses, k, redo=True)
    return graph, poses, warnings


def _correspondences_for(graph: TrackGraph, frame: int):
    corr = []
    for tid, X in graph.points3.items():
        obs = graph.tracks[tid]
        if frame in obs:
            corr.append((X, obs[frame]))
    return corr


def _triangulate_tracks(graph: TrackGraph, poses: dict[int, CameraPose], k: Intrinsics, redo: bool = False):
    """Triangulate tracks observed in >= 2 solved views (widest baseline
    pair), keeping points that pass cheirality in their observing views."""
    for tid, obs in graph.tracks.items():
        if not redo and tid in graph.points3:
            continue
        solved = [f for f in obs if f in poses]
        if len(solved) < 2:
            continue
        best_pair, best_base = None, -1.0
        for i in range(len(solved)):
            for j in range(i + 1, len(solved)):
                b = np.linalg.norm(poses[solved[i]].center() - poses[solved[j]].center())
                if b > best_base:
                    best_base, best_pair = b, (solved[i], solved[j])
        fa, fb = best_pair
        try:
            X, _ = triangulate(obs[fa], poses[fa], obs[fb], poses[fb], k)
        except GeometryError:
            graph.points3.pop(tid, None)
            continue
        if all(poses[f].transform(X)[2] > 0 for f in solved):
            graph.points3[tid] = X
        else:
            graph.points3.pop(tid, None)


def _ba_arrays(graph: TrackGraph, poses: dict[int, CameraPose]):
    frame_ids = sorted(poses)
    cam_of_frame = {f: i for i, f in enumerate(frame_ids)}
    tids = sorted(graph.points3)
    pt_of_track = {t: i for i, t in enumerate(tids)}
    points = np.array([graph.points3[t] for t in tids]) if tids else np.zeros((0, 3))
    oc, op, uv, w = [], [], [], []
    for tid in tids:
        for f, px in graph.tracks[tid].items():
            if f in cam_of_frame:
                oc.append(cam_of_frame[f])
                op.append(pt_of_track[tid])
                uv.append(px)
                w.append(MANUAL_WEIGHT if tid in graph.manual else 1.0)
    return (
        frame_ids,
        tids,
        [poses[f] for f in frame_ids],
        points,
        np.array(oc, dtype=np.int64),
        np.array(op, dtype=np.int64),
        np.array(uv, dtype=np.float64),
        np.array(w, dtype=np.float64),
    )


def _refine_keyframes(graph, poses, k, kf_indices):
    frame_ids, tids, pose_list, points, oc, op, uv, w = _ba_arrays(graph, poses)
    if len(oc) == 0 or len(points) == 0:
        return poses
    anchor_a = frame_ids.index(kf_indices[0])
    anchor_b = frame_ids.index(kf_indices[1])
    res = bundle_adjust(
        pose_list, points, oc, op, uv, k,
        obs_weight=w,
        fixed_cameras=(anchor_a,),
        scale_anchor=(anchor_a, anchor_b),
    )
    for tid, X in zip(tids, res.points):
        graph.points3[tid] = X
    return {f: p for f, p in zip(frame_ids, res.poses)}


# ---------------------------------------------------------------------------
# non-keyframe registration


def register_nonkeyframes(
    graph: TrackGraph,
    kf_poses: dict[int, CameraPose],
    feature_track: dict,
    features: dict[int, FeatureSet],
    frame_count: int,
    k: Intrinsics,
) -> CameraSolve:
    """Register every non-keyframe by matching against its two nearest
    keyframes and solving PnP on 2D-3D correspondences through the track
    graph. Frames with too few correspondences get temporally interpolated
    poses and a low-confidence flag.

    Successful registrations append their observations to the graph so the
    final bundle adjustment can refine them.
    """
    kfs = sorted(kf_poses)
    poses: dict[int, CameraPose] = dict(kf_poses)
    residuals: dict[int, float] = {f: 0.0 for f in kfs}
    low_confidence: list[int] = []

    for t in range(frame_count):
        if t in poses:
            continue
        nearest = sorted(kfs, key=lambda f: (abs(f - t), f))[:2]
        corr = []
        obs_for_track: dict[str, np.ndarray] = {}
        for kf in nearest:
            for it, ik, _ in match_features(features[t], features[kf]):
                tid = feature_track.get((kf, ik))
                if tid is None or tid not in graph.points3 or tid in obs_for_track:
                    continue
                uv_t = features[t].keypoints[it, :2]
                obs_for_track[tid] = uv_t
                corr.append((graph.points3[tid], uv_t))
        if len(corr) >= MIN_PNP_CORRESPONDENCES:
            try:
                pose, res = solve_pose_pnp(corr, k)
            except GeometryError:
                low_confidence.append(t)
                continue
            poses[t] = pose
            residuals[t] = res
            for tid, uv_t in obs_for_track.items():
                graph.add_observation(tid, t, uv_t)
        else:
            low_confidence.append(t)

    # interpolate whatever could not be registered
    solved = sorted(poses)
    for t in low_confidence:
        poses[t] = _interpolate_pose(t, solved, poses)
        residuals[t] = float("nan")
    return CameraSolve(
        poses=poses,
        mean_residuals=residuals,
        keyframes=kfs,
        low_confidence=sorted(low_confidence),
    )


def _interpolate_pose(t: int, solved: list[int], poses: dict[int, CameraPose]) -> CameraPose:
    before = [f for f in solved if f < t]
    after = [f for f in solved if f > t]
    if before and after:
        a, b = before[-1], after[0]
        w = (t - a) / (b - a)
        pa, pb = poses[a], poses[b]
        dR = axis_angle_from_rotation(pb.rotation @ pa.rotation.T)
        R = rotation_from_axis_angle(w * dR) @ pa.rotation
        c = (1 - w) * pa.center() + w * pb.center()
        return CameraPose(R, -R @ c, check=False)
    src = poses[before[-1]] if before else poses[after[0]]
    return CameraPose(src.rotation.copy(), src.translation.copy(), check=False)


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class TrackResult:
    solve: CameraSolve
    graph: TrackGraph
    warnings: list[str]


def track_sequence(
    frames: list[np.ndarray],
    annotations: list[KeyframeAnnotation],
    k: Intrinsics,
    refine: bool = True,
    detect=detect_features,
) -> TrackResult:
    """Run the whole tracking pipeline on decoded frames."""
    kf_indices = sorted(a.frame_index for a in annotations)
    features = {}
    for t in range(len(frames)):
        features[t] = detect(frames[t], frame_index=t)

    kf_features = {f: features[f] for f in kf_indices}
    graph, kf_poses, warnings = solve_keyframes(annotations, kf_features, k, refine=refine)
    feature_track = _rebuild_feature_track(graph, kf_features)
    solve = register_nonkeyframes(graph, kf_poses, feature_track, features, len(frames), k)

    if refine:
        solve = _final_bundle(graph, solve, k)
    return TrackResult(solve=solve, graph=graph, warnings=warnings)


def _rebuild_feature_track(graph: TrackGraph, features: dict[int, FeatureSet]):
    """Map (keyframe, feature index) -> auto track id by matching keypoint
    coordinates back to graph observations."""
    feature_track = {}
    for f, fs in features.items():
        if len(fs) == 0:
            continue
        kp = fs.keypoints[:, :2]
        for tid, obs in graph.tracks.items():
            if tid in graph.manual or f not in obs:
                continue
            d = np.linalg.norm(kp - obs[f], axis=1)
            idx = int(np.argmin(d))
            if d[idx] < 1e-9:
                feature_track[(f, idx)] = tid
    return feature_track


def _final_bundle(graph: TrackGraph, solve: CameraSolve, k: Intrinsics) -> CameraSolve:
    registered = {
        f: p for f, p in solve.poses.items() if f not in solve.low_confidence
    }
    frame_ids, tids, pose_list, points, oc, op, uv, w = _ba_arrays(graph, registered)
    if len(oc) == 0:
        return solve
    kf0, kf1 = solve.keyframes[0], solve.keyframes[1]
    res = bundle_adjust(
        pose_list, points, oc, op, uv, k,
        obs_weight=w,
        fixed_cameras=(frame_ids.index(kf0),),
        scale_anchor=(frame_ids.index(kf0), frame_ids.index(kf1)),
    )
    for tid, X in zip(tids, res.points):
        graph.points3[tid] = X
    new_poses = dict(solve.poses)
    new_residuals = dict(solve.mean_residuals)
    kept = res.trimmed if res.trimmed is not None else np.zeros(len(oc), dtype=bool)
    e = None
    from .bundle import project_residuals

    r, _ = project_residuals(res.poses, res.points, oc, op, uv, k)
    e = np.linalg.norm(r, axis=1)
    for i, f in enumerate(frame_ids):
        new_poses[f] = res.poses[i]
        sel = (oc == i) & ~kept
        if sel.any():
            new_residuals[f] = float(e[sel].mean())
    # re-interpolate low-confidence frames against the refined neighbours
    solved = [f for f in sorted(new_poses) if f not in solve.low_confidence]
    for t in solve.low_confidence:
        new_poses[t] = _interpolate_pose(t, solved, new_poses)
    return CameraSolve(
        poses=new_poses,
        mean_residuals=new_residuals,
        keyframes=solve.keyframes,
        low_confidence=solve.low_confidence,
        gauge_note=solve.gauge_note,
    )


# ---------------------------------------------------------------------------
# debug export (3D view document)


def debug_export(result: TrackResult, k: Intrinsics, width: int, height: int) -> dict:
    """Solved points + per-frame camera frusta for the UI's 3D debug view."""
    frusta = []
    for f in sorted(result.solve.poses):
        pose = result.solve.poses[f]
        c = pose.center()
        depth = 0.3
        corners = []
        for (uu, vv) in ((0, 0), (width, 0), (width, height), (0, height)):
            d = np.array([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, 1.0]) * depth
            corners.append((pose.rotation.T @ (d - pose.translation)).tolist())
        frusta.append(
            {
                "frame_index": f,
                "center": c.tolist(),
                "corners": corners,
                "low_confidence": f in result.solve.low_confidence,
                "mean_residual": result.solve.mean_residuals.get(f, 0.0),
            }
        )
    return {
        "schema_version": 1,
        "points": [X.tolist() for _, X in sorted(result.graph.points3.items())],
        "track_ids": sorted(result.graph.points3),
        "frusta": frusta,
        "keyframes": result.solve.keyframes,
        "gauge_note": result.solve.gauge_note,
    }
