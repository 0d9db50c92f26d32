"""Static-anchor extrinsic correction and cooperative label regeneration.

Vehicle boxes live in the vehicle (ego) frame of their frame index, infra
boxes in the fixed infra sensor frame. A per-frame extrinsic E_i maps infra
to vehicle coordinates; the correction dE_i is estimated by aligning the
corners of co-visible parked cars.
"""

from __future__ import annotations

import itertools
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geom import (
    RigidTransform,
    UnitQuaternion,
    lerp_vec3,
    matrix_to_rot6d,
    rot6d_backward,
    rot6d_to_matrix,
    slerp,
)
from .lbfgs import minimize_lbfgs
from .scene import check_source

log = logging.getLogger(__name__)

STATIC_THRESHOLD = 1.0
MATCH_GATE = 3.0
MAX_GAP = 2

# corner k has signs (sx, sy, sz) = product((-1, 1), repeat=3)[k]; x varies slowest
CORNER_SIGNS = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))


def box_corners(center, rotation: np.ndarray, extent) -> np.ndarray:
    local = CORNER_SIGNS * (0.5 * np.asarray(extent, dtype=float))
    return local @ np.asarray(rotation).T + np.asarray(center, dtype=float)


@dataclass
class CornerBox:
    track_id: str
    timestamp: float
    source: str
    center: np.ndarray
    orientation: UnitQuaternion
    extent: np.ndarray
    static: bool | None = None
    frame: int = -1
    interpolated: bool = False
    # measured corners when they differ from the parametric box (noisy annotations)
    raw_corners: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        check_source(self.source)
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.extent = np.asarray(self.extent, dtype=float).reshape(3)

    @property
    def corners(self) -> np.ndarray:
        if self.raw_corners is not None:
            return self.raw_corners
        return box_corners(self.center, self.orientation.matrix(), self.extent)

    @property
    def pose(self) -> RigidTransform:
        return RigidTransform(self.orientation, self.center)

    @classmethod
    def from_corners(cls, corners, track_id: str, timestamp: float, source: str, **kw) -> CornerBox:
        """Fit center/orientation/extent to measured corners, keeping the raw corners."""
        X = np.asarray(corners, dtype=float).reshape(8, 3)
        c = X.mean(axis=0)
        # extent per axis from the sign pattern, orientation by Procrustes on the unit box
        local_dirs = CORNER_SIGNS
        H = local_dirs.T @ (X - c)
        U, _, Vt = np.linalg.svd(H)
        D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
        R = Vt.T @ D @ U.T
        local = (X - c) @ R
        extent = 2.0 * np.abs(local * CORNER_SIGNS).mean(axis=0)
        return cls(track_id, timestamp, source, c, UnitQuaternion.from_matrix(R), extent, raw_corners=X, **kw)

    def transformed(self, T: RigidTransform, source: str | None = None) -> CornerBox:
        raw = None if self.raw_corners is None else T.apply(self.raw_corners)
        return replace(
            self,
            center=T.apply(self.center),
            orientation=T.rotation * self.orientation,
            source=source or self.source,
            raw_corners=raw,
        )

    def to_record(self) -> dict:
        return {
            "track_id": self.track_id,
            "frame": self.frame,
            "timestamp": self.timestamp,
            "source": self.source,
            "center": self.center.tolist(),
            "quat_wxyz": self.orientation.as_array().tolist(),
            "extent": self.extent.tolist(),
            "static": self.static,
            "interpolated": self.interpolated,
        }

    @classmethod
    def from_record(cls, r: dict) -> CornerBox:
        return cls(
            str(r["track_id"]),
            float(r["timestamp"]),
            r["source"],
            r["center"],
            UnitQuaternion.normalized(r["quat_wxyz"]),
            r["extent"],
            r.get("static"),
            int(r.get("frame", -1)),
            bool(r.get("interpolated", False)),
        )


def save_boxes(path, boxes) -> None:
    lines = [json.dumps(b.to_record()) for b in boxes]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_boxes(path) -> list[CornerBox]:
    out = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                out.append(CornerBox.from_record(json.loads(line)))
            except (KeyError, ValueError, TypeError) as e:
                raise ValueError(f"{path}:{i}: bad annotation record ({e})") from e
    return out


def group_tracks(boxes) -> dict[str, list[CornerBox]]:
    tracks = defaultdict(list)
    for b in boxes:
        tracks[b.track_id].append(b)
    return {k: sorted(v, key=lambda b: b.timestamp) for k, v in sorted(tracks.items())}


# -- static detection and matching ---------------------------------------------------


def track_length(track) -> float:
    c = np.array([b.center for b in track])
    return float(np.linalg.norm(np.diff(c, axis=0), axis=1).sum())


def detect_static(tracks: dict, threshold: float = STATIC_THRESHOLD) -> dict[str, bool | None]:
    """Path length of the box centers strictly below threshold -> static; one box -> None."""
    return {tid: (None if len(tr) < 2 else track_length(tr) < threshold) for tid, tr in tracks.items()}


@dataclass
class Matching:
    pairs: list[tuple[str, str]]
    costs: list[float]

    def __post_init__(self):
        v = [p[0] for p in self.pairs]
        f = [p[1] for p in self.pairs]
        if len(set(v)) != len(v) or len(set(f)) != len(f):
            raise ValueError("matching is not one-to-one")

    def __len__(self):
        return len(self.pairs)


def match_static_anchors(veh, infra, base: RigidTransform, gate: float = MATCH_GATE) -> Matching:
    """Hungarian assignment on center distance after moving infra boxes by base; gate after assignment."""
    if not veh or not infra:
        return Matching([], [])
    cv = np.array([b.center for b in veh])
    ci = base.apply(np.array([b.center for b in infra]))
    cost = np.linalg.norm(cv[:, None, :] - ci[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    pairs, costs = [], []
    for r, c in zip(rows, cols):
        if cost[r, c] <= gate:
            pairs.append((veh[r].track_id, infra[c].track_id))
            costs.append(float(cost[r, c]))
    return Matching(pairs, costs)


# -- corner alignment ------------------------------------------------------------


@dataclass
class ExtrinsicCorrection:
    base: RigidTransform
    correction: RigidTransform
    residual_rms: float
    anchors_used: int = 0
    iterations: int = 0
    converged: bool = True
    message: str = ""

    @property
    def refined(self) -> RigidTransform:
        return self.correction.compose(self.base)


def _stack_pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    if len(pairs) == 0:
        raise ValueError("corner objective needs at least one matched box")
    Xv = np.array([np.asarray(v, float).reshape(8, 3) for v, _ in pairs])
    Xi = np.array([np.asarray(i, float).reshape(8, 3) for _, i in pairs])
    return Xv, Xi


def corner_objective(delta: RigidTransform, base: RigidTransform, pairs) -> float:
    """Mean over matched boxes of ||X_veh - (delta o base)(X_infra)||_F^2.

    `pairs` is a sequence of (vehicle corners, infra corners), each 8x3.
    """
    Xv, Xi = _stack_pairs(pairs)
    P = delta.compose(base).apply(Xi.reshape(-1, 3)).reshape(Xi.shape)
    return float(((Xv - P) ** 2).sum() / len(Xv))


def _objective_9(x: np.ndarray, Xv: np.ndarray, P: np.ndarray) -> tuple[float, np.ndarray]:
    R = rot6d_to_matrix(x[:6])
    t = x[6:]
    r = Xv - (P @ R.T + t)
    m = len(Xv)
    f = (r**2).sum() / m
    rf = r.reshape(-1, 3)
    pf = P.reshape(-1, 3)
    dR = -2.0 / m * rf.T @ pf
    dt = -2.0 / m * rf.sum(axis=0)
    return float(f), np.concatenate([rot6d_backward(x[:6], dR), dt])


def solve_pose_correction(base: RigidTransform, pairs, init: RigidTransform | None = None, gtol: float = 1e-9, maxiter: int = 200) -> ExtrinsicCorrection:
    Xv, Xi = _stack_pairs(pairs)
    P = base.apply(Xi.reshape(-1, 3)).reshape(Xi.shape)
    # rotate about the anchor centroid so rotation and translation decouple
    c = P.reshape(-1, 3).mean(axis=0)
    init = init or RigidTransform.identity()
    x0 = np.concatenate([matrix_to_rot6d(init.R).as_array(), init.R @ c + init.translation - c])
    res = minimize_lbfgs(lambda x: _objective_9(x, Xv - c, P - c), x0, gtol=gtol, maxiter=maxiter)
    R = rot6d_to_matrix(res.x[:6])
    corr = RigidTransform.from_matrix(R, res.x[6:] + c - R @ c)
    # per coordinate: 8 corners x 3 axes per box
    rms = float(np.sqrt(max(res.fun, 0.0) / 24.0))
    if not res.converged and res.message != "precision floor":
        log.warning("pose correction did not converge (%s); residual rms %.4g m", res.message, rms)
    return ExtrinsicCorrection(base, corr, rms, len(Xv), res.iterations, res.converged, res.message)


def correction_error(estimated: RigidTransform, truth: RigidTransform) -> tuple[float, float]:
    """(rotation error in degrees, translation error in meters)."""
    ang = estimated.rotation.angle_to(truth.rotation)
    return float(np.degrees(ang)), float(np.linalg.norm(estimated.translation - truth.translation))


# -- label regeneration --------------------------------------------------------------


@dataclass
class FrameAlignment:
    frame: int
    timestamp: float
    correction: ExtrinsicCorrection | None
    matching: Matching
    warning: str = ""

    @property
    def refined(self) -> RigidTransform | None:
        return None if self.correction is None else self.correction.refined


def align_frames(veh_boxes, infra_boxes, base_extrinsics: dict[int, RigidTransform], gate: float = MATCH_GATE) -> dict[int, FrameAlignment]:
    """Per-frame static matching and corner solve. Boxes must carry static flags."""
    by_frame_v = defaultdict(list)
    by_frame_i = defaultdict(list)
    for b in veh_boxes:
        if b.static:
            by_frame_v[b.frame].append(b)
    for b in infra_boxes:
        if b.static:
            by_frame_i[b.frame].append(b)
    out = {}
    for frame, base in sorted(base_extrinsics.items()):
        v, i = by_frame_v.get(frame, []), by_frame_i.get(frame, [])
        m = match_static_anchors(v, i, base, gate)
        ts = v[0].timestamp if v else (i[0].timestamp if i else float("nan"))
        if len(m) == 0:
            out[frame] = FrameAlignment(frame, ts, None, m, "no matched static anchors")
            continue
        vmap = {b.track_id: b for b in v}
        imap = {b.track_id: b for b in i}
        pairs = [(vmap[a].corners, imap[b].corners) for a, b in m.pairs]
        out[frame] = FrameAlignment(frame, ts, solve_pose_correction(base, pairs), m)
    return out


def associate_tracks(veh_boxes, infra_in_vehicle, gate: float = 5.0) -> dict[str, str]:
    """infra track id -> vehicle track id, by majority vote over per-frame Hungarian matches."""
    fv, fi = defaultdict(list), defaultdict(list)
    for b in veh_boxes:
        fv[b.frame].append(b)
    for b in infra_in_vehicle:
        fi[b.frame].append(b)
    votes = defaultdict(Counter)
    for frame in sorted(set(fv) & set(fi)):
        m = match_static_anchors(fv[frame], fi[frame], RigidTransform.identity(), gate)
        for a, b in m.pairs:
            votes[b][a] += 1
    out = {}
    taken = set()
    # strongest associations first; ties resolved by id order for determinism
    ranked = sorted(((c.most_common(1)[0][1], b, c.most_common(1)[0][0]) for b, c in votes.items()), key=lambda x: (-x[0], x[1]))
    for _, b, a in ranked:
        if a not in taken:
            out[b] = a
            taken.add(a)
    return out


@dataclass
class CooperativeLabels:
    boxes: list[CornerBox]  # vehicle frame of each box's frame index
    association: dict[str, str]
    warnings: list[str]

    def tracks(self) -> dict[str, list[CornerBox]]:
        return group_tracks(self.boxes)


def regenerate_labels(veh_boxes, infra_boxes, extrinsics: dict[int, RigidTransform], base_extrinsics: dict[int, RigidTransform] | None = None) -> CooperativeLabels:
    """Merge both sources' boxes into vehicle coordinates under one id space.

    Infra boxes are moved by the per-frame refined extrinsic; frames without
    one fall back to the base extrinsic with a warning. Co-visible objects
    keep the vehicle id and both sources' boxes (each at its own capture
    time); infra-only objects keep their infra id.
    """
    warnings = []
    moved = []
    for b in infra_boxes:
        E = extrinsics.get(b.frame)
        if E is None:
            E = (base_extrinsics or {}).get(b.frame)
            if E is None:
                raise ValueError(f"no extrinsic for frame {b.frame}")
            warnings.append(f"frame {b.frame}: base extrinsic used for {b.track_id}")
        moved.append(b.transformed(E))
    assoc = associate_tracks(veh_boxes, moved)
    out = list(veh_boxes)
    for b in moved:
        out.append(replace(b, track_id=assoc.get(b.track_id, b.track_id)))
    out.sort(key=lambda b: (b.track_id, b.timestamp, b.source))
    return CooperativeLabels(out, assoc, warnings)


# -- gap filling ---------------------------------------------------------------------


def _frame_grid(track, frame_times) -> np.ndarray:
    if frame_times is not None:
        return np.asarray(frame_times, dtype=float)
    ts = np.array([b.timestamp for b in track])
    steps = np.diff(ts)
    steps = steps[steps > 1e-12]
    if len(steps) == 0:
        return ts
    dt = steps.min()
    n = int(round((ts[-1] - ts[0]) / dt))
    return ts[0] + dt * np.arange(n + 1)


def fill_gaps(track, frame_times=None, max_gap: int = MAX_GAP) -> list[CornerBox]:
    """Interpolate interior gaps of at most `max_gap` missing frames.

    Missing frames are the entries of `frame_times` (default: a uniform grid at
    the track's smallest spacing) with no box. Center is lerped, orientation
    slerped, extent copied from the earlier box. Longer and boundary gaps stay.
    """
    track = sorted(track, key=lambda b: b.timestamp)
    if len(track) < 2:
        return list(track)
    grid = _frame_grid(track, frame_times)
    tol = 1e-9
    have = np.array([b.timestamp for b in track])
    present = np.array([np.any(np.abs(have - t) < tol) for t in grid])
    out = list(track)
    k = 0
    while k < len(grid):
        if present[k]:
            k += 1
            continue
        j = k
        while j < len(grid) and not present[j]:
            j += 1
        if k > 0 and j < len(grid) and j - k <= max_gap:
            b0 = track[int(np.argmin(np.abs(have - grid[k - 1])))]
            b1 = track[int(np.argmin(np.abs(have - grid[j])))]
            for m in range(k, j):
                t = float(grid[m])
                w = (t - b0.timestamp) / (b1.timestamp - b0.timestamp)
                frame = b0.frame + (m - k + 1) if b0.frame >= 0 else -1
                out.append(
                    CornerBox(
                        b0.track_id,
                        t,
                        b0.source,
                        lerp_vec3(b0.center, b1.center, w),
                        slerp(b0.orientation, b1.orientation, w),
                        b0.extent.copy(),
                        b0.static,
                        frame,
                        True,
                    )
                )
        k = j
    return sorted(out, key=lambda b: b.timestamp)
