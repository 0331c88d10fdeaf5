"""Geometric detection of stretched-out fingers from the hand mask.

Pipeline: distance transform -> palm center/radius -> boundary trace ->
curvature-gated fingertip candidates -> root localization on the
tip-to-center segment -> joint interpolation -> identity matching against
a baseline pose (summed squared joint distance, assigned greedily without
reuse).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import backend
from .errors import DegenerateMaskError, EmptyMaskError
from .geometry import (
    CameraIntrinsics,
    DepthImage,
    HandPose,
    Pixel,
    SkeletonSpec,
    backproject_uv,
    foreground_mask,
)


@dataclass
class DetectConfig:
    distance_threshold_ratio: float = 1.6  # of palm radius
    curvature_window: int = 11  # boundary arc half-width, samples
    curvature_min: float = 0.8  # radians of turning over the arc
    # fractional positions of interior chain joints along root->tip;
    # None means equal spacing derived from the skeleton chain length
    interpolation_fractions: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.distance_threshold_ratio <= 1:
            raise ValueError("distance_threshold_ratio must exceed 1")
        if self.curvature_window < 2:
            raise ValueError("curvature_window must be >= 2")
        if not 0 < self.curvature_min < np.pi:
            raise ValueError("curvature_min must lie in (0, pi)")

    def fractions(self, chain_length: int) -> np.ndarray:
        if self.interpolation_fractions is not None:
            fr = np.asarray(self.interpolation_fractions, dtype=np.float64)
            if fr.shape[0] != chain_length - 2:
                raise ValueError(
                    f"need {chain_length - 2} interior fractions, got {fr.shape[0]}"
                )
            return fr
        n = chain_length - 1
        return np.arange(1, n, dtype=np.float64) / n


@dataclass
class DistanceMap:
    """Euclidean distance (pixels) to the nearest non-mask pixel."""

    values: np.ndarray


@dataclass
class DetectedFinger:
    tip: Pixel
    root: Pixel
    joints_px: np.ndarray  # (chain_length, 2) float (u, v), root first, tip last
    tip_distance: float  # pixels from palm center
    identity: int | None = None  # finger chain index, assigned by match_identity
    joints_mm: np.ndarray | None = field(default=None, repr=False)


def distance_transform(mask: np.ndarray) -> DistanceMap:
    """Exact EDT of a boolean mask; the image border counts as non-mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("distance transform of an all-false mask")
    return DistanceMap(np.sqrt(backend.edt_sq(np.ascontiguousarray(mask, dtype=np.uint8))))


def palm_center(dmap: DistanceMap) -> tuple[Pixel, float]:
    """Argmax of the distance map (ties: smallest row, then column) + radius."""
    values = dmap.values
    flat = int(np.argmax(values))  # row-major argmax == (smallest row, then col)
    radius = float(values.flat[flat])
    if radius <= 0:
        raise DegenerateMaskError("distance map has no positive values")
    v, u = divmod(flat, values.shape[1])
    return Pixel(u, v), radius


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 8-connected foreground component of a boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        raise EmptyMaskError("mask has no foreground component")
    if count == 1:
        return mask
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, count + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def trace_boundary(mask: np.ndarray) -> np.ndarray:
    """Ordered closed loop of boundary pixels, (n, 2) int (u, v).

    Boundary pixels are foreground pixels with a background 4-neighbor
    (the border counts as background); consecutive loop entries are
    8-adjacent, as are the last and first.
    """
    comp = largest_component(mask)
    loop = backend.trace_loop(np.ascontiguousarray(comp, dtype=np.uint8))
    u, v = loop[:, 0], loop[:, 1]
    h, w = comp.shape
    padded = np.pad(comp, 1, constant_values=False)
    four = (
        ~padded[v, u + 1] | ~padded[v + 2, u + 1] | ~padded[v + 1, u] | ~padded[v + 1, u + 2]
    )
    return loop[four]


def _turning_angles(boundary: np.ndarray, window: int) -> np.ndarray:
    """Angle between incoming and outgoing arc chords at every loop point."""
    prev = np.roll(boundary, window, axis=0)
    nxt = np.roll(boundary, -window, axis=0)
    v1 = (boundary - prev).astype(np.float64)
    v2 = (nxt - boundary).astype(np.float64)
    dot = (v1 * v2).sum(axis=1)
    cross = v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0]
    return np.abs(np.arctan2(cross, dot))


def detect_fingertips(boundary: np.ndarray, center: Pixel, palm_radius: float,
                      cfg: DetectConfig) -> list[Pixel]:
    """Boundary points that look like stretched fingertips.

    A candidate must be the distance-to-center maximum of its +-window arc,
    exceed distance_threshold_ratio * palm_radius, and turn by at least
    curvature_min over the arc. Candidates closer than one window along
    the loop merge to the farthest; at most five (by distance) survive.
    """
    n = boundary.shape[0]
    w = cfg.curvature_window
    if n < 2 * w + 1:
        return []
    d = np.hypot(boundary[:, 0] - center[0], boundary[:, 1] - center[1])
    window_max = d.copy()
    for k in range(1, w + 1):
        np.maximum(window_max, np.roll(d, k), out=window_max)
        np.maximum(window_max, np.roll(d, -k), out=window_max)
    cand = np.nonzero(d >= window_max)[0]
    if cand.size == 0:
        return []

    # merge candidates within one window of each other along the loop
    groups: list[list[int]] = [[int(cand[0])]]
    for i in cand[1:]:
        if i - groups[-1][-1] <= w:
            groups[-1].append(int(i))
        else:
            groups.append([int(i)])
    if len(groups) > 1 and (n - groups[-1][-1]) + groups[0][0] <= w:
        groups[0] = groups.pop() + groups[0]
    merged = [g[int(np.argmax(d[g]))] for g in groups]

    angles = _turning_angles(boundary, w)
    limit = cfg.distance_threshold_ratio * palm_radius
    tips = [i for i in merged if d[i] > limit and angles[i] >= cfg.curvature_min]
    if len(tips) > 5:
        keep = sorted(sorted(tips, key=lambda i: -d[i])[:5])
        tips = keep
    return [Pixel(int(boundary[i, 0]), int(boundary[i, 1])) for i in sorted(tips)]


def locate_root(tip: Pixel, center: Pixel, dmap: DistanceMap) -> Pixel:
    """First sample stepping tip->center where the EDT reaches half the palm radius.

    Falls back to the segment point one palm radius from the center when
    no crossing exists on the segment.
    """
    values = dmap.values
    radius = float(values.max())
    du = center[0] - tip[0]
    dv = center[1] - tip[1]
    length = float(np.hypot(du, dv))
    steps = max(int(np.ceil(length)), 1)
    for k in range(steps + 1):
        t = k / steps
        u = int(np.floor(tip[0] + t * du + 0.5))
        v = int(np.floor(tip[1] + t * dv + 0.5))
        if values[v, u] >= 0.5 * radius:
            return Pixel(u, v)
    t = max(0.0, min(1.0, 1.0 - radius / length)) if length > 0 else 0.0
    return Pixel(int(np.floor(tip[0] + t * du + 0.5)), int(np.floor(tip[1] + t * dv + 0.5)))


def interpolate_joints(tip: Pixel, root: Pixel, skeleton: SkeletonSpec,
                       cfg: DetectConfig) -> np.ndarray:
    """(chain_length, 2) float pixels along root->tip, root first, tip last."""
    fr = cfg.fractions(skeleton.chain_length)
    out = np.empty((skeleton.chain_length, 2), dtype=np.float64)
    out[0] = (root[0], root[1])
    out[-1] = (tip[0], tip[1])
    for k, t in enumerate(fr):
        out[k + 1, 0] = root[0] + t * (tip[0] - root[0])
        out[k + 1, 1] = root[1] + t * (tip[1] - root[1])
    return out


def joints_px_to_mm(joints_px: np.ndarray, img: DepthImage,
                    intr: CameraIntrinsics, fg_uv: np.ndarray) -> np.ndarray:
    """Backproject fractional joint pixels using the nearest foreground depth."""
    n = joints_px.shape[0]
    uv = np.floor(joints_px + 0.5).astype(np.int64)
    uv[:, 0] = np.clip(uv[:, 0], 0, img.width - 1)
    uv[:, 1] = np.clip(uv[:, 1], 0, img.height - 1)
    depths = np.empty(n, dtype=np.float64)
    for i in range(n):
        u, v = int(uv[i, 0]), int(uv[i, 1])
        d = img.depths[v, u]
        if d >= img.background_value:
            d2 = (fg_uv[:, 0] - u) ** 2 + (fg_uv[:, 1] - v) ** 2
            j = int(np.argmin(d2))
            d = img.depths[fg_uv[j, 1], fg_uv[j, 0]]
        depths[i] = d
    return backproject_uv(uv.astype(np.float64), depths, intr)


def finger_match_cost(detected_mm: np.ndarray, baseline: HandPose, finger: int) -> float:
    """Summed squared distance between detected joints and a baseline chain."""
    chain = baseline.skeleton.finger_chains[finger]
    diff = detected_mm - baseline.joints[list(chain)]
    return float((diff * diff).sum())


def match_identity(detected: list[DetectedFinger], baseline: HandPose,
                   img: DepthImage, intr: CameraIntrinsics) -> None:
    """Assign each detected finger the closest baseline finger, exclusively.

    Costs are summed squared joint distances in mm; assignments are made
    greedily in increasing cost order with each baseline finger used at
    most once. Fingers left over stay unassigned (identity None).
    """
    if not detected:
        return
    fg_uv = np.argwhere(foreground_mask(img))[:, ::-1].astype(np.int64)  # (n, 2) u, v
    for f in detected:
        f.joints_mm = joints_px_to_mm(f.joints_px, img, intr, fg_uv)
        f.identity = None
    costs = []
    for di, det in enumerate(detected):
        for finger in range(5):
            costs.append((finger_match_cost(det.joints_mm, baseline, finger), di, finger))
    costs.sort()
    used_det: set[int] = set()
    used_fin: set[int] = set()
    for cost, di, finger in costs:
        if di in used_det or finger in used_fin:
            continue
        detected[di].identity = finger
        used_det.add(di)
        used_fin.add(finger)


def detect_fingers(img: DepthImage, skeleton: SkeletonSpec, cfg: DetectConfig,
                   baseline: HandPose | None = None,
                   intr: CameraIntrinsics | None = None) -> dict:
    """Run the full geometric detection on one image.

    Returns a dict with palm_center, palm_radius and the DetectedFinger
    list; identities are filled in when a baseline pose is supplied.
    """
    mask = foreground_mask(img)
    if not mask.any():
        raise EmptyMaskError("image has no foreground pixels")
    comp = largest_component(mask)
    dmap = distance_transform(comp)
    center, radius = palm_center(dmap)
    boundary = trace_boundary(comp)
    tips = detect_fingertips(boundary, center, radius, cfg)
    fingers = []
    for tip in tips:
        root = locate_root(tip, center, dmap)
        joints = interpolate_joints(tip, root, skeleton, cfg)
        d = float(np.hypot(tip[0] - center[0], tip[1] - center[1]))
        fingers.append(DetectedFinger(tip=tip, root=root, joints_px=joints, tip_distance=d))
    if baseline is not None:
        if intr is None:
            raise ValueError("identity matching needs camera intrinsics")
        match_identity(fingers, baseline, img, intr)
    return {"palm_center": center, "palm_radius": radius, "fingers": fingers}


def detection_debug_record(sample_id, result: dict) -> dict:
    """JSON-ready record for the CLI debug dump (schema in README)."""
    return {
        "sample_id": sample_id,
        "palm_center": [int(result["palm_center"][0]), int(result["palm_center"][1])],
        "palm_radius": float(result["palm_radius"]),
        "fingers": [
            {
                "tip": [int(f.tip[0]), int(f.tip[1])],
                "root": [int(f.root[0]), int(f.root[1])],
                "joints_px": [[float(a), float(b)] for a, b in f.joints_px],
                "identity": f.identity,
                "tip_distance": float(f.tip_distance),
            }
            for f in result["fingers"]
        ],
    }
