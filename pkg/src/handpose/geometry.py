"""Depth images, camera projection, skeleton layouts and pose containers.

Conventions used throughout the package:

* depth values are millimeters, stored row-major in a (height, width) grid;
* pixels are addressed as (u, v) = (column, row);
* joint positions live in camera-space millimeters, x right, y down, z
  along the optical axis, so ``z == depth``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import (
    BackgroundPixelError,
    BoundsError,
    DegenerateDepthError,
    NoHandError,
    SkeletonMismatchError,
)

DEFAULT_BACKGROUND_MM = 10000.0


class Pixel(NamedTuple):
    u: int
    v: int


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")


# Creative Interactive Gesture Camera convention used by the common
# hand datasets at 320x240; override via the config file.
DEFAULT_INTRINSICS = CameraIntrinsics(fx=241.42, fy=241.42, cx=160.0, cy=120.0)


class DepthImage:
    """Dense depth grid in mm with a background sentinel.

    Foreground pixels hold depths strictly inside (0, background_value);
    everything else is background.
    """

    __slots__ = ("depths", "background_value")

    def __init__(self, depths, background_value: float = DEFAULT_BACKGROUND_MM, validate: bool = True):
        depths = np.ascontiguousarray(depths, dtype=np.float32)
        if depths.ndim != 2:
            raise ValueError(f"depth grid must be 2D, got shape {depths.shape}")
        if validate:
            fg = depths < background_value
            bad = fg & (depths <= 0)
            if bad.any():
                v, u = np.argwhere(bad)[0]
                raise ValueError(
                    f"non-positive foreground depth {depths[v, u]} at pixel ({u}, {v})"
                )
        self.depths = depths
        self.depths.setflags(write=False)
        self.background_value = float(background_value)

    @property
    def width(self) -> int:
        return self.depths.shape[1]

    @property
    def height(self) -> int:
        return self.depths.shape[0]

    def in_bounds(self, p: Pixel) -> bool:
        return 0 <= p[0] < self.width and 0 <= p[1] < self.height

    def depth_at(self, p: Pixel) -> float:
        if not self.in_bounds(p):
            raise BoundsError(f"pixel ({p[0]}, {p[1]}) outside {self.width}x{self.height} image")
        return float(self.depths[p[1], p[0]])

    def is_foreground(self, p: Pixel) -> bool:
        return self.depth_at(p) < self.background_value


def foreground_mask(img: DepthImage) -> np.ndarray:
    """Boolean (height, width) mask, true exactly where depth < sentinel."""
    return img.depths < img.background_value


@dataclass(frozen=True)
class SkeletonSpec:
    """Joint layout: palm member indices plus five root-to-tip finger chains."""

    name: str
    joint_count: int
    palm_joints: tuple[int, ...]
    finger_chains: tuple[tuple[int, ...], ...]
    fingertips: tuple[int, ...]
    middle_finger: int  # index into finger_chains of the middle finger

    def __post_init__(self):
        if len(self.finger_chains) != 5 or len(self.fingertips) != 5:
            raise ValueError("a skeleton needs exactly five finger chains and tips")
        seen: dict[int, str] = {}
        for j in self.palm_joints:
            if not 0 <= j < self.joint_count:
                raise ValueError(f"palm joint {j} out of range")
            seen[j] = "palm"
        chain_len = len(self.finger_chains[0])
        for f, chain in enumerate(self.finger_chains):
            if len(chain) != chain_len:
                raise ValueError("finger chains must share one length")
            if chain[0] not in self.palm_joints:
                raise ValueError(f"chain {f} head {chain[0]} must be a palm joint (finger root)")
            if self.fingertips[f] != chain[-1]:
                raise ValueError(f"fingertip {self.fingertips[f]} is not the last joint of chain {f}")
            for j in chain[1:]:
                if not 0 <= j < self.joint_count:
                    raise ValueError(f"joint {j} out of range")
                if j in seen:
                    raise ValueError(f"joint {j} appears in more than one place")
                seen[j] = f"finger{f}"
        if len(seen) != self.joint_count:
            missing = sorted(set(range(self.joint_count)) - set(seen))
            raise ValueError(f"joints {missing} belong to neither palm nor any finger chain")
        if not 0 <= self.middle_finger < 5:
            raise ValueError("middle_finger must index one of the five chains")

    @property
    def chain_length(self) -> int:
        return len(self.finger_chains[0])

    def nonroot_chain(self, finger: int) -> tuple[int, ...]:
        return self.finger_chains[finger][1:]


def skeleton_msra21() -> SkeletonSpec:
    """21 joints: wrist, then index/middle/ring/little/thumb chains of four."""
    chains = tuple(tuple(range(1 + 4 * f, 5 + 4 * f)) for f in range(5))
    return SkeletonSpec(
        name="msra21",
        joint_count=21,
        palm_joints=(0, 1, 5, 9, 13, 17),
        finger_chains=chains,
        fingertips=tuple(c[-1] for c in chains),
        middle_finger=1,
    )


def skeleton_icvl16() -> SkeletonSpec:
    """16 joints: palm center, then thumb/index/middle/ring/little chains of three."""
    chains = tuple(tuple(range(1 + 3 * f, 4 + 3 * f)) for f in range(5))
    return SkeletonSpec(
        name="icvl16",
        joint_count=16,
        palm_joints=(0, 1, 4, 7, 10, 13),
        finger_chains=chains,
        fingertips=tuple(c[-1] for c in chains),
        middle_finger=2,
    )


_SKELETON_PRESETS = {"msra21": skeleton_msra21, "icvl16": skeleton_icvl16}


def skeleton_preset(name: str) -> SkeletonSpec:
    try:
        return _SKELETON_PRESETS[name]()
    except KeyError:
        raise SkeletonMismatchError(
            f"unknown skeleton preset {name!r}, have {sorted(_SKELETON_PRESETS)}"
        ) from None


class HandPose:
    """Ordered 3D joint positions (mm) under a SkeletonSpec."""

    __slots__ = ("joints", "skeleton")

    def __init__(self, joints, skeleton: SkeletonSpec):
        joints = np.ascontiguousarray(joints, dtype=np.float64)
        if joints.shape != (skeleton.joint_count, 3):
            raise SkeletonMismatchError(
                f"pose has shape {joints.shape}, skeleton {skeleton.name} wants "
                f"({skeleton.joint_count}, 3)"
            )
        if not np.isfinite(joints).all():
            raise ValueError("pose contains non-finite coordinates")
        self.joints = joints
        self.joints.setflags(write=False)
        self.skeleton = skeleton

    def with_joints(self, joints) -> "HandPose":
        return HandPose(joints, self.skeleton)

    def copy_joints(self) -> np.ndarray:
        return self.joints.copy()

    def __eq__(self, other):
        return (
            isinstance(other, HandPose)
            and other.skeleton is self.skeleton
            and np.array_equal(other.joints, self.joints)
        )

    def __repr__(self):
        return f"HandPose({self.skeleton.name}, {self.skeleton.joint_count} joints)"


def backproject(img: DepthImage, p: Pixel, intr: CameraIntrinsics) -> np.ndarray:
    """Lift an in-bounds foreground pixel to camera-space mm."""
    d = img.depth_at(p)  # raises BoundsError when outside the grid
    if d >= img.background_value:
        raise BackgroundPixelError(f"pixel ({p[0]}, {p[1]}) is background (depth {d})")
    return np.array(
        [(p[0] - intr.cx) * d / intr.fx, (p[1] - intr.cy) * d / intr.fy, d],
        dtype=np.float64,
    )


def backproject_uv(uv: np.ndarray, depths_mm: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Vectorized lift: (n, 2) pixel coords + (n,) depths -> (n, 3) points."""
    uv = np.asarray(uv, dtype=np.float64)
    d = np.asarray(depths_mm, dtype=np.float64)
    out = np.empty((uv.shape[0], 3), dtype=np.float64)
    out[:, 0] = (uv[:, 0] - intr.cx) * d / intr.fx
    out[:, 1] = (uv[:, 1] - intr.cy) * d / intr.fy
    out[:, 2] = d
    return out


def project(point, intr: CameraIntrinsics) -> tuple[float, float]:
    """3D mm -> fractional pixel (u, v). Exact inverse of backproject."""
    x, y, z = float(point[0]), float(point[1]), float(point[2])
    if z <= 0:
        raise DegenerateDepthError(f"cannot project point with depth {z}")
    return (intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy)


def project_points(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """(n, 3) mm -> (n, 2) fractional pixels."""
    pts = np.asarray(points, dtype=np.float64)
    if (pts[:, 2] <= 0).any():
        raise DegenerateDepthError("cannot project points with non-positive depth")
    out = np.empty((pts.shape[0], 2), dtype=np.float64)
    out[:, 0] = intr.fx * pts[:, 0] / pts[:, 2] + intr.cx
    out[:, 1] = intr.fy * pts[:, 1] / pts[:, 2] + intr.cy
    return out


def foreground_pixels(img: DepthImage) -> np.ndarray:
    """(n, 2) int32 (u, v) coordinates of foreground pixels in row-major order."""
    vs, us = np.nonzero(foreground_mask(img))
    return np.stack([us, vs], axis=1).astype(np.int32)


def foreground_cloud(img: DepthImage, intr: CameraIntrinsics) -> np.ndarray:
    """Backprojected (n, 3) mm point cloud of all foreground pixels."""
    uv = foreground_pixels(img)
    if uv.shape[0] == 0:
        raise NoHandError("image has no foreground pixels")
    d = img.depths[uv[:, 1], uv[:, 0]]
    return backproject_uv(uv, d, intr)


def mean_pose(poses: Sequence[HandPose]) -> np.ndarray:
    """Per-joint arithmetic mean over poses, (joint_count, 3)."""
    if not poses:
        raise ValueError("cannot average zero poses")
    acc = np.zeros_like(poses[0].joints)
    for p in poses:
        acc = acc + p.joints
    return acc / len(poses)
