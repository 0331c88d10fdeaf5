"""Hand pose estimation from depth images.

A cascaded random-forest baseline for all joints, geometric detection of
stretched-out fingers from the hand mask, and a neighbor-pixel voting
stage that re-estimates the stretched-finger joints. CPU-only; hot
kernels run under numba with a pure numpy fallback (HANDPOSE_BACKEND).
"""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    CameraIntrinsics,
    DepthImage,
    HandPose,
    Pixel,
    SkeletonSpec,
    backproject,
    foreground_mask,
    project,
    skeleton_icvl16,
    skeleton_msra21,
)
