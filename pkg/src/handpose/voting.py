"""Neighbor-pixel voting refinement of stretched-finger joints.

Training: every foreground pixel of a random image subset becomes a
sample labeled with the offset from its backprojected position to its
nearest ground-truth joint; one forest learns those offsets.

Testing: starting from the interpolated pose (baseline with detected
stretched-finger joints replaced by the geometric root-to-tip
interpolation), each foreground pixel closer than a distance threshold to
its nearest pose joint votes for that joint, a vote being the pixel's 3D
position plus the forest prediction. A voted joint moves to the mean of
its votes; everything else keeps its previous location.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .detect import DetectedFinger, joints_px_to_mm
from .errors import EmptyTrainingError, SkeletonMismatchError
from .features import FeatureConfig, rng_stream
from .forest import Forest, ForestConfig, SampleSet, train_forest
from .geometry import (
    CameraIntrinsics,
    DepthImage,
    HandPose,
    backproject_uv,
    foreground_mask,
    foreground_pixels,
)


@dataclass
class VotingConfig:
    training_image_count: int = 10000
    distance_threshold: float = 10.0  # mm, voter gate at test time
    forest: ForestConfig = field(default_factory=ForestConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if self.training_image_count < 1:
            raise ValueError("training_image_count must be >= 1")
        if self.distance_threshold <= 0:
            raise ValueError("distance_threshold must be positive")


@dataclass
class VotingSample:
    image_index: int
    pixel: tuple
    nearest_joint: int
    offset: np.ndarray  # joint - backprojected pixel, mm


def nearest_joint_offsets(img: DepthImage, pose: HandPose, intr: CameraIntrinsics):
    """(uv, points, joint index, offset) for every foreground pixel."""
    uv = foreground_pixels(img)
    pts = backproject_uv(uv, img.depths[uv[:, 1], uv[:, 0]], intr)
    idx, _ = backend.nearest_joint(pts, pose.joints)
    return uv, pts, idx, pose.joints[idx] - pts


def collect_training_samples(index, n_images: int, seed,
                             return_records: bool = False):
    """SampleSet over every foreground pixel of n_images drawn images.

    Images are drawn uniformly without replacement (with replacement when
    the dataset is smaller than n_images). Targets follow the
    nearest-ground-truth-joint rule.
    """
    if len(index) == 0:
        raise EmptyTrainingError("empty dataset")
    rng = rng_stream(seed, 4)
    replace = len(index) < n_images
    chosen = np.sort(rng.choice(len(index), size=n_images, replace=replace))
    depths = []
    img_idx, us, vs, targets = [], [], [], []
    records = []
    intr = index.intrinsics
    for k, i in enumerate(chosen):
        img = index.image(int(i))
        pose = index.pose(int(i))
        depths.append(img.depths)
        uv, pts, jidx, off = nearest_joint_offsets(img, pose, intr)
        img_idx.append(np.full(uv.shape[0], k, dtype=np.int64))
        us.append(uv[:, 0].astype(np.int64))
        vs.append(uv[:, 1].astype(np.int64))
        targets.append(off)
        if return_records:
            for r in range(uv.shape[0]):
                records.append(VotingSample(k, (int(uv[r, 0]), int(uv[r, 1])),
                                            int(jidx[r]), off[r]))
    sset = SampleSet(
        np.stack(depths), np.concatenate(img_idx), np.concatenate(us),
        np.concatenate(vs), np.concatenate(targets), index.background,
    )
    return (sset, records) if return_records else sset


def train_voting_forest(samples: SampleSet, cfg: VotingConfig, seed,
                        threads: int = 1) -> Forest:
    return train_forest(samples, cfg.features, cfg.forest, (seed, 3), threads)


def updated_joint_set(fingers: list[DetectedFinger], skeleton) -> np.ndarray:
    """Bool mask over joints: non-root chain joints of identified fingers."""
    mask = np.zeros(skeleton.joint_count, dtype=bool)
    for f in fingers:
        if f.identity is not None:
            for j in skeleton.nonroot_chain(f.identity):
                mask[j] = True
    return mask


def interpolated_pose(baseline: HandPose, fingers: list[DetectedFinger],
                      img: DepthImage, intr: CameraIntrinsics) -> HandPose:
    """Baseline with identified fingers' non-root joints moved to the
    geometric interpolation (finger roots stay with the palm)."""
    joints = baseline.copy_joints()
    fg_uv = None
    for f in fingers:
        if f.identity is None:
            continue
        mm = f.joints_mm
        if mm is None:
            if fg_uv is None:
                fg_uv = np.argwhere(foreground_mask(img))[:, ::-1].astype(np.int64)
            mm = joints_px_to_mm(f.joints_px, img, intr, fg_uv)
        chain = baseline.skeleton.nonroot_chain(f.identity)
        joints[list(chain)] = mm[1:]
    return HandPose(joints, baseline.skeleton)


def select_voters(img: DepthImage, pose0: HandPose, update_mask: np.ndarray,
                  threshold_mm: float, intr: CameraIntrinsics):
    """Voter pixels: nearer than threshold to their nearest pose joint, with
    that joint due for update. Returns (uv, points, joint indices)."""
    uv = foreground_pixels(img)
    if uv.shape[0] == 0:
        return uv, np.empty((0, 3)), np.empty(0, dtype=np.int64)
    pts = backproject_uv(uv, img.depths[uv[:, 1], uv[:, 0]], intr)
    idx, d2 = backend.nearest_joint(pts, pose0.joints)
    keep = (d2 < threshold_mm * threshold_mm) & update_mask[idx]
    return uv[keep], pts[keep], idx[keep]


def refine(img: DepthImage, baseline: HandPose, fingers: list[DetectedFinger],
           forest, cfg: VotingConfig, intr: CameraIntrinsics,
           collect_votes: bool = False):
    """Re-estimate stretched-finger joints by averaging per-pixel votes.

    Returns (refined pose, updated-joint mask, vote records or None).
    Joints outside the update set keep their baseline values bit for bit;
    an updated joint with zero voters keeps its interpolated location.
    """
    skeleton = baseline.skeleton
    if getattr(forest, "dim", 3) != 3:
        raise SkeletonMismatchError("voting forest must predict 3D offsets")
    update_mask = updated_joint_set(fingers, skeleton)
    joints = baseline.copy_joints()
    votes = [] if collect_votes else None
    if not update_mask.any():
        return HandPose(joints, skeleton), update_mask, votes
    pose0 = interpolated_pose(baseline, fingers, img, intr)
    joints[update_mask] = pose0.joints[update_mask]

    uv, pts, jidx = select_voters(img, pose0, update_mask, cfg.distance_threshold, intr)
    if uv.shape[0]:
        offsets = forest.predict_pixels(img, uv)
        predicted = pts + offsets
        for j in np.nonzero(update_mask)[0]:
            sel = jidx == j
            if sel.any():
                joints[j] = predicted[sel].mean(axis=0)
        if collect_votes:
            for r in range(uv.shape[0]):
                votes.append({
                    "joint": int(jidx[r]),
                    "pixel": [int(uv[r, 0]), int(uv[r, 1])],
                    "predicted": [float(x) for x in predicted[r]],
                })
    return HandPose(joints, skeleton), update_mask, votes
