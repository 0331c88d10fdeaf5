"""Cascaded hierarchical regression baseline.

Training runs palm stages first, then per-finger stages, with palm joints
frozen once the palm stages finish. Every stage trains one forest on the
residual between ground truth and the current estimate (concatenated over
the stage's joints) and immediately applies its own predictions to move
the training estimates forward. Reference pixels are the projections of
the joints being regressed; the forest output is averaged over them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    DataFormatError,
    DegeneratePoseError,
    EmptyTrainingError,
    NoHandError,
)
from .features import FeatureConfig
from .forest import Forest, ForestConfig, SampleSet, load_forest, save_forest, train_forest
from .geometry import (
    DEFAULT_INTRINSICS,
    CameraIntrinsics,
    DepthImage,
    HandPose,
    SkeletonSpec,
    foreground_cloud,
    project_points,
)


def default_cascade_features() -> FeatureConfig:
    # wider probes than the voting forest: stages look at the whole hand
    return FeatureConfig(max_offset_radius=120.0)


@dataclass
class CascadeConfig:
    palm_stages: int = 3
    finger_stages: int = 3
    forest: ForestConfig = field(default_factory=ForestConfig)
    features: FeatureConfig = field(default_factory=default_cascade_features)

    def __post_init__(self):
        if self.palm_stages < 1 or self.finger_stages < 1:
            raise ValueError("stage counts must be >= 1")


@dataclass
class CascadeModel:
    skeleton: SkeletonSpec
    config: CascadeConfig
    intrinsics: CameraIntrinsics
    mean_palm_pose: np.ndarray  # (palm joints, 3) mm
    phalanx_lengths: np.ndarray  # (5,) mm, default spacing per finger
    palm_forests: list[Forest]
    finger_forests: list[list[Forest]]  # [finger][stage]
    train_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.palm_forests) != self.config.palm_stages:
            raise ValueError("palm forest count does not match config")
        if len(self.finger_forests) != 5 or any(
            len(fs) != self.config.finger_stages for fs in self.finger_forests
        ):
            raise ValueError("finger forest grid does not match config")


def init_palm_pose(poses: list[HandPose]) -> np.ndarray:
    """Per-joint mean of ground-truth palm joints, (palm joints, 3)."""
    if not poses:
        raise EmptyTrainingError("cannot average an empty training set")
    palm = list(poses[0].skeleton.palm_joints)
    acc = np.zeros((len(palm), 3), dtype=np.float64)
    for p in poses:
        acc += p.joints[palm]
    return acc / len(poses)


def init_finger_poses(palm_joints: np.ndarray, skeleton: SkeletonSpec,
                      spacings) -> np.ndarray:
    """Straight-finger initialization, (5, chain_length - 1, 3).

    Non-root joints of every chain extend from that finger's root along
    the wrist-to-middle-root direction, joint k at root + (k+1) * spacing.
    """
    palm_index = {j: i for i, j in enumerate(skeleton.palm_joints)}
    wrist = palm_joints[0]
    middle_root = palm_joints[palm_index[skeleton.finger_chains[skeleton.middle_finger][0]]]
    d = middle_root - wrist
    norm = float(np.linalg.norm(d))
    if norm <= 0:
        raise DegeneratePoseError("wrist and middle finger root coincide")
    d = d / norm
    spacings = np.asarray(spacings, dtype=np.float64)
    out = np.empty((5, skeleton.chain_length - 1, 3), dtype=np.float64)
    for f, chain in enumerate(skeleton.finger_chains):
        root = palm_joints[palm_index[chain[0]]]
        for k in range(skeleton.chain_length - 1):
            out[f, k] = root + (k + 1) * spacings[f] * d
    return out


def mean_phalanx_lengths(poses: list[HandPose]) -> np.ndarray:
    """Mean ground-truth segment length per finger over a training set, (5,)."""
    skeleton = poses[0].skeleton
    sums = np.zeros(5)
    count = 0
    for p in poses:
        for f, chain in enumerate(skeleton.finger_chains):
            seg = np.diff(p.joints[list(chain)], axis=0)
            sums[f] += np.linalg.norm(seg, axis=1).mean()
        count += 1
    return sums / count


def _anchor_pixels(points: np.ndarray, intr: CameraIntrinsics, width, height) -> np.ndarray:
    """Round joint projections to integer pixels, clamped into the frame."""
    pts = points.copy()
    pts[:, 2] = np.maximum(pts[:, 2], 1.0)  # guard degenerate estimates
    uv = project_points(pts, intr)
    uv = np.floor(uv + 0.5)
    uv[:, 0] = np.clip(uv[:, 0], 0, width - 1)
    uv[:, 1] = np.clip(uv[:, 1], 0, height - 1)
    return uv.astype(np.int64)


def _translate_mean_palm(mean_palm: np.ndarray, img: DepthImage,
                         intr: CameraIntrinsics) -> np.ndarray:
    """Mean palm pose shifted so its centroid sits on the foreground centroid."""
    centroid = foreground_cloud(img, intr).mean(axis=0)
    return mean_palm + (centroid - mean_palm.mean(axis=0))


def _stage_update(forest: Forest, depths, background, anchors, n_joints):
    """Average forest output over each image's anchor pixels; (n, dim)."""
    n = anchors.shape[0]
    preds = np.empty((n, forest.dim))
    for i in range(n):
        img = DepthImage(depths[i], background, validate=False)
        preds[i] = forest.predict_pixels(img, anchors[i]).mean(axis=0)
    return preds


def train_cascade(pairs, config: CascadeConfig, seed, threads: int = 1,
                  intrinsics: CameraIntrinsics | None = None) -> CascadeModel:
    """Train the full cascade on (DepthImage, HandPose) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyTrainingError("empty training set")
    images = [im for im, _ in pairs]
    poses = [p for _, p in pairs]
    skeleton = poses[0].skeleton
    intr = intrinsics or DEFAULT_INTRINSICS
    for i, p in enumerate(poses):
        if not np.isfinite(p.joints).all():
            raise DataError(f"sample {i}: pose contains non-finite joints")
    h, w = images[0].depths.shape
    background = images[0].background_value
    for i, im in enumerate(images):
        if im.depths.shape != (h, w) or im.background_value != background:
            raise DataError(f"sample {i}: image size or sentinel differs from sample 0")
    depths = np.stack([im.depths for im in images])
    n = len(pairs)

    palm = list(skeleton.palm_joints)
    n_palm = len(palm)
    gt_palm = np.stack([p.joints[palm] for p in poses])  # (n, p, 3)

    mean_palm = init_palm_pose(poses)
    est_palm = np.empty_like(gt_palm)
    for i in range(n):
        est_palm[i] = _translate_mean_palm(mean_palm, images[i], intr)

    stats = {"palm": [], "finger": [[] for _ in range(5)]}
    palm_forests = []
    for t in range(config.palm_stages):
        residual = (gt_palm - est_palm).reshape(n, -1)
        stats["palm"].append(float(np.linalg.norm(
            (gt_palm - est_palm).reshape(-1, 3), axis=1).mean()))
        img_idx = np.repeat(np.arange(n, dtype=np.int64), n_palm)
        anchors = np.stack([
            _anchor_pixels(est_palm[i], intr, w, h) for i in range(n)
        ])  # (n, p, 2)
        flat = anchors.reshape(-1, 2)
        targets = np.repeat(residual, n_palm, axis=0)
        sset = SampleSet(depths, img_idx, flat[:, 0], flat[:, 1], targets, background)
        forest = train_forest(sset, config.features, config.forest, (seed, 1, t), threads)
        palm_forests.append(forest)
        est_palm += _stage_update(forest, depths, background, anchors, n_palm).reshape(n, n_palm, 3)
    stats["palm"].append(float(np.linalg.norm(
        (gt_palm - est_palm).reshape(-1, 3), axis=1).mean()))

    phalanx = mean_phalanx_lengths(poses)
    est_fing = np.empty((n, 5, skeleton.chain_length - 1, 3))
    for i in range(n):
        est_fing[i] = init_finger_poses(est_palm[i], skeleton, phalanx)

    gt_fing = np.empty_like(est_fing)
    for i, p in enumerate(poses):
        for f in range(5):
            gt_fing[i, f] = p.joints[list(skeleton.nonroot_chain(f))]

    n_fj = skeleton.chain_length - 1
    finger_forests: list[list[Forest]] = [[] for _ in range(5)]
    for t in range(config.finger_stages):
        for f in range(5):
            residual = (gt_fing[:, f] - est_fing[:, f]).reshape(n, -1)
            stats["finger"][f].append(float(np.linalg.norm(
                (gt_fing[:, f] - est_fing[:, f]).reshape(-1, 3), axis=1).mean()))
            anchors = np.stack([
                _anchor_pixels(est_fing[i, f], intr, w, h) for i in range(n)
            ])
            flat = anchors.reshape(-1, 2)
            img_idx = np.repeat(np.arange(n, dtype=np.int64), n_fj)
            targets = np.repeat(residual, n_fj, axis=0)
            sset = SampleSet(depths, img_idx, flat[:, 0], flat[:, 1], targets, background)
            forest = train_forest(sset, config.features, config.forest, (seed, 2, f, t), threads)
            finger_forests[f].append(forest)
            est_fing[:, f] += _stage_update(
                forest, depths, background, anchors, n_fj
            ).reshape(n, n_fj, 3)
    for f in range(5):
        stats["finger"][f].append(float(np.linalg.norm(
            (gt_fing[:, f] - est_fing[:, f]).reshape(-1, 3), axis=1).mean()))

    return CascadeModel(
        skeleton=skeleton, config=config, intrinsics=intr,
        mean_palm_pose=mean_palm, phalanx_lengths=phalanx,
        palm_forests=palm_forests, finger_forests=finger_forests,
        train_stats=stats,
    )


def predict_cascade(model: CascadeModel, img: DepthImage,
                    intrinsics: CameraIntrinsics | None = None) -> HandPose:
    """Baseline pose for one image (palm stages, then finger stages)."""
    intr = intrinsics or model.intrinsics
    skeleton = model.skeleton
    if not (img.depths < img.background_value).any():
        raise NoHandError("image has no foreground pixels")
    est_palm = _translate_mean_palm(model.mean_palm_pose, img, intr)
    n_palm = est_palm.shape[0]
    for forest in model.palm_forests:
        anchors = _anchor_pixels(est_palm, intr, img.width, img.height)
        delta = forest.predict_pixels(img, anchors).mean(axis=0)
        est_palm = est_palm + delta.reshape(n_palm, 3)

    est_fing = init_finger_poses(est_palm, skeleton, model.phalanx_lengths)
    for t in range(model.config.finger_stages):
        for f in range(5):
            anchors = _anchor_pixels(est_fing[f], intr, img.width, img.height)
            delta = model.finger_forests[f][t].predict_pixels(img, anchors).mean(axis=0)
            est_fing[f] = est_fing[f] + delta.reshape(-1, 3)

    joints = np.empty((skeleton.joint_count, 3))
    for i, j in enumerate(skeleton.palm_joints):
        joints[j] = est_palm[i]
    for f in range(5):
        for k, j in enumerate(skeleton.nonroot_chain(f)):
            joints[j] = est_fing[f, k]
    return HandPose(joints, skeleton)


# --- model bundle ------------------------------------------------------------

_BUNDLE_VERSION = 1


def save_cascade(model: CascadeModel, path) -> None:
    """Write a bundle directory: manifest.json plus one file per forest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    sk = model.skeleton
    manifest = {
        "format": "cascade-bundle",
        "version": _BUNDLE_VERSION,
        "skeleton": {
            "name": sk.name,
            "joint_count": sk.joint_count,
            "palm_joints": list(sk.palm_joints),
            "finger_chains": [list(c) for c in sk.finger_chains],
            "fingertips": list(sk.fingertips),
            "middle_finger": sk.middle_finger,
        },
        "palm_stages": model.config.palm_stages,
        "finger_stages": model.config.finger_stages,
        "intrinsics": {
            "fx": model.intrinsics.fx, "fy": model.intrinsics.fy,
            "cx": model.intrinsics.cx, "cy": model.intrinsics.cy,
        },
        "mean_palm_pose": model.mean_palm_pose.tolist(),
        "phalanx_lengths": model.phalanx_lengths.tolist(),
        "train_stats": model.train_stats,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for t, forest in enumerate(model.palm_forests):
        save_forest(forest, path / f"palm_{t}.forest")
    for f, stages in enumerate(model.finger_forests):
        for t, forest in enumerate(stages):
            save_forest(forest, path / f"finger_{f}_{t}.forest")


def load_cascade(path) -> CascadeModel:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != "cascade-bundle" or manifest.get("version") != _BUNDLE_VERSION:
        raise DataFormatError(f"{path}: not a cascade bundle of version {_BUNDLE_VERSION}")
    sk = manifest["skeleton"]
    skeleton = SkeletonSpec(
        name=sk["name"], joint_count=sk["joint_count"],
        palm_joints=tuple(sk["palm_joints"]),
        finger_chains=tuple(tuple(c) for c in sk["finger_chains"]),
        fingertips=tuple(sk["fingertips"]),
        middle_finger=sk["middle_finger"],
    )
    intr = CameraIntrinsics(**manifest["intrinsics"])
    palm_forests = [
        load_forest(path / f"palm_{t}.forest") for t in range(manifest["palm_stages"])
    ]
    finger_forests = [
        [load_forest(path / f"finger_{f}_{t}.forest") for t in range(manifest["finger_stages"])]
        for f in range(5)
    ]
    config = CascadeConfig(
        palm_stages=manifest["palm_stages"],
        finger_stages=manifest["finger_stages"],
        forest=palm_forests[0].forest_cfg,
        features=palm_forests[0].feature_cfg,
    )
    return CascadeModel(
        skeleton=skeleton, config=config, intrinsics=intr,
        mean_palm_pose=np.asarray(manifest["mean_palm_pose"], dtype=np.float64),
        phalanx_lengths=np.asarray(manifest["phalanx_lengths"], dtype=np.float64),
        palm_forests=palm_forests, finger_forests=finger_forests,
        train_stats=manifest.get("train_stats", {}),
    )
