"""Evaluation metrics and report emission.

Five error measures, all mean 3D Euclidean distances in millimeters:
per-joint, per-finger (chain joints), per-fingertip, and the same two
restricted to stretched fingers. Stretched subsets need per-sample
per-finger flags (gesture metadata or generator ground truth).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import SkeletonMismatchError
from .geometry import CameraIntrinsics, DepthImage, HandPose, project_points


def _joint_errors(predictions, ground_truths) -> np.ndarray:
    """(n_samples, n_joints) Euclidean distances."""
    if len(predictions) != len(ground_truths) or not predictions:
        raise SkeletonMismatchError("prediction and ground-truth lists must match, non-empty")
    skeleton = ground_truths[0].skeleton
    out = np.empty((len(predictions), skeleton.joint_count))
    for i, (p, g) in enumerate(zip(predictions, ground_truths)):
        if p.skeleton.joint_count != skeleton.joint_count:
            raise SkeletonMismatchError(f"sample {i}: prediction skeleton differs")
        out[i] = np.linalg.norm(p.joints - g.joints, axis=1)
    return out


def mean_joint_error(predictions, ground_truths):
    """(per-joint means, overall mean), both mm."""
    e = _joint_errors(predictions, ground_truths)
    per_joint = e.mean(axis=0)
    return per_joint, float(e.mean())


def finger_and_tip_errors(predictions, ground_truths):
    """((5,) per-finger, fingers mean, (5,) per-tip, tips mean)."""
    skeleton = ground_truths[0].skeleton
    e = _joint_errors(predictions, ground_truths)
    per_finger = np.array([
        e[:, list(chain)].mean() for chain in skeleton.finger_chains
    ])
    per_tip = np.array([e[:, t].mean() for t in skeleton.fingertips])
    return per_finger, float(per_finger.mean()), per_tip, float(per_tip.mean())


def stretched_errors(predictions, ground_truths, stretched_flags):
    """Finger/tip means over stretched (sample, finger) pairs only.

    Returns a dict with per-finger arrays (nan where a finger is never
    stretched), pooled means (None when nothing is stretched at all) and
    the stretched pair count.
    """
    skeleton = ground_truths[0].skeleton
    flags = np.asarray(stretched_flags, dtype=bool)
    e = _joint_errors(predictions, ground_truths)
    if flags.shape != (e.shape[0], 5):
        raise ValueError(f"flags must be (n_samples, 5), got {flags.shape}")
    per_finger = np.full(5, np.nan)
    per_tip = np.full(5, np.nan)
    finger_vals, tip_vals = [], []
    for f, chain in enumerate(skeleton.finger_chains):
        rows = flags[:, f]
        if rows.any():
            fv = e[np.nonzero(rows)[0]][:, list(chain)].mean(axis=1)
            tv = e[np.nonzero(rows)[0], skeleton.fingertips[f]]
            per_finger[f] = fv.mean()
            per_tip[f] = tv.mean()
            finger_vals.append(fv)
            tip_vals.append(tv)
    count = int(flags.sum())
    if count == 0:
        return {
            "per_finger": per_finger, "per_tip": per_tip,
            "fingers_mean": None, "tips_mean": None, "pair_count": 0,
        }
    return {
        "per_finger": per_finger,
        "per_tip": per_tip,
        "fingers_mean": float(np.concatenate(finger_vals).mean()),
        "tips_mean": float(np.concatenate(tip_vals).mean()),
        "pair_count": count,
    }


@dataclass
class EvalReport:
    method: str
    sample_count: int
    joint_count: int
    per_joint: np.ndarray
    overall_mean: float
    per_finger: np.ndarray
    fingers_mean: float
    per_fingertip: np.ndarray
    fingertips_mean: float
    stretched: dict | None  # output of stretched_errors, or None when no flags given

    def __post_init__(self):
        if (self.per_joint < 0).any() or not np.isfinite(self.per_joint).all():
            raise ValueError("per-joint errors must be finite and non-negative")


def build_report(method: str, predictions, ground_truths,
                 stretched_flags=None) -> EvalReport:
    per_joint, overall = mean_joint_error(predictions, ground_truths)
    per_finger, fmean, per_tip, tmean = finger_and_tip_errors(predictions, ground_truths)
    stretched = None
    if stretched_flags is not None:
        stretched = stretched_errors(predictions, ground_truths, stretched_flags)
    return EvalReport(
        method=method, sample_count=len(predictions),
        joint_count=ground_truths[0].skeleton.joint_count,
        per_joint=per_joint, overall_mean=overall,
        per_finger=per_finger, fingers_mean=fmean,
        per_fingertip=per_tip, fingertips_mean=tmean,
        stretched=stretched,
    )


def _opt(x):
    if x is None:
        return None
    x = float(x)
    return None if np.isnan(x) else x


def report_to_dict(report: EvalReport) -> dict:
    d = {
        "method": report.method,
        "sample_count": report.sample_count,
        "joint_count": report.joint_count,
        "overall_mean_mm": float(report.overall_mean),
        "per_joint_mm": [float(x) for x in report.per_joint],
        "per_finger_mm": [float(x) for x in report.per_finger],
        "fingers_mean_mm": float(report.fingers_mean),
        "per_fingertip_mm": [float(x) for x in report.per_fingertip],
        "fingertips_mean_mm": float(report.fingertips_mean),
        "stretched": None,
    }
    if report.stretched is not None:
        s = report.stretched
        d["stretched"] = {
            "per_finger_mm": [_opt(x) for x in s["per_finger"]],
            "per_fingertip_mm": [_opt(x) for x in s["per_tip"]],
            "fingers_mean_mm": _opt(s["fingers_mean"]),
            "fingertips_mean_mm": _opt(s["tips_mean"]),
            "pair_count": s["pair_count"],
        }
    return d


def report_schema() -> dict:
    with resources.files("handpose").joinpath("report.schema.json").open("r") as fh:
        return json.load(fh)


def write_report_json(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")


def write_report_csv(report: EvalReport, path) -> None:
    """CSV schema: metric,index,value_mm with full-precision floats."""
    rows = [("metric", "index", "value_mm")]
    for i, x in enumerate(report.per_joint):
        rows.append(("per_joint", str(i), repr(float(x))))
    for i, x in enumerate(report.per_finger):
        rows.append(("per_finger", str(i), repr(float(x))))
    for i, x in enumerate(report.per_fingertip):
        rows.append(("per_fingertip", str(i), repr(float(x))))
    rows.append(("overall_mean", "", repr(float(report.overall_mean))))
    rows.append(("fingers_mean", "", repr(float(report.fingers_mean))))
    rows.append(("fingertips_mean", "", repr(float(report.fingertips_mean))))
    if report.stretched is not None:
        s = report.stretched
        for i in range(5):
            if not np.isnan(s["per_finger"][i]):
                rows.append(("stretched_per_finger", str(i), repr(float(s["per_finger"][i]))))
                rows.append(("stretched_per_fingertip", str(i), repr(float(s["per_tip"][i]))))
        if s["fingers_mean"] is not None:
            rows.append(("stretched_fingers_mean", "", repr(float(s["fingers_mean"]))))
            rows.append(("stretched_fingertips_mean", "", repr(float(s["tips_mean"]))))
        rows.append(("stretched_pair_count", "", str(s["pair_count"])))
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def read_report_csv(path) -> dict:
    """Parse the CSV back into {metric: {index: value}} for round-trip checks."""
    out: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["metric", "index", "value_mm"]:
            raise ValueError(f"{path}: unexpected CSV header {header}")
        for metric, index, value in reader:
            out.setdefault(metric, {})[index] = float(value)
    return out


MARKER_COLOR = (255, 48, 48)
BONE_COLOR = (90, 160, 255)


def render_overlay(img: DepthImage, pose: HandPose, intr: CameraIntrinsics):
    """Depth image as grayscale with skeleton bones and joint markers.

    Marker centers sit on the rounded joint projections.
    """
    from PIL import Image, ImageDraw

    depths = img.depths
    fg = depths < img.background_value
    gray = np.zeros(depths.shape, dtype=np.uint8)
    if fg.any():
        lo, hi = depths[fg].min(), depths[fg].max()
        span = (hi - lo) or 1.0
        gray[fg] = (255 - 155 * (depths[fg] - lo) / span).astype(np.uint8)
    rgb = np.stack([gray] * 3, axis=-1)
    im = Image.fromarray(rgb)
    draw = ImageDraw.Draw(im)
    uv = np.floor(project_points(pose.joints, intr) + 0.5).astype(int)
    sk = pose.skeleton
    for chain in sk.finger_chains:
        pts = [tuple(uv[j]) for j in chain]
        draw.line(pts, fill=BONE_COLOR, width=1)
    for u, v in uv:
        draw.rectangle([u - 1, v - 1, u + 1, v + 1], fill=MARKER_COLOR)
    return im


def save_overlays(out_dir, samples, method: str, intr: CameraIntrinsics) -> list[str]:
    """Write `<sample_id>_<method>.png` overlays; samples yield (id, img, pose)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for sample_id, img, pose in samples:
        name = f"{sample_id}_{method}.png"
        render_overlay(img, pose, intr).save(out_dir / name)
        written.append(name)
    return written
