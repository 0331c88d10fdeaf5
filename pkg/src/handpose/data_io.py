"""Dataset loading (MSRA and ICVL layouts), leave-one-subject-out splits,
and a synthetic hand renderer with exact joint ground truth.

The synthetic generator draws the palm as a depth-displaced disk and each
stretched finger as a capsule on a tilted plane; folded fingers keep their
joints curled over the palm and add nothing to the mask. Gesture labels of
synthetic samples are the five stretched flags as a bit string in skeleton
chain order, so the evaluation lookup is the identity.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, DataFormatError, EmptyTrainingError
from .features import rng_stream
from .geometry import (
    DEFAULT_BACKGROUND_MM,
    CameraIntrinsics,
    DEFAULT_INTRINSICS,
    DepthImage,
    HandPose,
    SkeletonSpec,
    skeleton_icvl16,
    skeleton_msra21,
)


@dataclass
class DatasetSample:
    image: object  # Path to a depth file or an in-memory float32 array
    pose: HandPose
    subject: int
    gesture: str


class DatasetIndex:
    """Sample list plus everything needed to interpret it."""

    def __init__(self, samples: list[DatasetSample], skeleton: SkeletonSpec,
                 intrinsics: CameraIntrinsics, background: float):
        self.samples = samples
        self.skeleton = skeleton
        self.intrinsics = intrinsics
        self.background = float(background)
        # loaders assign contiguous subject ids by enumeration; splits keep
        # the original ids, so the constructor does not re-check contiguity
        for i, s in enumerate(samples):
            if s.pose.skeleton.joint_count != skeleton.joint_count:
                raise DataError(f"sample {i}: pose does not match the index skeleton")

    def __len__(self):
        return len(self.samples)

    def image(self, i: int) -> DepthImage:
        ref = self.samples[i].image
        if isinstance(ref, np.ndarray):
            return DepthImage(ref, self.background, validate=False)
        return _load_depth_file(Path(ref), self.background)

    def pose(self, i: int) -> HandPose:
        return self.samples[i].pose

    def pairs(self):
        for i in range(len(self.samples)):
            yield self.image(i), self.samples[i].pose

    @property
    def subjects(self) -> list[int]:
        return sorted({s.subject for s in self.samples})

    def stretched_flags(self, table: dict[str, str] | None = None) -> np.ndarray:
        """(n, 5) bools in chain order, from gesture labels.

        Labels that are themselves five-character bit strings are parsed
        directly; anything else goes through the lookup table.
        """
        out = np.zeros((len(self.samples), 5), dtype=bool)
        for i, s in enumerate(self.samples):
            label = s.gesture
            if not (len(label) == 5 and set(label) <= {"0", "1"}):
                if table is None or label not in table:
                    raise DataError(
                        f"sample {i}: gesture {label!r} missing from the stretched-finger table"
                    )
                label = table[label]
            out[i] = [c == "1" for c in label]
        return out


def split_leave_one_subject_out(index: DatasetIndex, held_out: int):
    """Disjoint (train, test) partition of an index by subject id."""
    if held_out not in index.subjects:
        raise DataError(f"subject {held_out} not in dataset (have {index.subjects})")
    train = [s for s in index.samples if s.subject != held_out]
    test = [s for s in index.samples if s.subject == held_out]
    mk = lambda ss: DatasetIndex(ss, index.skeleton, index.intrinsics, index.background)
    return mk(train), mk(test)


# --- MSRA binary format ------------------------------------------------------
#
# Six little-endian int32: image width, image height, bbox left, top, right,
# bottom (right/bottom exclusive); then (right-left)*(bottom-top) little-endian
# float32 depths in mm inside the bbox, row-major. Depths <= 0 are background.

_MSRA_HEADER = struct.Struct("<6i")


def write_msra_bin(path, img: DepthImage) -> None:
    fg = img.depths < img.background_value
    if fg.any():
        rows = np.nonzero(fg.any(axis=1))[0]
        cols = np.nonzero(fg.any(axis=0))[0]
        top, bottom = int(rows[0]), int(rows[-1]) + 1
        left, right = int(cols[0]), int(cols[-1]) + 1
    else:
        top = bottom = left = right = 0
    crop = img.depths[top:bottom, left:right].copy()
    crop[crop >= img.background_value] = 0.0
    with open(path, "wb") as fh:
        fh.write(_MSRA_HEADER.pack(img.width, img.height, left, top, right, bottom))
        fh.write(crop.astype("<f4", copy=False).tobytes())


def read_msra_bin(path: Path, background: float) -> DepthImage:
    raw = path.read_bytes()
    if len(raw) < _MSRA_HEADER.size:
        raise DataFormatError(
            f"{path}: file too short for the 24-byte header ({len(raw)} bytes)"
        )
    w, h, left, top, right, bottom = _MSRA_HEADER.unpack_from(raw)
    if not (0 <= left <= right <= w and 0 <= top <= bottom <= h):
        raise DataFormatError(
            f"{path}: bbox ({left},{top},{right},{bottom}) inconsistent with {w}x{h} frame"
        )
    count = (right - left) * (bottom - top)
    expected = _MSRA_HEADER.size + 4 * count
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: expected {expected} bytes ({count} bbox floats), found {len(raw)}"
        )
    frame = np.full((h, w), background, dtype=np.float32)
    if count:
        crop = np.frombuffer(raw, dtype="<f4", offset=_MSRA_HEADER.size).reshape(
            bottom - top, right - left
        ).copy()
        crop[crop <= 0] = background
        frame[top:bottom, left:right] = crop
    return DepthImage(frame, background, validate=False)


def _load_depth_file(path: Path, background: float) -> DepthImage:
    if path.suffix == ".bin":
        return read_msra_bin(path, background)
    if path.suffix == ".png":
        from PIL import Image

        arr = np.asarray(Image.open(path), dtype=np.float32)
        arr = arr.copy()
        arr[arr <= 0] = background
        return DepthImage(arr, background, validate=False)
    raise DataFormatError(f"{path}: unknown depth file type")


def _format_floats(vals) -> str:
    return " ".join(repr(float(x)) for x in vals)


def write_msra_dataset(root, index: DatasetIndex, negate_z: bool = True) -> None:
    """Write an index as an MSRA-layout tree: P<subject>/<gesture>/...bin + joint.txt."""
    root = Path(root)
    groups: dict[tuple[int, str], list[int]] = {}
    for i, s in enumerate(index.samples):
        groups.setdefault((s.subject, s.gesture), []).append(i)
    for (subject, gesture), ids in sorted(groups.items()):
        d = root / f"P{subject}" / gesture
        d.mkdir(parents=True, exist_ok=True)
        lines = [str(len(ids))]
        for k, i in enumerate(ids):
            write_msra_bin(d / f"{k:06d}_depth.bin", index.image(i))
            joints = index.samples[i].pose.joints.copy()
            if negate_z:
                joints[:, 2] = -joints[:, 2]
            lines.append(_format_floats(joints.reshape(-1)))
        (d / "joint.txt").write_text("\n".join(lines) + "\n")


def load_msra(root, intrinsics: CameraIntrinsics | None = None,
              background: float = DEFAULT_BACKGROUND_MM, negate_z: bool = True,
              skeleton: SkeletonSpec | None = None) -> DatasetIndex:
    """Load an MSRA-layout dataset tree (P*/gesture/NNNNNN_depth.bin + joint.txt)."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    skeleton = skeleton or skeleton_msra21()
    intrinsics = intrinsics or DEFAULT_INTRINSICS
    subject_dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("P"))
    if not subject_dirs:
        raise DataFormatError(f"{root}: no P* subject directories")
    samples: list[DatasetSample] = []
    for subject, sdir in enumerate(subject_dirs):
        for gdir in sorted(p for p in sdir.iterdir() if p.is_dir()):
            joint_file = gdir / "joint.txt"
            if not joint_file.is_file():
                raise DataFormatError(f"{gdir}: missing joint.txt")
            lines = joint_file.read_text().strip().splitlines()
            try:
                count = int(lines[0])
            except (ValueError, IndexError):
                raise DataFormatError(f"{joint_file}: first line must be the frame count") from None
            if len(lines) - 1 != count:
                raise DataFormatError(
                    f"{joint_file}: header promises {count} frames, file has {len(lines) - 1}"
                )
            for k in range(count):
                toks = lines[k + 1].split()
                if len(toks) != skeleton.joint_count * 3:
                    raise DataFormatError(
                        f"{joint_file}:{k + 2}: expected {skeleton.joint_count * 3} "
                        f"values, found {len(toks)}"
                    )
                joints = np.array([float(t) for t in toks], dtype=np.float64).reshape(-1, 3)
                if negate_z:
                    joints[:, 2] = -joints[:, 2]
                depth_path = gdir / f"{k:06d}_depth.bin"
                if not depth_path.is_file():
                    raise DataFormatError(f"{depth_path}: referenced frame missing")
                samples.append(DatasetSample(depth_path, HandPose(joints, skeleton),
                                             subject, gdir.name))
    return DatasetIndex(samples, skeleton, intrinsics, background)


# --- ICVL format -------------------------------------------------------------
#
# 16-bit png depth maps under <root>/Depth plus label text files: each line is
# an image path followed by 16 (u, v, depth_mm) triples in image space.


def load_icvl(root, split: str = "train", intrinsics: CameraIntrinsics | None = None,
              background: float = DEFAULT_BACKGROUND_MM,
              skeleton: SkeletonSpec | None = None) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    skeleton = skeleton or skeleton_icvl16()
    intrinsics = intrinsics or DEFAULT_INTRINSICS
    if split == "train":
        label_files = [root / "labels.txt"]
    elif split == "test":
        label_files = [p for p in (root / "test_seq_1.txt", root / "test_seq_2.txt") if p.is_file()]
        if not label_files:
            raise DataFormatError(f"{root}: no test_seq_*.txt label files")
    else:
        raise ValueError(f"split must be train or test, got {split!r}")
    samples: list[DatasetSample] = []
    for lf in label_files:
        if not lf.is_file():
            raise DataFormatError(f"{lf}: label file missing")
        for lineno, line in enumerate(lf.read_text().splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            toks = line.split()
            if len(toks) != 1 + skeleton.joint_count * 3:
                raise DataFormatError(
                    f"{lf}:{lineno}: expected path + {skeleton.joint_count * 3} numbers, "
                    f"found {len(toks)} fields"
                )
            try:
                vals = np.array([float(t) for t in toks[1:]], dtype=np.float64)
            except ValueError:
                raise DataFormatError(f"{lf}:{lineno}: non-numeric joint value") from None
            uvd = vals.reshape(-1, 3)
            joints = np.empty_like(uvd)
            joints[:, 0] = (uvd[:, 0] - intrinsics.cx) * uvd[:, 2] / intrinsics.fx
            joints[:, 1] = (uvd[:, 1] - intrinsics.cy) * uvd[:, 2] / intrinsics.fy
            joints[:, 2] = uvd[:, 2]
            rel = toks[0]
            gesture = rel.split("/")[0] if "/" in rel else ""
            samples.append(DatasetSample(root / "Depth" / rel, HandPose(joints, skeleton),
                                         0, gesture))
    return DatasetIndex(samples, skeleton, intrinsics, background)


# --- synthetic generator -----------------------------------------------------


@dataclass
class SynthHandSpec:
    """One rendered hand. Angles in degrees from straight up, toward +u."""

    palm_radius: float = 40.0  # mm
    stretched: tuple = (True, True, True, True, True)
    angles: tuple = (-25.0, 0.0, 25.0, 50.0, -65.0)  # per skeleton chain
    lengths: tuple = (60.0, 70.0, 65.0, 55.0, 50.0)  # root->tip, mm
    widths: tuple = (13.0, 13.0, 12.5, 11.5, 15.5)  # mm
    center_offset: tuple = (0.0, 0.0)  # hand center in the image plane, mm
    depth: float = 260.0  # mm to the hand plane at the optical axis
    tilt: tuple = (0.0, 0.0)  # depth gradient, mm per mm of X / Y
    noise: float = 0.0  # gaussian depth noise sigma, mm

    def __post_init__(self):
        if self.palm_radius <= 0:
            raise ValueError("palm radius must be positive")
        if any(l <= 0 for l in self.lengths) or any(w <= 0 for w in self.widths):
            raise ValueError("finger lengths and widths must be positive")
        if self.depth <= 0:
            raise ValueError("hand depth must be positive")


_FOLDED_RADIAL = {  # fraction of palm radius per chain position
    3: (0.50, 0.70, 0.62),
    4: (0.50, 0.67, 0.74, 0.67),
}


def generate_synth(spec: SynthHandSpec, seed, width: int = 320, height: int = 240,
                   intrinsics: CameraIntrinsics | None = None,
                   background: float = DEFAULT_BACKGROUND_MM,
                   skeleton: SkeletonSpec | None = None):
    """Render one hand; returns (DepthImage, HandPose, stretched flags, clipped).

    Joint ground truth is exact: stretched-finger joints sit on the capsule
    axis at the same fractions the detector interpolates at; every joint
    projects onto a foreground pixel. Deterministic per seed.
    """
    intr = intrinsics or DEFAULT_INTRINSICS
    skeleton = skeleton or skeleton_msra21()
    L = skeleton.chain_length
    rng = rng_stream(seed)

    z0 = spec.depth
    gx, gy = spec.tilt
    ox, oy = spec.center_offset

    us = np.arange(width, dtype=np.float64)
    vs = np.arange(height, dtype=np.float64)
    ru = (us - intr.cx) / intr.fx
    rv = (vs - intr.cy) / intr.fy
    denom = 1.0 - gx * ru[None, :] - gy * rv[:, None]
    if (denom <= 0.05).any():
        raise ValueError("tilt too steep for this field of view")
    base = z0 - gx * ox - gy * oy  # plane passes through (ox, oy, depth)
    z = base / denom  # (h, w) plane depth per pixel
    X = ru[None, :] * z
    Y = rv[:, None] * z
    hx = X - ox
    hy = Y - oy

    mask = hx * hx + hy * hy <= spec.palm_radius ** 2

    def direction(angle_deg):
        a = math.radians(angle_deg)
        return math.sin(a), -math.cos(a)

    px_mm = z0 / intr.fx  # approximate size of one pixel, mm
    joints = np.zeros((skeleton.joint_count, 3), dtype=np.float64)

    def plane_point(hx_mm, hy_mm):
        Xw = hx_mm + ox
        Yw = hy_mm + oy
        return np.array([Xw, Yw, z0 + gx * (Xw - ox) + gy * (Yw - oy)])

    middle_dir = direction(spec.angles[skeleton.middle_finger])
    wrist = plane_point(-0.85 * spec.palm_radius * middle_dir[0],
                        -0.85 * spec.palm_radius * middle_dir[1])
    joints[skeleton.palm_joints[0]] = wrist

    for f, chain in enumerate(skeleton.finger_chains):
        dx, dy = direction(spec.angles[f])
        root_r = 0.5 * spec.palm_radius
        if spec.stretched[f]:
            w_half = spec.widths[f] / 2.0
            root = np.array([root_r * dx, root_r * dy])
            tip_extent = spec.lengths[f]
            axis_end = root + (tip_extent - w_half) * np.array([dx, dy])
            # capsule: distance to segment root..axis_end below half width
            ax, ay = root
            bx, by = axis_end
            abx, aby = bx - ax, by - ay
            ab2 = abx * abx + aby * aby
            if ab2 > 0:
                t = ((hx - ax) * abx + (hy - ay) * aby) / ab2
                t = np.clip(t, 0.0, 1.0)
            else:
                t = 0.0
            cxp = ax + t * abx
            cyp = ay + t * aby
            mask |= (hx - cxp) ** 2 + (hy - cyp) ** 2 <= w_half ** 2
            tip_r = tip_extent - px_mm  # one pixel inside the cap surface
            for k, j in enumerate(chain):
                frac = k / (L - 1)
                r = frac * tip_r
                joints[j] = plane_point(root[0] + r * dx, root[1] + r * dy)
        else:
            radial = _FOLDED_RADIAL.get(L)
            if radial is None:
                radial = tuple(0.5 + 0.24 * math.sin(math.pi * k / L) for k in range(L))
            for k, j in enumerate(chain):
                r = radial[k] * spec.palm_radius
                joints[j] = plane_point(r * dx, r * dy)

    # clipped when any extreme shape point projects outside the frame
    extremes = [plane_point(spec.palm_radius * math.cos(a), spec.palm_radius * math.sin(a))
                for a in np.linspace(0, 2 * math.pi, 16, endpoint=False)]
    for f in range(5):
        if spec.stretched[f]:
            dx, dy = direction(spec.angles[f])
            w_half = spec.widths[f] / 2.0
            tip = (0.5 * spec.palm_radius + spec.lengths[f])
            extremes.append(plane_point(tip * dx, tip * dy))
            extremes.append(plane_point(tip * dx - w_half * dy, tip * dy + w_half * dx))
            extremes.append(plane_point(tip * dx + w_half * dy, tip * dy - w_half * dx))
    clipped = False
    for p in extremes:
        uu = intr.fx * p[0] / p[2] + intr.cx
        vv = intr.fy * p[1] / p[2] + intr.cy
        if not (0 <= uu <= width - 1 and 0 <= vv <= height - 1):
            clipped = True
            break

    depths = np.full((height, width), background, dtype=np.float32)
    zvals = z[mask]
    if spec.noise > 0:
        zvals = zvals + rng.normal(0.0, spec.noise, zvals.shape)
    depths[mask] = np.clip(zvals, 1.0, background * 0.5).astype(np.float32)

    img = DepthImage(depths, background, validate=False)
    pose = HandPose(joints, skeleton)
    return img, pose, tuple(bool(s) for s in spec.stretched), clipped


@dataclass
class SynthDatasetConfig:
    width: int = 320
    height: int = 240
    palm_radius: float = 40.0
    palm_jitter: float = 3.0
    depth: float = 260.0
    depth_jitter: float = 25.0
    center_jitter: float = 8.0  # mm
    angle_jitter: float = 7.0  # degrees
    length_jitter: float = 6.0  # mm
    width_jitter: float = 1.5  # mm
    tilt_max: float = 0.12
    noise: float = 0.0
    min_stretched: int = 0
    max_stretched: int = 5
    subjects: int = 3


def random_hand_spec(rng: np.random.Generator, cfg: SynthDatasetConfig) -> SynthHandSpec:
    base = SynthHandSpec()
    k = int(rng.integers(cfg.min_stretched, cfg.max_stretched + 1))
    stretched = np.zeros(5, dtype=bool)
    if k:
        stretched[rng.choice(5, size=k, replace=False)] = True
    return SynthHandSpec(
        palm_radius=cfg.palm_radius + rng.uniform(-cfg.palm_jitter, cfg.palm_jitter),
        stretched=tuple(bool(b) for b in stretched),
        angles=tuple(a + rng.uniform(-cfg.angle_jitter, cfg.angle_jitter) for a in base.angles),
        lengths=tuple(l + rng.uniform(-cfg.length_jitter, cfg.length_jitter) for l in base.lengths),
        widths=tuple(w + rng.uniform(-cfg.width_jitter, cfg.width_jitter) for w in base.widths),
        center_offset=tuple(rng.uniform(-cfg.center_jitter, cfg.center_jitter, 2)),
        depth=cfg.depth + rng.uniform(-cfg.depth_jitter, cfg.depth_jitter),
        tilt=tuple(rng.uniform(-cfg.tilt_max, cfg.tilt_max, 2)),
        noise=cfg.noise,
    )


def make_synth_index(count: int, seed, cfg: SynthDatasetConfig | None = None,
                     intrinsics: CameraIntrinsics | None = None,
                     background: float = DEFAULT_BACKGROUND_MM,
                     skeleton: SkeletonSpec | None = None) -> DatasetIndex:
    """In-memory synthetic dataset of `count` random hands."""
    if count < 1:
        raise EmptyTrainingError("count must be >= 1")
    cfg = cfg or SynthDatasetConfig()
    intr = intrinsics or DEFAULT_INTRINSICS
    skeleton = skeleton or skeleton_msra21()
    samples = []
    for i in range(count):
        spec = random_hand_spec(rng_stream(seed, i, 0), cfg)
        img, pose, flags, _ = generate_synth(
            spec, (seed, i, 1), cfg.width, cfg.height, intr, background, skeleton
        )
        gesture = "".join("1" if b else "0" for b in flags)
        samples.append(DatasetSample(np.asarray(img.depths), pose, i % cfg.subjects, gesture))
    return DatasetIndex(samples, skeleton, intr, background)
