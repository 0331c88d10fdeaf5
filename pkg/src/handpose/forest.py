"""Regression random forest on depth-difference features.

Shared engine for the cascade stages and the voting refinement. Trees
split on randomly sampled offset pairs, choosing the (feature, threshold)
candidate that maximizes variance reduction

    gain = n_p * Var(parent) - n_l * Var(left) - n_r * Var(right)

over cfg.features_per_split pairs x cfg.thresholds_per_feature thresholds,
the thresholds drawn uniformly between the lowest and highest response at
the node. Leaves store the arithmetic mean of the training targets that
reached them; a forest prediction is the mean of its trees' leaf vectors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import (
    BoundsError,
    DataError,
    EmptyTrainingError,
    ModelFormatError,
    ModelVersionError,
)
from .features import FeatureConfig, rng_stream, sample_offset_arrays
from .geometry import DepthImage, Pixel


@dataclass
class ForestConfig:
    tree_count: int = 8
    max_depth: int = 20
    features_per_split: int = 200
    thresholds_per_feature: int = 50
    min_info_gain: float = 1e-6
    min_samples_leaf: int = 5

    def __post_init__(self):
        for name in ("tree_count", "max_depth", "features_per_split",
                     "thresholds_per_feature", "min_samples_leaf"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.min_info_gain < 0:
            raise ValueError("min_info_gain must be >= 0")


@dataclass
class TrainingSample:
    """One supervised sample: a reference pixel in an image plus its target."""

    image_index: int
    pixel: Pixel
    target: np.ndarray


class SampleSet:
    """Training data packed for the kernels.

    depths is a (n_images, h, w) float32 stack holding the background
    sentinel outside the hand; samples reference images by index.
    """

    def __init__(self, depths, img_idx, u, v, targets, background):
        self.depths = np.ascontiguousarray(depths, dtype=np.float32)
        self.img_idx = np.ascontiguousarray(img_idx, dtype=np.int64)
        self.u = np.ascontiguousarray(u, dtype=np.int64)
        self.v = np.ascontiguousarray(v, dtype=np.int64)
        self.targets = np.ascontiguousarray(targets, dtype=np.float64)
        self.background = float(background)
        n = self.img_idx.shape[0]
        if not (self.u.shape[0] == self.v.shape[0] == self.targets.shape[0] == n):
            raise ValueError("sample arrays disagree in length")
        if self.targets.ndim != 2:
            raise ValueError("targets must be (n, dim)")

    @classmethod
    def from_samples(cls, images: list[DepthImage], samples: list[TrainingSample]) -> "SampleSet":
        if not images:
            raise EmptyTrainingError("no images supplied")
        h, w = images[0].depths.shape
        bg = images[0].background_value
        for im in images:
            if im.depths.shape != (h, w) or im.background_value != bg:
                raise ValueError("all images in a SampleSet must share size and sentinel")
        depths = np.stack([im.depths for im in images])
        img_idx = np.array([s.image_index for s in samples], dtype=np.int64)
        u = np.array([s.pixel[0] for s in samples], dtype=np.int64)
        v = np.array([s.pixel[1] for s in samples], dtype=np.int64)
        targets = np.array([np.asarray(s.target, dtype=np.float64) for s in samples])
        return cls(depths, img_idx, u, v, targets, bg)

    def __len__(self):
        return self.img_idx.shape[0]

    @property
    def dim(self):
        return self.targets.shape[1]


@dataclass
class Tree:
    """Flat node arrays in pre-order; left/right < 0 marks a leaf."""

    left: np.ndarray
    right: np.ndarray
    du1: np.ndarray
    dv1: np.ndarray
    du2: np.ndarray
    dv2: np.ndarray
    threshold: np.ndarray
    gain: np.ndarray
    sample_count: np.ndarray
    leaf_mean: np.ndarray  # (nodes, dim); zero rows at split nodes

    @property
    def node_count(self):
        return self.left.shape[0]

    def depth(self) -> int:
        def walk(node, d):
            if self.left[node] < 0:
                return d
            return max(walk(self.left[node], d + 1), walk(self.right[node], d + 1))

        return walk(0, 0)


class Forest:
    def __init__(self, trees: list[Tree], dim: int, feature_cfg: FeatureConfig,
                 forest_cfg: ForestConfig, background: float):
        self.trees = trees
        self.dim = dim
        self.feature_cfg = feature_cfg
        self.forest_cfg = forest_cfg
        self.background = float(background)
        self._packed = None

    def _pack(self):
        if self._packed is None:
            off = np.zeros(len(self.trees) + 1, dtype=np.int64)
            for t, tree in enumerate(self.trees):
                off[t + 1] = off[t] + tree.node_count
            shift = [
                np.concatenate([np.where(tr.left >= 0, tr.left + off[t], -1) for t, tr in enumerate(self.trees)]),
                np.concatenate([np.where(tr.right >= 0, tr.right + off[t], -1) for t, tr in enumerate(self.trees)]),
            ]
            self._packed = dict(
                off=off,
                left=np.ascontiguousarray(shift[0], dtype=np.int32),
                right=np.ascontiguousarray(shift[1], dtype=np.int32),
                du1=np.concatenate([t.du1 for t in self.trees]),
                dv1=np.concatenate([t.dv1 for t in self.trees]),
                du2=np.concatenate([t.du2 for t in self.trees]),
                dv2=np.concatenate([t.dv2 for t in self.trees]),
                thr=np.concatenate([t.threshold for t in self.trees]),
                leaf=np.ascontiguousarray(np.concatenate([t.leaf_mean for t in self.trees])),
            )
        return self._packed

    def _scales(self, img: DepthImage, u, v):
        if self.feature_cfg.depth_normalize:
            return self.feature_cfg.focal_ref / img.depths[v, u].astype(np.float64)
        return np.ones(u.shape[0], dtype=np.float64)

    def predict_pixels(self, img: DepthImage, uv) -> np.ndarray:
        """(n, dim) predictions for (n, 2) integer pixel coordinates."""
        uv = np.asarray(uv)
        u = np.ascontiguousarray(uv[:, 0], dtype=np.int64)
        v = np.ascontiguousarray(uv[:, 1], dtype=np.int64)
        if u.size and (
            u.min() < 0 or u.max() >= img.width or v.min() < 0 or v.max() >= img.height
        ):
            raise BoundsError("prediction pixel outside the image")
        p = self._pack()
        return backend.route_forest(
            img.depths, u, v, self._scales(img, u, v), img.background_value,
            p["off"], p["left"], p["right"],
            p["du1"], p["dv1"], p["du2"], p["dv2"], p["thr"], p["leaf"],
        )

    def predict(self, img: DepthImage, pixel: Pixel) -> np.ndarray:
        return self.predict_pixels(img, np.array([[pixel[0], pixel[1]]]))[0]

    def per_tree_predictions(self, img: DepthImage, pixel: Pixel) -> np.ndarray:
        """(tree_count, dim) leaf vectors, one per tree."""
        u = np.array([pixel[0]], dtype=np.int64)
        v = np.array([pixel[1]], dtype=np.int64)
        if not img.in_bounds(pixel):
            raise BoundsError("prediction pixel outside the image")
        scale = self._scales(img, u, v)
        out = np.empty((len(self.trees), self.dim))
        for t, tree in enumerate(self.trees):
            leaf = backend.route_tree(
                img.depths, u, v, scale, img.background_value, 0,
                np.ascontiguousarray(tree.left, dtype=np.int32),
                np.ascontiguousarray(tree.right, dtype=np.int32),
                tree.du1, tree.dv1, tree.du2, tree.dv2, tree.threshold,
            )[0]
            out[t] = tree.leaf_mean[leaf]
        return out


class _TreeBuilder:
    def __init__(self, dim):
        self.dim = dim
        self.rows = []  # per node: [left, right, du1, dv1, du2, dv2, thr, gain, count, mean]

    def add(self):
        self.rows.append([-1, -1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0, None])
        return len(self.rows) - 1

    def finish(self) -> Tree:
        n = len(self.rows)
        tree = Tree(
            left=np.empty(n, dtype=np.int32),
            right=np.empty(n, dtype=np.int32),
            du1=np.empty(n), dv1=np.empty(n), du2=np.empty(n), dv2=np.empty(n),
            threshold=np.empty(n), gain=np.empty(n),
            sample_count=np.empty(n, dtype=np.int64),
            leaf_mean=np.zeros((n, self.dim)),
        )
        for i, r in enumerate(self.rows):
            tree.left[i], tree.right[i] = r[0], r[1]
            tree.du1[i], tree.dv1[i], tree.du2[i], tree.dv2[i] = r[2], r[3], r[4], r[5]
            tree.threshold[i], tree.gain[i] = r[6], r[7]
            tree.sample_count[i] = r[8]
            if r[9] is not None:
                tree.leaf_mean[i] = r[9]
        return tree


def tree_bootstrap_indices(seed, tree_index: int, n: int) -> np.ndarray:
    """Bootstrap resample (with replacement, size n) used for one tree.

    Exposed so tests can recompute which samples a tree saw.
    """
    rng = rng_stream(seed, tree_index)
    return np.sort(rng.integers(0, n, n))


def _grow(samples: SampleSet, scale, row_sq, idx, depth, rng, feat_cfg, cfg, builder):
    node = builder.add()
    n = idx.shape[0]
    builder.rows[node][8] = n
    if depth < cfg.max_depth and n >= 2 * cfg.min_samples_leaf:
        du1, dv1, du2, dv2 = sample_offset_arrays(
            rng, cfg.features_per_split, feat_cfg.max_offset_radius
        )
        q01 = np.sort(rng.random((cfg.features_per_split, cfg.thresholds_per_feature)), axis=1)
        f, thr, gain, _ = backend.node_split(
            samples.depths, samples.img_idx, samples.u, samples.v, scale,
            samples.background, samples.targets, row_sq, idx,
            du1, dv1, du2, dv2, q01, cfg.min_samples_leaf,
        )
        if f >= 0 and gain >= cfg.min_info_gain:
            resp = backend.pair_responses(
                samples.depths, samples.img_idx, samples.u, samples.v, scale,
                samples.background, idx, du1[f], dv1[f], du2[f], dv2[f],
            )
            go_left = resp < thr
            row = builder.rows[node]
            row[2], row[3], row[4], row[5] = du1[f], dv1[f], du2[f], dv2[f]
            row[6], row[7] = thr, gain
            left = _grow(samples, scale, row_sq, idx[go_left], depth + 1, rng,
                         feat_cfg, cfg, builder)
            right = _grow(samples, scale, row_sq, idx[~go_left], depth + 1, rng,
                          feat_cfg, cfg, builder)
            row[0], row[1] = left, right
            return node
    builder.rows[node][9] = samples.targets[idx].mean(axis=0)
    return node


def train_forest(samples: SampleSet, feature_cfg: FeatureConfig,
                 forest_cfg: ForestConfig, seed, threads: int = 1) -> Forest:
    """Train forest_cfg.tree_count trees on bootstrap resamples of samples.

    Deterministic for a fixed seed; trees draw from independent generator
    streams, so the result does not depend on threads.
    """
    n = len(samples)
    if n == 0:
        raise EmptyTrainingError("cannot train a forest on an empty sample set")
    if n < forest_cfg.min_samples_leaf:
        raise EmptyTrainingError(
            f"need at least min_samples_leaf={forest_cfg.min_samples_leaf} samples, got {n}"
        )
    if not np.isfinite(samples.targets).all():
        bad = int(np.nonzero(~np.isfinite(samples.targets).all(axis=1))[0][0])
        raise DataError(f"non-finite target at sample {bad}")

    if samples.targets.shape[1] == 0:
        raise DataError("targets must have at least one dimension")

    if feature_cfg.depth_normalize:
        ref = samples.depths[samples.img_idx, samples.v, samples.u].astype(np.float64)
        scale = feature_cfg.focal_ref / ref
    else:
        scale = np.ones(n, dtype=np.float64)
    row_sq = np.einsum("ij,ij->i", samples.targets, samples.targets)

    def build(t):
        rng = rng_stream(seed, t)
        boot = np.sort(rng.integers(0, n, n))
        builder = _TreeBuilder(samples.dim)
        _grow(samples, scale, row_sq, boot, 0, rng, feature_cfg, forest_cfg, builder)
        return builder.finish()

    trees: list[Tree | None] = [None] * forest_cfg.tree_count
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            for t, tree in zip(range(forest_cfg.tree_count),
                               pool.map(build, range(forest_cfg.tree_count))):
                trees[t] = tree
    else:
        for t in range(forest_cfg.tree_count):
            trees[t] = build(t)
    return Forest(trees, samples.dim, feature_cfg, forest_cfg, samples.background)


# --- serialization ---------------------------------------------------------
#
# Little-endian binary layout (documented in README.md):
#   magic  b"HPRF" | version u32 | target_dim u32 | tree_count u32
#   background f64 | max_offset_radius f64 | focal_ref f64 | depth_normalize u8
#   pad u8[3] | max_depth u32 | features_per_split u32
#   thresholds_per_feature u32 | min_samples_leaf u32 | min_info_gain f64
#   then per tree, nodes in pre-order:
#     node_count u32
#     left i32[n] right i32[n]
#     du1 dv1 du2 dv2 threshold gain (f64[n] each)
#     sample_count i64[n]
#     leaf_mean f64[n*dim]

MAGIC = b"HPRF"
FORMAT_VERSION = 1


def save_forest(forest: Forest, path) -> None:
    fc, cc = forest.forest_cfg, forest.feature_cfg
    parts = [
        MAGIC,
        struct.pack("<III", FORMAT_VERSION, forest.dim, len(forest.trees)),
        struct.pack("<ddd", forest.background, cc.max_offset_radius, cc.focal_ref),
        struct.pack("<B3x", 1 if cc.depth_normalize else 0),
        struct.pack("<IIII", fc.max_depth, fc.features_per_split,
                    fc.thresholds_per_feature, fc.min_samples_leaf),
        struct.pack("<d", fc.min_info_gain),
    ]
    for tree in forest.trees:
        parts.append(struct.pack("<I", tree.node_count))
        for arr, dt in (
            (tree.left, "<i4"), (tree.right, "<i4"),
            (tree.du1, "<f8"), (tree.dv1, "<f8"), (tree.du2, "<f8"), (tree.dv2, "<f8"),
            (tree.threshold, "<f8"), (tree.gain, "<f8"),
            (tree.sample_count, "<i8"), (tree.leaf_mean, "<f8"),
        ):
            parts.append(np.ascontiguousarray(arr).astype(dt, copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, nbytes, what):
        if self.off + nbytes > len(self.buf):
            raise ModelFormatError(
                f"{self.path}: truncated while reading {what}: need {nbytes} bytes, "
                f"have {len(self.buf) - self.off}",
                offset=self.off,
            )
        out = self.buf[self.off:self.off + nbytes]
        self.off += nbytes
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype, count, what):
        dt = np.dtype(dtype)
        raw = self.take(dt.itemsize * count, what)
        return np.frombuffer(raw, dtype=dt).copy()


def load_forest(path) -> Forest:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, str(path))
    if r.take(4, "magic") != MAGIC:
        raise ModelFormatError(f"{path}: bad magic bytes, not a forest file", offset=0)
    version, dim, tree_count = r.unpack("<III", "header")
    if version != FORMAT_VERSION:
        raise ModelVersionError(
            f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})",
            offset=4,
        )
    background, radius, focal_ref = r.unpack("<ddd", "feature config")
    (normalize,) = r.unpack("<B3x", "flags")
    max_depth, fps, tpf, msl = r.unpack("<IIII", "forest config")
    (mig,) = r.unpack("<d", "min_info_gain")
    feature_cfg = FeatureConfig(
        max_offset_radius=radius, depth_normalize=bool(normalize), focal_ref=focal_ref,
        candidate_count=fps, threshold_count=tpf,
    )
    forest_cfg = ForestConfig(
        tree_count=tree_count, max_depth=max_depth, features_per_split=fps,
        thresholds_per_feature=tpf, min_info_gain=mig, min_samples_leaf=msl,
    )
    trees = []
    for t in range(tree_count):
        (n,) = r.unpack("<I", f"tree {t} node count")
        left = r.array("<i4", n, f"tree {t} left")
        right = r.array("<i4", n, f"tree {t} right")
        du1 = r.array("<f8", n, f"tree {t} du1")
        dv1 = r.array("<f8", n, f"tree {t} dv1")
        du2 = r.array("<f8", n, f"tree {t} du2")
        dv2 = r.array("<f8", n, f"tree {t} dv2")
        thr = r.array("<f8", n, f"tree {t} threshold")
        gain = r.array("<f8", n, f"tree {t} gain")
        cnt = r.array("<i8", n, f"tree {t} sample_count")
        leaf = r.array("<f8", n * dim, f"tree {t} leaf means").reshape(n, dim)
        children = np.concatenate([left, right])
        if ((children >= n)).any():
            raise ModelFormatError(f"{path}: tree {t} child index out of range", offset=r.off)
        trees.append(Tree(left, right, du1, dv1, du2, dv2, thr, gain, cnt, leaf))
    if r.off != len(buf):
        raise ModelFormatError(
            f"{path}: {len(buf) - r.off} trailing bytes after last tree", offset=r.off
        )
    return Forest(trees, dim, feature_cfg, forest_cfg, background)
