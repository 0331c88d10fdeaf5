"""Depth-difference features and random offset-pair sampling.

A feature compares two depth probes displaced from a reference pixel:
response = I(ref + o1) - I(ref + o2). Offsets are stored in millimeters;
with depth normalization on, the pixel displacement for offset o at a
reference of depth d is o * focal_ref / d, so a stored offset spans the
same physical extent regardless of hand distance. With normalization off
the stored values are used directly as pixel displacements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BoundsError
from .geometry import DepthImage, Pixel

_SEED_MASK = (1 << 63) - 1


def rng_stream(seed, *key) -> np.random.Generator:
    """Deterministic generator for (seed, key...) without shared state.

    seed may be an int or a tuple/list of ints (flattened into the stream
    identity), so callers can derive disjoint sub-streams structurally.
    """
    parts = list(seed) if isinstance(seed, (tuple, list)) else [seed]
    return np.random.default_rng([int(k) & _SEED_MASK for k in [*parts, *key]])


@dataclass(frozen=True)
class OffsetPair:
    """Two 2D probe offsets (mm-normalized units, see module docstring)."""

    du1: float
    dv1: float
    du2: float
    dv2: float


@dataclass
class FeatureConfig:
    max_offset_radius: float = 60.0  # mm
    depth_normalize: bool = True
    focal_ref: float = 241.42  # px, converts mm offsets to pixels at depth d
    candidate_count: int = 200  # features per node split
    threshold_count: int = 50  # thresholds per feature

    def __post_init__(self):
        if self.max_offset_radius <= 0:
            raise ValueError("max_offset_radius must be positive")
        if self.candidate_count < 1 or self.threshold_count < 1:
            raise ValueError("candidate_count and threshold_count must be >= 1")
        if self.focal_ref <= 0:
            raise ValueError("focal_ref must be positive")

    def pixel_scale(self, ref_depth_mm: float) -> float:
        return self.focal_ref / float(ref_depth_mm) if self.depth_normalize else 1.0


def depth_difference(img: DepthImage, ref: Pixel, pair: OffsetPair, cfg: FeatureConfig) -> float:
    """I(ref + o1) - I(ref + o2); probes off-grid read the sentinel."""
    if not img.in_bounds(ref):
        raise BoundsError(
            f"reference pixel ({ref[0]}, {ref[1]}) outside {img.width}x{img.height} image"
        )
    s = cfg.pixel_scale(img.depths[ref[1], ref[0]])
    bg = img.background_value

    def probe(du, dv):
        u = int(math.floor(ref[0] + du * s + 0.5))
        v = int(math.floor(ref[1] + dv * s + 0.5))
        if 0 <= u < img.width and 0 <= v < img.height:
            return float(img.depths[v, u])
        return bg

    return probe(pair.du1, pair.dv1) - probe(pair.du2, pair.dv2)


def sample_offset_arrays(rng: np.random.Generator, count: int, radius: float):
    """(du1, dv1, du2, dv2) float64 arrays, uniform over [-radius, radius]."""
    draws = rng.uniform(-radius, radius, size=(count, 4))
    return draws[:, 0].copy(), draws[:, 1].copy(), draws[:, 2].copy(), draws[:, 3].copy()


def sample_offset_pairs(seed, cfg: FeatureConfig, count: int) -> list[OffsetPair]:
    """Deterministic list of offset pairs for a seed; see sample_offset_arrays."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else rng_stream(seed)
    du1, dv1, du2, dv2 = sample_offset_arrays(rng, count, cfg.max_offset_radius)
    return [OffsetPair(du1[i], dv1[i], du2[i], dv2[i]) for i in range(count)]
