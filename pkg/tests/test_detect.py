"""Detection-stage oracles: exact EDT, boundary tracing, fingertip recall,
root localization and identity matching."""

import numpy as np
import pytest

from conftest import SMALL_INTR, small_synth_cfg

from handpose.data_io import SynthHandSpec, generate_synth, make_synth_index
from handpose.detect import (
    DetectConfig,
    DetectedFinger,
    DistanceMap,
    detect_fingers,
    detect_fingertips,
    distance_transform,
    finger_match_cost,
    interpolate_joints,
    locate_root,
    match_identity,
    palm_center,
    trace_boundary,
)
from handpose.errors import DegenerateMaskError, EmptyMaskError
from handpose.geometry import (
    DEFAULT_INTRINSICS,
    Pixel,
    foreground_mask,
    project_points,
    skeleton_msra21,
)


def brute_force_edt(mask):
    """O(n^2) distance to nearest false pixel, border counts as false."""
    pad = np.pad(np.asarray(mask, dtype=bool), 1, constant_values=False)
    falses = np.argwhere(~pad)
    out = np.zeros(pad.shape)
    for (i, j) in np.argwhere(pad):
        d2 = (falses[:, 0] - i) ** 2 + (falses[:, 1] - j) ** 2
        out[i, j] = np.sqrt(d2.min())
    return out[1:-1, 1:-1]


def brute_force_boundary(mask):
    """Foreground pixels with a background 4-neighbor (border = background)."""
    pad = np.pad(np.asarray(mask, dtype=bool), 1, constant_values=False)
    out = set()
    for (v, u) in np.argwhere(np.asarray(mask, dtype=bool)):
        if not (pad[v, u + 1] and pad[v + 2, u + 1] and pad[v + 1, u] and pad[v + 1, u + 2]):
            out.add((int(u), int(v)))
    return out


def disk_mask(h, w, cv, cu, r):
    vv, uu = np.indices((h, w))
    return (uu - cu) ** 2 + (vv - cv) ** 2 <= r * r


class TestDistanceTransform:
    def test_single_true_pixel(self):
        mask = np.zeros((3, 3), dtype=bool)
        mask[1, 1] = True
        dm = distance_transform(mask)
        assert dm.values[1, 1] == 1.0

    def test_solid_disk_maximum(self):
        r = 14
        mask = disk_mask(40, 40, 20, 20, r)
        dm = distance_transform(mask)
        assert abs(dm.values.max() - r) <= 1.0

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            h, w = rng.integers(3, 33, 2)
            mask = rng.random((h, w)) < 0.55
            if not mask.any():
                continue
            got = distance_transform(mask).values
            np.testing.assert_array_equal(got, brute_force_edt(mask))

    def test_empty_mask_rejected(self):
        with pytest.raises(EmptyMaskError):
            distance_transform(np.zeros((5, 5), dtype=bool))

    def test_lipschitz_between_neighbors(self):
        rng = np.random.default_rng(1)
        mask = rng.random((30, 30)) < 0.6
        mask[0, 0] = True
        vals = distance_transform(mask).values
        assert np.all(np.abs(np.diff(vals, axis=0)) <= 1.0 + 1e-12)
        assert np.all(np.abs(np.diff(vals, axis=1)) <= 1.0 + 1e-12)


class TestPalmCenter:
    def test_disk_center(self):
        mask = disk_mask(41, 41, 20, 20, 15)
        center, radius = palm_center(distance_transform(mask))
        assert abs(center.u - 20) <= 1 and abs(center.v - 20) <= 1
        assert abs(radius - 15) <= 1.5

    def test_two_disks_argmax_forced(self):
        mask = disk_mask(40, 80, 20, 20, 10) | disk_mask(40, 80, 20, 60, 6)
        center, radius = palm_center(distance_transform(mask))
        assert abs(center.u - 20) <= 1  # the larger disk wins

    def test_matches_bruteforce_argmax_with_tiebreak(self):
        rng = np.random.default_rng(2)
        for _ in range(40):
            mask = rng.random((20, 20)) < 0.6
            if not mask.any():
                continue
            dm = distance_transform(mask)
            center, radius = palm_center(dm)
            best = (-1.0, None)
            for v in range(20):
                for u in range(20):
                    if dm.values[v, u] > best[0]:
                        best = (dm.values[v, u], (u, v))
            assert radius == best[0]
            assert (center.u, center.v) == best[1]

    def test_zero_map_rejected(self):
        with pytest.raises(DegenerateMaskError):
            palm_center(DistanceMap(np.zeros((4, 4))))


class TestBoundary:
    def test_three_by_three_square(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[1:4, 1:4] = True
        loop = trace_boundary(mask)
        got = {(int(u), int(v)) for u, v in loop}
        expect = {(u, v) for u in (1, 2, 3) for v in (1, 2, 3)} - {(2, 2)}
        assert got == expect
        assert loop.shape[0] == 8

    def test_loop_closed_and_adjacent(self):
        index = make_synth_index(6, 3, small_synth_cfg(min_stretched=1),
                                 intrinsics=SMALL_INTR)
        for i in range(len(index)):
            mask = foreground_mask(index.image(i))
            loop = trace_boundary(mask)
            ring = np.vstack([loop, loop[:1]])
            steps = np.abs(np.diff(ring, axis=0))
            assert steps.max() <= 1, "consecutive boundary pixels must be 8-adjacent"

    def test_every_boundary_pixel_exactly_once(self):
        index = make_synth_index(6, 4, small_synth_cfg(min_stretched=1),
                                 intrinsics=SMALL_INTR)
        for i in range(len(index)):
            mask = foreground_mask(index.image(i))
            loop = trace_boundary(mask)
            pixels = [(int(u), int(v)) for u, v in loop]
            assert len(pixels) == len(set(pixels))
            assert set(pixels) == brute_force_boundary(mask)

    def test_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            trace_boundary(np.zeros((4, 4), dtype=bool))


class TestFingertips:
    def test_plain_disk_no_tips(self):
        mask = disk_mask(60, 60, 30, 30, 18)
        dm = distance_transform(mask)
        center, radius = palm_center(dm)
        tips = detect_fingertips(trace_boundary(mask), center, radius, DetectConfig())
        assert tips == []

    @pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
    def test_synthetic_recall(self, k):
        cfg = DetectConfig()
        hits = 0
        for trial in range(6):
            spec_cfg = small_synth_cfg(min_stretched=k, max_stretched=k)
            index = make_synth_index(1, 1000 * k + trial, spec_cfg, intrinsics=SMALL_INTR)
            img = index.image(0)
            pose = index.pose(0)
            flags = index.stretched_flags()[0]
            res = detect_fingers(img, pose.skeleton, cfg)
            tips_gt = project_points(
                pose.joints[[pose.skeleton.fingertips[f] for f in range(5) if flags[f]]],
                SMALL_INTR,
            )
            if len(res["fingers"]) != k:
                continue
            dists = [
                min(np.hypot(f.tip.u - g[0], f.tip.v - g[1]) for f in res["fingers"])
                for g in tips_gt
            ]
            if max(dists) <= 3.0:
                hits += 1
        assert hits >= 5, f"detection recall too low for k={k}: {hits}/6"

    def test_translation_invariance(self):
        spec = SynthHandSpec(stretched=(True, False, True, False, True))
        img, pose, _, _ = generate_synth(spec, 5)
        mask = foreground_mask(img)
        cfg = DetectConfig()

        def tips_of(m):
            dm = distance_transform(m)
            c, r = palm_center(dm)
            return {(t.u - c.u, t.v - c.v) for t in detect_fingertips(trace_boundary(m), c, r, cfg)}

        base = tips_of(mask)
        shifted = np.zeros_like(mask)
        shifted[5:, 3:] = mask[:-5, :-3]
        assert tips_of(shifted) == base


class TestLocateRoot:
    def test_root_on_segment(self):
        mask = disk_mask(50, 50, 25, 25, 15)
        mask[5:25, 23:28] = True  # vertical finger
        dm = distance_transform(mask)
        tip = Pixel(25, 6)
        center, _ = palm_center(dm)
        root = locate_root(tip, center, dm)
        # collinearity with the segment (cross product near zero)
        cross = (root.u - tip.u) * (center.v - tip.v) - (root.v - tip.v) * (center.u - tip.u)
        assert abs(cross) <= max(abs(center.u - tip.u), abs(center.v - tip.v))

    def test_synthetic_root_accuracy(self):
        index = make_synth_index(10, 77, small_synth_cfg(min_stretched=2),
                                 intrinsics=SMALL_INTR)
        cfg = DetectConfig()
        errs = []
        for i in range(len(index)):
            img = index.image(i)
            pose = index.pose(i)
            flags = index.stretched_flags()[i]
            res = detect_fingers(img, pose.skeleton, cfg, pose, SMALL_INTR)
            roots_gt = project_points(
                pose.joints[[pose.skeleton.finger_chains[f][0] for f in range(5) if flags[f]]],
                SMALL_INTR,
            )
            for g in roots_gt:
                if res["fingers"]:
                    errs.append(min(
                        np.hypot(f.root.u - g[0], f.root.v - g[1]) for f in res["fingers"]
                    ))
        assert np.median(errs) <= 3.0

    def test_fallback_when_no_crossing(self):
        # hand-built map whose 0.5*max level is never reached on the segment
        values = np.zeros((30, 30))
        values[25, 25] = 20.0  # global max far from the segment
        values[10, 5:16] = 1.0
        dm = DistanceMap(values)
        tip = Pixel(5, 10)
        center = Pixel(15, 10)
        root = locate_root(tip, center, dm)
        # fallback: distance palm_radius from center along the segment, clamped
        assert root == Pixel(5, 10)


class TestInterpolation:
    def test_linear_fractions(self):
        sk = skeleton_msra21()
        cfg = DetectConfig(interpolation_fractions=(1 / 3, 2 / 3))
        joints = interpolate_joints(Pixel(30, 0), Pixel(0, 0), sk, cfg)
        np.testing.assert_allclose(joints, [[0, 0], [10, 0], [20, 0], [30, 0]])

    def test_degenerate_root_equals_tip(self):
        sk = skeleton_msra21()
        joints = interpolate_joints(Pixel(4, 7), Pixel(4, 7), sk, DetectConfig())
        assert np.all(joints == [4, 7])

    def test_output_covers_chain(self):
        sk = skeleton_msra21()
        joints = interpolate_joints(Pixel(9, 9), Pixel(1, 1), sk, DetectConfig())
        assert joints.shape == (sk.chain_length, 2)
        np.testing.assert_allclose(joints[0], [1, 1])
        np.testing.assert_allclose(joints[-1], [9, 9])


class TestIdentity:
    def _image_and_pose(self):
        index = make_synth_index(1, 55, small_synth_cfg(min_stretched=3),
                                 intrinsics=SMALL_INTR)
        return index.image(0), index.pose(0), index.stretched_flags()[0]

    def test_exact_match_zero_cost(self):
        img, pose, flags = self._image_and_pose()
        sk = pose.skeleton
        f = int(np.nonzero(flags)[0][0])
        chain = list(sk.finger_chains[f])
        joints_px = project_points(pose.joints[chain], SMALL_INTR)
        det = DetectedFinger(tip=Pixel(0, 0), root=Pixel(0, 0), joints_px=joints_px,
                             tip_distance=50.0)
        match_identity([det], pose, img, SMALL_INTR)
        assert det.identity == f
        assert finger_match_cost(det.joints_mm, pose, f) < finger_match_cost(
            det.joints_mm, pose, (f + 1) % 5
        )

    def test_cost_equals_eq_recompute(self):
        img, pose, flags = self._image_and_pose()
        rng = np.random.default_rng(5)
        detected = rng.normal(0, 30, (pose.skeleton.chain_length, 3)) + pose.joints[0]
        for f in range(5):
            chain = list(pose.skeleton.finger_chains[f])
            manual = sum(
                float(np.sum((detected[j] - pose.joints[chain[j]]) ** 2))
                for j in range(len(chain))
            )
            assert finger_match_cost(detected, pose, f) == pytest.approx(manual, rel=1e-12)

    def test_greedy_prevents_duplicates(self):
        # two detections both closest to finger 0; greedy must split them
        img, pose, _ = self._image_and_pose()
        sk = pose.skeleton
        chain0 = list(sk.finger_chains[0])
        chain1 = list(sk.finger_chains[1])
        px0 = project_points(pose.joints[chain0], SMALL_INTR)
        # second detection: slightly perturbed copy of finger 0, still nearer
        # to 0 than to anything else, but with larger cost than the exact one
        px1 = px0 + np.array([1.5, 0.0])
        d0 = DetectedFinger(tip=Pixel(0, 0), root=Pixel(0, 0), joints_px=px0, tip_distance=9)
        d1 = DetectedFinger(tip=Pixel(0, 0), root=Pixel(0, 0), joints_px=px1, tip_distance=9)
        match_identity([d1, d0], pose, img, SMALL_INTR)
        assert d0.identity == 0  # exact copy wins finger 0
        assert d1.identity != 0 and d1.identity is not None
        # compare against exhaustive assignment on the 2x2 submatrix
        costs = np.array([
            [finger_match_cost(d.joints_mm, pose, f) for f in (0, d1.identity)]
            for d in (d0, d1)
        ])
        assert costs[0, 0] + costs[1, 1] <= costs[0, 1] + costs[1, 0]

    def test_no_two_fingers_share_identity(self):
        index = make_synth_index(8, 31, small_synth_cfg(min_stretched=2),
                                 intrinsics=SMALL_INTR)
        cfg = DetectConfig()
        for i in range(len(index)):
            img = index.image(i)
            pose = index.pose(i)
            res = detect_fingers(img, pose.skeleton, cfg, pose, SMALL_INTR)
            ids = [f.identity for f in res["fingers"] if f.identity is not None]
            assert len(ids) == len(set(ids))
