"""Dataset format round-trips, split laws and synthetic generator checks."""

import struct

import numpy as np
import pytest
from PIL import Image

from conftest import SMALL_INTR, small_synth_cfg

from handpose.data_io import (
    SynthHandSpec,
    generate_synth,
    load_icvl,
    load_msra,
    make_synth_index,
    read_msra_bin,
    split_leave_one_subject_out,
    write_msra_bin,
    write_msra_dataset,
)
from handpose.errors import DataError, DataFormatError
from handpose.geometry import (
    DEFAULT_INTRINSICS,
    DepthImage,
    Pixel,
    backproject,
    foreground_mask,
    project_points,
)


class TestMsraBinary:
    def test_header_arithmetic(self, tmp_path):
        # well-formed file with a 100x80 bbox carries exactly 8000 floats
        depths = np.full((240, 320), 10000.0, dtype=np.float32)
        depths[10:90, 50:150] = 400.0  # 80 rows x 100 cols
        path = tmp_path / "a.bin"
        write_msra_bin(path, DepthImage(depths))
        raw = path.read_bytes()
        w, h, left, top, right, bottom = struct.unpack_from("<6i", raw)
        assert (right - left, bottom - top) == (100, 80)
        assert len(raw) == 24 + 4 * 8000

    def test_roundtrip_bit_exact(self, tmp_path):
        img, _, _, _ = generate_synth(SynthHandSpec(), 3)
        path = tmp_path / "b.bin"
        write_msra_bin(path, img)
        loaded = read_msra_bin(path, img.background_value)
        np.testing.assert_array_equal(loaded.depths, img.depths)

    def test_size_mismatch_reported(self, tmp_path):
        depths = np.full((60, 80), 10000.0, dtype=np.float32)
        depths[10:20, 10:30] = 300.0
        path = tmp_path / "c.bin"
        write_msra_bin(path, DepthImage(depths))
        data = path.read_bytes()
        bad = tmp_path / "bad.bin"
        bad.write_bytes(data[:-8])
        with pytest.raises(DataFormatError, match="expected .* bytes"):
            read_msra_bin(bad, 10000.0)

    def test_bogus_bbox_rejected(self, tmp_path):
        bad = tmp_path / "d.bin"
        bad.write_bytes(struct.pack("<6i", 320, 240, 100, 100, 90, 200))
        with pytest.raises(DataFormatError, match="bbox"):
            read_msra_bin(bad, 10000.0)

    def test_dataset_roundtrip(self, tmp_path):
        index = make_synth_index(12, 9, small_synth_cfg(min_stretched=1),
                                 intrinsics=SMALL_INTR)
        root = tmp_path / "ds"
        write_msra_dataset(root, index)
        loaded = load_msra(root, SMALL_INTR)
        assert len(loaded) == len(index)
        # same multiset of (subject, gesture, pose); order may differ because
        # files group by directory
        def key(ix, i):
            s = ix.samples[i]
            return (s.subject, s.gesture, s.pose.joints.tobytes())

        assert sorted(key(index, i) for i in range(12)) == sorted(
            key(loaded, i) for i in range(12)
        )
        # depth grids identical for matching poses
        by_pose = {index.samples[i].pose.joints.tobytes(): i for i in range(12)}
        for i in range(12):
            j = by_pose[loaded.samples[i].pose.joints.tobytes()]
            np.testing.assert_array_equal(loaded.image(i).depths, index.image(j).depths)

    def test_negate_z_convention(self, tmp_path):
        index = make_synth_index(2, 5, small_synth_cfg(), intrinsics=SMALL_INTR)
        root = tmp_path / "dsz"
        write_msra_dataset(root, index, negate_z=True)
        joint_file = next(root.rglob("joint.txt"))
        first = joint_file.read_text().splitlines()[1].split()
        assert float(first[2]) < 0, "stored z should be negated on disk"
        loaded = load_msra(root, SMALL_INTR, negate_z=True)
        assert all(loaded.samples[i].pose.joints[:, 2].min() > 0 for i in range(2))


class TestIcvl:
    def _write_dataset(self, tmp_path, n=3):
        rng = np.random.default_rng(1)
        root = tmp_path / "icvl"
        (root / "Depth" / "seqA").mkdir(parents=True)
        lines = []
        gts = []
        for i in range(n):
            depth = rng.integers(200, 900, (240, 320)).astype(np.uint16)
            Image.fromarray(depth).save(root / "Depth" / "seqA" / f"img{i}.png")
            uvd = np.column_stack([
                rng.uniform(10, 310, 16), rng.uniform(10, 230, 16), rng.uniform(200, 800, 16)
            ])
            lines.append(f"seqA/img{i}.png " + " ".join(repr(float(x)) for x in uvd.reshape(-1)))
            gts.append(uvd)
        (root / "labels.txt").write_text("\n".join(lines) + "\n")
        return root, gts

    def test_field_arithmetic(self, tmp_path):
        root, gts = self._write_dataset(tmp_path)
        index = load_icvl(root, "train")
        assert len(index) == 3
        assert index.skeleton.joint_count == 16
        assert index.pose(0).joints.shape == (16, 3)

    def test_conversion_matches_backproject(self, tmp_path):
        root, gts = self._write_dataset(tmp_path)
        index = load_icvl(root, "train")
        rng = np.random.default_rng(2)
        for _ in range(100):
            i = int(rng.integers(0, 3))
            j = int(rng.integers(0, 16))
            u, v, d = gts[i][j]
            # cross-module oracle: an image holding depth d at pixel (u, v)
            depths = np.full((240, 320), 10000.0, dtype=np.float32)
            pu, pv = int(round(u)), int(round(v))
            depths[pv, pu] = d
            expect = backproject(DepthImage(depths), Pixel(pu, pv), DEFAULT_INTRINSICS)
            got = index.pose(i).joints[j]
            # same formula at the fractional pixel; compare via the formula
            manual = np.array([
                (u - DEFAULT_INTRINSICS.cx) * d / DEFAULT_INTRINSICS.fx,
                (v - DEFAULT_INTRINSICS.cy) * d / DEFAULT_INTRINSICS.fy,
                d,
            ])
            np.testing.assert_allclose(got, manual, rtol=1e-12)
            np.testing.assert_allclose(
                expect,
                [
                    (pu - DEFAULT_INTRINSICS.cx) * d / DEFAULT_INTRINSICS.fx,
                    (pv - DEFAULT_INTRINSICS.cy) * d / DEFAULT_INTRINSICS.fy,
                    np.float32(d),
                ],
                rtol=1e-6,
            )

    def test_malformed_line_reports_lineno(self, tmp_path):
        root, _ = self._write_dataset(tmp_path)
        labels = root / "labels.txt"
        labels.write_text(labels.read_text() + "seqA/imgX.png 1 2 3\n")
        with pytest.raises(DataFormatError, match=":4"):
            load_icvl(root, "train")

    def test_image_loading(self, tmp_path):
        root, _ = self._write_dataset(tmp_path)
        index = load_icvl(root, "train")
        img = index.image(0)
        assert img.width == 320 and img.height == 240
        assert (img.depths < img.background_value).any()


class TestSplit:
    def _index(self):
        return make_synth_index(18, 3, small_synth_cfg(subjects=3), intrinsics=SMALL_INTR)

    def test_holdout_excluded_from_train(self):
        index = self._index()
        train, test = split_leave_one_subject_out(index, 0)
        assert 0 not in {s.subject for s in train.samples}
        assert {s.subject for s in test.samples} == {0}

    def test_partition_laws(self):
        index = self._index()
        train, test = split_leave_one_subject_out(index, 1)
        assert len(train) + len(test) == len(index)
        ids = lambda ix: {id(s) for s in ix.samples}
        assert ids(train) | ids(test) == ids(index)
        assert not (ids(train) & ids(test))

    def test_fold_sizes_sum(self):
        index = self._index()
        total = 0
        for s in index.subjects:
            _, test = split_leave_one_subject_out(index, s)
            total += len(test)
        assert total == len(index)

    def test_unknown_subject(self):
        with pytest.raises(DataError):
            split_leave_one_subject_out(self._index(), 99)


class TestSynth:
    def test_zero_fingers_pure_disk(self):
        spec = SynthHandSpec(stretched=(False,) * 5, tilt=(0.0, 0.0))
        img, pose, flags, _ = generate_synth(spec, 1)
        assert flags == (False,) * 5
        mask = foreground_mask(img)
        # pure disk: every fg pixel within palm radius of the centroid
        vs, us = np.nonzero(mask)
        d = img.depths[vs, us].astype(np.float64)
        pts = np.column_stack([
            (us - DEFAULT_INTRINSICS.cx) * d / DEFAULT_INTRINSICS.fx,
            (vs - DEFAULT_INTRINSICS.cy) * d / DEFAULT_INTRINSICS.fy,
        ])
        r = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
        assert r.max() <= spec.palm_radius + 1.5

    def test_same_seed_bit_identical(self):
        spec = SynthHandSpec(noise=2.0)
        a_img, a_pose, _, _ = generate_synth(spec, 123)
        b_img, b_pose, _, _ = generate_synth(spec, 123)
        np.testing.assert_array_equal(a_img.depths, b_img.depths)
        np.testing.assert_array_equal(a_pose.joints, b_pose.joints)

    def test_different_seed_differs_with_noise(self):
        spec = SynthHandSpec(noise=2.0)
        a_img, _, _, _ = generate_synth(spec, 1)
        b_img, _, _, _ = generate_synth(spec, 2)
        assert not np.array_equal(a_img.depths, b_img.depths)

    def test_joints_project_onto_foreground(self):
        index = make_synth_index(25, 8, small_synth_cfg(noise=1.0), intrinsics=SMALL_INTR)
        for i in range(len(index)):
            img = index.image(i)
            mask = foreground_mask(img)
            uv = np.floor(project_points(index.pose(i).joints, SMALL_INTR) + 0.5).astype(int)
            assert mask[uv[:, 1], uv[:, 0]].all()

    def test_clipping_flagged(self):
        spec = SynthHandSpec(center_offset=(150.0, 0.0))  # runs off the frame
        _, _, _, clipped = generate_synth(spec, 1, width=160, height=120)
        assert clipped

    def test_five_finger_recall_closes_loop(self):
        # generator + detector agree for fully open hands
        from handpose.detect import DetectConfig, detect_fingers

        spec_cfg = small_synth_cfg(min_stretched=5, max_stretched=5)
        index = make_synth_index(5, 21, spec_cfg, intrinsics=SMALL_INTR)
        for i in range(5):
            res = detect_fingers(index.image(i), index.skeleton, DetectConfig())
            assert len(res["fingers"]) == 5

    def test_gesture_labels_are_masks(self):
        index = make_synth_index(10, 2, small_synth_cfg(), intrinsics=SMALL_INTR)
        flags = index.stretched_flags()
        for i, s in enumerate(index.samples):
            assert s.gesture == "".join("1" if b else "0" for b in flags[i])
