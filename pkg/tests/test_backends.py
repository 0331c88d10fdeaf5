"""numba and numpy kernel twins must agree.

Bit-exact agreement is asserted for everything without floating-point
accumulation (probes, EDT, routing, nearest-joint, boundary tracing) and
for whole-forest training on integer-valued data, where sums are exact in
either accumulation order. Float-valued split search can differ by ulps in
the recorded gain (pairwise vs sequential parent sums), so forests trained
on float data are compared structurally with gains at tight tolerance.
"""

import numpy as np
import pytest

numba_impl = pytest.importorskip("handpose._kernels_numba")

from handpose import _kernels_numpy as numpy_impl
from handpose.features import FeatureConfig
from handpose.forest import ForestConfig, SampleSet
from handpose.geometry import DepthImage


def random_scene(rng, n_img=3, h=28, w=30, n=500, integer=False):
    if integer:
        depths = rng.integers(200, 900, (n_img, h, w)).astype(np.float32)
    else:
        depths = rng.uniform(200, 900, (n_img, h, w)).astype(np.float32)
    img_idx = np.sort(rng.integers(0, n_img, n)).astype(np.int64)
    us = rng.integers(0, w, n).astype(np.int64)
    vs = rng.integers(0, h, n).astype(np.int64)
    scale = 150.0 / depths[img_idx, vs, us].astype(np.float64)
    if integer:
        targets = rng.integers(-8, 9, (n, 3)).astype(np.float64)
    else:
        targets = rng.normal(0, 6, (n, 3))
    return depths, img_idx, us, vs, scale, targets


class TestKernelEquivalence:
    def test_pair_responses_bit_exact(self):
        rng = np.random.default_rng(0)
        depths, img_idx, us, vs, scale, _ = random_scene(rng)
        idx = np.arange(us.shape[0], dtype=np.int64)
        for _ in range(30):
            du1, dv1, du2, dv2 = rng.uniform(-60, 60, 4)
            a = numba_impl.pair_responses(depths, img_idx, us, vs, scale, 10000.0,
                                          idx, du1, dv1, du2, dv2)
            b = numpy_impl.pair_responses(depths, img_idx, us, vs, scale, 10000.0,
                                          idx, du1, dv1, du2, dv2)
            np.testing.assert_array_equal(a, b)

    def test_edt_bit_exact(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            h, w = rng.integers(2, 48, 2)
            mask = (rng.random((h, w)) < 0.6).astype(np.uint8)
            a = numba_impl.edt_sq(np.ascontiguousarray(mask))
            b = numpy_impl.edt_sq(mask)
            np.testing.assert_array_equal(a, b)

    def test_nearest_joint_bit_exact(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(0, 60, (400, 3)) + [0, 0, 500]
        joints = rng.normal(0, 60, (21, 3)) + [0, 0, 500]
        ia, da = numba_impl.nearest_joint(pts, joints)
        ib, db = numpy_impl.nearest_joint(pts, joints)
        np.testing.assert_array_equal(ia, ib)
        np.testing.assert_array_equal(da, db)

    def test_nearest_joint_tiebreak_lowest_index(self):
        pts = np.zeros((1, 3))
        joints = np.zeros((4, 3))
        joints[2] = [1, 0, 0]
        for impl in (numba_impl, numpy_impl):
            idx, _ = impl.nearest_joint(pts, joints)
            assert idx[0] == 0  # joints 0, 1, 3 tie; lowest index wins

    def test_trace_loop_identical(self):
        rng = np.random.default_rng(3)
        from scipy import ndimage

        for _ in range(30):
            mask = rng.random((20, 24)) < 0.55
            if not mask.any():
                continue
            labels, count = ndimage.label(mask, structure=np.ones((3, 3), int))
            sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, count + 1))
            comp = (labels == int(np.argmax(sizes)) + 1).astype(np.uint8)
            a = numba_impl.trace_loop(np.ascontiguousarray(comp))
            b = numpy_impl.trace_loop(comp)
            np.testing.assert_array_equal(a, b)

    def test_node_split_identical_on_integer_data(self):
        rng = np.random.default_rng(4)
        depths, img_idx, us, vs, scale, targets = random_scene(rng, integer=True)
        row_sq = np.einsum("ij,ij->i", targets, targets)
        idx = np.arange(us.shape[0], dtype=np.int64)
        du = rng.uniform(-60, 60, (4, 48))
        q01 = np.sort(rng.random((48, 12)), axis=1)
        a = numba_impl.node_split(depths, img_idx, us, vs, scale, 10000.0,
                                  targets, row_sq, idx, du[0], du[1], du[2], du[3], q01, 5)
        b = numpy_impl.node_split(depths, img_idx, us, vs, scale, 10000.0,
                                  targets, row_sq, idx, du[0], du[1], du[2], du[3], q01, 5)
        assert a[0] == b[0]
        assert a[1] == b[1]
        assert a[2] == b[2]
        assert a[3] == b[3]


def train_with(impl_name, samples, feat, cfg, seed, monkeypatch):
    """Train a forest with one backend forced via the dispatch module."""
    import handpose.backend as bk
    import handpose.forest as forest_mod

    impl = numba_impl if impl_name == "numba" else numpy_impl
    for name in ("pair_responses", "node_split", "route_forest", "route_tree"):
        monkeypatch.setattr(bk, name, getattr(impl, name))
    return forest_mod.train_forest(samples, feat, cfg, seed)


class TestForestEquivalence:
    FEAT = FeatureConfig(max_offset_radius=50.0, focal_ref=150.0)
    CFG = ForestConfig(tree_count=2, max_depth=7, features_per_split=24,
                       thresholds_per_feature=8, min_samples_leaf=4)

    def test_integer_data_identical_files(self, tmp_path, monkeypatch):
        from handpose.forest import save_forest

        rng = np.random.default_rng(5)
        depths, img_idx, us, vs, _, targets = random_scene(rng, n=700, integer=True)
        ss = SampleSet(depths, img_idx, us, vs, targets, 10000.0)
        fa = train_with("numba", ss, self.FEAT, self.CFG, 9, monkeypatch)
        fb = train_with("numpy", ss, self.FEAT, self.CFG, 9, monkeypatch)
        pa, pb = tmp_path / "a.forest", tmp_path / "b.forest"
        save_forest(fa, pa)
        save_forest(fb, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_float_data_structurally_equal(self, monkeypatch):
        rng = np.random.default_rng(6)
        depths, img_idx, us, vs, _, targets = random_scene(rng, n=700)
        ss = SampleSet(depths, img_idx, us, vs, targets, 10000.0)
        fa = train_with("numba", ss, self.FEAT, self.CFG, 10, monkeypatch)
        fb = train_with("numpy", ss, self.FEAT, self.CFG, 10, monkeypatch)
        for ta, tb in zip(fa.trees, fb.trees):
            np.testing.assert_array_equal(ta.left, tb.left)
            np.testing.assert_array_equal(ta.right, tb.right)
            np.testing.assert_array_equal(ta.threshold, tb.threshold)
            np.testing.assert_array_equal(ta.leaf_mean, tb.leaf_mean)
            np.testing.assert_allclose(ta.gain, tb.gain, rtol=1e-9, atol=1e-9)

    def test_routing_identical_across_backends(self, monkeypatch):
        rng = np.random.default_rng(7)
        depths, img_idx, us, vs, _, targets = random_scene(rng, n=600)
        ss = SampleSet(depths, img_idx, us, vs, targets, 10000.0)
        forest = train_with("numba", ss, self.FEAT, self.CFG, 11, monkeypatch)
        img = DepthImage(depths[0], 10000.0, validate=False)
        uv = rng.integers(0, 28, (200, 2))
        p = forest._pack()
        u = np.ascontiguousarray(uv[:, 0], dtype=np.int64)
        v = np.ascontiguousarray(uv[:, 1], dtype=np.int64)
        scale = 150.0 / img.depths[v, u].astype(np.float64)
        a = numba_impl.route_forest(img.depths, u, v, scale, 10000.0, p["off"],
                                    p["left"], p["right"], p["du1"], p["dv1"],
                                    p["du2"], p["dv2"], p["thr"], p["leaf"])
        b = numpy_impl.route_forest(img.depths, u, v, scale, 10000.0, p["off"],
                                    p["left"], p["right"], p["du1"], p["dv1"],
                                    p["du2"], p["dv2"], p["thr"], p["leaf"])
        np.testing.assert_array_equal(a, b)


class TestBackendSelection:
    def test_dispatcher_exposes_selected_backend(self):
        from handpose import backend

        assert backend.BACKEND in ("numba", "numpy")
        assert set(backend.available_backends()) >= {"numpy"}

    def test_env_flag_forces_numpy(self):
        import subprocess, sys

        out = subprocess.run(
            [sys.executable, "-c",
             "from handpose import backend; print(backend.BACKEND)"],
            capture_output=True, text=True, env={"HANDPOSE_BACKEND": "numpy", "PATH": "/usr/bin:/bin"},
        )
        assert out.stdout.strip() == "numpy"

    def test_env_flag_rejects_garbage(self):
        import subprocess, sys

        out = subprocess.run(
            [sys.executable, "-c", "import handpose.backend"],
            capture_output=True, text=True,
            env={"HANDPOSE_BACKEND": "gpu", "PATH": "/usr/bin:/bin"},
        )
        assert out.returncode != 0
