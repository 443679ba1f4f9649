from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from plyfile import PlyData, PlyElement

from gsremoval.gaussians import (
    REQUIRED_FIELDS,
    GaussianCloud,
    GraphEmpty,
    PlyFormatError,
    RemovalSet,
    candidate_filter,
    intersects,
    largest_scale,
    load_ply,
    load_removal_set,
    save_ply,
    save_removal_set,
)
from oracles import candidates


def cloud_of(positions, scales=None, features=None, **kw):
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if scales is None:
        scales = np.ones((len(positions), 3))
    scales = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    return GaussianCloud.from_arrays(positions, np.log(scales), features=features, **kw)


def random_cloud(n, seed=0, extra=True):
    rng = np.random.default_rng(seed)
    fields = list(REQUIRED_FIELDS) + (["f_rest_0", "f_rest_1", "custom"] if extra else [])
    vertex = np.zeros(n, dtype=[(f, "<f4") for f in fields])
    for f in fields:
        vertex[f] = rng.normal(size=n).astype(np.float32)
    return GaussianCloud(vertex)


class TestPly:
    def test_single_splat(self, tmp_path):
        save_ply(cloud_of([[0, 0, 0]]), tmp_path / "one.ply")
        c = load_ply(tmp_path / "one.ply")
        assert len(c) == 1
        np.testing.assert_array_equal(c.positions, [[0, 0, 0]])
        assert c.features is None

    def test_round_trip_is_bit_exact(self, tmp_path):
        c = random_cloud(50)
        save_ply(c, tmp_path / "a.ply")
        back = load_ply(tmp_path / "a.ply")
        assert back.vertex.dtype.names == c.vertex.dtype.names
        assert back.vertex.tobytes() == c.vertex.tobytes()
        save_ply(back, tmp_path / "b.ply")
        assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()

    def test_removal_counts_and_order(self, tmp_path):
        c = random_cloud(10)
        save_ply(c, tmp_path / "none.ply", RemovalSet(np.zeros(10, bool)))
        assert len(load_ply(tmp_path / "none.ply")) == 10
        save_ply(c, tmp_path / "all.ply", RemovalSet(np.ones(10, bool)))
        assert len(load_ply(tmp_path / "all.ply")) == 0
        save_ply(c, tmp_path / "some.ply", RemovalSet.from_indices([1, 4, 7], 10))
        kept = load_ply(tmp_path / "some.ply")
        survivors = [0, 2, 3, 5, 6, 8, 9]
        assert kept.vertex.tobytes() == c.vertex[survivors].tobytes()

    def test_missing_field_is_named(self, tmp_path):
        fields = [f for f in REQUIRED_FIELDS if f != "opacity"]
        vertex = np.zeros(2, dtype=[(f, "<f4") for f in fields])
        PlyData([PlyElement.describe(vertex, "vertex")], byte_order="<").write(str(tmp_path / "m.ply"))
        with pytest.raises(PlyFormatError, match="opacity"):
            load_ply(tmp_path / "m.ply")

    def test_ascii_rejected(self, tmp_path):
        vertex = random_cloud(2, extra=False).vertex
        PlyData([PlyElement.describe(vertex, "vertex")], text=True).write(str(tmp_path / "t.ply"))
        with pytest.raises(PlyFormatError, match="ascii"):
            load_ply(tmp_path / "t.ply")

    def test_features_in_vertex(self, tmp_path):
        feats = np.arange(6, dtype=np.float32).reshape(2, 3)
        save_ply(cloud_of([[0, 0, 0], [1, 1, 1]], features=feats), tmp_path / "f.ply")
        c = load_ply(tmp_path / "f.ply")
        assert c.feature_fields == ["feature_0", "feature_1", "feature_2"]
        np.testing.assert_array_equal(c.features, feats)

    def test_feature_sidecar(self, tmp_path):
        feats = np.random.default_rng(1).normal(size=(4, 5)).astype(np.float32)
        c = cloud_of(np.zeros((4, 3)), features=feats, features_in_vertex=False)
        save_ply(c, tmp_path / "s.ply", RemovalSet.from_indices([2], 4))
        assert (tmp_path / "s.ply.features.json").exists()
        back = load_ply(tmp_path / "s.ply")
        np.testing.assert_array_equal(back.features, feats[[0, 1, 3]])
        assert back.feature_fields == []

    def test_sidecar_row_mismatch(self, tmp_path):
        c = cloud_of(np.zeros((3, 3)), features=np.zeros((3, 2)), features_in_vertex=False)
        save_ply(c, tmp_path / "s.ply")
        save_ply(cloud_of(np.zeros((2, 3))), tmp_path / "other.ply")
        with pytest.raises(PlyFormatError):
            load_ply(tmp_path / "other.ply", features_path=tmp_path / "s.ply.features.json")

    def test_rotations_normalised_on_access(self):
        c = cloud_of([[0, 0, 0]], rotations=[[2, 0, 0, 0]])
        np.testing.assert_array_equal(c.rotations, [[1, 0, 0, 0]])
        assert c.vertex["rot_0"][0] == 2


class TestRemovalSet:
    @pytest.mark.parametrize("name", ["r.txt", "r.bits"])
    def test_round_trip(self, tmp_path, name):
        r = RemovalSet.from_indices([0, 5, 9, 12], 13)
        save_removal_set(r, tmp_path / name)
        np.testing.assert_array_equal(load_removal_set(tmp_path / name, 13).flags, r.flags)

    def test_index_list_comments(self, tmp_path):
        (tmp_path / "r.txt").write_text("# seed\n3\n\n1\n")
        assert load_removal_set(tmp_path / "r.txt", 5).indices.tolist() == [1, 3]

    def test_out_of_range(self, tmp_path):
        (tmp_path / "r.txt").write_text("7\n")
        with pytest.raises(IndexError):
            load_removal_set(tmp_path / "r.txt", 5)

    def test_union(self):
        a = RemovalSet.from_indices([0], 3)
        b = RemovalSet.from_indices([2], 3)
        assert a.union(b).indices.tolist() == [0, 2]


class TestGeometry:
    def test_largest_scale(self):
        c = cloud_of(np.zeros((3, 3)), [[1, 1, 1], [2, 1, 3], [0.1, 0.5, 0.2]])
        assert largest_scale(c, 0) == 1.0
        assert largest_scale(c, 1) == pytest.approx(3.0)
        assert largest_scale(c, 2) == pytest.approx(0.5)

    def test_intersects(self):
        same = cloud_of([[1, 2, 3], [1, 2, 3]])
        assert intersects(same, 0, 1)
        far = cloud_of([[0, 0, 0], [3, 0, 0]])
        assert not intersects(far, 0, 1)
        mixed = cloud_of([[0, 0, 0], [2, 0, 0]], [[1.5] * 3, [0.6] * 3])
        assert intersects(mixed, 0, 1) and intersects(mixed, 1, 0)

    def test_touching_is_not_intersecting(self):
        c = cloud_of([[0, 0, 0], [2, 0, 0]])
        assert not intersects(c, 0, 1)

    def test_candidates_all_seed(self):
        c = cloud_of(np.random.default_rng(0).normal(size=(20, 3)))
        assert candidate_filter(c, RemovalSet(np.ones(20, bool))).tolist() == list(range(20))

    def test_far_tiny_splat_excluded(self):
        c = cloud_of([[0, 0, 0], [0.5, 0, 0], [50, 0, 0]], [[1] * 3, [1] * 3, [1e-3] * 3])
        assert candidate_filter(c, RemovalSet.from_indices([0], 3)).tolist() == [0, 1]

    def test_empty_seed(self):
        with pytest.raises(GraphEmpty, match="graph empty"):
            candidate_filter(cloud_of(np.zeros((2, 3))), RemovalSet(np.zeros(2, bool)))

    def test_dumbbell(self):
        rng = np.random.default_rng(4)
        left = rng.normal(scale=0.3, size=(20, 3))
        bridge = np.stack([np.linspace(0.8, 2.2, 6), np.zeros(6), np.zeros(6)], 1)
        right = rng.normal(scale=0.3, size=(20, 3)) + [3, 0, 0]
        pos = np.concatenate([left, bridge, right])
        scales = np.full((46, 3), 0.15)
        seed = np.zeros(46, bool)
        seed[:20] = True
        got = candidate_filter(cloud_of(pos, scales), RemovalSet(seed)).tolist()
        assert got == candidates(pos, np.log(scales), seed)
        assert not set(range(26, 46)) & set(got)

    @given(st.integers(0, 10_000), st.integers(2, 60), st.floats(0.05, 0.6))
    def test_accelerated_matches_brute_force(self, seed, n, scale):
        rng = np.random.default_rng(seed)
        pos = rng.uniform(-2, 2, size=(n, 3))
        log_scales = np.log(rng.uniform(0.2, 1.0, size=(n, 3)) * scale)
        flags = rng.random(n) < 0.3
        flags[0] = True
        c = GaussianCloud.from_arrays(pos, log_scales)
        # compare on the stored float32 values
        expected = candidates(c.positions, c.log_scales, flags)
        got = candidate_filter(c, RemovalSet(flags))
        assert got.tolist() == expected
        assert set(np.flatnonzero(flags)) <= set(got.tolist())

    def test_large_cloud_matches_brute_force(self):
        rng = np.random.default_rng(9)
        n = 10_000
        pos = rng.uniform(0, 30, size=(n, 3))
        c = GaussianCloud.from_arrays(pos, np.log(rng.uniform(0.05, 0.4, size=(n, 3))))
        flags = rng.random(n) < 0.02
        got = candidate_filter(c, RemovalSet(flags))
        # vectorised O(n * seeds) reference
        p, r = c.positions, c.max_scales
        s = np.flatnonzero(flags)
        expected = flags.copy()
        for lo in range(0, n, 500):
            d = np.linalg.norm(p[lo:lo + 500, None, :] - p[None, s, :], axis=2)
            expected[lo:lo + 500] |= (d < r[lo:lo + 500, None] + r[None, s]).any(1)
        assert got.tolist() == np.flatnonzero(expected).tolist()

    def test_scale_validation(self):
        with pytest.raises(PlyFormatError):
            GaussianCloud.from_arrays(np.zeros((1, 3)), [[math.inf, 0, 0]])
