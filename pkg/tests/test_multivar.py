import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import checkerboard, symbol_volume_from_levels, two_blob_volume
from oracles import brute_force_dbscan
from voxel2vec.model import EmbeddingModel, init_model, train
from voxel2vec.multivar import (NOISE_LABEL, classify_features, dbscan, export_label_volume,
                                pairwise_distances, project_features, read_label_volume,
                                render_features)
from voxel2vec.sampler import TrainConfig
from voxel2vec.volume import gen_abc_flow, quantize, symbolize


class TestDBSCAN:
    def test_two_groups(self):
        pts = np.array([[0, 0], [0.1, 0], [0, 0.1], [0.1, 0.1],
                        [5, 5], [5.1, 5], [5, 5.1], [5.1, 5.1]])
        labels = dbscan(pts, 0.3, 4, "euclidean")
        assert labels.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]

    def test_isolated_point_is_noise(self):
        pts = np.array([[0, 0], [0.1, 0], [0, 0.1], [0.1, 0.1], [9, 9]])
        assert dbscan(pts, 0.3, 4, "euclidean")[-1] == -1

    def test_point_counts_itself(self):
        assert dbscan(np.array([[0.0, 0.0]]), 0.1, 1, "euclidean").tolist() == [0]

    def test_border_goes_to_first_cluster(self):
        # point 3 is within eps of both chains but is not itself core
        pts = np.array([[0.0], [0.5], [1.0], [1.5], [2.0], [2.5], [3.0]])
        labels = dbscan(pts, 0.5, 3, "euclidean")
        assert labels.tolist() == brute_force_dbscan(pts, 0.5, 3, "euclidean").tolist()

    def test_bad_params(self):
        with pytest.raises(ValueError):
            dbscan(np.zeros((2, 2)), 0.0, 2)
        with pytest.raises(ValueError):
            dbscan(np.zeros((2, 2)), 0.5, 0)
        with pytest.raises(ValueError):
            dbscan(np.zeros((2, 2)), 0.5, 2, "manhattan")

    def test_random_30_points(self):
        rng = np.random.default_rng(0)
        pts = rng.random((30, 5))
        for metric in ("cosine", "euclidean"):
            ref = brute_force_dbscan(pts, 0.3, 3, metric)
            assert dbscan(pts, 0.3, 3, metric).tolist() == ref.tolist()

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 6), st.floats(0.05, 1.5), st.integers(1, 6),
           st.sampled_from(["cosine", "euclidean"]), st.integers(0, 2**32 - 1))
    def test_matches_oracle(self, n, d, eps, min_pts, metric, seed):
        pts = np.random.default_rng(seed).normal(size=(n, d))
        assert dbscan(pts, eps, min_pts, metric).tolist() == \
            brute_force_dbscan(pts, eps, min_pts, metric).tolist()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 30), st.floats(0.05, 0.9), st.integers(0, 2**32 - 1))
    def test_cosine_scale_invariance(self, n, eps, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(n, 4))
        scaled = pts * rng.uniform(0.01, 100, (n, 1))
        D1, D2 = pairwise_distances(pts), pairwise_distances(scaled)
        # skip draws that put a pair within rounding of the radius
        if np.min(np.abs(D1 - eps)) > 1e-9:
            assert dbscan(pts, eps, 3).tolist() == dbscan(scaled, eps, 3).tolist()
        assert np.max(np.abs(D1 - D2)) < 1e-12

    def test_zero_vectors_cosine(self):
        D = pairwise_distances(np.array([[0.0, 0.0], [1.0, 0.0]]))
        assert D.tolist() == [[0.0, 1.0], [1.0, 0.0]]


def _trained_blob(seed=0):
    sv, left = two_blob_volume(seed, n=16)
    m = train(sv, TrainConfig(R=16, seed=seed))
    return sv, left, m


class TestClassify:
    def test_single_ball(self):
        sv, _, m = _trained_blob()
        fs = classify_features(m, sv, eps=2.0, min_pts=1)
        assert len(fs.features) == 1
        assert fs.features[0].voxels == sv.size and fs.noise_voxels == 0

    def test_partition(self):
        sv, _, m = _trained_blob()
        fs = classify_features(m, sv, eps=0.3, min_pts=2)
        assert sum(f.voxels for f in fs.features) + fs.noise_voxels == sv.size
        members = np.concatenate([f.symbols for f in fs.features]) if fs.features else np.array([])
        assert len(set(members.tolist())) == len(members)
        assert set(members.tolist()) == set(np.flatnonzero(fs.labels >= 0).tolist())

    def test_weighted_mean(self):
        Z = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
        m = EmbeddingModel(Z, np.ones_like(Z))
        sv = symbol_volume_from_levels(np.array([[[0, 0, 0, 1, 2, 2]]]), 3)
        fs = classify_features(m, sv, eps=0.05, min_pts=2, min_voxels=1)
        assert len(fs.features) == 1
        f = fs.features[0]
        assert f.symbols.tolist() == [0, 1]
        assert f.mean == pytest.approx((3 * Z[0] + Z[1]) / 4)
        assert fs.noise_voxels == 2

    def test_filter_flag(self):
        Z = np.array([[1.0, 0.0], [0.0, 1.0]])
        m = EmbeddingModel(Z, np.ones_like(Z))
        levels = np.zeros(2000, dtype=np.int64)
        levels[0] = 1
        sv = symbol_volume_from_levels(levels.reshape(1, 1, 2000), 2)
        fs = classify_features(m, sv, eps=0.1, min_pts=1)
        rare = sv.ids.ravel()[0]
        assert {int(f.symbols[0]): f.filtered for f in fs.features} == {rare: True, 1 - rare: False}

    def test_untrained(self):
        sv, _ = two_blob_volume(0, n=8)
        with pytest.raises(ValueError):
            classify_features(init_model(sv.table.size, 4, np.random.default_rng(0), sv.table), sv)

    def test_raw_space_and_purity(self):
        # features found on the embedding should not mix the two blobs more than raw clustering
        sv, left, m = _trained_blob(1)
        emb = classify_features(m, sv, eps=0.3, min_pts=2)
        raw = classify_features(m, sv, eps=1.5, min_pts=2, metric="euclidean", space="raw")
        assert _purity(emb, left, sv) >= _purity(raw, left, sv)

    def test_abc_multivariate_band(self):
        vx, _, _, s1 = gen_abc_flow(dims=(32, 32, 32))
        _, sv = symbolize([quantize(vx, 16), quantize(s1, 16)])
        m = train(sv, TrainConfig(R=16, seed=0))
        fs = classify_features(m, sv)
        assert 1 <= len([f for f in fs.features]) <= 60


def _purity(fs, left, sv):
    counts = sv.counts()
    total = 0
    for f in fs.features:
        lv = counts[f.symbols][left[f.symbols]].sum()
        rv = counts[f.symbols][~left[f.symbols]].sum()
        total += max(lv, rv)
    clustered = sum(f.voxels for f in fs.features)
    return total / clustered if clustered else 1.0


class TestProjection:
    def test_one_feature_at_origin(self):
        sv, _, m = _trained_blob()
        fs = project_features(classify_features(m, sv, eps=2.0, min_pts=1))
        assert fs.features[0].position.tolist() == [0.0, 0.0]

    def test_identical_means_separated(self):
        Z = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
        m = EmbeddingModel(Z, np.ones_like(Z))
        sv = symbol_volume_from_levels(np.array([[[0, 1, 2, 3]]]), 4)
        fs = classify_features(m, sv, eps=0.5, min_pts=1, min_voxels=1)
        assert len(fs.features) == 2
        # force both features onto the same mean vector
        fs.features[1].mean = fs.features[0].mean.copy()
        project_features(fs, seed=0)
        a, b = fs.features
        assert np.hypot(*(a.position - b.position)) >= a.radius + b.radius
        assert fs.layout_resolved

    def test_no_overlap_and_radius(self):
        sv, _, m = _trained_blob()
        fs = project_features(classify_features(m, sv, eps=0.1, min_pts=1, min_voxels=1), seed=3)
        feats = fs.features
        assert len(feats) >= 2
        for i in range(len(feats)):
            for j in range(i + 1, len(feats)):
                d = np.hypot(*(feats[i].position - feats[j].position))
                assert d >= feats[i].radius + feats[j].radius
        r = np.array([f.radius for f in feats])
        v = np.array([f.voxels for f in feats], dtype=float)
        assert r / r.max() == pytest.approx(np.sqrt(v / v.max()))

    def test_kl_monotone_tail(self):
        sv, _, m = _trained_blob()
        fs = project_features(classify_features(m, sv, eps=0.05, min_pts=1, min_voxels=1), seed=0)
        kl = fs.kl
        tail = kl[len(kl) // 2:]
        assert np.all(np.diff(tail) <= 0)


class TestLabelVolume:
    def test_checkerboard(self, tmp_path):
        sv = checkerboard(6)
        m = EmbeddingModel(np.array([[1.0, 0.0], [0.0, 1.0]]), np.ones((2, 2)), sv.table)
        fs = classify_features(m, sv, eps=0.1, min_pts=1)
        raw, legend = export_label_volume(fs, sv, tmp_path)
        lab = read_label_volume(raw, sv.dims)
        z, y, x = np.indices(lab.shape)
        first = lab[0, 0, 0]
        assert np.all((lab == first) == ((x + y + z) % 2 == 0))
        doc = json.loads(legend.read_text())
        assert set(doc["features"]) == {"0", "1"}

    def test_noise_label_and_round_trip(self, tmp_path):
        Z = np.array([[1.0, 0.0], [0.99, 0.01], [0.0, 1.0]])
        m = EmbeddingModel(Z, np.ones_like(Z))
        rng = np.random.default_rng(0)
        sv = symbol_volume_from_levels(rng.integers(0, 3, (4, 5, 6)), 3)
        m.table = sv.table
        m.Z = Z[sv.table.combos[:, 0]]
        fs = project_features(classify_features(m, sv, eps=0.05, min_pts=2, min_voxels=1))
        raw, legend = export_label_volume(fs, sv, tmp_path)
        lab = read_label_volume(raw, sv.dims)
        noise_sym = np.flatnonzero(fs.labels == -1)
        assert noise_sym.size == 1
        assert np.all(lab[sv.ids == noise_sym[0]] == NOISE_LABEL)
        doc = json.loads(legend.read_text())
        for f in fs.features:
            assert np.count_nonzero(lab == f.id) == f.voxels == doc["features"][str(f.id)]["voxels"]
        assert np.count_nonzero(lab == NOISE_LABEL) == fs.noise_voxels
        render_features(fs, tmp_path / "f.png")
        assert (tmp_path / "f.png").stat().st_size > 0
