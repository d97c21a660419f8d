import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canonalign.collection import FeatureMap
from canonalign.matching import (build_all_pairs, default_cache_path, get_pair,
                                 load_pair_cache, mutual_nearest_neighbors)
from conftest import unit_features


def brute_force_mutual_nn(feat_a, feat_b):
    """Exhaustive O((hw)^2) double-argmax oracle."""
    a = feat_a.grid.reshape(-1, feat_a.grid.shape[-1]).astype(np.float64)
    b = feat_b.grid.reshape(-1, feat_b.grid.shape[-1]).astype(np.float64)
    matches = []
    for i in range(a.shape[0]):
        best_j, best_sim = 0, -np.inf
        for j in range(b.shape[0]):
            s = float(a[i] @ b[j])
            if s > best_sim:
                best_j, best_sim = j, s
        back_i, back_sim = 0, -np.inf
        for i2 in range(a.shape[0]):
            s = float(a[i2] @ b[best_j])
            if s > back_sim:
                back_i, back_sim = i2, s
        if back_i == i:
            matches.append((i, best_j))
    return set(matches)


def cells_of(match, feat_a, feat_b):
    ia = ((match.points_a[:, 1] - feat_a.offset[1]) / feat_a.stride).round().astype(int)
    ja = ((match.points_a[:, 0] - feat_a.offset[0]) / feat_a.stride).round().astype(int)
    ib = ((match.points_b[:, 1] - feat_b.offset[1]) / feat_b.stride).round().astype(int)
    jb = ((match.points_b[:, 0] - feat_b.offset[0]) / feat_b.stride).round().astype(int)
    wa = feat_a.grid.shape[1]
    wb = feat_b.grid.shape[1]
    return set(zip(ia * wa + ja, ib * wb + jb))


class TestMutualNearestNeighbors:
    def test_orthogonal_crossing(self):
        fa = FeatureMap(grid=np.array([[[1.0, 0.0], [0.0, 1.0]]], dtype=np.float32),
                        stride=1.0, offset=(0.0, 0.0))
        fb = FeatureMap(grid=np.array([[[0.0, 1.0], [1.0, 0.0]]], dtype=np.float32),
                        stride=1.0, offset=(0.0, 0.0))
        m = mutual_nearest_neighbors(fa, fb)
        assert cells_of(m, fa, fb) == {(0, 1), (1, 0)}

    def test_identical_maps_match_everywhere(self, rng):
        f = unit_features(rng, 3, 4, 8)
        m = mutual_nearest_neighbors(f, f)
        assert m.k == 12
        assert np.array_equal(m.points_a, m.points_b)
        assert np.allclose(m.scores, 1.0, atol=1e-6)

    def test_matches_brute_force_oracle(self, rng):
        for _ in range(5):
            fa = unit_features(rng, 5, 5, 8)
            fb = unit_features(rng, 5, 5, 8)
            m = mutual_nearest_neighbors(fa, fb)
            assert cells_of(m, fa, fb) == brute_force_mutual_nn(fa, fb)

    def test_pixel_coordinates_from_stride_offset(self):
        fa = FeatureMap(grid=np.eye(2, dtype=np.float32)[None].repeat(1, axis=0),
                        stride=8.0, offset=(3.5, 3.5))
        m = mutual_nearest_neighbors(fa, fa)
        assert set(map(tuple, m.points_a.tolist())) == {(3.5, 3.5), (11.5, 3.5)}

    def test_constant_features_tie_break_lowest_index(self):
        grid = np.ones((2, 2, 4), dtype=np.float32) / 2.0
        f = FeatureMap(grid=grid, stride=1.0, offset=(0.0, 0.0))
        m = mutual_nearest_neighbors(f, f)
        # every row's argmax is cell 0; only (0, 0) is mutual
        assert m.k == 1
        assert tuple(m.points_a[0]) == (0.0, 0.0)

    def test_dim_mismatch_fatal(self, rng):
        with pytest.raises(ValueError, match="dims differ"):
            mutual_nearest_neighbors(unit_features(rng, 2, 2, 4), unit_features(rng, 2, 2, 8))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_injectivity_and_symmetry(self, seed):
        g = np.random.Generator(np.random.PCG64(seed))
        fa = unit_features(g, 4, 4, 6)
        fb = unit_features(g, 3, 5, 6)
        m = mutual_nearest_neighbors(fa, fb)
        assert m.k <= min(16, 15)
        pts_a = set(map(tuple, m.points_a.tolist()))
        pts_b = set(map(tuple, m.points_b.tolist()))
        assert len(pts_a) == m.k and len(pts_b) == m.k  # partial injection
        swapped = mutual_nearest_neighbors(fb, fa)
        assert cells_of(swapped, fb, fa) == {(j, i) for i, j in cells_of(m, fa, fb)}

    def test_deterministic_across_runs(self, rng):
        fa = unit_features(rng, 6, 6, 8)
        fb = unit_features(rng, 6, 6, 8)
        m1 = mutual_nearest_neighbors(fa, fb)
        m2 = mutual_nearest_neighbors(fa, fb)
        assert np.array_equal(m1.points_a, m2.points_a)
        assert np.array_equal(m1.scores, m2.scores)


class TestBuildAllPairs:
    def test_pair_count_n3(self, rng):
        feats = [unit_features(rng, 2, 2, 4) for _ in range(3)]
        assert len(build_all_pairs(feats)) == 3

    def test_pair_count_n20_and_cache_reuse(self, rng, tmp_path, caplog):
        import logging
        feats = [unit_features(rng, 2, 2, 4) for _ in range(20)]
        cache = tmp_path / "pseudo_corr.bin"
        with caplog.at_level(logging.INFO):
            pairs = build_all_pairs(feats, cache_path=cache)
            assert len(pairs) == 190
            assert "cache written" in caplog.text
            caplog.clear()
            again = build_all_pairs(feats, cache_path=cache)
            assert "cache hit" in caplog.text
        for key in pairs:
            assert np.array_equal(pairs[key].points_a, again[key].points_a)
            assert np.allclose(pairs[key].scores, again[key].scores)

    def test_cache_invalidated_on_content_change(self, rng, tmp_path, caplog):
        import logging
        feats = [unit_features(rng, 3, 3, 4) for _ in range(3)]
        cache = tmp_path / "pseudo_corr.bin"
        build_all_pairs(feats, cache_path=cache)
        # flip one float in one feature map: the content hash must change
        feats[1].grid[0, 0, 0] += 0.25
        with caplog.at_level(logging.INFO):
            build_all_pairs(feats, cache_path=cache)
        assert "stale" in caplog.text or "cache written" in caplog.text
        assert "cache hit" not in caplog.text

    def test_corrupt_cache_recomputed(self, rng, tmp_path):
        feats = [unit_features(rng, 2, 2, 4) for _ in range(2)]
        cache = tmp_path / "pseudo_corr.bin"
        cache.write_bytes(b"garbage")
        pairs = build_all_pairs(feats, cache_path=cache)
        assert len(pairs) == 1
        assert load_pair_cache(cache) is not None  # rewritten valid

    def test_get_pair_swaps(self, rng):
        feats = [unit_features(rng, 2, 3, 4) for _ in range(2)]
        pairs = build_all_pairs(feats)
        fwd = get_pair(pairs, 0, 1)
        rev = get_pair(pairs, 1, 0)
        assert np.array_equal(fwd.points_a, rev.points_b)
        assert np.array_equal(fwd.points_b, rev.points_a)

    def test_cache_round_trip_exact(self, rng, tmp_path):
        feats = [unit_features(rng, 4, 4, 8) for _ in range(3)]
        cache = tmp_path / "c.bin"
        pairs = build_all_pairs(feats, cache_path=cache)
        loaded = load_pair_cache(cache)
        for key in pairs:
            assert np.array_equal(pairs[key].points_a, loaded[key].points_a)
            assert np.array_equal(pairs[key].points_b, loaded[key].points_b)
            assert np.array_equal(pairs[key].scores, loaded[key].scores)


def test_default_cache_path_env_override(tmp_path, monkeypatch):
    coll = tmp_path / "coll"
    coll.mkdir()
    assert default_cache_path(coll) == coll / "pseudo_corr.bin"
    monkeypatch.setenv("ASIC_CACHE_DIR", str(tmp_path / "cache"))
    override = default_cache_path(coll)
    assert override == tmp_path / "cache" / "coll" / "pseudo_corr.bin"
    assert override.parent.is_dir()
