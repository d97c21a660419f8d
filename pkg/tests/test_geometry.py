import json

import numpy as np
import pytest
import torch

from canonalign.geometry import (SampleGrid, TpsTransform, apply_transform,
                                 bilinear_sample, identity_coords, sample_tps,
                                 splat_accumulate, warp_map)
from conftest import assert_gradients_match


class TestTpsTransform:
    def test_zero_offsets_is_identity(self):
        t = TpsTransform.identity()
        assert t.is_identity
        pts = np.array([[0.2, 0.7], [0.0, 1.0]])
        assert np.array_equal(t.transform_points(pts), pts)

    def test_interpolation_property_at_control_points(self, rng):
        t = sample_tps(rng, strength=0.1)
        out = t.transform_points(t.control_points)
        expected = t.control_points + t.offsets
        assert np.abs(out - expected).max() < 1e-6

    def test_fixed_seed_reproducible(self):
        t1 = sample_tps(np.random.Generator(np.random.PCG64(0)), 0.1)
        t2 = sample_tps(np.random.Generator(np.random.PCG64(0)), 0.1)
        assert np.array_equal(t1.offsets, t2.offsets)

    def test_strength_must_be_positive(self, rng):
        with pytest.raises(ValueError):
            sample_tps(rng, strength=0.0)

    def test_json_round_trip(self, rng):
        t = sample_tps(rng, 0.1, include_affine=True)
        t2 = TpsTransform.from_json_dict(json.loads(json.dumps(t.to_json_dict())))
        pts = rng.uniform(size=(13, 2))
        assert np.allclose(t.transform_points(pts), t2.transform_points(pts), atol=1e-12)

    def test_displacement_statistics_match_offset_draws(self):
        # Monte-Carlo: the dense-field displacement magnitude tracks the
        # control-offset magnitude of the independent uniform sampler.
        strength = 0.1
        rng = np.random.Generator(np.random.PCG64(5))
        oracle = np.random.Generator(np.random.PCG64(99))
        field_mags, offset_mags = [], []
        grid = identity_coords(24, 24).reshape(-1, 2)
        for _ in range(60):
            t = sample_tps(rng, strength)
            disp = t.transform_points(grid) - grid
            field_mags.append(np.linalg.norm(disp, axis=1).mean())
            ref = oracle.uniform(-strength, strength, size=(25, 2))
            offset_mags.append(np.linalg.norm(ref, axis=1).mean())
        field_mean = np.mean(field_mags)
        oracle_mean = np.mean(offset_mags)
        assert 0.7 * oracle_mean < field_mean < 1.3 * oracle_mean

    def test_affine_jitter_bounds(self, rng):
        for _ in range(20):
            t = sample_tps(rng, 0.05, include_affine=True)
            assert t.affine is not None
            lin = t.affine[:, :2]
            scale = np.sqrt(abs(np.linalg.det(lin)))
            assert 0.9 - 1e-9 <= scale <= 1.1 + 1e-9


class TestApplyTransform:
    def test_identity_returns_input(self, rng):
        img = rng.uniform(size=(6, 5, 3)).astype(np.float32)
        out, valid = apply_transform(TpsTransform.identity(), img)
        assert np.array_equal(out, img)
        assert valid.all()

    def test_constant_map_stays_constant(self, rng):
        img = np.full((8, 8), 0.37, dtype=np.float32)
        t = sample_tps(rng, 0.1)
        out, valid = apply_transform(t, img)
        assert np.allclose(out[valid], 0.37, atol=1e-6)

    def test_translation_hand_grid(self):
        # backward map u -> u + 1/3 on a 4-wide image: content shifts one
        # pixel left, the last column samples outside and is invalid
        cps = TpsTransform.identity().control_points
        t = TpsTransform(cps, np.tile([1.0 / 3.0, 0.0], (cps.shape[0], 1)))
        img = np.arange(16, dtype=np.float32).reshape(4, 4)
        out, valid = apply_transform(t, img)
        assert np.allclose(out[:, :3], img[:, 1:], atol=1e-5)
        expected_valid = np.ones((4, 4), dtype=bool)
        expected_valid[:, 3] = False
        assert np.array_equal(valid, expected_valid)

    def test_compose_with_negated_offsets_near_identity(self, rng):
        # small-strength warps are approximately invertible on the interior
        strength = 0.02
        offsets = rng.uniform(-strength, strength, size=(25, 2))
        cps = TpsTransform.identity().control_points
        fwd = TpsTransform(cps, offsets)
        bwd = TpsTransform(cps, -offsets)
        img = identity_coords(16, 16)[..., 0].astype(np.float32)  # linear ramp
        once, _ = apply_transform(fwd, img)
        twice, _ = apply_transform(bwd, once)
        interior = np.s_[3:-3, 3:-3]
        assert np.abs(twice[interior] - img[interior]).max() < 0.02

    def test_sample_grid_valid_matches_locations(self, rng):
        t = sample_tps(rng, 0.3)
        sg = t.sample_grid(9, 7)
        assert isinstance(sg, SampleGrid)
        inside = np.all((sg.locations >= 0) & (sg.locations <= 1), axis=-1)
        assert np.array_equal(sg.valid, inside)


class TestBilinearSample:
    def test_identity_coords_reproduce_grid(self, rng):
        g = torch.from_numpy(rng.uniform(size=(3, 5, 5)).astype(np.float32))
        coords = torch.from_numpy(identity_coords(5, 5).astype(np.float32))
        out = bilinear_sample(g, coords)
        assert torch.allclose(out, g, atol=1e-6)

    def test_constant_grid_any_coords(self, rng):
        g = torch.full((4, 6, 6), 0.5)
        g[3] = 1.0
        coords = torch.from_numpy(rng.uniform(-0.5, 1.5, size=(7, 7, 2)).astype(np.float32))
        out = bilinear_sample(g, coords)
        assert torch.allclose(out[:3], torch.full((3, 7, 7), 0.5))
        assert torch.allclose(out[3], torch.ones(7, 7))

    def test_center_of_2x2(self):
        g = torch.tensor([[[0.0, 1.0], [2.0, 3.0]]])
        coords = torch.tensor([[[0.5, 0.5]]])
        out = bilinear_sample(g, coords)
        assert float(out) == pytest.approx(1.5)

    def test_out_of_range_clamps_to_border(self):
        g = torch.tensor([[[0.0, 1.0], [2.0, 3.0]]])
        coords = torch.tensor([[[-1.0, -1.0], [2.0, 2.0]]])
        out = bilinear_sample(g, coords)
        assert out[0, 0, 0].item() == 0.0
        assert out[0, 0, 1].item() == 3.0

    def test_non_finite_coordinates_fatal(self):
        g = torch.zeros(1, 4, 4)
        coords = torch.full((2, 2, 2), float("nan"))
        with pytest.raises(ValueError, match="non-finite"):
            bilinear_sample(g, coords)

    @pytest.mark.parametrize("trial", range(3))
    def test_gradients_match_finite_differences(self, trial):
        rng = np.random.Generator(np.random.PCG64(trial))
        g = torch.from_numpy(rng.uniform(size=(2, 4, 4)))
        # keep coordinates strictly inside cells: bilinear has kinks at nodes
        cells = rng.integers(0, 3, size=(4, 4, 2))
        frac = rng.uniform(0.2, 0.8, size=(4, 4, 2))
        coords = torch.from_numpy((cells + frac) / 3.0)
        w = torch.from_numpy(rng.normal(size=(2, 4, 4)))  # random projection

        def loss():
            return (bilinear_sample(g, coords) * w).sum()

        assert_gradients_match(loss, [g, coords])


class TestWarpMap:
    def test_valid_mask_marks_outside(self):
        img = torch.ones(1, 1, 3, 3)
        grid = torch.from_numpy(identity_coords(3, 3).astype(np.float32)).unsqueeze(0)
        grid = grid + 0.6
        _, valid = warp_map(img, grid)
        assert valid.sum() < 9


class TestSplatAccumulate:
    def test_single_source_pixel(self):
        img, counts = splat_accumulate(np.array([[2.0, 1.0]]), np.array([[0.3, 0.6, 0.9]]), (4, 4))
        assert counts[1, 2] == 1 and counts.sum() == 1
        assert np.allclose(img[1, 2], [0.3, 0.6, 0.9])
        assert np.allclose(img[0, 0], 0)

    def test_collision_averages(self):
        targets = np.array([[1.0, 1.0], [1.0, 1.0]])
        colors = np.array([[0.0], [1.0]])
        img, counts = splat_accumulate(targets, colors, (3, 3))
        assert counts[1, 1] == 2
        assert img[1, 1, 0] == pytest.approx(0.5)

    def test_identity_permutation_reproduces_image(self, rng):
        img = rng.uniform(size=(5, 6, 3)).astype(np.float32)
        ys, xs = np.mgrid[0:5, 0:6]
        targets = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        colors = img.reshape(-1, 3)
        out, counts = splat_accumulate(targets, colors, (5, 6))
        assert np.allclose(out, img, atol=1e-6)
        assert (counts == 1).all()

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError):
            splat_accumulate(np.array([[5.0, 0.0]]), np.array([[1.0]]), (4, 4))
