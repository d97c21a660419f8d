import numpy as np
import pytest
import torch

from canonalign.losses import loss_kp, loss_recon, loss_tv, fallback_perceptual
from canonalign.model import (AlignmentNetwork, CanonicalGrid, coordinate_maps,
                              count_parameters, init_model)


def table_implied_parameter_count() -> int:
    """Parameter count implied by the published block table: double 3x3 convs
    (no conv bias, batch norm affine) over the listed channel pairs."""
    def double_conv(a, b):
        return 9 * a * b + 9 * b * b + 4 * b

    blocks = [(3, 32), (32, 64), (64, 128), (128, 256), (256, 512),   # input + down
              (512, 128), (256, 64), (128, 32), (64, 32),             # up
              (32, 4)]                                                # output head
    return sum(double_conv(a, b) for a, b in blocks)


class TestAlignmentNetwork:
    def test_output_shape_and_range(self):
        net = AlignmentNetwork(base_channels=8)
        x = torch.rand(2, 3, 32, 48)
        out = net(x)
        assert out.shape == (2, 2, 32, 48)
        assert out.min() >= 0 and out.max() <= 1
        assert torch.isfinite(out).all()

    def test_eval_mode_deterministic_for_duplicates(self):
        net = AlignmentNetwork(base_channels=8)
        net.eval()
        img = torch.rand(1, 3, 32, 32)
        batch = torch.cat([img, img])
        with torch.no_grad():
            out = net(batch)
        assert torch.equal(out[0], out[1])

    def test_output_resolution_matches_input(self):
        net = AlignmentNetwork(base_channels=8)
        out = net(torch.rand(1, 3, 128, 128))
        assert out.shape == (1, 2, 128, 128)

    def test_indivisible_dims_fatal_with_hint(self):
        net = AlignmentNetwork(base_channels=8)
        with pytest.raises(ValueError, match="pad to 48x32"):
            net(torch.rand(1, 3, 33, 32))

    def test_parameter_count_within_10pct_of_table(self):
        net = AlignmentNetwork()  # default width
        ref = table_implied_parameter_count()
        ratio = count_parameters(net) / ref
        assert abs(ratio - 1.0) <= 0.10, f"parameter ratio {ratio:.4f}"

    def test_initial_map_near_identity_mean(self):
        torch.manual_seed(0)
        net = AlignmentNetwork(base_channels=8)
        net.eval()
        with torch.no_grad():
            out = net(torch.rand(1, 3, 32, 32))
        assert torch.allclose(out, torch.full_like(out, 0.5))

    def test_initial_tv_loss_small(self, rng):
        net, _ = init_model(seed=0, image_size=32, grid_size=16, base_channels=8)
        net.eval()
        img = torch.from_numpy(rng.uniform(size=(1, 3, 32, 32)).astype(np.float32))
        with torch.no_grad():
            coords = net(img)
        assert float(loss_tv(coords)) < 1e-2

    def test_every_parameter_receives_gradient(self, rng):
        net, grid = init_model(seed=1, image_size=32, grid_size=16, base_channels=8)
        img = torch.from_numpy(rng.uniform(size=(2, 3, 32, 32)).astype(np.float32))
        mask = torch.ones(2, 32, 32)
        coords = net(img)
        pts = torch.tensor([[4.0, 5.0], [10.0, 7.0], [20.0, 22.0]])
        kp, _ = loss_kp(coords[0], coords[1], pts, pts)
        recon = loss_recon(img, mask, grid.grid, coords, fallback_perceptual)
        (kp + recon + loss_tv(coords)).backward()
        for name, p in list(net.named_parameters()) + [("grid", grid.grid)]:
            assert p.grad is not None, name
            assert float(p.grad.abs().sum()) > 0, f"zero gradient for {name}"


class TestCanonicalGrid:
    def test_init_alpha_uniform_half(self):
        grid = CanonicalGrid(16)
        assert torch.allclose(grid.grid[3], torch.full((16, 16), 0.5))

    def test_init_rgb_matches_mean_image_same_size(self, rng):
        images = rng.uniform(size=(5, 16, 16, 3)).astype(np.float32)
        _, grid = init_model(seed=0, image_size=16, grid_size=16,
                             collection_images=images, base_channels=8)
        expected = images.mean(axis=0).transpose(2, 0, 1)
        assert np.allclose(grid.grid[:3].detach().numpy(), expected, atol=1e-6)

    def test_init_rgb_constant_mean_any_size(self):
        images = np.full((3, 16, 16, 3), 0.37, dtype=np.float32)
        _, grid = init_model(seed=0, image_size=16, grid_size=64,
                             collection_images=images, base_channels=8)
        assert np.allclose(grid.grid[:3].detach().numpy(), 0.37, atol=1e-6)

    def test_projection_clamps(self):
        grid = CanonicalGrid(4)
        with torch.no_grad():
            grid.grid += 3.0
        grid.project_()
        assert grid.grid.max() <= 1.0 and grid.grid.min() >= 0.0

    def test_sample_shapes(self, rng):
        grid = CanonicalGrid(8)
        coords = torch.from_numpy(rng.uniform(size=(4, 4, 2)).astype(np.float32))
        out = grid.sample(coords)
        assert out.shape == (4, 4, 4)


def test_coordinate_maps_eval_batching(rng):
    net, _ = init_model(seed=2, image_size=32, grid_size=16, base_channels=8)
    images = rng.uniform(size=(5, 32, 32, 3)).astype(np.float32)
    maps = coordinate_maps(net, images, batch_size=2)
    assert maps.shape == (5, 32, 32, 2)
    again = coordinate_maps(net, images, batch_size=5)
    assert np.array_equal(maps, again)
