"""Alignment network and the shared learnable canonical grid.

The network is a small fully convolutional encoder-decoder (four maxpool
downscaling stages, four bilinear-upsample stages with skip concatenation,
double 3x3 convs with batch norm throughout) mapping an RGB image to a
per-pixel (u, v) coordinate in the unit square. The grid is a learnable
(4, S, S) array of (r, g, b, alpha) values shared by the whole collection.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import bilinear_sample


class DoubleConv(nn.Module):
    def __init__(self, in_c: int, out_c: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_c, out_c, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_c),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_c, out_c, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_c),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class Down(nn.Module):
    def __init__(self, in_c: int, out_c: int):
        super().__init__()
        self.block = nn.Sequential(nn.MaxPool2d(2), DoubleConv(in_c, out_c))

    def forward(self, x):
        return self.block(x)


class Up(nn.Module):
    def __init__(self, in_c: int, out_c: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=True)
        self.conv = DoubleConv(in_c, out_c)

    def forward(self, x, skip):
        return self.conv(torch.cat([self.up(x), skip], dim=1))


class AlignmentNetwork(nn.Module):
    """Image (B, 3, H, W) -> coordinate map (B, 2, H, W) in [0, 1]^2.

    Fully convolutional; H and W must be divisible by 16 (four pooling
    stages). The output head is zero-initialized so the initial map is the
    constant (0.5, 0.5), i.e. the mean of the identity mapping.
    """

    def __init__(self, base_channels: int = 32):
        super().__init__()
        c = [base_channels * (2 ** k) for k in range(5)]
        self.inc = DoubleConv(3, c[0])
        self.down1 = Down(c[0], c[1])
        self.down2 = Down(c[1], c[2])
        self.down3 = Down(c[2], c[3])
        self.down4 = Down(c[3], c[4])
        self.up1 = Up(c[4] + c[3], c[2])
        self.up2 = Up(c[2] + c[2], c[1])
        self.up3 = Up(c[1] + c[1], c[0])
        self.up4 = Up(c[0] + c[0], c[0])
        self.head = nn.Conv2d(c[0], 2, kernel_size=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(
                f"input dims {h}x{w} not divisible by 16; pad to "
                f"{-(-h // 16) * 16}x{-(-w // 16) * 16}")
        x0 = self.inc(x)
        x1 = self.down1(x0)
        x2 = self.down2(x1)
        x3 = self.down3(x2)
        x4 = self.down4(x3)
        y = self.up1(x4, x3)
        y = self.up2(y, x2)
        y = self.up3(y, x1)
        y = self.up4(y, x0)
        return torch.sigmoid(self.head(y))


class CanonicalGrid(nn.Module):
    """Learnable (4, size, size) grid of (r, g, b, alpha) values.

    Values are stored directly as colors/probabilities; ``sample`` clamps
    them into range on read and ``project_`` clamps the parameter in place
    after an optimizer step so saturated cells stay recoverable.
    """

    def __init__(self, size: int, init_rgb: torch.Tensor | None = None, init_alpha: float = 0.5):
        super().__init__()
        data = torch.full((4, size, size), 0.5)
        if init_rgb is not None:
            if init_rgb.shape != (3, size, size):
                raise ValueError(f"init_rgb must be (3, {size}, {size})")
            data[:3] = init_rgb
        data[3] = init_alpha
        self.grid = nn.Parameter(data)

    @property
    def size(self) -> int:
        return self.grid.shape[-1]

    def sample(self, coords: torch.Tensor) -> torch.Tensor:
        """Bilinear read at (B, H, W, 2) or (H, W, 2) normalized coordinates."""
        return bilinear_sample(self.grid.to(coords.dtype), coords)

    @torch.no_grad()
    def project_(self):
        self.grid.clamp_(0.0, 1.0)

    def rgb_image(self) -> np.ndarray:
        return self.grid[:3].detach().clamp(0, 1).permute(1, 2, 0).numpy()

    def alpha_image(self) -> np.ndarray:
        return self.grid[3].detach().clamp(0, 1).numpy()


def init_model(seed: int, image_size: int, grid_size: int = 256,
               collection_images: np.ndarray | None = None,
               base_channels: int = 32):
    """Build a fresh (network, grid) pair.

    The grid's RGB starts at the pixelwise mean of the collection resized to
    grid_size (0.5 gray if no images are given) and alpha at 0.5. Seeding is
    via the global torch RNG for the conv initializers.
    """
    if image_size % 16:
        raise ValueError("image_size must be divisible by 16")
    torch.manual_seed(seed)
    net = AlignmentNetwork(base_channels=base_channels)
    init_rgb = None
    if collection_images is not None:
        mean_img = np.asarray(collection_images, dtype=np.float32).mean(axis=0)  # (H, W, 3)
        t = torch.from_numpy(mean_img.transpose(2, 0, 1))[None]
        init_rgb = F.interpolate(t, size=(grid_size, grid_size), mode="bilinear",
                                 align_corners=True)[0]
    grid = CanonicalGrid(grid_size, init_rgb=init_rgb)
    return net, grid


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def coordinate_maps(net: AlignmentNetwork, images: np.ndarray,
                    batch_size: int = 16) -> np.ndarray:
    """Run the network in eval mode over (N, H, W, 3) images -> (N, H, W, 2)."""
    was_training = net.training
    net.eval()
    chunks = []
    with torch.no_grad():
        imgs = np.asarray(images, dtype=np.float32)
        for i in range(0, len(imgs), batch_size):
            t = torch.from_numpy(imgs[i:i + batch_size].transpose(0, 3, 1, 2))
            chunks.append(net(t).permute(0, 2, 3, 1).numpy())
    if was_training:
        net.train()
    return np.concatenate(chunks, axis=0)
