"""Warping primitives shared by training, reconstruction, and evaluation.

Coordinate conventions used everywhere in this package:

* pixel centers sit at integer coordinates ``(x, y)`` with ``x`` along width;
* normalized coordinates ``(u, v) in [0, 1]^2`` relate to pixels through
  ``u = x / (W - 1)``, ``v = y / (H - 1)`` (align-corners convention), so the
  four grid corners map exactly to the unit-square corners;
* a transform ``T`` acts as a backward sampling map: warping any map ``I``
  produces ``out(p) = I(T(p))``. Coordinate-valued maps are resampled the same
  way, values untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


def identity_coords(height: int, width: int, dtype=np.float64) -> np.ndarray:
    """(H, W, 2) grid of normalized (u, v) coordinates for each pixel."""
    u = np.linspace(0.0, 1.0, width, dtype=dtype) if width > 1 else np.zeros(1, dtype)
    v = np.linspace(0.0, 1.0, height, dtype=dtype) if height > 1 else np.zeros(1, dtype)
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log r, with U(0) = 0; written via r^2 to avoid the sqrt.
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = 0.5 * r2[nz] * np.log(r2[nz])
    return out


#: slack for the in-bounds predicate so float noise cannot flip pixels that
#: land exactly on the unit-square boundary
BOUNDARY_EPS = 1e-9


@dataclass
class SampleGrid:
    """Backward sampling locations plus their in-bounds predicate."""

    locations: np.ndarray  # (H, W, 2) normalized coordinates
    valid: np.ndarray      # (H, W) bool, locations inside [0,1]^2

    @classmethod
    def from_locations(cls, locations: np.ndarray) -> "SampleGrid":
        valid = np.all((locations >= -BOUNDARY_EPS) & (locations <= 1.0 + BOUNDARY_EPS), axis=-1)
        return cls(locations=locations, valid=valid)


class TpsTransform:
    """Thin-plate-spline warp on the unit square, optionally composed with an
    affine jitter (applied after the spline: ``T(q) = A(tps(q))``).

    The spline interpolates ``control_points[k] -> control_points[k] + offsets[k]``
    exactly. With all-zero offsets and no affine the transform is the identity
    map (short-circuited, no linear solve involved).
    """

    def __init__(self, control_points: np.ndarray, offsets: np.ndarray,
                 affine: np.ndarray | None = None):
        control_points = np.asarray(control_points, dtype=np.float64)
        offsets = np.asarray(offsets, dtype=np.float64)
        if control_points.shape != offsets.shape or control_points.shape[-1] != 2:
            raise ValueError("control_points and offsets must both be (..., 2) and equal shape")
        self.control_points = control_points.reshape(-1, 2)
        self.offsets = offsets.reshape(-1, 2)
        if affine is not None:
            affine = np.asarray(affine, dtype=np.float64)
            if affine.shape != (2, 3):
                raise ValueError("affine must be a 2x3 matrix")
            if np.allclose(affine, _IDENTITY_AFFINE, atol=0.0):
                affine = None
        self.affine = affine
        self._weights = None  # lazy (nontrivial only when offsets are nonzero)

    # -- construction -----------------------------------------------------

    @classmethod
    def identity(cls, grid_points: int = 5) -> "TpsTransform":
        cps = _control_grid(grid_points)
        return cls(cps, np.zeros_like(cps))

    @property
    def is_identity(self) -> bool:
        return not self.offsets.any() and self.affine is None

    def _solve(self):
        # Standard TPS fit: [[K, P], [P^T, 0]] [w; a] = [targets; 0].
        c = self.control_points
        n = c.shape[0]
        d2 = np.sum((c[:, None, :] - c[None, :, :]) ** 2, axis=-1)
        K = _tps_kernel(d2)
        P = np.concatenate([np.ones((n, 1)), c], axis=1)
        A = np.zeros((n + 3, n + 3))
        A[:n, :n] = K
        A[:n, n:] = P
        A[n:, :n] = P.T
        rhs = np.zeros((n + 3, 2))
        rhs[:n] = c + self.offsets
        self._weights = np.linalg.solve(A, rhs)

    # -- evaluation --------------------------------------------------------

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        """Map (..., 2) normalized points through the transform."""
        points = np.asarray(points, dtype=np.float64)
        if self.is_identity:
            return points.copy()
        flat = points.reshape(-1, 2)
        if not self.offsets.any():
            out = flat
        else:
            if self._weights is None:
                self._solve()
            w, a = self._weights[:-3], self._weights[-3:]
            d2 = np.sum((flat[:, None, :] - self.control_points[None, :, :]) ** 2, axis=-1)
            out = a[0] + flat @ a[1:] + _tps_kernel(d2) @ w
        if self.affine is not None:
            out = out @ self.affine[:, :2].T + self.affine[:, 2]
        return out.reshape(points.shape)

    def sample_grid(self, height: int, width: int) -> SampleGrid:
        """Backward sampling grid over every pixel of an H x W map."""
        coords = self.transform_points(identity_coords(height, width))
        return SampleGrid.from_locations(coords)

    # -- serialization -----------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "control_points": self.control_points.tolist(),
            "offsets": self.offsets.tolist(),
            "affine": None if self.affine is None else self.affine.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TpsTransform":
        affine = None if d.get("affine") is None else np.asarray(d["affine"])
        return cls(np.asarray(d["control_points"]), np.asarray(d["offsets"]), affine)


_IDENTITY_AFFINE = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def _control_grid(grid_points: int) -> np.ndarray:
    axis = np.linspace(0.0, 1.0, grid_points)
    gx, gy = np.meshgrid(axis, axis)
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def sample_tps(rng: np.random.Generator, strength: float, grid_points: int = 5,
               include_affine: bool = False, max_rotation_deg: float = 15.0,
               scale_range: tuple = (0.9, 1.1), max_translation: float = 0.1) -> TpsTransform:
    """Draw a random TPS warp with control offsets ~ U(-strength, strength)^2.

    ``include_affine`` composes a small random rotation/scale/translation about
    the grid center on top of the spline.
    """
    if strength <= 0:
        raise ValueError("strength must be > 0")
    cps = _control_grid(grid_points)
    offsets = rng.uniform(-strength, strength, size=cps.shape)
    affine = None
    if include_affine:
        theta = math.radians(rng.uniform(-max_rotation_deg, max_rotation_deg))
        scale = rng.uniform(scale_range[0], scale_range[1])
        tx, ty = rng.uniform(-max_translation, max_translation, size=2)
        c, s = math.cos(theta), math.sin(theta)
        rot = scale * np.array([[c, -s], [s, c]])
        # rotate/scale about (0.5, 0.5), then translate
        shift = np.array([0.5, 0.5]) - rot @ np.array([0.5, 0.5]) + np.array([tx, ty])
        affine = np.concatenate([rot, shift[:, None]], axis=1)
    return TpsTransform(cps, offsets, affine)


# -- differentiable sampling ----------------------------------------------


def bilinear_sample(grid: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Read ``grid`` at continuous normalized coordinates.

    grid: (C, H', W') or (B, C, H', W'); coords: (H, W, 2) or (B, H, W, 2)
    with (u, v) in [0, 1]^2; out-of-range coordinates clamp to the border.
    A coordinate u maps to grid column u * (W' - 1). Differentiable w.r.t.
    both grid values and coordinates.
    """
    if not torch.isfinite(coords).all():
        raise ValueError("bilinear_sample: non-finite coordinates (upstream divergence?)")
    squeeze = False
    if grid.dim() == 3:
        grid = grid.unsqueeze(0)
        squeeze = True
    if coords.dim() == 3:
        coords = coords.unsqueeze(0)
    if coords.shape[0] != grid.shape[0]:
        if grid.shape[0] == 1:
            grid = grid.expand(coords.shape[0], -1, -1, -1)
        elif coords.shape[0] == 1:
            coords = coords.expand(grid.shape[0], -1, -1, -1)
        else:
            raise ValueError(f"batch mismatch: grid {grid.shape[0]} vs coords {coords.shape[0]}")
    out = F.grid_sample(grid, coords * 2.0 - 1.0, mode="bilinear",
                        padding_mode="border", align_corners=True)
    return out.squeeze(0) if squeeze else out


def bilinear_sample_points(grid: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Read (C, H, W) ``grid`` at a list of (N, 2) normalized points -> (N, C)."""
    out = bilinear_sample(grid, points.reshape(1, -1, 2))
    return out.reshape(grid.shape[0], -1).T


def warp_map(tensor: torch.Tensor, grid: torch.Tensor) -> tuple:
    """Backward-warp a (B, C, H, W) map by a sampling grid of normalized coords.

    grid: (H, W, 2) or (B, H, W, 2). Returns (warped, valid) where valid is a
    (B, 1, H, W) float mask of in-bounds sample locations. Border pixels are
    replicated outside the grid. Differentiable w.r.t. ``tensor``.
    """
    if grid.dim() == 3:
        grid = grid.unsqueeze(0).expand(tensor.shape[0], -1, -1, -1)
    warped = bilinear_sample(tensor, grid)
    with torch.no_grad():
        valid = ((grid >= -BOUNDARY_EPS) & (grid <= 1.0 + BOUNDARY_EPS)).all(dim=-1, keepdim=True)
        valid = valid.permute(0, 3, 1, 2).to(tensor.dtype)
    return warped, valid


def apply_transform(transform: TpsTransform, image: np.ndarray) -> tuple:
    """Warp an (H, W) or (H, W, C) array by ``transform``; returns (warped, valid).

    Convenience wrapper over the torch sampling path; the output at pixel p is
    the bilinear read of ``image`` at transform(p), border-replicated, and
    valid marks pixels whose sampling location lies inside the unit square.
    """
    image = np.asarray(image)
    if transform.is_identity:
        return image.astype(np.float32, copy=True), np.ones(image.shape[:2], dtype=bool)
    grid = transform.sample_grid(image.shape[0], image.shape[1])
    chans = image[..., None] if image.ndim == 2 else image
    t = torch.from_numpy(np.ascontiguousarray(chans.transpose(2, 0, 1))[None].astype(np.float32))
    warped, _ = warp_map(t, torch.from_numpy(grid.locations).float())
    out = warped[0].numpy().transpose(1, 2, 0)
    if image.ndim == 2:
        out = out[..., 0]
    return out, grid.valid


# -- forward splatting ------------------------------------------------------


def splat_accumulate(targets: np.ndarray, colors: np.ndarray, shape: tuple) -> tuple:
    """Average colors landing on each target pixel of an (H, W) canvas.

    targets: (N, 2) pixel coordinates (x, y), rounded to nearest integer,
    must land in bounds. colors: (N, C). Returns (image (H, W, C), counts (H, W));
    pixels nothing lands on stay zero with count 0.
    """
    height, width = shape
    targets = np.asarray(targets, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    if targets.ndim != 2 or targets.shape[1] != 2:
        raise ValueError("targets must be (N, 2)")
    if colors.ndim != 2 or colors.shape[0] != targets.shape[0]:
        raise ValueError("colors must be (N, C) matching targets")
    x = np.rint(targets[:, 0]).astype(np.int64)
    y = np.rint(targets[:, 1]).astype(np.int64)
    if targets.size and (x.min() < 0 or x.max() >= width or y.min() < 0 or y.max() >= height):
        raise ValueError("splat target outside canvas bounds")
    image = np.zeros((height, width, colors.shape[1]), dtype=np.float64)
    counts = np.zeros((height, width), dtype=np.int64)
    np.add.at(image, (y, x), colors)
    np.add.at(counts, (y, x), 1)
    hit = counts > 0
    image[hit] /= counts[hit][:, None]
    return image.astype(np.float32), counts
