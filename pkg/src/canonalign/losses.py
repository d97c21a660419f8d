"""Training objective: keypoint contrast, warp equivariance, smoothness,
reconstruction, and part compactness, plus their weighted combination.

All terms accept torch tensors of any float dtype (the gradient checks run in
float64) and are non-negative. Coordinate maps are channels-first (2, H, W)
or batched (B, 2, H, W) with values in [0, 1]^2.
"""

from __future__ import annotations

import warnings

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import bilinear_sample, bilinear_sample_points, identity_coords, warp_map


class NonFiniteLossError(RuntimeError):
    """A loss term evaluated to NaN/inf; carries the term name."""


class PerceptualWeightsError(RuntimeError):
    pass


LOSS_NAMES = ("kp", "equi", "tv", "recon", "parts")


def pixels_to_unit(points: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """(N, 2) pixel coordinates -> normalized (u, v) coordinates."""
    sx = max(width - 1, 1)
    sy = max(height - 1, 1)
    return torch.stack([points[:, 0] / sx, points[:, 1] / sy], dim=1)


def loss_kp(coords_a: torch.Tensor, coords_b: torch.Tensor,
            points_a: torch.Tensor, points_b: torch.Tensor,
            tau: float = 1.0, symmetrize: bool = True):
    """Contrastive alignment of matched pixel pairs in canonical space.

    coords_*: (2, H, W) coordinate maps; points_*: (K, 2) matched pixel
    locations. For each anchor i the positive is its matched counterpart and
    the negatives are the other K-1 matches of the same pair. Returns
    (loss, skipped); K = 0 yields an exact zero with skipped=True.
    """
    if points_a.shape[0] == 0:
        return coords_a.sum() * 0.0, True
    h, w = coords_a.shape[-2:]
    ca = bilinear_sample_points(coords_a, pixels_to_unit(points_a, h, w).to(coords_a.dtype))
    hb, wb = coords_b.shape[-2:]
    cb = bilinear_sample_points(coords_b, pixels_to_unit(points_b, hb, wb).to(coords_b.dtype))
    # squared distances without a sqrt: cdist's gradient blows up at 0
    d2 = ((ca[:, None, :] - cb[None, :, :]) ** 2).sum(dim=-1)  # (K, K)
    logits = -d2 / tau
    loss = torch.logsumexp(logits, dim=1).sum() - logits.diagonal().sum()
    if symmetrize:
        loss_ba = torch.logsumexp(logits, dim=0).sum() - logits.diagonal().sum()
        loss = 0.5 * (loss + loss_ba)
    return loss, False


def equi_discrepancy(coords: torch.Tensor, coords_of_warped: torch.Tensor,
                     grids: torch.Tensor):
    """Mean per-pixel L1 gap between the resampled map and the map of the
    warped input, over pixels whose sample location is inside the unit square.

    coords, coords_of_warped: (B, 2, H, W); grids: (B, H, W, 2).
    """
    resampled, valid = warp_map(coords, grids.to(coords.dtype))
    diff = (resampled - coords_of_warped).abs().sum(dim=1, keepdim=True)
    denom = valid.sum()
    if denom == 0:
        warnings.warn("equivariance loss: empty valid mask, returning 0")
        return coords.sum() * 0.0, True
    return (diff * valid).sum() / denom, False


def loss_equi(net, image: torch.Tensor, transform):
    """Equivariance of the coordinate map under a synthetic warp.

    image: (3, H, W) or (B, 3, H, W); transform: a TpsTransform (or a list of
    one per batch element). Identity transforms bypass resampling entirely,
    so their contribution is exactly zero.
    """
    if image.dim() == 3:
        image = image.unsqueeze(0)
    transforms = transform if isinstance(transform, (list, tuple)) else [transform] * image.shape[0]
    h, w = image.shape[-2:]
    coords = net(image)
    ident = torch.from_numpy(identity_coords(h, w)).to(image.dtype)
    grids = torch.stack([
        ident if t.is_identity
        else torch.from_numpy(t.sample_grid(h, w).locations).to(image.dtype)
        for t in transforms])
    warped, _ = warp_map(image, grids)
    # identity slots keep the untouched input/map: no interpolation noise
    id_slots = torch.tensor([t.is_identity for t in transforms])
    if id_slots.any():
        warped = torch.where(id_slots[:, None, None, None], image, warped)
    coords_of_warped = net(warped)
    resampled, valid = warp_map(coords, grids.to(coords.dtype))
    if id_slots.any():
        resampled = torch.where(id_slots[:, None, None, None], coords, resampled)
    diff = (resampled - coords_of_warped).abs().sum(dim=1, keepdim=True)
    denom = valid.sum()
    if denom == 0:
        warnings.warn("equivariance loss: empty valid mask, returning 0")
        return coords.sum() * 0.0
    return (diff * valid).sum() / denom


def _huber(z: torch.Tensor, delta: float) -> torch.Tensor:
    az = z.abs()
    return torch.where(az <= delta, 0.5 * z * z, delta * (az - 0.5 * delta))


def loss_tv(coords: torch.Tensor, huber_delta: float = 1.0) -> torch.Tensor:
    """Huber total variation of the residual between the coordinate map and
    the identity mapping; mean over pixels and channels, so the weight is
    resolution-independent. Zero exactly for identity plus any constant.
    """
    if coords.dim() == 3:
        coords = coords.unsqueeze(0)
    h, w = coords.shape[-2:]
    ident = torch.from_numpy(identity_coords(h, w)).to(coords.dtype).permute(2, 0, 1)
    res = coords - ident.unsqueeze(0)
    dx = res[..., :, 1:] - res[..., :, :-1]
    dy = res[..., 1:, :] - res[..., :-1, :]
    out = coords.sum() * 0.0
    if dx.numel():
        out = out + _huber(dx, huber_delta).mean()
    if dy.numel():
        out = out + _huber(dy, huber_delta).mean()
    return out


def loss_recon(image: torch.Tensor, mask: torch.Tensor, grid: torch.Tensor,
               coords: torch.Tensor, perceptual, bce_eps: float = 1e-6) -> torch.Tensor:
    """Reconstruct the image and its foreground mask from the shared grid.

    image: (B, 3, H, W); mask: (B, H, W) in {0, 1}; grid: (4, H', W') with
    (r, g, b, alpha) channels; coords: (B, 2, H, W). The color reconstruction
    is scored by ``perceptual`` and the alpha channel by per-pixel binary
    cross entropy after clamping into (0, 1).
    """
    if image.dim() == 3:
        image, mask, coords = image.unsqueeze(0), mask.unsqueeze(0), coords.unsqueeze(0)
    sample_at = coords.permute(0, 2, 3, 1)
    recon = bilinear_sample(grid.unsqueeze(0).to(coords.dtype), sample_at)
    rgb = recon[:, :3].clamp(0.0, 1.0)
    alpha = recon[:, 3].clamp(bce_eps, 1.0 - bce_eps)
    m = mask.to(alpha.dtype)
    bce = -(m * torch.log(alpha) + (1.0 - m) * torch.log(1.0 - alpha)).mean()
    return perceptual(image.to(rgb.dtype), rgb) + bce


def loss_parts(coords: torch.Tensor, parts: torch.Tensor) -> torch.Tensor:
    """Average within-part variance of canonical coordinates.

    coords: (2, H, W) or (B, 2, H, W); parts: matching (S, H, W) or
    (B, S, H, W) one-hot masks. Each nonempty part contributes the mean
    squared distance of its pixels' coordinates to the part centroid; the
    result is the mean over nonempty parts (invariant under refining a part
    into identically-distributed halves). Empty parts contribute nothing.
    """
    if coords.dim() == 3:
        coords = coords.unsqueeze(0)
        parts = parts.unsqueeze(0)
    p = parts.to(coords.dtype)
    counts = p.sum(dim=(2, 3))  # (B, S)
    # centroid per part: (B, S, 2)
    sums = torch.einsum("bshw,bchw->bsc", p, coords)
    nonempty = counts > 0
    if not nonempty.any():
        return coords.sum() * 0.0
    safe = counts.clamp(min=1.0)
    centroids = sums / safe.unsqueeze(-1)
    d2 = ((coords.unsqueeze(1) - centroids[..., None, None]) ** 2).sum(dim=2)  # (B, S, H, W)
    per_part = (d2 * p).sum(dim=(2, 3)) / safe
    return per_part[nonempty].sum() / nonempty.sum()


def total_loss(terms: dict, config):
    """Weighted sum of loss terms; ``None`` marks a skipped term.

    Returns (total, breakdown) where breakdown maps term name to unweighted
    float (None when skipped). Raises NonFiniteLossError naming the first
    non-finite term.
    """
    weights = {
        "kp": config.lambda_kp,
        "equi": config.lambda_equi,
        "tv": config.lambda_tv,
        "recon": config.lambda_recon,
        "parts": config.lambda_parts,
    }
    total = None
    breakdown = {}
    for name in LOSS_NAMES:
        value = terms.get(name)
        if value is None:
            breakdown[name] = None
            continue
        if not torch.isfinite(value):
            raise NonFiniteLossError(f"loss term '{name}' is non-finite")
        breakdown[name] = float(value.detach())
        weighted = weights[name] * value
        total = weighted if total is None else total + weighted
    if total is None:
        total = torch.zeros(())
    return total, breakdown


# -- perceptual metrics ------------------------------------------------------


def fallback_perceptual(a: torch.Tensor, b: torch.Tensor, window: int = 7,
                        num_scales: int = 3) -> torch.Tensor:
    """Dependency-free multi-scale structural dissimilarity in [0, ~1].

    Local means/variances over a uniform window at each of up to
    ``num_scales`` dyadic scales; 0 for identical inputs. Differentiable.
    """
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    scores = []
    for scale in range(num_scales):
        win = min(window, a.shape[-2], a.shape[-1])
        mu_a = F.avg_pool2d(a, win, stride=1)
        mu_b = F.avg_pool2d(b, win, stride=1)
        var_a = F.avg_pool2d(a * a, win, stride=1) - mu_a * mu_a
        var_b = F.avg_pool2d(b * b, win, stride=1) - mu_b * mu_b
        cov = F.avg_pool2d(a * b, win, stride=1) - mu_a * mu_b
        ssim = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
            (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
        scores.append(ssim.mean())
        if min(a.shape[-2:]) < 2 * window or scale == num_scales - 1:
            break
        a = F.avg_pool2d(a, 2)
        b = F.avg_pool2d(b, 2)
    return 1.0 - torch.stack(scores).mean()


class LearnedPerceptual:
    """Patch-feature distance with pretrained convolutional weights.

    Expects a torch file holding ``convs.{i}.weight`` / ``convs.{i}.bias``
    3x3 filter banks plus a ``stage_weights`` vector; raises
    PerceptualWeightsError with a fallback hint when the file is missing.
    """

    def __init__(self, weights_path):
        import os
        if weights_path is None or not os.path.exists(str(weights_path)):
            raise PerceptualWeightsError(
                f"perceptual weights not found at {weights_path!r}; "
                "set objective.perceptual_metric='fallback' to run without them")
        state = torch.load(str(weights_path), map_location="cpu", weights_only=True)
        self.filters = []
        i = 0
        while f"convs.{i}.weight" in state:
            self.filters.append((state[f"convs.{i}.weight"], state[f"convs.{i}.bias"]))
            i += 1
        if not self.filters or "stage_weights" not in state:
            raise PerceptualWeightsError(f"malformed perceptual weights file {weights_path!r}")
        self.stage_weights = state["stage_weights"]

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.dim() == 3:
            a, b = a.unsqueeze(0), b.unsqueeze(0)
        total = 0.0
        for k, (w, bias) in enumerate(self.filters):
            a = F.relu(F.conv2d(a, w.to(a.dtype), bias.to(a.dtype), padding=1))
            b = F.relu(F.conv2d(b, w.to(b.dtype), bias.to(b.dtype), padding=1))
            fa = a / (a.norm(dim=1, keepdim=True) + 1e-8)
            fb = b / (b.norm(dim=1, keepdim=True) + 1e-8)
            total = total + self.stage_weights[k].to(a.dtype) * ((fa - fb) ** 2).mean()
            if min(a.shape[-2:]) >= 4:
                a = F.avg_pool2d(a, 2)
                b = F.avg_pool2d(b, 2)
        return total


def make_perceptual(config):
    """Resolve the configured perceptual metric to a callable."""
    if config.perceptual_metric == "learned":
        return LearnedPerceptual(config.perceptual_weights)
    return fallback_perceptual
