"""Shared fixtures and the finite-difference gradient oracle."""

from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from canonalign.collection import FeatureMap


def fd_gradient(loss_fn, tensor: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite differences of a scalar function w.r.t. every element.

    Only forward evaluations are used, so this is independent of autograd.
    """
    grad = torch.zeros_like(tensor)
    with torch.no_grad():
        # index by multi-index: reshape(-1) silently copies when the tensor
        # is non-contiguous and the perturbation would be lost
        for idx in np.ndindex(tuple(tensor.shape)):
            orig = tensor.data[idx].item()
            tensor.data[idx] = orig + eps
            hi = float(loss_fn())
            tensor.data[idx] = orig - eps
            lo = float(loss_fn())
            tensor.data[idx] = orig
            grad[idx] = (hi - lo) / (2.0 * eps)
    return grad


def assert_gradients_match(loss_fn, tensors, rtol: float = 1e-4, eps: float = 1e-6):
    """Autograd gradients of ``loss_fn`` must match central differences."""
    for t in tensors:
        t.requires_grad_(True)
        t.grad = None
    loss = loss_fn()
    loss.backward()
    for t in tensors:
        analytic = t.grad.detach().clone()
        numeric = fd_gradient(loss_fn, t, eps=eps)
        scale = max(float(analytic.abs().max()), float(numeric.abs().max()), 1e-8)
        err = float((analytic - numeric).abs().max()) / scale
        assert err < rtol, f"gradient mismatch: relative error {err:.3e}"
        t.requires_grad_(False)
        t.grad = None


def unit_features(rng: np.random.Generator, h: int, w: int, d: int,
                  stride: float = 8.0, offset=(3.5, 3.5)) -> FeatureMap:
    grid = rng.normal(size=(h, w, d))
    grid /= np.linalg.norm(grid, axis=-1, keepdims=True)
    return FeatureMap(grid=grid.astype(np.float32), stride=stride, offset=offset)


def write_min_collection(root, images, masks=None, keypoints=None, bboxes=None,
                         parts=None):
    """Write arrays into the on-disk collection layout (PNG + JSON files)."""
    from PIL import Image

    root.mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(exist_ok=True)
    names = [f"im{i:02d}" for i in range(len(images))]
    for name, img in zip(names, images):
        arr = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
        Image.fromarray(arr).save(root / "images" / f"{name}.png")
    if masks is not None:
        (root / "masks").mkdir(exist_ok=True)
        for name, m in zip(names, masks):
            Image.fromarray((m * 255).astype(np.uint8)).save(root / "masks" / f"{name}.png")
    if parts is not None:
        (root / "parts").mkdir(exist_ok=True)
        palette = sum(([11 * (i + 1) % 256, 31 * (i + 1) % 256, 71 * (i + 1) % 256]
                       for i in range(256)), [])
        for name, p in zip(names, parts):
            img = Image.fromarray(p.astype(np.uint8), mode="P")
            img.putpalette(palette)
            img.save(root / "parts" / f"{name}.png")
    if keypoints is not None:
        (root / "keypoints.json").write_text(json.dumps(
            {name: kps for name, kps in zip(names, keypoints)}))
    if bboxes is not None:
        (root / "bboxes.json").write_text(json.dumps(
            {name: bb for name, bb in zip(names, bboxes)}))
    return names


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(0))
