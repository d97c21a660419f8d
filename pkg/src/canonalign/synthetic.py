"""Synthetic collections with exact dense ground truth.

Every image is a sampled TPS warp of one textured template (plus photometric
jitter and a replaced background), so the template coordinate of any pixel is
known analytically. The generator writes the standard collection layout plus
``gt_flows/*.bin`` (per-pixel template coordinates) and ``meta.json`` (exact
transform parameters), which lets tests and the evaluation oracle round-trip
through the real loaders.

Synthetic "feature maps" are warps of one fixed random unit-vector field, so
mutual nearest neighbors recover near-ground-truth matches; a configurable
fraction of cells is replaced with fresh random vectors to inject match noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .collection import FeatureMap, write_feature_map
from .geometry import TpsTransform, identity_coords, sample_tps

GT_DIR = "gt_flows"


@dataclass
class SyntheticCollection:
    images: np.ndarray          # (N, S, S, 3) float32
    masks: np.ndarray           # (N, S, S) bool
    keypoints: list             # per image {id: (x, y)} pixel coords
    bboxes: list                # per image (x, y, w, h)
    transforms: list            # per image TpsTransform (image px -> template coords)
    gt_maps: np.ndarray         # (N, S, S, 2) float32 template coords per pixel
    features: list              # per image FeatureMap
    template: np.ndarray        # (S, S, 3) float32
    template_mask: np.ndarray   # (S, S) bool
    template_keypoints: np.ndarray  # (M, 2) normalized template coords
    meta: dict

    def __len__(self):
        return self.images.shape[0]

    def save(self, out_dir, force: bool = False) -> Path:
        """Write the collection-io layout plus ground truth files."""
        out = Path(out_dir)
        if out.exists() and any(out.iterdir()):
            if not force:
                raise FileExistsError(f"output directory {out} is not empty (use force)")
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(exist_ok=True)
        (out / GT_DIR).mkdir(exist_ok=True)
        names = [f"img_{i:03d}" for i in range(len(self))]
        for i, name in enumerate(names):
            _save_png(out / "images" / f"{name}.png",
                      (self.images[i] * 255).round().astype(np.uint8))
            _save_png(out / "masks" / f"{name}.png",
                      (self.masks[i] * 255).astype(np.uint8))
            gt = np.ascontiguousarray(self.gt_maps[i], dtype="<f4")
            (out / GT_DIR / f"{name}.bin").write_bytes(gt.tobytes())
            (out / GT_DIR / f"{name}.json").write_text(json.dumps(
                {"shape": list(gt.shape), "dtype": "float32"}) + "\n")
            write_feature_map(out / "features", name, self.features[i].grid,
                              self.features[i].stride, self.features[i].offset)
        kp_json = {
            name: [{"id": int(k), "x": float(x), "y": float(y), "visible": True}
                   for k, (x, y) in sorted(self.keypoints[i].items())]
            for i, name in enumerate(names)}
        (out / "keypoints.json").write_text(json.dumps(kp_json, sort_keys=True, indent=1) + "\n")
        bbox_json = {name: {"x": b[0], "y": b[1], "w": b[2], "h": b[3]}
                     for name, b in zip(names, self.bboxes)}
        (out / "bboxes.json").write_text(json.dumps(bbox_json, sort_keys=True, indent=1) + "\n")
        meta = dict(self.meta)
        meta["transforms"] = [t.to_json_dict() for t in self.transforms]
        meta["template_keypoints"] = self.template_keypoints.tolist()
        (out / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
        if meta.get("parts"):
            self._save_parts(out, names)
        return out

    def _save_parts(self, out: Path, names):
        (out / "parts").mkdir(exist_ok=True)
        for i, name in enumerate(names):
            part_map = make_part_map(self.gt_maps[i], self.masks[i],
                                     self.meta["parts_grid"])
            img = Image.fromarray(part_map.astype(np.uint8), mode="P")
            img.putpalette(_PART_PALETTE)
            img.save(out / "parts" / f"{name}.png")


def _save_png(path: Path, array: np.ndarray):
    Image.fromarray(array).save(path)


_PART_PALETTE = sum(([37 * (i + 1) % 256, 91 * (i + 1) % 256, 173 * (i + 1) % 256]
                     for i in range(256)), [])


def make_part_map(gt_map: np.ndarray, mask: np.ndarray, grid: tuple) -> np.ndarray:
    """Quantize template coordinates into a (gx, gy) grid of part ids (1-based,
    0 = background)."""
    gx, gy = grid
    u = np.clip(gt_map[..., 0], 0, 1 - 1e-9)
    v = np.clip(gt_map[..., 1], 0, 1 - 1e-9)
    ids = (np.floor(v * gy) * gx + np.floor(u * gx)).astype(np.int64) + 1
    ids[~mask] = 0
    return ids


def default_template(size: int, rng: np.random.Generator):
    """Textured blob on a neutral ground: low-frequency color field with a
    few high-contrast discs, inside a superellipse mask."""
    import torch
    import torch.nn.functional as F

    low = rng.normal(size=(3, 6, 6))
    t = torch.from_numpy(low[None]).float()
    field = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=True)[0].numpy()
    field = (field - field.min()) / (np.ptp(field) + 1e-9)
    img = 0.2 + 0.6 * field.transpose(1, 2, 0)

    yy, xx = np.mgrid[0:size, 0:size]
    cx = cy = (size - 1) / 2
    a = b = 0.44 * size
    mask = (np.abs((xx - cx) / a) ** 2.5 + np.abs((yy - cy) / b) ** 2.5) <= 1.0

    for _ in range(8):
        px, py = rng.uniform(0.25, 0.75, size=2) * size
        radius = rng.uniform(0.04, 0.10) * size
        color = rng.uniform(0.05, 0.95, size=3)
        disc = (xx - px) ** 2 + (yy - py) ** 2 <= radius ** 2
        img[disc] = color
    img[~mask] = 0.5
    return img.astype(np.float32), mask


def _erode(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.copy()
    padded = np.pad(mask, radius, constant_values=False)
    h, w = mask.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            out &= padded[radius + dy:radius + dy + h, radius + dx:radius + dx + w]
    return out


def invert_transform(transform: TpsTransform, targets: np.ndarray,
                     coarse: int = 48, iters: int = 8) -> np.ndarray:
    """Solve T(q) = target for each (M, 2) normalized target: coarse grid
    search then Gauss-Newton with a finite-difference Jacobian."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if transform.is_identity:
        return targets.copy()
    grid = identity_coords(coarse, coarse).reshape(-1, 2)
    vals = transform.transform_points(grid)
    out = np.empty_like(targets)
    eps = 1e-5
    for m, tgt in enumerate(targets):
        q = grid[np.argmin(((vals - tgt) ** 2).sum(axis=1))].copy()
        for _ in range(iters):
            f = transform.transform_points(q) - tgt
            jx = (transform.transform_points(q + [eps, 0]) - transform.transform_points(q - [eps, 0])) / (2 * eps)
            jy = (transform.transform_points(q + [0, eps]) - transform.transform_points(q - [0, eps])) / (2 * eps)
            jac = np.stack([jx, jy], axis=1)
            try:
                step = np.linalg.solve(jac, f)
            except np.linalg.LinAlgError:
                break
            q = q - step
            if np.abs(step).max() < 1e-12:
                break
        out[m] = q
    return out


def generate(template: np.ndarray | None = None, n: int = 8, seed: int = 0,
             tps_strength: float = 0.1, photometric_jitter: float = 0.15,
             feature_noise: float = 0.0, size: int = 64, feature_stride: int = 4,
             feature_dim: int = 32, keypoint_spacing: int = 6,
             with_parts: bool = False, template_mask: np.ndarray | None = None) -> SyntheticCollection:
    """Build an n-image synthetic collection with exact correspondence.

    Transforms whose keypoints would leave the canvas are rejection-resampled,
    so all ground-truth keypoints land in bounds for moderate strengths.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    rng = np.random.Generator(np.random.PCG64(seed))
    if template is None:
        template, template_mask = default_template(size, rng)
    else:
        template = np.asarray(template, dtype=np.float32)
        if template.shape[0] != template.shape[1]:
            raise ValueError("template must be square")
        size = template.shape[0]
        if template_mask is None:
            template_mask = np.ones(template.shape[:2], dtype=bool)

    # template keypoints: a regular grid inside the eroded mask
    eroded = _erode(template_mask, max(2, keypoint_spacing // 3))
    ys, xs = np.mgrid[keypoint_spacing // 2:size:keypoint_spacing,
                      keypoint_spacing // 2:size:keypoint_spacing]
    keep = eroded[ys.ravel(), xs.ravel()]
    kp_px = np.stack([xs.ravel()[keep], ys.ravel()[keep]], axis=1).astype(np.float64)
    kp_norm = kp_px / (size - 1)

    # template feature field: one random unit vector per node
    hf = wf = size // feature_stride
    field = rng.normal(size=(hf, wf, feature_dim))
    field /= np.linalg.norm(field, axis=-1, keepdims=True)

    pixel_grid = identity_coords(size, size)
    offset = (feature_stride - 1) / 2.0
    cell_px = np.stack(np.meshgrid(offset + np.arange(wf) * feature_stride,
                                   offset + np.arange(hf) * feature_stride), axis=-1)
    cell_norm = cell_px / (size - 1)

    images, masks, gt_maps, transforms, features = [], [], [], [], []
    keypoints, bboxes = [], []
    for i in range(n):
        transform, img_kp = _sample_valid_transform(rng, tps_strength, kp_norm, size)
        transforms.append(transform)
        gt = transform.transform_points(pixel_grid)
        gt_maps.append(gt.astype(np.float32))

        rgb = _bilinear_lookup(template, gt, size)
        m = _bilinear_lookup(template_mask.astype(np.float64)[..., None], gt, size)[..., 0] >= 0.5
        valid = np.all((gt >= 0) & (gt <= 1), axis=-1)
        m &= valid
        if photometric_jitter > 0:
            contrast = 1.0 + rng.uniform(-photometric_jitter, photometric_jitter)
            brightness = rng.uniform(-photometric_jitter, photometric_jitter)
            rgb = (rgb - 0.5) * contrast + 0.5 + brightness
        bg = rng.uniform(0.05, 0.95, size=3)
        out_img = np.where(m[..., None], rgb, bg).clip(0.0, 1.0).astype(np.float32)
        images.append(out_img)
        masks.append(m)

        keypoints.append({int(k): (float(img_kp[k, 0]), float(img_kp[k, 1]))
                          for k in range(len(kp_px))})
        ys_m, xs_m = np.nonzero(m)
        if len(xs_m):
            bboxes.append((float(xs_m.min()), float(ys_m.min()),
                           float(xs_m.max() - xs_m.min() + 1), float(ys_m.max() - ys_m.min() + 1)))
        else:
            bboxes.append((0.0, 0.0, float(size), float(size)))

        # features: warp the template field, then inject noise
        cell_template_coords = transform.transform_points(cell_norm)
        fgrid = _bilinear_lookup_field(field, cell_template_coords)
        fgrid /= np.linalg.norm(fgrid, axis=-1, keepdims=True)
        if feature_noise > 0:
            noisy = rng.random(size=(hf, wf)) < feature_noise
            fresh = rng.normal(size=(int(noisy.sum()), feature_dim))
            fresh /= np.linalg.norm(fresh, axis=-1, keepdims=True)
            fgrid[noisy] = fresh
        features.append(FeatureMap(grid=fgrid.astype(np.float32), stride=float(feature_stride),
                                   offset=(offset, offset)))

    meta = {"kind": "synthetic", "size": size, "n": n, "seed": seed,
            "tps_strength": tps_strength, "photometric_jitter": photometric_jitter,
            "feature_noise": feature_noise, "feature_stride": feature_stride,
            "feature_dim": feature_dim, "parts": bool(with_parts),
            "parts_grid": (4, 2)}
    return SyntheticCollection(
        images=np.stack(images), masks=np.stack(masks), keypoints=keypoints,
        bboxes=bboxes, transforms=transforms, gt_maps=np.stack(gt_maps),
        features=features, template=template, template_mask=template_mask,
        template_keypoints=kp_norm, meta=meta)


def _sample_valid_transform(rng, strength, kp_norm, size, max_tries: int = 100):
    """Draw a TPS whose inverted keypoints all stay inside the canvas."""
    for _ in range(max_tries):
        t = sample_tps(rng, strength) if strength > 0 else TpsTransform.identity()
        inv = invert_transform(t, kp_norm)
        px = inv * (size - 1)
        if np.all((px >= 0) & (px <= size - 1)):
            return t, px
    raise RuntimeError(f"could not sample an in-bounds transform after {max_tries} tries; "
                       "reduce tps_strength")


def _bilinear_lookup(image: np.ndarray, coords: np.ndarray, out_size: int) -> np.ndarray:
    """Sample (H, W, C) image at (H, W, 2) normalized coords, border clamped."""
    h, w = image.shape[:2]
    return _lookup(image, coords.reshape(-1, 2), h, w).reshape(out_size, out_size, -1)


def _bilinear_lookup_field(field: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample (h, w, d) field spanning the unit square at (..., 2) coords."""
    h, w = field.shape[:2]
    flat = coords.reshape(-1, 2)
    return _lookup(field, flat, h, w).reshape(coords.shape[:-1] + (field.shape[-1],))


def _lookup(grid: np.ndarray, pts: np.ndarray, h: int, w: int) -> np.ndarray:
    x = np.clip(pts[:, 0] * (w - 1), 0, w - 1)
    y = np.clip(pts[:, 1] * (h - 1), 0, h - 1)
    x0 = np.floor(x).astype(np.int64).clip(0, w - 2) if w > 1 else np.zeros_like(x, dtype=np.int64)
    y0 = np.floor(y).astype(np.int64).clip(0, h - 2) if h > 1 else np.zeros_like(y, dtype=np.int64)
    x1, y1 = x0 + (1 if w > 1 else 0), y0 + (1 if h > 1 else 0)
    fx, fy = x - x0, y - y0
    v00 = grid[y0, x0]
    v01 = grid[y0, x1]
    v10 = grid[y1, x0]
    v11 = grid[y1, x1]
    fx, fy = fx[:, None], fy[:, None]
    return (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)


# -- ground-truth access (evaluation oracle) --------------------------------


def load_ground_truth(collection_dir) -> dict:
    """Read meta.json back into exact transforms + template keypoints."""
    meta = json.loads((Path(collection_dir) / "meta.json").read_text())
    transforms = [TpsTransform.from_json_dict(d) for d in meta["transforms"]]
    return {"meta": meta, "transforms": transforms,
            "template_keypoints": np.asarray(meta["template_keypoints"])}


def gt_transfer(transforms: list, size: int, a: int, b: int, points: np.ndarray) -> np.ndarray:
    """Exact a -> b correspondence for (M, 2) pixel points in image a."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64)) / (size - 1)
    template_coords = transforms[a].transform_points(pts)
    inv = invert_transform(transforms[b], template_coords)
    return inv * (size - 1)


def make_oracle_transfer(transforms: list, size: int):
    def transfer(a: int, b: int, points: np.ndarray) -> np.ndarray:
        return gt_transfer(transforms, size, a, b, points)
    return transfer
