"""Loading and validation of an image collection from the on-disk layout.

Layout under a collection root::

    images/*.png|jpg        required, N >= 2
    masks/*.png             optional, 0/255 grayscale foreground
    parts/*.png             optional, palette index = part id, 0 = background
    keypoints.json          optional, {stem: [{id, x, y, visible}, ...]}
    bboxes.json             optional, {stem: {x, y, w, h}} in original pixels
    features/*.bin + .json  optional, per-image feature grids with metadata

Images are resized (shorter side to ``image_size``, center crop) and every
annotation is carried through the same recorded affine, so metrics can be
reported in original-image pixel units. Loading is deterministic and the
returned collection is treated as immutable.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import IoConfig

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


class CollectionError(RuntimeError):
    """Fatal problem with the collection directory layout or contents."""


@dataclass(frozen=True)
class ResizeAffine:
    """Pixel-coordinate map from the original image to the resized crop.

    Uses the pixel-area convention (x' = sx * (x + 0.5) - 0.5 - ox) so that
    annotation points stay on the same image content after resampling. The
    map is exactly invertible.
    """

    sx: float
    sy: float
    ox: float
    oy: float

    def forward(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        out = np.empty_like(p)
        out[..., 0] = self.sx * (p[..., 0] + 0.5) - 0.5 - self.ox
        out[..., 1] = self.sy * (p[..., 1] + 0.5) - 0.5 - self.oy
        return out

    def inverse(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        out = np.empty_like(p)
        out[..., 0] = (p[..., 0] + self.ox + 0.5) / self.sx - 0.5
        out[..., 1] = (p[..., 1] + self.oy + 0.5) / self.sy - 0.5
        return out

    @classmethod
    def identity(cls) -> "ResizeAffine":
        return cls(1.0, 1.0, 0.0, 0.0)


@dataclass(frozen=True)
class KeypointAnnotation:
    id: int
    x: float
    y: float
    visible: bool = True


@dataclass
class FeatureMap:
    """Per-image feature grid with its pixel geometry.

    ``grid`` is (h, w, d), L2-normalized per location. The pixel position of
    cell (row, col) is offset + (col, row) * stride.
    """

    grid: np.ndarray
    stride: float
    offset: tuple = (0.0, 0.0)

    @property
    def shape(self):
        return self.grid.shape

    def cell_pixels(self) -> np.ndarray:
        """(h, w, 2) pixel coordinates of every cell center."""
        h, w, _ = self.grid.shape
        xs = self.offset[0] + np.arange(w) * self.stride
        ys = self.offset[1] + np.arange(h) * self.stride
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def content_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.grid).tobytes())
        h.update(f"{self.grid.shape}|{self.stride}|{self.offset}".encode())
        return h.hexdigest()


@dataclass
class ImageCollection:
    images: np.ndarray                      # (N, H, W, 3) float32 in [0, 1]
    collection_id: str
    names: list                             # image stems, sorted
    affines: list                           # per-image ResizeAffine
    original_sizes: list                    # per-image (W0, H0)
    masks: np.ndarray | None = None         # (N, H, W) bool
    parts: np.ndarray | None = None         # (N, H, W, S) float32 one-hot
    keypoints: list | None = None           # per image {id: KeypointAnnotation}
    bboxes: list | None = None              # per image (x, y, w, h) original units

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_size(self):
        return self.images.shape[1:3]

    def validate(self):
        n, h, w, _ = self.images.shape
        if n < 2:
            raise CollectionError(f"collection needs at least 2 images, got {n}")
        if self.images.min() < 0 or self.images.max() > 1:
            raise CollectionError("image values must lie in [0, 1]")
        if self.parts is not None:
            sums = self.parts.sum(axis=-1)
            if not np.all((np.abs(sums - 1) < 1e-6) | (np.abs(sums) < 1e-6)):
                raise CollectionError("part maps must be one-hot or all-zero per pixel")
        if self.keypoints is not None:
            for idx, anns in enumerate(self.keypoints):
                for kp in anns.values():
                    if not (0 <= kp.x <= w - 1 and 0 <= kp.y <= h - 1):
                        raise CollectionError(
                            f"keypoint {kp.id} of image {self.names[idx]} out of bounds")

    def mask_or_ones(self) -> np.ndarray:
        if self.masks is not None:
            return self.masks
        logger.warning("collection %s has no masks; substituting all-ones foreground",
                       self.collection_id)
        return np.ones(self.images.shape[:3], dtype=bool)


def _resize_geometry(w0: int, h0: int, size: int):
    scale = size / min(w0, h0)
    new_w = max(size, int(round(w0 * scale)))
    new_h = max(size, int(round(h0 * scale)))
    ox = (new_w - size) // 2
    oy = (new_h - size) // 2
    return new_w, new_h, ResizeAffine(sx=new_w / w0, sy=new_h / h0, ox=float(ox), oy=float(oy))


def _load_image(path: Path, size: int):
    with Image.open(path) as img:
        img = img.convert("RGB")
        w0, h0 = img.size
        new_w, new_h, affine = _resize_geometry(w0, h0, size)
        img = img.resize((new_w, new_h), Image.BILINEAR)
        img = img.crop((int(affine.ox), int(affine.oy), int(affine.ox) + size, int(affine.oy) + size))
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr, affine, (w0, h0)


def _load_index_image(path: Path, size: int, mode: str) -> np.ndarray:
    """Nearest-neighbor resize for masks ('L') and palette part maps ('P')."""
    with Image.open(path) as img:
        if mode == "P" and img.mode != "P":
            img = img.convert("P")
        elif mode == "L" and img.mode != "L":
            img = img.convert("L")
        w0, h0 = img.size
        new_w, new_h, affine = _resize_geometry(w0, h0, size)
        img = img.resize((new_w, new_h), Image.NEAREST)
        img = img.crop((int(affine.ox), int(affine.oy), int(affine.ox) + size, int(affine.oy) + size))
        return np.asarray(img)


def _match_stems(files: list, image_stems: list, kind: str) -> dict:
    by_stem = {}
    for f in files:
        if f.stem not in image_stems:
            raise CollectionError(f"{kind} file {f.name!r} has no matching image")
        by_stem[f.stem] = f
    missing = [s for s in image_stems if s not in by_stem]
    if missing:
        raise CollectionError(f"missing {kind} for image {missing[0]!r}")
    return by_stem


def load_collection(root_path, config: IoConfig | None = None) -> ImageCollection:
    """Load a collection directory; see the module docstring for the layout."""
    config = config or IoConfig()
    config.validate()
    root = Path(root_path)
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise CollectionError(f"missing images directory at {images_dir}")
    image_files = sorted(p for p in images_dir.iterdir()
                         if p.suffix.lower() in IMAGE_EXTENSIONS)
    if len(image_files) < 2:
        raise CollectionError(f"need at least 2 images, found {len(image_files)}")

    size = config.image_size
    stems = [p.stem for p in image_files]
    images, affines, original_sizes = [], [], []
    for p in image_files:
        arr, affine, orig = _load_image(p, size)
        images.append(arr)
        affines.append(affine)
        original_sizes.append(orig)
    images = np.stack(images)

    masks = None
    masks_dir = root / "masks"
    if masks_dir.is_dir():
        by_stem = _match_stems(sorted(masks_dir.glob("*.png")), stems, "mask")
        masks = np.stack([_load_index_image(by_stem[s], size, "L") > 127 for s in stems])

    parts = None
    parts_dir = root / "parts"
    if parts_dir.is_dir():
        by_stem = _match_stems(sorted(parts_dir.glob("*.png")), stems, "part map")
        index_maps = [_load_index_image(by_stem[s], size, "P").astype(np.int64) for s in stems]
        num_parts = max(int(m.max()) for m in index_maps)
        if num_parts < 1:
            raise CollectionError("part maps contain no nonzero part ids")
        parts = np.zeros((len(stems), size, size, num_parts), dtype=np.float32)
        for i, m in enumerate(index_maps):
            fg = m > 0
            parts[i][fg, m[fg] - 1] = 1.0

    keypoints = _load_keypoints(root / "keypoints.json", stems, affines, size)
    bboxes = _load_bboxes(root / "bboxes.json", stems)

    collection = ImageCollection(
        images=images, collection_id=root.name, names=stems, affines=affines,
        original_sizes=original_sizes, masks=masks, parts=parts,
        keypoints=keypoints, bboxes=bboxes)
    collection.validate()
    return collection


def _load_keypoints(path: Path, stems, affines, size):
    if not path.is_file():
        return None
    data = json.loads(path.read_text())
    for key in data:
        if key not in stems:
            raise CollectionError(f"keypoints entry {key!r} has no matching image")
    keypoints = []
    for stem, affine in zip(stems, affines):
        anns = {}
        for item in data.get(stem, []):
            kp_id = int(item["id"])
            if kp_id in anns:
                raise CollectionError(f"duplicate keypoint id {kp_id} in image {stem!r}")
            xy = affine.forward(np.array([item["x"], item["y"]], dtype=np.float64))
            x, y = float(xy[0]), float(xy[1])
            if not (0 <= x <= size - 1 and 0 <= y <= size - 1):
                logger.warning("keypoint %d of %s falls outside the crop; clamping", kp_id, stem)
                x = min(max(x, 0.0), size - 1)
                y = min(max(y, 0.0), size - 1)
            anns[kp_id] = KeypointAnnotation(id=kp_id, x=x, y=y,
                                             visible=bool(item.get("visible", True)))
        keypoints.append(anns)
    return keypoints


def _load_bboxes(path: Path, stems):
    if not path.is_file():
        return None
    data = json.loads(path.read_text())
    for key in data:
        if key not in stems:
            raise CollectionError(f"bboxes entry {key!r} has no matching image")
    bboxes = []
    for stem in stems:
        if stem in data:
            b = data[stem]
            bboxes.append((float(b["x"]), float(b["y"]), float(b["w"]), float(b["h"])))
        else:
            bboxes.append(None)
    return bboxes


def load_feature_maps(root_path, collection: ImageCollection) -> list:
    """Load per-image feature grids; unit-normalizes every location.

    Expects ``features/{stem}.bin`` with a ``features/{stem}.json`` sidecar
    holding shape [h, w, d], dtype, stride, offset and layout. Fails on
    dimension mismatch across images, non-finite entries, or zero vectors.
    """
    root = Path(root_path)
    feat_dir = root / "features"
    if not feat_dir.is_dir():
        raise CollectionError(f"missing features directory at {feat_dir}")
    by_stem = _match_stems(sorted(feat_dir.glob("*.bin")), collection.names, "feature")
    height, width = collection.image_size
    maps = []
    dim = None
    for stem in collection.names:
        bin_path = by_stem[stem]
        meta_path = bin_path.with_suffix(".json")
        if not meta_path.is_file():
            raise CollectionError(f"missing feature sidecar {meta_path.name!r}")
        meta = json.loads(meta_path.read_text())
        h, w, d = (int(v) for v in meta["shape"])
        if meta.get("dtype", "float32") != "float32":
            raise CollectionError(f"unsupported feature dtype in {meta_path.name!r}")
        raw = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
        if raw.size != h * w * d:
            raise CollectionError(f"feature file {bin_path.name!r} size does not match shape")
        grid = raw.reshape(h, w, d).astype(np.float32)
        if not np.isfinite(grid).all():
            raise CollectionError(f"non-finite feature values in {bin_path.name!r}")
        if dim is None:
            dim = d
        elif d != dim:
            raise CollectionError(f"feature dim mismatch: {bin_path.name!r} has d={d}, expected {dim}")
        stride = float(meta["stride"])
        offset = meta.get("offset", 0.0)
        offset = (float(offset), float(offset)) if np.isscalar(offset) else (float(offset[0]), float(offset[1]))
        if h * stride > height + stride or w * stride > width + stride:
            raise CollectionError(f"feature grid of {bin_path.name!r} overruns the image")
        if h * stride < height - stride or w * stride < width - stride:
            raise CollectionError(
                f"feature grid of {bin_path.name!r} does not cover the image "
                f"({h}x{w} cells at stride {stride} vs {height}x{width} pixels); "
                "was the collection loaded at a different image_size?")
        norms = np.linalg.norm(grid, axis=-1, keepdims=True)
        if (norms == 0).any():
            raise CollectionError(f"zero feature vector in {bin_path.name!r} cannot be normalized")
        maps.append(FeatureMap(grid=grid / norms, stride=stride, offset=offset))
    return maps


def write_feature_map(feat_dir, stem: str, grid: np.ndarray, stride: float, offset) -> None:
    """Write one feature grid in the on-disk format (helper for generators)."""
    feat_dir = Path(feat_dir)
    feat_dir.mkdir(parents=True, exist_ok=True)
    grid = np.ascontiguousarray(grid, dtype="<f4")
    (feat_dir / f"{stem}.bin").write_bytes(grid.tobytes())
    offset = (float(offset), float(offset)) if np.isscalar(offset) else [float(offset[0]), float(offset[1])]
    meta = {"shape": list(grid.shape), "dtype": "float32", "stride": float(stride),
            "offset": offset, "layout": "row-major little-endian"}
    (feat_dir / f"{stem}.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
