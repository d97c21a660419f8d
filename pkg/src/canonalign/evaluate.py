"""Keypoint transfer through canonical space, dense warping, PCK, and the
k-cycle consistency metric.

Transfer is defined as the exhaustive scan: read the source map at the query
point, then argmin over destination pixels of the canonical-space distance
(ties to the lowest row-major index). Metrics are reported in original-image
pixel units via each image's recorded resize affine.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import PckConfig

DEFAULT_CYPCK_ALPHAS = tuple(round(0.01 * i, 2) for i in range(1, 21))


class EvaluationError(RuntimeError):
    pass


def bilinear_read(map_hwc: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Read an (H, W, C) map at (M, 2) pixel coordinates, border clamped."""
    h, w = map_hwc.shape[:2]
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x = np.clip(pts[:, 0], 0, w - 1)
    y = np.clip(pts[:, 1], 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2) if w > 1 else np.zeros(len(x), np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2) if h > 1 else np.zeros(len(y), np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    flat = map_hwc.reshape(h * w, -1)
    v00 = flat[y0 * w + x0]
    v01 = flat[y0 * w + x1]
    v10 = flat[y1 * w + x0]
    v11 = flat[y1 * w + x1]
    return v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy) + v10 * (1 - fx) * fy + v11 * fx * fy


def transfer_points(coords_src: np.ndarray, coords_dst: np.ndarray, points: np.ndarray,
                    search_mask: np.ndarray | None = None, chunk: int = 256) -> np.ndarray:
    """Map (M, 2) pixel points from the source image into the destination.

    For each point, reads its canonical coordinate from ``coords_src`` and
    returns the destination pixel whose canonical coordinate is nearest
    (optionally restricted to ``search_mask``).
    """
    h, w = coords_dst.shape[:2]
    c_src = bilinear_read(coords_src, points)  # (M, 2)
    flat = coords_dst.reshape(-1, 2).astype(np.float64)
    if search_mask is not None:
        cand = np.flatnonzero(search_mask.reshape(-1))
        if cand.size == 0:
            raise EvaluationError("empty search mask")
        flat = flat[cand]
    else:
        cand = None
    out = np.empty((c_src.shape[0], 2), dtype=np.float64)
    for start in range(0, c_src.shape[0], chunk):
        c = c_src[start:start + chunk]
        dx = c[:, 0:1] - flat[None, :, 0]
        dy = c[:, 1:2] - flat[None, :, 1]
        best = np.argmin(dx * dx + dy * dy, axis=1)
        lin = cand[best] if cand is not None else best
        out[start:start + chunk, 0] = lin % w
        out[start:start + chunk, 1] = lin // w
    return out


def transfer_keypoint(coords_src: np.ndarray, coords_dst: np.ndarray, point,
                      search_mask: np.ndarray | None = None):
    """Single-point convenience wrapper around ``transfer_points``."""
    out = transfer_points(coords_src, coords_dst, np.asarray(point, dtype=np.float64)[None],
                          search_mask=search_mask)
    return float(out[0, 0]), float(out[0, 1])


def dense_warp(coords_src: np.ndarray, coords_dst: np.ndarray, image_src: np.ndarray,
               mask_src: np.ndarray):
    """Forward-warp all foreground source pixels onto a destination-sized
    canvas; collisions average. Returns (warped (H, W, 3), hit counts)."""
    from .geometry import splat_accumulate

    if not mask_src.any():
        raise EvaluationError("dense_warp: empty source mask")
    ys, xs = np.nonzero(mask_src)
    points = np.stack([xs, ys], axis=1).astype(np.float64)
    targets = transfer_points(coords_src, coords_dst, points)
    colors = image_src[ys, xs]
    return splat_accumulate(targets, colors, coords_dst.shape[:2])


# -- PCK ---------------------------------------------------------------------


def compute_pck(predictions: np.ndarray, ground_truth: np.ndarray,
                threshold_base: np.ndarray, alphas) -> dict:
    """Fraction of predictions within alpha * threshold_base of ground truth
    (boundary inclusive). Zero evaluable keypoints reports scores=None."""
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1, 2)
    ground_truth = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 2)
    threshold_base = np.asarray(threshold_base, dtype=np.float64).reshape(-1)
    n = predictions.shape[0]
    if n == 0:
        return {"scores": None, "n": 0, "alphas": list(alphas)}
    dist = np.linalg.norm(predictions - ground_truth, axis=1)
    scores = {float(a): float(np.mean(dist <= a * threshold_base)) for a in alphas}
    return {"scores": scores, "n": n, "alphas": [float(a) for a in alphas]}


def threshold_base_for(collection, idx: int, config: PckConfig) -> float:
    """PCK threshold base in original-image units for one image."""
    if config.use_bbox and collection.bboxes is not None and collection.bboxes[idx] is not None:
        _, _, bw, bh = collection.bboxes[idx]
        return float(max(bw, bh))
    w0, h0 = collection.original_sizes[idx]
    return float(max(w0, h0))


def _common_keypoints(collection, a: int, b: int):
    kps_a = collection.keypoints[a]
    kps_b = collection.keypoints[b]
    ids = sorted(k for k in kps_a
                 if k in kps_b and kps_a[k].visible and kps_b[k].visible)
    return ids


def evaluate_pairwise_pck(collection, coord_maps: np.ndarray | None = None,
                          config: PckConfig | None = None,
                          restrict_to_foreground: bool = False, jobs: int = 1,
                          transfer=None) -> dict:
    """Keypoint-transfer PCK over all ordered image pairs with shared
    visible keypoints; distances in original-image pixel units.

    ``transfer(a, b, points)`` defaults to coordinate-map transfer; inject a
    different callable (e.g. the synthetic ground-truth oracle) to score it.
    """
    config = config or PckConfig()
    config.validate()
    if collection.keypoints is None:
        raise EvaluationError("collection has no keypoint annotations")
    if transfer is None:
        if coord_maps is None:
            raise EvaluationError("either coord_maps or a transfer callable is required")
        masks = collection.masks if (restrict_to_foreground and collection.masks is not None) else None
        transfer = make_model_transfer(coord_maps, masks)
    n = len(collection)
    tasks = [(a, b) for a in range(n) for b in range(n) if a != b]

    def run_pair(pair):
        a, b = pair
        ids = _common_keypoints(collection, a, b)
        if not ids:
            return None
        pts = np.array([[collection.keypoints[a][k].x, collection.keypoints[a][k].y]
                        for k in ids])
        preds = transfer(a, b, pts)
        gt = np.array([[collection.keypoints[b][k].x, collection.keypoints[b][k].y]
                       for k in ids])
        preds_orig = collection.affines[b].inverse(preds)
        gt_orig = collection.affines[b].inverse(gt)
        base = np.full(len(ids), threshold_base_for(collection, b, config))
        return preds_orig, gt_orig, base

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_pair, tasks))
    else:
        results = [run_pair(t) for t in tasks]
    results = [r for r in results if r is not None]
    if not results:
        return {"scores": None, "n": 0, "alphas": list(config.alphas)}
    preds = np.concatenate([r[0] for r in results])
    gts = np.concatenate([r[1] for r in results])
    bases = np.concatenate([r[2] for r in results])
    return compute_pck(preds, gts, bases, config.alphas)


# -- k-cycle PCK --------------------------------------------------------------


@dataclass
class CyPckCurve:
    k: int
    alphas: tuple
    scores: tuple
    num_sequences: int
    seed: int
    n_predictions: int

    def score_at(self, alpha: float) -> float:
        return self.scores[self.alphas.index(alpha)]

    def to_json_records(self) -> list:
        return [{"metric": "cypck", "k": self.k, "alpha": a, "score": s,
                 "n": self.n_predictions, "num_sequences": self.num_sequences,
                 "seed": self.seed}
                for a, s in zip(self.alphas, self.scores)]


def make_model_transfer(coord_maps: np.ndarray, masks: np.ndarray | None = None):
    """Chain-transfer callable backed by per-image coordinate maps."""
    def transfer(a: int, b: int, points: np.ndarray) -> np.ndarray:
        mask = masks[b] if masks is not None else None
        return transfer_points(coord_maps[a], coord_maps[b], points, search_mask=mask)
    return transfer


def compute_k_cypck(collection, k: int, transfer, num_sequences: int = 200,
                    seed: int = 0, alphas=DEFAULT_CYPCK_ALPHAS,
                    config: PckConfig | None = None) -> CyPckCurve:
    """Propagate keypoints along random k-image chains, closing back to the
    start; every hop's prediction is scored under the PCK rule against the
    annotation in that hop's image (its own bbox sets the threshold base).
    """
    config = config or PckConfig()
    if k < 2:
        raise EvaluationError("k must be >= 2")
    if collection.keypoints is None:
        raise EvaluationError("collection has no keypoint annotations")
    n = len(collection)
    if n < k:
        raise EvaluationError(f"collection has {n} images, cannot sample length-{k} sequences")
    rng = np.random.Generator(np.random.PCG64(seed))
    sequences = [rng.choice(n, size=k, replace=False) for _ in range(num_sequences)]

    correct = np.zeros(len(alphas), dtype=np.int64)
    total = 0
    for seq in sequences:
        ids = [kp for kp in collection.keypoints[seq[0]]
               if all(kp in collection.keypoints[j] and collection.keypoints[j][kp].visible
                      for j in seq)]
        if not ids:
            continue
        pts = np.array([[collection.keypoints[seq[0]][kp].x, collection.keypoints[seq[0]][kp].y]
                        for kp in ids])
        hops = [(seq[j], seq[j + 1]) for j in range(k - 1)] + [(seq[k - 1], seq[0])]
        current = pts
        for src, dst in hops:
            current = transfer(int(src), int(dst), current)
            gt = np.array([[collection.keypoints[dst][kp].x, collection.keypoints[dst][kp].y]
                           for kp in ids])
            pred_orig = collection.affines[dst].inverse(current)
            gt_orig = collection.affines[dst].inverse(gt)
            dist = np.linalg.norm(pred_orig - gt_orig, axis=1)
            base = threshold_base_for(collection, int(dst), config)
            for ai, alpha in enumerate(alphas):
                correct[ai] += int(np.sum(dist <= alpha * base))
            total += len(ids)
    if total == 0:
        raise EvaluationError(
            "no keypoint is visible across any sampled sequence; "
            "annotate more keypoints or lower k")
    return CyPckCurve(k=k, alphas=tuple(float(a) for a in alphas),
                      scores=tuple(float(c) / total for c in correct),
                      num_sequences=num_sequences, seed=seed, n_predictions=total)


# -- visualization -----------------------------------------------------------


def canonical_colormap(coords: np.ndarray) -> np.ndarray:
    """Fixed 2-D colormap over (..., 2) canonical coordinates -> (..., 3) RGB."""
    u = np.clip(coords[..., 0], 0, 1)
    v = np.clip(coords[..., 1], 0, 1)
    return np.stack([u, v, 1.0 - 0.5 * (u + v)], axis=-1).astype(np.float32)


def render_canonical_viz(coord_maps: np.ndarray, grid=None) -> dict:
    """Per-image colormap renderings plus the grid's RGB/alpha exports."""
    out = {"colormaps": [canonical_colormap(c) for c in coord_maps]}
    if grid is not None:
        out["grid_rgb"] = grid.rgb_image()
        out["grid_alpha"] = grid.alpha_image()
    return out


def write_metric_records(path, records: list) -> None:
    with open(path, "w") as f:
        json.dump(records, f, indent=1, sort_keys=True)
        f.write("\n")


def pck_records(result: dict, metric: str = "pck") -> list:
    if result["scores"] is None:
        return [{"metric": metric, "alpha": a, "score": None, "n": 0}
                for a in result["alphas"]]
    return [{"metric": metric, "alpha": a, "score": result["scores"][float(a)],
             "n": result["n"]} for a in result["alphas"]]
