"""Sparse pseudo-correspondences: mutual nearest neighbors in feature space.

Matches are computed once per unordered image pair and cached to a single
binary file keyed by a content hash of the feature maps, so a rerun over
unchanged features never recomputes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .collection import FeatureMap

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"PCOR"
CACHE_VERSION = 1
_RECORD = struct.Struct("<5f")  # x_a, y_a, x_b, y_b, score


@dataclass
class PseudoCorrespondenceSet:
    """Mutual-NN matches for one image pair, in resized-image pixel coords."""

    pair: tuple
    points_a: np.ndarray  # (K, 2) float32
    points_b: np.ndarray  # (K, 2) float32
    scores: np.ndarray    # (K,) float32 cosine similarities

    @property
    def k(self) -> int:
        return self.points_a.shape[0]

    @property
    def empty(self) -> bool:
        return self.k == 0

    def swapped(self) -> "PseudoCorrespondenceSet":
        return PseudoCorrespondenceSet(pair=(self.pair[1], self.pair[0]),
                                       points_a=self.points_b, points_b=self.points_a,
                                       scores=self.scores)


def mutual_nearest_neighbors(feat_a: FeatureMap, feat_b: FeatureMap,
                             pair: tuple = (0, 1)) -> PseudoCorrespondenceSet:
    """All (i, j) cell pairs that are each other's nearest neighbor under
    cosine similarity (features are unit vectors, so the dot product).

    Argmax ties break toward the lowest row-major linear index. Cell indices
    are reported at cell centers in pixel units. K = 0 is a legal result.
    """
    ha, wa, da = feat_a.grid.shape
    hb, wb, db = feat_b.grid.shape
    if da != db:
        raise ValueError(f"feature dims differ: {da} vs {db}")
    a = feat_a.grid.reshape(-1, da).astype(np.float64)
    b = feat_b.grid.reshape(-1, db).astype(np.float64)
    sim = a @ b.T
    nn_ab = sim.argmax(axis=1)   # first occurrence wins on ties
    nn_ba = sim.argmax(axis=0)
    idx_a = np.arange(sim.shape[0])
    mutual = nn_ba[nn_ab] == idx_a
    ia = idx_a[mutual]
    ib = nn_ab[mutual]
    pix_a = feat_a.cell_pixels().reshape(-1, 2)[ia]
    pix_b = feat_b.cell_pixels().reshape(-1, 2)[ib]
    return PseudoCorrespondenceSet(
        pair=pair,
        points_a=pix_a.astype(np.float32),
        points_b=pix_b.astype(np.float32),
        scores=sim[ia, ib].astype(np.float32))


def features_hash(features: list) -> str:
    h = hashlib.sha256()
    for f in features:
        h.update(f.content_hash().encode())
    return h.hexdigest()


def build_all_pairs(features: list, cache_path=None) -> dict:
    """Mutual-NN matches for all N(N-1)/2 unordered pairs.

    Returns {(a, b): PseudoCorrespondenceSet} with a < b; query (b, a) via
    ``.swapped()``. When ``cache_path`` is given, a valid cache (matching
    feature content hash) is loaded instead of recomputing, and fresh
    results are written through to it.
    """
    n = len(features)
    if n < 2:
        raise ValueError("need at least two feature maps")
    fhash = features_hash(features)
    if cache_path is not None:
        cached = load_pair_cache(cache_path, fhash)
        if cached is not None:
            logger.info("pseudo-correspondence cache hit (%s)", cache_path)
            return cached
    pairs = {}
    for a, b in combinations(range(n), 2):
        pairs[(a, b)] = mutual_nearest_neighbors(features[a], features[b], pair=(a, b))
    if cache_path is not None:
        write_pair_cache(cache_path, pairs, fhash)
        logger.info("pseudo-correspondence cache written (%s)", cache_path)
    return pairs


def get_pair(pairs: dict, a: int, b: int) -> PseudoCorrespondenceSet:
    if (a, b) in pairs:
        return pairs[(a, b)]
    return pairs[(b, a)].swapped()


def write_pair_cache(path, pairs: dict, feature_hash: str) -> None:
    path = Path(path)
    index = {}
    blobs = []
    offset = 0
    for (a, b), match in sorted(pairs.items()):
        blob = b"".join(
            _RECORD.pack(float(match.points_a[i, 0]), float(match.points_a[i, 1]),
                         float(match.points_b[i, 0]), float(match.points_b[i, 1]),
                         float(match.scores[i]))
            for i in range(match.k))
        index[f"{a},{b}"] = {"offset": offset, "k": match.k}
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": CACHE_VERSION, "feature_hash": feature_hash,
                         "pairs": index}, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_pair_cache(path, expected_hash: str | None = None) -> dict | None:
    """Read a cache file; returns None when absent, stale, or malformed."""
    path = Path(path)
    if not path.is_file():
        return None
    try:
        raw = path.read_bytes()
        if raw[:4] != CACHE_MAGIC:
            return None
        header_len = struct.unpack("<I", raw[4:8])[0]
        header = json.loads(raw[8:8 + header_len])
        if header.get("version") != CACHE_VERSION:
            return None
        if expected_hash is not None and header.get("feature_hash") != expected_hash:
            logger.info("pseudo-correspondence cache stale (feature hash changed)")
            return None
        base = 8 + header_len
        pairs = {}
        for key, entry in header["pairs"].items():
            a, b = (int(v) for v in key.split(","))
            k = int(entry["k"])
            start = base + int(entry["offset"])
            rec = np.frombuffer(raw, dtype="<f4", count=5 * k, offset=start).reshape(k, 5)
            pairs[(a, b)] = PseudoCorrespondenceSet(
                pair=(a, b), points_a=rec[:, 0:2].copy(), points_b=rec[:, 2:4].copy(),
                scores=rec[:, 4].copy())
        return pairs
    except (ValueError, KeyError, json.JSONDecodeError, struct.error):
        logger.warning("unreadable pseudo-correspondence cache at %s; recomputing", path)
        return None


def default_cache_path(collection_root) -> Path:
    """Cache location: $ASIC_CACHE_DIR/<collection>/pseudo_corr.bin if the
    environment variable is set, else alongside the collection."""
    root = Path(collection_root)
    env = os.environ.get("ASIC_CACHE_DIR")
    if env:
        d = Path(env) / root.name
        d.mkdir(parents=True, exist_ok=True)
        return d / "pseudo_corr.bin"
    return root / "pseudo_corr.bin"
