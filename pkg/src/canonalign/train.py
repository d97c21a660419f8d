"""Per-collection test-time optimization loop.

Each iteration samples ``batch_size / 2`` unordered image pairs uniformly
with replacement, evaluates the keypoint contrast per pair and the remaining
terms per image, and steps one Adam optimizer over the network and the
canonical grid jointly. Pair sampling and warp sampling draw from two
independent seed-derived RNG streams, and the full optimizer/RNG state goes
into every checkpoint, so a fixed seed reproduces a run bit-exactly and a
resumed run is indistinguishable from an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses
from .checkpoint import CheckpointError, load_state, save_state
from .config import ObjectiveConfig, TrainConfig
from .geometry import sample_tps, warp_map
from .matching import build_all_pairs
from .model import AlignmentNetwork, CanonicalGrid, init_model

logger = logging.getLogger(__name__)

ARTIFACT_VERSION = 1


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; the last checkpoint on disk survives."""


@dataclass
class TrainResult:
    net: AlignmentNetwork
    grid: CanonicalGrid
    iteration: int
    checkpoint_path: Path | None
    log_path: Path | None
    history: list  # per-iteration loss breakdowns


def derive_streams(seed: int):
    """Independent (pair sampling, warp sampling, model init) randomness."""
    ss = np.random.SeedSequence(seed)
    child_pairs, child_tps, child_model = ss.spawn(3)
    return (np.random.Generator(np.random.PCG64(child_pairs)),
            np.random.Generator(np.random.PCG64(child_tps)),
            int(child_model.generate_state(1)[0]))


def train_collection(collection, features=None, config: TrainConfig | None = None,
                     objective: ObjectiveConfig | None = None, out_dir=None,
                     matches=None) -> TrainResult:
    """Optimize a fresh model on one collection; see the module docstring."""
    config = config or TrainConfig()
    objective = objective or ObjectiveConfig()
    config.validate()
    objective.validate()
    if len(collection) < 2:
        raise ValueError("collection must contain at least 2 images")
    if matches is None:
        if features is None:
            raise ValueError("either precomputed matches or feature maps are required")
        matches = build_all_pairs(features)
    run = _TrainingRun.fresh(collection, matches, config, objective, out_dir)
    return run.run()


def resume(checkpoint_path, collection, features=None, config_overrides: dict | None = None,
           out_dir=None, matches=None) -> TrainResult:
    """Continue training from a checkpoint; the loss log is appended to.

    ``config_overrides`` maps dotted keys to values, e.g.
    ``{"train.iterations": 400}``; bare keys address the train section.
    """
    meta, arrays = load_state(checkpoint_path)
    if meta.get("artifact_version") != ARTIFACT_VERSION:
        raise CheckpointError(
            f"checkpoint artifact version {meta.get('artifact_version')} "
            f"incompatible with {ARTIFACT_VERSION}")
    if matches is None:
        if features is None:
            raise ValueError("either precomputed matches or feature maps are required")
        matches = build_all_pairs(features)
    config = TrainConfig(**meta["train_config"])
    objective = ObjectiveConfig(**meta["objective_config"])
    overrides = dict(config_overrides or {})
    for key, value in overrides.items():
        section, _, name = key.rpartition(".")
        target = objective if section == "objective" else config
        if not hasattr(target, name):
            raise ValueError(f"unknown override key {key!r}")
        setattr(target, name, value)
    config.validate()
    objective.validate()
    run = _TrainingRun.from_state(collection, matches, config, objective, out_dir,
                                  meta, arrays, overrides)
    return run.run()


class _TrainingRun:
    def __init__(self, collection, matches, config, objective, out_dir):
        self.collection = collection
        self.config = config
        self.objective = objective
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.perceptual = losses.make_perceptual(objective)
        self.history = []
        self.checkpoint_path = None

        self.pair_keys = sorted(matches.keys())
        self.matches = {
            key: (torch.from_numpy(np.asarray(matches[key].points_a, dtype=np.float32)),
                  torch.from_numpy(np.asarray(matches[key].points_b, dtype=np.float32)))
            for key in self.pair_keys}
        imgs = np.asarray(collection.images, dtype=np.float32)
        self.images = torch.from_numpy(imgs.transpose(0, 3, 1, 2)).contiguous()
        self.masks = torch.from_numpy(collection.mask_or_ones().astype(np.float32))
        self.parts = None
        if collection.parts is not None:
            self.parts = torch.from_numpy(
                collection.parts.transpose(0, 3, 1, 2).astype(np.float32)).contiguous()

    # -- construction ------------------------------------------------------

    @classmethod
    def fresh(cls, collection, matches, config, objective, out_dir):
        run = cls(collection, matches, config, objective, out_dir)
        rng_pairs, rng_tps, model_seed = derive_streams(config.seed)
        run.rng_pairs, run.rng_tps, run.model_seed = rng_pairs, rng_tps, model_seed
        h = collection.images.shape[1]
        run.net, run.grid = init_model(model_seed, h, grid_size=config.grid_size,
                                       collection_images=collection.images,
                                       base_channels=config.base_channels)
        run.optimizer = torch.optim.Adam(run.parameters(), lr=config.learning_rate)
        run.iteration = 0
        run.log_mode = "w"
        run.start_event = {"event": "start", "train_config": vars(config).copy(),
                           "objective_config": vars(objective).copy()}
        return run

    @classmethod
    def from_state(cls, collection, matches, config, objective, out_dir,
                   meta, arrays, overrides):
        run = cls(collection, matches, config, objective, out_dir)
        run.model_seed = meta["model_seed"]
        run.net = AlignmentNetwork(base_channels=config.base_channels)
        net_state = {k[len("net."):]: torch.from_numpy(v.copy())
                     for k, v in arrays.items() if k.startswith("net.")}
        run.net.load_state_dict(net_state)
        run.grid = CanonicalGrid(config.grid_size)
        with torch.no_grad():
            run.grid.grid.copy_(torch.from_numpy(arrays["grid.grid"].copy()))
        run.optimizer = torch.optim.Adam(run.parameters(), lr=config.learning_rate)
        opt_state = {}
        for idx in range(len(run.parameters())):
            prefix = f"opt.{idx}."
            entry = {k[len(prefix):]: torch.from_numpy(v.copy())
                     for k, v in arrays.items() if k.startswith(prefix)}
            if entry:
                opt_state[idx] = entry
        groups = json.loads(meta["opt_param_groups"])
        for g in groups:
            g["lr"] = config.learning_rate
        run.optimizer.load_state_dict({"state": opt_state, "param_groups": groups})
        run.rng_pairs = np.random.Generator(np.random.PCG64())
        run.rng_pairs.bit_generator.state = json.loads(meta["rng_pairs"])
        run.rng_tps = np.random.Generator(np.random.PCG64())
        run.rng_tps.bit_generator.state = json.loads(meta["rng_tps"])
        torch.set_rng_state(torch.from_numpy(arrays["torch_rng"].copy()))
        run.iteration = int(meta["iteration"])
        run.log_mode = "a"
        run.start_event = {"event": "resume", "iteration": run.iteration,
                           "overrides": {k: v for k, v in overrides.items()}}
        return run

    def parameters(self):
        return list(self.net.parameters()) + [self.grid.grid]

    # -- the loop ------------------------------------------------------------

    def run(self) -> TrainResult:
        cfg = self.config
        log_file = None
        log_path = None
        if cfg.log_path is not None:
            log_path = Path(cfg.log_path)
        elif self.out_dir is not None:
            log_path = self.out_dir / "loss_log.ndjson"
        if log_path is not None:
            log_path.parent.mkdir(parents=True, exist_ok=True)
            log_file = open(log_path, self.log_mode)
            log_file.write(json.dumps(self.start_event, sort_keys=True, default=str) + "\n")
        ckpt_dir = None
        if self.out_dir is not None:
            ckpt_dir = self.out_dir / "checkpoints"
            ckpt_dir.mkdir(parents=True, exist_ok=True)

        self.net.train()
        try:
            for it in range(self.iteration, cfg.iterations):
                try:
                    total, breakdown = self._step()
                except losses.NonFiniteLossError as e:
                    if log_file:
                        log_file.write(json.dumps({"event": "abort", "iter": it + 1,
                                                   "reason": str(e)}) + "\n")
                    raise DivergenceError(str(e)) from e
                self.iteration = it + 1
                breakdown["iter"] = self.iteration
                breakdown["total"] = total
                self.history.append(breakdown)
                if log_file:
                    log_file.write(json.dumps(breakdown, sort_keys=True) + "\n")
                if ckpt_dir is not None and (
                        self.iteration % cfg.checkpoint_every == 0
                        or self.iteration == cfg.iterations):
                    self.checkpoint_path = ckpt_dir / f"ckpt_{self.iteration:06d}.bin"
                    self.save_checkpoint(self.checkpoint_path)
        finally:
            if log_file:
                log_file.close()
        if ckpt_dir is not None and self.checkpoint_path is None:
            # zero-iteration run: still persist the state for downstream tools
            self.checkpoint_path = ckpt_dir / f"ckpt_{self.iteration:06d}.bin"
            self.save_checkpoint(self.checkpoint_path)
        return TrainResult(net=self.net, grid=self.grid, iteration=self.iteration,
                           checkpoint_path=self.checkpoint_path, log_path=log_path,
                           history=self.history)

    def _step(self):
        cfg, obj = self.config, self.objective
        n_pairs = cfg.batch_size // 2
        pair_idx = self.rng_pairs.integers(0, len(self.pair_keys), size=n_pairs)
        slots = []
        for pi in pair_idx:
            a, b = self.pair_keys[pi]
            slots.extend((a, b))
        slots_t = torch.as_tensor(slots, dtype=torch.long)
        batch = self.images[slots_t]
        coords = self.net(batch)

        terms = {}
        kp_vals = []
        for j, pi in enumerate(pair_idx):
            pts_a, pts_b = self.matches[self.pair_keys[pi]]
            value, skipped = losses.loss_kp(coords[2 * j], coords[2 * j + 1], pts_a, pts_b,
                                            tau=obj.tau, symmetrize=obj.symmetrize_kp)
            if not skipped:
                kp_vals.append(value)
        terms["kp"] = torch.stack(kp_vals).mean() if kp_vals else None

        h, w = batch.shape[-2:]
        grids = torch.stack([
            torch.from_numpy(
                sample_tps(self.rng_tps, cfg.tps_strength).sample_grid(h, w).locations
            ).float()
            for _ in range(batch.shape[0])])
        warped, _ = warp_map(batch, grids)
        coords_of_warped = self.net(warped)
        equi, equi_skipped = losses.equi_discrepancy(coords, coords_of_warped, grids)
        terms["equi"] = None if equi_skipped else equi

        terms["tv"] = losses.loss_tv(coords, huber_delta=obj.huber_delta)
        terms["recon"] = losses.loss_recon(batch, self.masks[slots_t], self.grid.grid,
                                           coords, self.perceptual, bce_eps=obj.bce_eps)
        if self.parts is not None:
            terms["parts"] = losses.loss_parts(coords, self.parts[slots_t])

        total, breakdown = losses.total_loss(terms, obj)
        self.optimizer.zero_grad()
        total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.parameters(), cfg.grad_clip)
        self.optimizer.step()
        self.grid.project_()
        return float(total.detach()), breakdown

    # -- persistence -----------------------------------------------------

    def save_checkpoint(self, path):
        arrays = {}
        for key, value in self.net.state_dict().items():
            arrays[f"net.{key}"] = value.detach().numpy()
        arrays["grid.grid"] = self.grid.grid.detach().numpy()
        opt_sd = self.optimizer.state_dict()
        for idx, entry in opt_sd["state"].items():
            for key, value in entry.items():
                arrays[f"opt.{idx}.{key}"] = value.detach().numpy()
        arrays["torch_rng"] = torch.get_rng_state().numpy()
        meta = {
            "artifact_version": ARTIFACT_VERSION,
            "iteration": self.iteration,
            "train_config": _jsonable(vars(self.config)),
            "objective_config": _jsonable(vars(self.objective)),
            "model_seed": self.model_seed,
            "collection_id": self.collection.collection_id,
            "opt_param_groups": json.dumps(opt_sd["param_groups"], sort_keys=True),
            "rng_pairs": json.dumps(self.rng_pairs.bit_generator.state, sort_keys=True),
            "rng_tps": json.dumps(self.rng_tps.bit_generator.state, sort_keys=True),
        }
        save_state(path, meta, arrays)


def _jsonable(d: dict) -> dict:
    return {k: (v if not isinstance(v, Path) else str(v)) for k, v in d.items()}


def load_model_from_checkpoint(path):
    """Rebuild (net, grid, meta) in eval mode from a checkpoint file."""
    meta, arrays = load_state(path)
    if meta.get("artifact_version") != ARTIFACT_VERSION:
        raise CheckpointError(
            f"checkpoint artifact version {meta.get('artifact_version')} "
            f"incompatible with {ARTIFACT_VERSION}")
    config = TrainConfig(**meta["train_config"])
    net = AlignmentNetwork(base_channels=config.base_channels)
    net.load_state_dict({k[len("net."):]: torch.from_numpy(v.copy())
                         for k, v in arrays.items() if k.startswith("net.")})
    net.eval()
    grid = CanonicalGrid(config.grid_size)
    with torch.no_grad():
        grid.grid.copy_(torch.from_numpy(arrays["grid.grid"].copy()))
    return net, grid, meta
