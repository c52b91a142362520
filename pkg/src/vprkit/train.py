"""Deterministic desk-scale training loop over precomputed token files."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig
from .dataio import DatasetManifest, read_tokens, sample_place_balanced_batches
from .fusion import TokenSet
from .loss import ms_loss_descriptor_grad
from .model import DescriptorModel, ModelConfig, load_checkpoint, save_checkpoint
from .optim import AdamW, assign_param_groups, lr_at
from .tensor import NumericalError

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    steps: int
    first_loss: Optional[float]
    last_loss: Optional[float]


class TokenStore:
    """In-memory cache of row-normalized token pairs keyed by image id."""

    def __init__(self, manifest: DatasetManifest):
        self._paths = {
            e.id: (e.token_paths["dino"], e.token_paths["clip"])
            for e in manifest.database + manifest.queries
        }
        self._cache: dict[str, tuple[TokenSet, TokenSet]] = {}

    def get(self, image_id: str) -> tuple[TokenSet, TokenSet]:
        if image_id not in self._cache:
            if image_id not in self._paths:
                raise KeyError(f"image id {image_id!r} not in manifest")
            dino_path, clip_path = self._paths[image_id]
            dino = read_tokens(dino_path, image_id=image_id).row_normalized()
            clip = read_tokens(clip_path, image_id=image_id).row_normalized()
            self._cache[image_id] = (dino, clip)
        return self._cache[image_id]

    def dims(self) -> tuple[int, int]:
        any_id = next(iter(self._paths))
        dino, clip = self.get(any_id)
        return dino.dim, clip.dim


def model_config_from_run(cfg: RunConfig, dim: int, clip_dim: int) -> ModelConfig:
    return ModelConfig(
        dim=dim,
        clip_dim=None if clip_dim == dim else clip_dim,
        fusion=cfg.fusion,
        aggregation=cfg.aggregation,
        assignment=cfg.assignment,
        blocks=cfg.blocks,
        queries_per_block=cfg.queries_per_block,
        projection_dim=cfg.projection_dim,
        sinkhorn_iters=cfg.sinkhorn_iters,
        sinkhorn_tol=cfg.sinkhorn_tol,
    )


def run_training(
    cfg: RunConfig,
    manifest: DatasetManifest,
    out_dir: str | Path,
    seed: Optional[int] = None,
    resume: Optional[str | Path] = None,
) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if seed is None else seed

    places = {p: es for p, es in manifest.places().items() if len(es) >= cfg.train.images_per_place}
    if len(places) < 2:
        raise ValueError(
            f"degenerate dataset: {len(places)} places with >= {cfg.train.images_per_place} images; need >= 2"
        )
    if len(places) < cfg.train.places_per_batch:
        raise ValueError(
            f"manifest has {len(places)} usable places but places_per_batch={cfg.train.places_per_batch}"
        )

    store = TokenStore(manifest)
    dim, clip_dim = store.dims()

    start_step = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model = DescriptorModel.create(ckpt.config, seed=seed)
        optimizer = AdamW(model.parameters(), weight_decay=cfg.weight_decay)
        ckpt.load_into(model, optimizer)
        start_step = ckpt.step
    else:
        model = DescriptorModel.create(model_config_from_run(cfg, dim, clip_dim), seed=seed)
        assign_param_groups(model.parameters(), cfg.group_multipliers)
        optimizer = AdamW(model.parameters(), weight_decay=cfg.weight_decay)

    steps_per_epoch = len(places) // cfg.train.places_per_batch
    total_steps = cfg.train.epochs * steps_per_epoch
    if cfg.train.max_steps is not None:
        total_steps = min(total_steps, cfg.train.max_steps)

    log_path = out_dir / "train_log.txt"
    checkpoint_path = out_dir / "checkpoint.vprc"
    first_loss = None
    last_loss = None
    step = start_step
    with open(log_path, "a") as log_file:
        while step < total_steps:
            epoch_idx = step // steps_per_epoch
            skip = step % steps_per_epoch
            batches = sample_place_balanced_batches(
                manifest,
                cfg.train.places_per_batch,
                cfg.train.images_per_place,
                seed=[seed, epoch_idx],
            )
            for b, batch in enumerate(batches):
                if b < skip:
                    continue
                if step >= total_steps:
                    break
                lr = lr_at(cfg.schedule, step / steps_per_epoch)
                model.zero_grad()
                descriptors = []
                caches = []
                labels = []
                for entry in batch:
                    dino, clip = store.get(entry.id)
                    desc, cache = model.forward(dino, clip)
                    descriptors.append(desc.values)
                    caches.append(cache)
                    labels.append(entry.place)
                g = np.stack(descriptors)
                loss, d_g, _ = ms_loss_descriptor_grad(g, labels, cfg.ms)
                if not np.isfinite(loss):
                    raise NumericalError(f"step {step}: non-finite loss {loss}")
                for i, cache in enumerate(caches):
                    model.backward(d_g[i], cache)
                optimizer.step(lr)
                log_file.write(f"{step} {loss:.9f} {lr:.9e}\n")
                if first_loss is None:
                    first_loss = loss
                last_loss = loss
                step += 1
    save_checkpoint(checkpoint_path, model, optimizer, step)
    return TrainResult(
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        steps=step,
        first_loss=first_loss,
        last_loss=last_loss,
    )
