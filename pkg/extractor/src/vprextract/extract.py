"""Per-image token export: two aligned token files per image.

The DINO-side backbone runs at the requested resolution and defines the
token grid; the CLIP-side backbone runs at its own native input size and
its patch-token grid is bilinearly resampled to the DINO grid, so both
files share (h, w). Every token row is L2-normalized before writing, and
class/global tokens are never exported.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .backbones import Backbone, build_backbone
from .tokenfile import SOURCE_CLIP, SOURCE_DINO, write_token_file


@dataclass
class ExtractorConfig:
    dino_model: str = "dinov2"
    clip_model: str = "clip"
    resolution: int = 322  # 280 for training exports, 322 for evaluation
    out_dir: Path = Path("tokens_out")
    device: str = "cpu"

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if self.resolution < 1:
            raise ValueError(f"resolution must be positive, got {self.resolution}")


class Extractor:
    def __init__(self, config: ExtractorConfig):
        self.config = config
        self.dino = build_backbone(config.dino_model)
        self.clip = build_backbone(config.clip_model)
        if config.resolution % self.dino.patch_size != 0:
            raise ValueError(
                f"resolution {config.resolution} not divisible by the "
                f"{self.dino.name} patch size {self.dino.patch_size}"
            )

    def _prepare(self, image: Image.Image, backbone: Backbone) -> torch.Tensor:
        size = backbone.native_resolution or self.config.resolution
        resized = image.resize((size, size), Image.BILINEAR)
        x = torch.from_numpy(np.asarray(resized, dtype=np.float32) / 255.0)
        x = x.permute(2, 0, 1)
        mean = torch.tensor(backbone.mean).view(3, 1, 1)
        std = torch.tensor(backbone.std).view(3, 1, 1)
        return ((x - mean) / std).unsqueeze(0).to(self.config.device)

    @torch.no_grad()
    def tokens_for(self, image_path: str | Path) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
        """Returns (dino_tokens, clip_tokens, grid); both M x d, unit rows."""
        try:
            image = Image.open(image_path).convert("RGB")
        except OSError as e:
            raise ValueError(f"unreadable image {image_path}: {e}") from e

        grid = self.dino.grid_for(self.config.resolution)
        dino_tokens = self.dino.forward(self._prepare(image, self.dino))
        dino_tokens = _to_grid_tokens(dino_tokens, self.dino.grid_for(self.config.resolution))

        clip_size = self.clip.native_resolution or self.config.resolution
        clip_grid = self.clip.grid_for(clip_size)
        clip_tokens = self.clip.forward(self._prepare(image, self.clip))
        clip_tokens = _to_grid_tokens(clip_tokens, clip_grid)
        clip_tokens = _resample_grid(clip_tokens, clip_grid, grid)

        dino_np = _normalize_rows(dino_tokens.squeeze(0).cpu().numpy())
        clip_np = _normalize_rows(clip_tokens.squeeze(0).cpu().numpy())
        if dino_np.shape[0] != clip_np.shape[0]:
            raise ValueError(
                f"grid mismatch after resampling: {dino_np.shape[0]} vs {clip_np.shape[0]} tokens"
            )
        return dino_np, clip_np, grid

    def extract(self, image_path: str | Path, stem: Optional[str] = None) -> tuple[Path, Path]:
        """Write the DINO-side and CLIP-side token files for one image."""
        image_path = Path(image_path)
        stem = stem if stem is not None else sanitize_id(image_path.stem)
        dino_np, clip_np, grid = self.tokens_for(image_path)
        self.config.out_dir.mkdir(parents=True, exist_ok=True)
        dino_path = self.config.out_dir / f"{stem}.dino.vprt"
        clip_path = self.config.out_dir / f"{stem}.clip.vprt"
        write_token_file(dino_path, dino_np, SOURCE_DINO, grid)
        write_token_file(clip_path, clip_np, SOURCE_CLIP, grid)
        return dino_path, clip_path


def _to_grid_tokens(tokens: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    h, w = grid
    if tokens.ndim != 3:
        raise ValueError(f"expected (1, tokens, dim) output, got shape {tuple(tokens.shape)}")
    if tokens.shape[1] == h * w + 1:
        tokens = tokens[:, 1:]  # drop a leading class token
    if tokens.shape[1] != h * w:
        raise ValueError(f"backbone produced {tokens.shape[1]} tokens, expected {h * w}")
    return tokens


def _resample_grid(tokens: torch.Tensor, src: tuple[int, int], dst: tuple[int, int]) -> torch.Tensor:
    if src == dst:
        return tokens
    b, _, dim = tokens.shape
    feat = tokens.transpose(1, 2).reshape(b, dim, *src)
    feat = torch.nn.functional.interpolate(feat, size=dst, mode="bilinear", align_corners=False)
    return feat.flatten(2).transpose(1, 2)


def _normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return (x / np.maximum(norms, eps)).astype(np.float32)


def sanitize_id(raw: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", raw)


@dataclass
class ImageListEntry:
    path: Path
    place: Optional[str] = None
    positives: list[str] = field(default_factory=list)


def load_image_list(path: str | Path) -> tuple[list[ImageListEntry], list[ImageListEntry]]:
    """Image list document: {"database": [{"path", "place"?}],
    "queries": [{"path", "place"?, "positives": [ids]}]}."""
    path = Path(path)
    doc = json.loads(path.read_text())
    unknown = set(doc) - {"database", "queries"}
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")

    def parse(raw: dict, is_query: bool, where: str) -> ImageListEntry:
        allowed = {"path", "place"} | ({"positives"} if is_query else set())
        bad = set(raw) - allowed
        if bad:
            raise ValueError(f"{where}: unknown keys {sorted(bad)}")
        if "path" not in raw:
            raise ValueError(f"{where}: missing 'path'")
        return ImageListEntry(
            path=path.parent / raw["path"],
            place=raw.get("place"),
            positives=list(raw.get("positives", [])),
        )

    database = [parse(e, False, f"{path} database[{i}]") for i, e in enumerate(doc.get("database", []))]
    queries = [parse(e, True, f"{path} queries[{i}]") for i, e in enumerate(doc.get("queries", []))]
    return database, queries


def entry_id(entry: ImageListEntry, list_root: Path) -> str:
    try:
        rel = entry.path.relative_to(list_root)
    except ValueError:
        rel = Path(entry.path.name)
    return sanitize_id(str(rel.with_suffix("")))


def extract_manifest(
    list_path: str | Path, config: ExtractorConfig, manifest_name: str = "extracted"
) -> Path:
    """Export tokens for every listed image and write an engine manifest.

    Ids derive from paths relative to the list file, so reruns are
    idempotent; duplicate ids are an error.
    """
    list_path = Path(list_path)
    database, queries = load_image_list(list_path)
    extractor = Extractor(config)
    out_dir = config.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    token_dir = out_dir / "tokens"
    token_dir.mkdir(exist_ok=True)

    ids_seen: set[str] = set()
    db_ids: dict[str, ImageListEntry] = {}

    def export(entry: ImageListEntry) -> dict:
        image_id = entry_id(entry, list_path.parent)
        if image_id in ids_seen:
            raise ValueError(f"duplicate image id {image_id!r} (from {entry.path})")
        ids_seen.add(image_id)
        dino_np, clip_np, grid = extractor.tokens_for(entry.path)
        dino_path = token_dir / f"{image_id}.dino.vprt"
        clip_path = token_dir / f"{image_id}.clip.vprt"
        write_token_file(dino_path, dino_np, SOURCE_DINO, grid)
        write_token_file(clip_path, clip_np, SOURCE_CLIP, grid)
        record = {
            "id": image_id,
            "tokens": {
                "dino": str(dino_path.relative_to(out_dir)),
                "clip": str(clip_path.relative_to(out_dir)),
            },
        }
        if entry.place is not None:
            record["place"] = entry.place
        return record

    db_records = []
    for entry in database:
        record = export(entry)
        db_records.append(record)
        db_ids[record["id"]] = entry
    query_records = []
    for entry in queries:
        record = export(entry)
        missing = set(entry.positives) - set(db_ids)
        if missing:
            raise ValueError(
                f"query {record['id']!r}: positives not among database ids: {sorted(missing)}"
            )
        record["positives"] = list(entry.positives)
        query_records.append(record)

    manifest = {"name": manifest_name, "database": db_records, "queries": query_records}
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path
