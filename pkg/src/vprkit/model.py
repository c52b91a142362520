"""Descriptor model: fusion of the two encoder token sets followed by
query-residual aggregation, with hand-derived reverse passes and a
checkpoint format (magic b"VPRC", versioned, CRC-protected)."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import aggregation as agg
from . import fusion as fus
from .aggregation import GlobalDescriptor, QueryBank
from .dataio import BadMagicError, CrcMismatchError, TruncatedFileError, UnsupportedVersionError
from .fusion import FusionParams, TokenSet
from .optim import AdamW
from .tensor import Parameter

CHECKPOINT_MAGIC = b"VPRC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    dim: int
    clip_dim: Optional[int] = None
    fusion: str = "residual"
    aggregation: str = "vlaq"
    assignment: str = "softmax"
    blocks: int = 2
    queries_per_block: int = 64
    projection_dim: Optional[int] = None
    sinkhorn_iters: int = 50
    sinkhorn_tol: float = 1e-6

    def __post_init__(self):
        if self.fusion not in fus.VARIANTS:
            raise ValueError(f"fusion must be one of {fus.VARIANTS}, got {self.fusion!r}")
        if self.aggregation not in agg.AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {agg.AGGREGATIONS}, got {self.aggregation!r}")
        if self.assignment not in agg.ASSIGNMENTS:
            raise ValueError(f"assignment must be one of {agg.ASSIGNMENTS}, got {self.assignment!r}")
        if self.dim < 1 or self.blocks < 1 or self.queries_per_block < 1:
            raise ValueError("dim, blocks, queries_per_block must all be >= 1")

    @property
    def descriptor_dim(self) -> int:
        if self.projection_dim is not None:
            return self.projection_dim
        return self.blocks * self.queries_per_block * self.dim

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "clip_dim": self.clip_dim,
            "fusion": self.fusion,
            "aggregation": self.aggregation,
            "assignment": self.assignment,
            "blocks": self.blocks,
            "queries_per_block": self.queries_per_block,
            "projection_dim": self.projection_dim,
            "sinkhorn_iters": self.sinkhorn_iters,
            "sinkhorn_tol": self.sinkhorn_tol,
        }


@dataclass
class ModelCache:
    x_d: TokenSet
    x_c: TokenSet
    fusion_cache: fus.FusionCache
    fused: np.ndarray
    assignments: list[agg.AssignmentMatrix]
    residuals: list[np.ndarray]
    desc_cache: agg.DescriptorCache


class DescriptorModel:
    def __init__(self, config: ModelConfig, fusion_params: FusionParams, queries: QueryBank,
                 projection: Optional[Parameter] = None):
        self.config = config
        self.fusion_params = fusion_params
        self.queries = queries
        self.projection = projection

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "DescriptorModel":
        rng = np.random.default_rng(seed)
        fusion_params = FusionParams.create(
            config.dim, config.fusion, clip_dim=config.clip_dim, rng=rng
        )
        queries = QueryBank.create(config.blocks, config.queries_per_block, config.dim, rng)
        projection = None
        if config.projection_dim is not None:
            full = config.blocks * config.queries_per_block * config.dim
            bound = 1.0 / np.sqrt(full)
            projection = Parameter(
                "projection", rng.uniform(-bound, bound, (full, config.projection_dim))
            )
        return cls(config, fusion_params, queries, projection)

    def parameters(self) -> list[Parameter]:
        out = list(self.fusion_params.trainable())
        out.append(self.queries.param)
        if self.projection is not None:
            out.append(self.projection)
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x_d: TokenSet, x_c: TokenSet) -> tuple[GlobalDescriptor, ModelCache]:
        x_d = x_d.row_normalized()
        x_c = x_c.row_normalized()
        fused_set, fusion_cache = fus.fuse(x_d, x_c, self.fusion_params)
        z = fused_set.tokens
        assignments: list[agg.AssignmentMatrix] = []
        residuals: list[np.ndarray] = []
        for b in range(self.queries.blocks):
            q = self.queries.block(b)
            scores = agg.similarity_scores(z, q)
            if self.config.assignment == "softmax":
                assignment = agg.assign_softmax(scores)
            else:
                assignment = agg.assign_sinkhorn(
                    scores, self.config.sinkhorn_iters, self.config.sinkhorn_tol
                )
            if self.config.aggregation == "vlaq":
                v = agg.aggregate_vlaq(z, q, assignment.alpha)
            else:
                v = agg.aggregate_boq(z, assignment.alpha)
            assignments.append(assignment)
            residuals.append(v)
        descriptor, desc_cache = agg.build_descriptor(residuals, self.projection)
        cache = ModelCache(
            x_d=x_d,
            x_c=x_c,
            fusion_cache=fusion_cache,
            fused=z,
            assignments=assignments,
            residuals=residuals,
            desc_cache=desc_cache,
        )
        return descriptor, cache

    def encode(self, x_d: TokenSet, x_c: TokenSet) -> GlobalDescriptor:
        descriptor, _ = self.forward(x_d, x_c)
        return descriptor

    def backward(self, d_values: np.ndarray, cache: ModelCache) -> tuple[np.ndarray, np.ndarray]:
        """Accumulate parameter gradients; returns token-input gradients."""
        d_blocks = agg.descriptor_backward(d_values, cache.desc_cache, self.projection)
        z = cache.fused
        d_z = np.zeros_like(z)
        for b in range(self.queries.blocks):
            q = self.queries.block(b)
            assignment = cache.assignments[b]
            d_v = d_blocks[b]
            if self.config.aggregation == "vlaq":
                d_tok, d_q, d_alpha = agg.vlaq_backward(d_v, z, q, assignment.alpha)
            else:
                d_tok, d_alpha = agg.boq_backward(d_v, z, assignment.alpha)
                d_q = np.zeros_like(q)
            if assignment.mode == "softmax":
                d_scores = agg.softmax_assignment_backward(d_alpha, assignment.alpha)
            else:
                d_scores = agg.sinkhorn_backward(d_alpha, assignment.aux)
            d_tok_s, d_q_s = agg.scores_backward(d_scores, z, q)
            d_z += d_tok + d_tok_s
            self.queries.block_grad(b)[:] += d_q + d_q_s
        return fus.fusion_backward(self.fusion_params, cache.fusion_cache, d_z)


def save_checkpoint(
    path: str | Path, model: DescriptorModel, optimizer: Optional[AdamW] = None, step: int = 0
) -> None:
    body = bytearray()
    config_json = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    body += struct.pack("<I", len(config_json))
    body += config_json
    body += struct.pack("<Q", step)

    params = model.parameters()
    body += struct.pack("<I", len(params))
    has_opt = optimizer is not None
    body += struct.pack("<B", 1 if has_opt else 0)
    if has_opt:
        body += struct.pack(
            "<dddd", optimizer.weight_decay, optimizer.beta1, optimizer.beta2, optimizer.eps
        )
        body += struct.pack("<Q", optimizer.t)
    for i, p in enumerate(params):
        raw = p.name.encode("utf-8")
        body += struct.pack("<H", len(raw))
        body += raw
        body += struct.pack("<dB", p.lr_multiplier, 1 if p.decay else 0)
        shape = p.value.shape
        body += struct.pack("<B", len(shape))
        for s in shape:
            body += struct.pack("<I", s)
        body += np.ascontiguousarray(p.value, dtype="<f8").tobytes()
        if has_opt:
            body += np.ascontiguousarray(optimizer.m[i], dtype="<f8").tobytes()
            body += np.ascontiguousarray(optimizer.v[i], dtype="<f8").tobytes()

    header = struct.pack("<4sH", CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    Path(path).write_bytes(header + bytes(body) + struct.pack("<I", crc))


@dataclass
class Checkpoint:
    config: ModelConfig
    step: int
    values: dict[str, np.ndarray]
    lr_multipliers: dict[str, float]
    decay_flags: dict[str, bool]
    opt_moments: Optional[dict[str, tuple[np.ndarray, np.ndarray]]] = None
    opt_hyper: Optional[dict[str, float]] = None
    opt_t: int = 0

    def build_model(self) -> DescriptorModel:
        model = DescriptorModel.create(self.config, seed=0)
        self.load_into(model)
        return model

    def load_into(self, model: DescriptorModel, optimizer: Optional[AdamW] = None) -> None:
        params = model.parameters()
        names = {p.name for p in params}
        if names != set(self.values):
            raise ValueError(
                f"checkpoint parameters {sorted(self.values)} do not match model {sorted(names)}"
            )
        for i, p in enumerate(params):
            stored = self.values[p.name]
            if stored.shape != p.value.shape:
                raise ValueError(
                    f"parameter {p.name}: checkpoint shape {stored.shape} != model {p.value.shape}"
                )
            p.value[...] = stored
            p.lr_multiplier = self.lr_multipliers[p.name]
            p.decay = self.decay_flags[p.name]
            if optimizer is not None:
                if self.opt_moments is None:
                    raise ValueError("checkpoint carries no optimizer state")
                m, v = self.opt_moments[p.name]
                optimizer.m[i][...] = m
                optimizer.v[i][...] = v
        if optimizer is not None:
            optimizer.t = self.opt_t


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 6 + 4:
        raise TruncatedFileError(f"{path}: shorter than the fixed header")
    magic, version = struct.unpack_from("<4sH", blob)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    body = blob[6:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CrcMismatchError(f"{path}: body CRC mismatch")
    try:
        off = 0
        (cfg_len,) = struct.unpack_from("<I", body, off)
        off += 4
        config = ModelConfig(**json.loads(body[off : off + cfg_len].decode("utf-8")))
        off += cfg_len
        (step,) = struct.unpack_from("<Q", body, off)
        off += 8
        (n_params,) = struct.unpack_from("<I", body, off)
        off += 4
        (has_opt,) = struct.unpack_from("<B", body, off)
        off += 1
        opt_hyper = None
        opt_t = 0
        if has_opt:
            wd, b1, b2, eps = struct.unpack_from("<dddd", body, off)
            off += 32
            (opt_t,) = struct.unpack_from("<Q", body, off)
            off += 8
            opt_hyper = {"weight_decay": wd, "beta1": b1, "beta2": b2, "eps": eps}
        values: dict[str, np.ndarray] = {}
        multipliers: dict[str, float] = {}
        decays: dict[str, bool] = {}
        moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + name_len].decode("utf-8")
            off += name_len
            mult, decay = struct.unpack_from("<dB", body, off)
            off += 9
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arrays = []
            n_arrays = 3 if has_opt else 1
            for _a in range(n_arrays):
                arrays.append(
                    np.frombuffer(body[off : off + size * 8], dtype="<f8").reshape(shape).copy()
                )
                off += size * 8
            values[name] = arrays[0]
            multipliers[name] = mult
            decays[name] = bool(decay)
            if has_opt:
                moments[name] = (arrays[1], arrays[2])
    except (struct.error, ValueError, KeyError, json.JSONDecodeError) as e:
        raise TruncatedFileError(f"{path}: body damaged: {e}") from e
    if off != len(body):
        raise TruncatedFileError(f"{path}: {len(body) - off} unread bytes in body")
    return Checkpoint(
        config=config,
        step=step,
        values=values,
        lr_multipliers=multipliers,
        decay_flags=decays,
        opt_moments=moments if has_opt else None,
        opt_hyper=opt_hyper,
        opt_t=opt_t,
    )
