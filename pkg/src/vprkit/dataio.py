"""File formats, dataset manifests, synthetic data, and batch sampling.

Token file layout (all little-endian, normative for external producers):

    magic   4 bytes  b"VPRT"
    version u16      currently 1
    source  u8       0 = DINO-side, 1 = CLIP-side, 2 = fused
    h       u16      token grid height
    w       u16      token grid width
    dim     u16      channels per token
    payload h*w*dim  float32, row-major
    crc     u32      CRC-32 of the payload bytes

Descriptor files use the same discipline (magic b"VPRD") with id-tagged
records. Manifests are human-editable JSON.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .fusion import Source, TokenSet
from .tensor import l2_normalize_rows

log = logging.getLogger(__name__)

TOKEN_MAGIC = b"VPRT"
TOKEN_VERSION = 1
DESC_MAGIC = b"VPRD"
DESC_VERSION = 1
_TOKEN_HEADER = struct.Struct("<4sHBHHH")

_SOURCE_TAGS = {Source.DINO: 0, Source.CLIP: 1, Source.FUSED: 2}
_TAG_SOURCES = {v: k for k, v in _SOURCE_TAGS.items()}


class TokenFileError(ValueError):
    """Base class for token/descriptor file problems; `code` names the kind."""

    code = "invalid"


class BadMagicError(TokenFileError):
    code = "bad-magic"


class UnsupportedVersionError(TokenFileError):
    code = "unsupported-version"


class TruncatedFileError(TokenFileError):
    code = "truncated"


class CrcMismatchError(TokenFileError):
    code = "crc-mismatch"


class NonFinitePayloadError(TokenFileError):
    code = "non-finite"


class BadHeaderError(TokenFileError):
    code = "bad-header"


def write_tokens(path: str | Path, tokens: TokenSet) -> None:
    h, w = tokens.grid
    payload = np.ascontiguousarray(tokens.tokens, dtype="<f4").tobytes()
    header = _TOKEN_HEADER.pack(
        TOKEN_MAGIC, TOKEN_VERSION, _SOURCE_TAGS[tokens.source], h, w, tokens.dim
    )
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(header + payload + struct.pack("<I", crc))


def read_tokens(path: str | Path, image_id: Optional[str] = None) -> TokenSet:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _TOKEN_HEADER.size:
        raise TruncatedFileError(f"{path}: shorter than the fixed header")
    magic, version, tag, h, w, dim = _TOKEN_HEADER.unpack_from(blob)
    if magic != TOKEN_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != TOKEN_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    if tag not in _TAG_SOURCES:
        raise BadHeaderError(f"{path}: unknown source tag {tag}")
    if h < 1 or w < 1 or dim < 1:
        raise BadHeaderError(f"{path}: degenerate grid {h}x{w}x{dim}")
    n_bytes = h * w * dim * 4
    expected = _TOKEN_HEADER.size + n_bytes + 4
    if len(blob) < expected:
        raise TruncatedFileError(f"{path}: {len(blob)} bytes, expected {expected}")
    if len(blob) > expected:
        raise BadHeaderError(f"{path}: {len(blob) - expected} trailing bytes")
    payload = blob[_TOKEN_HEADER.size : _TOKEN_HEADER.size + n_bytes]
    (crc,) = struct.unpack_from("<I", blob, _TOKEN_HEADER.size + n_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CrcMismatchError(f"{path}: payload CRC mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(h * w, dim)
    if not np.isfinite(data).all():
        bad = int(np.flatnonzero(~np.isfinite(data.reshape(-1)))[0])
        raise NonFinitePayloadError(f"{path}: non-finite float at flat index {bad}")
    return TokenSet(
        tokens=data.astype(np.float64),
        source=_TAG_SOURCES[tag],
        image_id=image_id if image_id is not None else path.stem,
        grid=(h, w),
    )


def write_descriptors(path: str | Path, ids: list[str], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ValueError(f"{len(ids)} ids for descriptor matrix of shape {matrix.shape}")
    body = bytearray()
    body += struct.pack("<II", len(ids), matrix.shape[1])
    for i, did in enumerate(ids):
        raw = did.encode("utf-8")
        body += struct.pack("<H", len(raw))
        body += raw
        body += np.ascontiguousarray(matrix[i], dtype="<f4").tobytes()
    header = struct.pack("<4sH", DESC_MAGIC, DESC_VERSION)
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    Path(path).write_bytes(header + bytes(body) + struct.pack("<I", crc))


def read_descriptors(path: str | Path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 6 + 4:
        raise TruncatedFileError(f"{path}: shorter than the fixed header")
    magic, version = struct.unpack_from("<4sH", blob)
    if magic != DESC_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != DESC_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    body = blob[6:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CrcMismatchError(f"{path}: body CRC mismatch")
    try:
        count, dim = struct.unpack_from("<II", body)
        off = 8
        ids: list[str] = []
        rows = np.empty((count, dim), dtype=np.float64)
        for i in range(count):
            (id_len,) = struct.unpack_from("<H", body, off)
            off += 2
            ids.append(body[off : off + id_len].decode("utf-8"))
            off += id_len
            rows[i] = np.frombuffer(body[off : off + dim * 4], dtype="<f4")
            off += dim * 4
    except (struct.error, ValueError) as e:
        raise TruncatedFileError(f"{path}: record region damaged: {e}") from e
    if off != len(body):
        raise BadHeaderError(f"{path}: {len(body) - off} trailing bytes in body")
    if not np.isfinite(rows).all():
        raise NonFinitePayloadError(f"{path}: non-finite descriptor values")
    return ids, rows


@dataclass
class ManifestEntry:
    id: str
    token_paths: dict[str, Path]  # source name -> token file path
    place: Optional[str] = None
    positives: list[str] = field(default_factory=list)


@dataclass
class DatasetManifest:
    name: str
    database: list[ManifestEntry]
    queries: list[ManifestEntry]
    root: Path

    def database_ids(self) -> list[str]:
        return [e.id for e in self.database]

    def places(self) -> dict[str, list[ManifestEntry]]:
        out: dict[str, list[ManifestEntry]] = {}
        for e in self.database:
            if e.place is not None:
                out.setdefault(e.place, []).append(e)
        return out

    def positives_map(self) -> dict[str, list[str]]:
        return {q.id: list(q.positives) for q in self.queries}


def _parse_entry(raw: dict, root: Path, is_query: bool, where: str) -> ManifestEntry:
    allowed = {"id", "tokens", "place"} | ({"positives"} if is_query else set())
    unknown = set(raw) - allowed
    if unknown:
        raise ValueError(f"{where}: unknown manifest keys {sorted(unknown)}")
    for key in ("id", "tokens"):
        if key not in raw:
            raise ValueError(f"{where}: missing required key {key!r}")
    paths = {src: root / p for src, p in raw["tokens"].items()}
    return ManifestEntry(
        id=raw["id"],
        token_paths=paths,
        place=raw.get("place"),
        positives=list(raw.get("positives", [])),
    )


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    unknown = set(doc) - {"name", "database", "queries"}
    if unknown:
        raise ValueError(f"{path}: unknown manifest keys {sorted(unknown)}")
    root = path.parent
    database = [
        _parse_entry(e, root, False, f"{path} database[{i}]")
        for i, e in enumerate(doc.get("database", []))
    ]
    queries = [
        _parse_entry(e, root, True, f"{path} queries[{i}]")
        for i, e in enumerate(doc.get("queries", []))
    ]
    ids = [e.id for e in database] + [e.id for e in queries]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate image ids")
    db_ids = {e.id for e in database}
    for q in queries:
        missing = set(q.positives) - db_ids
        if missing:
            raise ValueError(f"{path}: query {q.id!r} positives not in database: {sorted(missing)}")
    for e in database + queries:
        for src, p in e.token_paths.items():
            if not p.is_file():
                raise FileNotFoundError(f"{path}: {e.id!r} {src} token file missing: {p}")
    return DatasetManifest(name=doc.get("name", path.stem), database=database, queries=queries, root=root)


def save_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    path = Path(path)

    def encode(e: ManifestEntry, is_query: bool) -> dict:
        d: dict = {
            "id": e.id,
            "tokens": {src: str(p.relative_to(path.parent)) for src, p in e.token_paths.items()},
        }
        if e.place is not None:
            d["place"] = e.place
        if is_query:
            d["positives"] = e.positives
        return d

    doc = {
        "name": manifest.name,
        "database": [encode(e, False) for e in manifest.database],
        "queries": [encode(e, True) for e in manifest.queries],
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


@dataclass
class SynthSpec:
    """Desk-scale synthetic place dataset: clustered unit tokens per place,
    with the CLIP-like source a fixed orthogonal rotation of the DINO-like
    tokens plus independent noise (so fusion has something real to learn)."""

    places: int = 32
    images_per_place: int = 4
    queries_per_place: int = 1
    dim: int = 16
    tokens: int = 16
    sigma: float = 0.15
    clip_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.places < 2 or self.images_per_place < 2:
            raise ValueError("need at least 2 places and 2 images per place")
        if self.sigma < 0 or self.clip_sigma < 0:
            raise ValueError("noise levels must be >= 0")
        if self.queries_per_place < 0:
            raise ValueError("queries_per_place must be >= 0")


def _grid_for(m: int) -> tuple[int, int]:
    r = int(np.sqrt(m))
    if r * r == m:
        return (r, r)
    return (1, m)


def _random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    # QR with a positive-diagonal convention gives a deterministic orthogonal map.
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def generate_synthetic(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Write token files plus a manifest; pure function of the spec."""
    out_dir = Path(out_dir)
    token_dir = out_dir / "tokens"
    token_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    rotation = _random_rotation(spec.dim, rng)
    grid = _grid_for(spec.tokens)

    database: list[ManifestEntry] = []
    queries: list[ManifestEntry] = []
    for p in range(spec.places):
        place = f"p{p:03d}"
        center = l2_normalize_rows(rng.standard_normal((spec.tokens, spec.dim)))
        for i in range(spec.images_per_place + spec.queries_per_place):
            is_query = i >= spec.images_per_place
            image_id = f"q_{place}_{i - spec.images_per_place}" if is_query else f"db_{place}_{i}"
            dino = l2_normalize_rows(
                center + spec.sigma * rng.standard_normal((spec.tokens, spec.dim))
            )
            clip = l2_normalize_rows(
                dino @ rotation + spec.clip_sigma * rng.standard_normal((spec.tokens, spec.dim))
            )
            paths = {
                "dino": token_dir / f"{image_id}.dino.vprt",
                "clip": token_dir / f"{image_id}.clip.vprt",
            }
            write_tokens(paths["dino"], TokenSet(dino, Source.DINO, image_id, grid))
            write_tokens(paths["clip"], TokenSet(clip, Source.CLIP, image_id, grid))
            entry = ManifestEntry(id=image_id, token_paths=paths, place=place)
            if is_query:
                entry.positives = [f"db_{place}_{j}" for j in range(spec.images_per_place)]
                queries.append(entry)
            else:
                database.append(entry)

    manifest = DatasetManifest(
        name=f"synth-{spec.places}x{spec.images_per_place}",
        database=database,
        queries=queries,
        root=out_dir,
    )
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest_path, manifest)
    return manifest_path


def sample_place_balanced_batches(
    manifest: DatasetManifest, places_per_batch: int, images_per_place: int, seed
) -> Iterator[list[ManifestEntry]]:
    """One epoch of batches, each exactly `places_per_batch` distinct places
    with `images_per_place` images sampled per place. Places with too few
    images are skipped (once, with a warning); each place appears in at most
    one batch per epoch; a trailing group smaller than a full batch is dropped.
    """
    if places_per_batch < 1 or images_per_place < 1:
        raise ValueError("places_per_batch and images_per_place must be >= 1")
    places = manifest.places()
    eligible = []
    for place in sorted(places):
        if len(places[place]) < images_per_place:
            log.warning(
                "place %s has %d images, need %d; skipping",
                place,
                len(places[place]),
                images_per_place,
            )
            continue
        eligible.append(place)
    if len(eligible) < places_per_batch:
        raise ValueError(
            f"only {len(eligible)} usable places for batches of {places_per_batch}"
        )
    rng = np.random.default_rng(seed)
    order = list(eligible)
    rng.shuffle(order)
    n_batches = len(order) // places_per_batch
    for b in range(n_batches):
        chunk = order[b * places_per_batch : (b + 1) * places_per_batch]
        batch: list[ManifestEntry] = []
        for place in chunk:
            entries = places[place]
            picked = rng.choice(len(entries), size=images_per_place, replace=False)
            batch.extend(entries[int(i)] for i in picked)
        yield batch
