"""Command-line surface: synth, train, encode, index, query, eval, gradcheck.

Exit codes: 0 success, 1 validation/configuration error, 2 numerical failure.
Every command is deterministic given (config, seed).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .dataio import (
    TokenFileError,
    load_manifest,
    read_descriptors,
    write_descriptors,
)
from .gradcheck import CASES, PASS_THRESHOLD, run_case
from .model import DescriptorModel, load_checkpoint
from .retrieval import DescriptorIndex, knn_query, recall_at_k
from .tensor import NumericalError
from .train import TokenStore, model_config_from_run, run_training

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


def _load_config(args) -> RunConfig:
    if args.config is None:
        return RunConfig()
    return RunConfig.from_file(args.config)


def _resolve(cfg_value, flag_value, flag: str):
    value = flag_value if flag_value is not None else cfg_value
    if value is None:
        raise ConfigError(f"missing {flag}: pass the flag or set it in the config")
    return value


def _manifest(cfg, args):
    return load_manifest(_resolve(cfg.manifest, args.manifest, "--manifest"))


def _out_dir(cfg, args) -> Path:
    out = Path(_resolve(cfg.out, args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    from .dataio import generate_synthetic

    cfg = _load_config(args)
    spec = cfg.synth
    if args.seed is not None:
        spec.seed = args.seed
    manifest_path = generate_synthetic(spec, _out_dir(cfg, args))
    print(f"wrote {manifest_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = _manifest(cfg, args)
    out_dir = _out_dir(cfg, args)
    result = run_training(cfg, manifest, out_dir, seed=args.seed, resume=args.checkpoint)
    print(f"trained {result.steps} steps; checkpoint {result.checkpoint_path}")
    if result.first_loss is not None:
        print(f"loss {result.first_loss:.6f} -> {result.last_loss:.6f}")
    return EXIT_OK


def _build_model(cfg: RunConfig, args, store: TokenStore) -> DescriptorModel:
    if args.checkpoint is not None:
        ckpt = load_checkpoint(args.checkpoint)
        model = DescriptorModel.create(ckpt.config, seed=cfg.seed)
        ckpt.load_into(model)
        return model
    # No checkpoint: a freshly initialized model (the untrained baseline).
    dim, clip_dim = store.dims()
    seed = cfg.seed if args.seed is None else args.seed
    return DescriptorModel.create(model_config_from_run(cfg, dim, clip_dim), seed=seed)


def _encode_split(model: DescriptorModel, store: TokenStore, entries) -> tuple[list[str], np.ndarray]:
    ids = []
    rows = []
    for entry in entries:
        dino, clip = store.get(entry.id)
        desc = model.encode(dino, clip)
        ids.append(entry.id)
        rows.append(desc.values)
    return ids, np.stack(rows) if rows else np.zeros((0, model.config.descriptor_dim))


def cmd_encode(args) -> int:
    cfg = _load_config(args)
    manifest = _manifest(cfg, args)
    out_dir = _out_dir(cfg, args)
    store = TokenStore(manifest)
    model = _build_model(cfg, args, store)
    db_ids, db = _encode_split(model, store, manifest.database)
    q_ids, q = _encode_split(model, store, manifest.queries)
    write_descriptors(out_dir / "descriptors_db.bin", db_ids, db)
    write_descriptors(out_dir / "descriptors_query.bin", q_ids, q)
    print(f"encoded {len(db_ids)} database and {len(q_ids)} query descriptors to {out_dir}")
    return EXIT_OK


def cmd_index(args) -> int:
    cfg = _load_config(args)
    out_dir = _out_dir(cfg, args)
    src = args.descriptors or (out_dir / "descriptors_db.bin")
    ids, matrix = read_descriptors(src)
    index = DescriptorIndex.build(ids, matrix)
    write_descriptors(out_dir / "index.bin", index.ids, index.matrix)
    print(f"indexed {index.size} descriptors")
    return EXIT_OK


def cmd_query(args) -> int:
    cfg = _load_config(args)
    out_dir = _out_dir(cfg, args)
    index_path = args.index or (out_dir / "index.bin")
    ids, matrix = read_descriptors(index_path)
    index = DescriptorIndex.build(ids, matrix)
    q_path = args.descriptors or (out_dir / "descriptors_query.bin")
    q_ids, q = read_descriptors(q_path)
    k = max(_parse_ks(args.k))
    for qi, qid in enumerate(q_ids):
        for rank, (rid, sim) in enumerate(knn_query(index, q[qi], k), start=1):
            print(f"{qid} {rank} {rid} {sim:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    manifest = _manifest(cfg, args)
    out_dir = _out_dir(cfg, args)
    db_ids, db = read_descriptors(out_dir / "descriptors_db.bin")
    q_ids, q = read_descriptors(out_dir / "descriptors_query.bin")
    index = DescriptorIndex.build(db_ids, db)
    report = recall_at_k(
        index, q_ids, q, manifest.positives_map(), _parse_ks(args.k), dataset=manifest.name
    )
    (out_dir / "report.txt").write_text("\n".join(report.table_lines()) + "\n")
    (out_dir / "report.kv").write_text("\n".join(report.kv_lines()) + "\n")
    print("\n".join(report.table_lines()))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = range(args.seed if args.seed is not None else 5)
    failed = False
    print(f"{'operation':28s} {'max_rel_err':>12s}  status")
    for name in CASES:
        err = run_case(name, seeds=seeds)
        ok = err <= PASS_THRESHOLD
        failed = failed or not ok
        print(f"{name:28s} {err:12.3e}  {'PASS' if ok else 'FAIL'}")
    return EXIT_NUMERICAL if failed else EXIT_OK


def _parse_ks(raw: str) -> list[int]:
    try:
        ks = [int(x) for x in raw.split(",") if x.strip()]
    except ValueError as e:
        raise ConfigError(f"--k expects comma-separated integers, got {raw!r}") from e
    if not ks:
        raise ConfigError("--k must list at least one K")
    return ks


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vprkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, extra in [
        ("synth", cmd_synth, ()),
        ("train", cmd_train, ("checkpoint",)),
        ("encode", cmd_encode, ("checkpoint",)),
        ("index", cmd_index, ("descriptors",)),
        ("query", cmd_query, ("descriptors", "index")),
        ("eval", cmd_eval, ()),
        ("gradcheck", cmd_gradcheck, ()),
    ]:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--manifest", type=Path, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, default=None)
        p.add_argument("--k", type=str, default="1,5,10")
        if "checkpoint" in extra:
            p.add_argument("--checkpoint", type=Path, default=None)
        if "descriptors" in extra:
            p.add_argument("--descriptors", type=Path, default=None)
        if "index" in extra:
            p.add_argument("--index", type=Path, default=None)
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, TokenFileError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
