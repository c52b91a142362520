import json

import numpy as np
import pytest

from vprkit.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main
from vprkit.config import ConfigError, RunConfig
from vprkit.dataio import read_descriptors


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny synthetic dataset plus a config tuned for a fast smoke run."""
    root = tmp_path_factory.mktemp("cli")
    config = {
        "seed": 3,
        "fusion": "residual",
        "aggregation": "vlaq",
        "assignment": "softmax",
        "blocks": 1,
        "queries_per_block": 4,
        "ms": {"alpha": 2.0, "beta": 50.0, "lambda": 0.5, "epsilon": 0.1},
        "opt": {"lr": 2e-3, "warmup_epochs": 2, "decay_every": 1000, "decay_factor": 0.1, "wd": 1e-3},
        "train": {"epochs": 10, "places_per_batch": 4, "images_per_place": 2, "max_steps": 10},
        "synth": {"places": 4, "images_per_place": 3, "queries_per_place": 1, "dim": 8, "tokens": 4, "sigma": 0.1, "clip_sigma": 0.05, "seed": 3},
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config))
    data_dir = root / "data"
    assert main(["synth", "--config", str(config_path), "--out", str(data_dir)]) == EXIT_OK
    return {"root": root, "config": config_path, "manifest": data_dir / "manifest.json", "raw": config}


class TestConfig:
    def test_unknown_top_level_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"bogus": 1}')
        with pytest.raises(ConfigError, match="bogus"):
            RunConfig.from_file(path)

    def test_unknown_nested_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"opt": {"momentum": 0.9}}')
        with pytest.raises(ConfigError, match="momentum"):
            RunConfig.from_file(path)

    def test_defaults_match_published_recipe(self):
        cfg = RunConfig()
        assert cfg.schedule.base_lr == 2e-4
        assert cfg.weight_decay == 1e-3
        assert cfg.schedule.warmup_epochs == 10
        assert cfg.schedule.decay_every == 10
        assert cfg.schedule.decay_factor == 0.1
        assert cfg.blocks == 2
        assert cfg.queries_per_block == 64
        assert cfg.train.epochs == 40
        assert cfg.train.places_per_batch == 110
        assert cfg.train.images_per_place == 4

    def test_bad_json_is_config_error(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError):
            RunConfig.from_file(path)


class TestPipeline:
    def test_train_encode_eval_flow(self, workspace):
        run = workspace["root"] / "run"
        args = ["--config", str(workspace["config"]), "--manifest", str(workspace["manifest"]), "--out", str(run)]
        assert main(["train", *args]) == EXIT_OK
        assert (run / "checkpoint.vprc").is_file()
        log_lines = (run / "train_log.txt").read_text().strip().splitlines()
        assert len(log_lines) == 10
        step, loss, lr = log_lines[0].split()
        assert step == "0" and float(loss) >= 0 and float(lr) >= 0

        assert main(["encode", *args, "--checkpoint", str(run / "checkpoint.vprc")]) == EXIT_OK
        ids, matrix = read_descriptors(run / "descriptors_db.bin")
        assert len(ids) == 12  # 4 places x 3 images
        np.testing.assert_allclose(np.linalg.norm(matrix, axis=1), 1.0, atol=1e-6)

        assert main(["index", *args]) == EXIT_OK
        assert main(["eval", *args, "--k", "1,5"]) == EXIT_OK
        report = (run / "report.kv").read_text()
        assert "dataset=" in report and "K=1" in report and "recall=" in report
        table = (run / "report.txt").read_text()
        assert "num_excluded" in table

    def test_encode_without_checkpoint_uses_fresh_model(self, workspace):
        out = workspace["root"] / "fresh"
        args = ["--config", str(workspace["config"]), "--manifest", str(workspace["manifest"]), "--out", str(out)]
        assert main(["encode", *args]) == EXIT_OK
        ids, matrix = read_descriptors(out / "descriptors_query.bin")
        assert len(ids) == 4

    def test_rerun_encode_byte_identical(self, workspace):
        a = workspace["root"] / "det_a"
        b = workspace["root"] / "det_b"
        base = ["--config", str(workspace["config"]), "--manifest", str(workspace["manifest"])]
        assert main(["encode", *base, "--out", str(a)]) == EXIT_OK
        assert main(["encode", *base, "--out", str(b)]) == EXIT_OK
        assert (a / "descriptors_db.bin").read_bytes() == (b / "descriptors_db.bin").read_bytes()
        assert (a / "descriptors_query.bin").read_bytes() == (b / "descriptors_query.bin").read_bytes()

    def test_query_command_prints_rankings(self, workspace, capsys):
        run = workspace["root"] / "qrun"
        args = ["--config", str(workspace["config"]), "--manifest", str(workspace["manifest"]), "--out", str(run)]
        assert main(["encode", *args]) == EXIT_OK
        assert main(["index", *args]) == EXIT_OK
        capsys.readouterr()
        assert main(["query", *args, "--k", "2"]) == EXIT_OK
        out = capsys.readouterr().out
        lines = [l for l in out.strip().splitlines() if l]
        assert len(lines) == 4 * 2  # 4 queries x top-2
        qid, rank, rid, sim = lines[0].split()
        assert rank == "1" and rid.startswith("db_")

    def test_zero_step_train_emits_initial_checkpoint(self, workspace):
        run = workspace["root"] / "zero"
        cfg = dict(workspace["raw"])
        cfg["train"] = dict(cfg["train"], max_steps=0)
        cfg_path = workspace["root"] / "zero.json"
        cfg_path.write_text(json.dumps(cfg))
        args = ["--config", str(cfg_path), "--manifest", str(workspace["manifest"]), "--out", str(run)]
        assert main(["train", *args]) == EXIT_OK
        from vprkit.model import load_checkpoint

        ckpt = load_checkpoint(run / "checkpoint.vprc")
        assert ckpt.step == 0
        log = (run / "train_log.txt").read_text()
        assert log == ""

    def test_resume_continues_step_counter(self, workspace):
        run = workspace["root"] / "resume"
        cfg = dict(workspace["raw"])
        cfg["train"] = dict(cfg["train"], max_steps=4)
        cfg_path = workspace["root"] / "resume.json"
        cfg_path.write_text(json.dumps(cfg))
        args = ["--config", str(cfg_path), "--manifest", str(workspace["manifest"]), "--out", str(run)]
        assert main(["train", *args]) == EXIT_OK

        cfg["train"] = dict(cfg["train"], max_steps=8)
        cfg_path.write_text(json.dumps(cfg))
        assert main(["train", *args, "--checkpoint", str(run / "checkpoint.vprc")]) == EXIT_OK
        steps = [int(l.split()[0]) for l in (run / "train_log.txt").read_text().strip().splitlines()]
        assert steps == list(range(8))

    def test_resumed_run_matches_uninterrupted_run(self, workspace):
        base = ["--config", str(workspace["config"]), "--manifest", str(workspace["manifest"])]
        full = workspace["root"] / "full"
        assert main(["train", *base, "--out", str(full)]) == EXIT_OK

        cfg = dict(workspace["raw"])
        cfg["train"] = dict(cfg["train"], max_steps=5)
        cfg_path = workspace["root"] / "half.json"
        cfg_path.write_text(json.dumps(cfg))
        half = workspace["root"] / "half"
        assert main(["train", "--config", str(cfg_path), "--manifest", str(workspace["manifest"]), "--out", str(half)]) == EXIT_OK
        cfg["train"] = dict(cfg["train"], max_steps=10)
        cfg_path.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(cfg_path), "--manifest", str(workspace["manifest"]),
                     "--out", str(half), "--checkpoint", str(half / "checkpoint.vprc")]) == EXIT_OK
        assert (half / "checkpoint.vprc").read_bytes() == (full / "checkpoint.vprc").read_bytes()


class TestErrors:
    def test_missing_manifest_is_validation_error(self, workspace):
        code = main(["train", "--config", str(workspace["config"]), "--manifest", "/nonexistent.json", "--out", "/tmp/x"])
        assert code == EXIT_VALIDATION

    def test_unknown_config_key_is_validation_error(self, workspace, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"nope": 1}')
        code = main(["train", "--config", str(bad), "--manifest", str(workspace["manifest"]), "--out", str(tmp_path)])
        assert code == EXIT_VALIDATION

    def test_degenerate_dataset_is_clear_error(self, workspace, tmp_path, capsys):
        cfg = dict(workspace["raw"])
        cfg["train"] = dict(cfg["train"], places_per_batch=64)
        cfg_path = tmp_path / "big.json"
        cfg_path.write_text(json.dumps(cfg))
        code = main(["train", "--config", str(cfg_path), "--manifest", str(workspace["manifest"]), "--out", str(tmp_path)])
        assert code == EXIT_VALIDATION
        assert "places" in capsys.readouterr().err

    def test_missing_out_flag_reported(self, workspace):
        assert main(["encode", "--config", str(workspace["config"]), "--manifest", str(workspace["manifest"])]) == EXIT_VALIDATION


class TestGradcheckCommand:
    def test_passes_on_fresh_build(self, capsys):
        assert main(["gradcheck", "--seed", "2"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out
        assert "fusion-residual" in out and "ms-loss" in out

    def test_perturbed_gradient_detected(self, monkeypatch, capsys):
        # Sabotage one analytic gradient; the battery must flag it and the
        # command must exit with the numerical-failure code.
        import vprkit.gradcheck as gc

        original = gc.CASES["fusion-residual"]

        def sabotaged(seed):
            case = original(seed)
            inner = case.f

            def broken():
                value = inner()
                case.params[0].grad *= 1.01
                return value

            return gc.GradCase(f=broken, params=case.params)

        monkeypatch.setitem(gc.CASES, "fusion-residual", sabotaged)
        assert main(["gradcheck", "--seed", "1"]) == EXIT_NUMERICAL
        assert "FAIL" in capsys.readouterr().out
