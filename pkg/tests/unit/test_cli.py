import csv
import json

import pytest

from src.cli import build_parser, run
from src.cli.commands import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_MISSING_SPLIT,
    EXIT_OK,
    SUMMARY_COLUMNS,
    ecdf,
    parse_sweep,
)
from src.models.config import RunConfig
from src.models.errors import ConfigError
from src.models.report import EvalReport
from src.services.head_service import load_checkpoint
from src.utils.file_formats import read_embeddings

WORLD_FLAGS = [
    "--n-identities", "16",
    "--d-latent", "6",
    "--tokens-fg", "4",
    "--tokens-bg", "8",
    "--token-dim", "16",
    "--n-distractor-sources", "3",
    "--n-train-sources", "2",
    "--distractors-per-source", "1",
    "--n-part-edits", "2",
    "--val-fraction", "0.125",
    "--test-fraction", "0.25",
]
TRAIN_FLAGS = [
    "--epochs", "1",
    "--warmup-steps", "1",
    "--batch-identities", "4",
    "--head-width", "16",
    "--head-heads", "2",
    "--head-out", "8",
]


@pytest.fixture(autouse=True)
def no_seed_from_environment(monkeypatch):
    monkeypatch.delenv("NEARID_SEED", raising=False)


@pytest.fixture
def world_dir(tmp_path):
    out = tmp_path / "world"
    assert run(["gen", "--out", str(out), "--seed", "5", *WORLD_FLAGS]) == EXIT_OK
    return out


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


class TestGen:
    def test_writes_manifest_and_config(self, world_dir):
        config = RunConfig.parse((world_dir / "config.txt").read_text(encoding="utf-8"))
        assert config.world.n_identities == 16
        assert config.world.seed == 5
        lines = (world_dir / "manifest.jsonl").read_text(encoding="utf-8").splitlines()
        assert len({json.loads(line)["identity_id"] for line in lines}) == 16

    def test_is_deterministic(self, world_dir, tmp_path):
        again = tmp_path / "again"
        assert run(["gen", "--out", str(again), "--seed", "5", *WORLD_FLAGS]) == EXIT_OK
        assert (again / "manifest.jsonl").read_bytes() == (world_dir / "manifest.jsonl").read_bytes()
        assert (again / "config.txt").read_bytes() == (world_dir / "config.txt").read_bytes()

    def test_export_grids(self, tmp_path):
        out = tmp_path / "world"
        assert run(["gen", "--out", str(out), "--export-grids", *WORLD_FLAGS]) == EXIT_OK
        grids = read_embeddings(str(out / "grids.nide"))
        n_records = len((out / "manifest.jsonl").read_text(encoding="utf-8").splitlines())
        assert grids.shape == (n_records, 12, 16)

    def test_environment_seed_and_flag_precedence(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NEARID_SEED", "11")
        assert run(["gen", "--out", str(tmp_path / "env"), *WORLD_FLAGS]) == EXIT_OK
        assert RunConfig.parse((tmp_path / "env" / "config.txt").read_text()).world.seed == 11
        assert run(["gen", "--out", str(tmp_path / "flag"), "--seed", "3", *WORLD_FLAGS]) == EXIT_OK
        assert RunConfig.parse((tmp_path / "flag" / "config.txt").read_text()).world.seed == 3

    def test_config_file_then_flags(self, tmp_path):
        config = tmp_path / "run.txt"
        config.write_text("n_identities = 12  # small\nseed = 2\n", encoding="utf-8")
        out = tmp_path / "world"
        assert run(["gen", "--config", str(config), "--out", str(out), "--seed", "4"]) == EXIT_OK
        written = RunConfig.parse((out / "config.txt").read_text(encoding="utf-8"))
        assert written.world.n_identities == 12
        assert written.world.seed == 4

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file.txt"
        blocker.write_text("x", encoding="utf-8")
        assert run(["gen", "--out", str(blocker / "world"), *WORLD_FLAGS]) == EXIT_IO

    def test_bad_config_file(self, tmp_path, capsys):
        config = tmp_path / "bad.txt"
        config.write_text("not_a_key = 1\n", encoding="utf-8")
        assert run(["gen", "--config", str(config), "--out", str(tmp_path / "w")]) == EXIT_CONFIG
        assert "ConfigError" in capsys.readouterr().err

    def test_invalid_flag_value(self, tmp_path):
        assert run(["gen", "--out", str(tmp_path / "w"), "--tau=-1"]) == EXIT_CONFIG

    def test_unknown_log_level_in_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NEARID_LOG_LEVEL", "chatty")
        assert run(["gen", "--out", str(tmp_path / "w"), *WORLD_FLAGS]) == EXIT_CONFIG

    def test_token_dim_too_small_for_latents(self, tmp_path):
        flags = [*WORLD_FLAGS, "--token-dim", "8"]
        assert run(["gen", "--out", str(tmp_path / "w"), *flags]) == EXIT_CONFIG


class TestTrainAndEval:
    def test_zero_epochs_writes_initialized_head(self, world_dir, tmp_path):
        checkpoint = tmp_path / "head.ckpt"
        code = run(["train", "--world", str(world_dir), "--out", str(checkpoint), *TRAIN_FLAGS, "--epochs", "0"])
        assert code == EXIT_OK
        params, n_tokens = load_checkpoint(str(checkpoint))
        assert n_tokens == 12
        assert params.dims.width == 16
        assert (tmp_path / "head.ckpt.log.jsonl").read_text(encoding="utf-8") == ""
        assert (tmp_path / "head.ckpt.config.txt").exists()

    def test_train_then_eval(self, world_dir, tmp_path):
        checkpoint = tmp_path / "head.ckpt"
        log = tmp_path / "train.jsonl"
        assert run(["train", "--world", str(world_dir), "--out", str(checkpoint), "--log", str(log), *TRAIN_FLAGS]) == EXIT_OK
        records = [json.loads(line) for line in log.read_text(encoding="utf-8").splitlines()]
        assert records and all({"step", "loss", "disc", "rank"} <= set(r) for r in records)

        report_path = tmp_path / "report.json"
        embeddings = tmp_path / "views.nide"
        code = run([
            "eval", str(checkpoint), "--world", str(world_dir), "--report", str(report_path),
            "--export-embeddings", str(embeddings),
        ])
        assert code == EXIT_OK
        report = EvalReport.model_validate_json(report_path.read_text(encoding="utf-8"))
        assert report.provenance.embedder == "map_head:head.ckpt"
        assert report.provenance.seed == 5
        assert read_embeddings(str(embeddings)).shape[1] == 8

    def test_world_keys_are_ignored_after_generation(self, world_dir, tmp_path):
        report_path = tmp_path / "report.json"
        code = run(["eval", "frozen", "--world", str(world_dir), "--report", str(report_path), "--n-identities", "99"])
        assert code == EXIT_OK
        echo = RunConfig.parse((tmp_path / "report.json.config.txt").read_text(encoding="utf-8"))
        assert echo.world.n_identities == 16

    def test_frozen_eval_is_reproducible(self, world_dir, tmp_path, capsys):
        first, second = tmp_path / "a.json", tmp_path / "b.json"
        assert run(["eval", "frozen", "--world", str(world_dir), "--report", str(first)]) == EXIT_OK
        assert run(["eval", "frozen", "--world", str(world_dir), "--report", str(second)]) == EXIT_OK
        assert first.read_bytes() == second.read_bytes()
        assert "SSR" in capsys.readouterr().out

    def test_checkpoint_from_another_world(self, world_dir, tmp_path):
        checkpoint = tmp_path / "head.ckpt"
        assert run(["train", "--world", str(world_dir), "--out", str(checkpoint), *TRAIN_FLAGS, "--epochs", "0"]) == EXIT_OK
        other = tmp_path / "other"
        flags = [f if f != "8" else "6" for f in WORLD_FLAGS]
        assert run(["gen", "--out", str(other), *flags]) == EXIT_OK
        code = run(["eval", str(checkpoint), "--world", str(other), "--report", str(tmp_path / "r.json")])
        assert code == EXIT_CONFIG

    def test_missing_split(self, tmp_path):
        world = tmp_path / "world"
        flags = [f if f != "0.125" else "0" for f in WORLD_FLAGS]
        assert run(["gen", "--out", str(world), *flags]) == EXIT_OK
        code = run(["eval", "frozen", "--world", str(world), "--report", str(tmp_path / "r.json"), "--split", "val"])
        assert code == EXIT_MISSING_SPLIT

    def test_missing_world(self, tmp_path):
        code = run(["train", "--world", str(tmp_path / "nowhere"), "--out", str(tmp_path / "h.ckpt")])
        assert code == EXIT_IO

    def test_corrupted_checkpoint(self, world_dir, tmp_path):
        checkpoint = tmp_path / "head.ckpt"
        checkpoint.write_bytes(b"garbage")
        code = run(["eval", str(checkpoint), "--world", str(world_dir), "--report", str(tmp_path / "r.json")])
        assert code == EXIT_IO


class TestReport:
    def test_writes_plot_tables(self, world_dir, tmp_path):
        report_path = tmp_path / "report.json"
        assert run(["eval", "frozen", "--world", str(world_dir), "--report", str(report_path), "--kpca"]) == EXIT_OK
        out = tmp_path / "plots"
        assert run(["report", str(report_path), "--out", str(out)]) == EXIT_OK

        report = EvalReport.model_validate_json(report_path.read_text(encoding="utf-8"))
        histogram = read_csv(out / "margin_histogram.csv")
        assert len(histogram) == len(report.margin_histogram.counts)
        assert sum(int(row["count"]) for row in histogram) == report.n_margins
        assert {row["source_id"] for row in read_csv(out / "per_source.csv")} == {"0", "1", "2"}
        assert len(read_csv(out / "edit_scores.csv")) == len(report.edit_scores)
        for name in ("similarity", "severity", "human_proxy"):
            rows = read_csv(out / f"ecdf_{name}.csv")
            assert float(rows[-1]["ecdf"]) == 1.0
        assert len(read_csv(out / "projection.csv")) == len(report.projection_coords)

    def test_rejects_non_report_json(self, tmp_path):
        bogus = tmp_path / "bogus.json"
        bogus.write_text('{"ssr": 2}', encoding="utf-8")
        assert run(["report", str(bogus), "--out", str(tmp_path / "out")]) == EXIT_IO


class TestAblate:
    def test_duplicate_cells_run_once(self, world_dir, tmp_path):
        out = tmp_path / "sweep"
        code = run([
            "ablate", "--world", str(world_dir), "--out", str(out), *TRAIN_FLAGS,
            "--sweep", "alpha=0.5,0.50", "--sweep", "beta=0.0",
        ])
        assert code == EXIT_OK
        rows = read_csv(out / "summary.csv")
        assert len(rows) == 1
        assert list(rows[0]) == list(SUMMARY_COLUMNS)
        assert rows[0]["status"] == "ok"
        assert (out / f"cell_{rows[0]['cell']}.json").exists()
        assert (out / f"cell_{rows[0]['cell']}.config.txt").exists()

    def test_world_keys_cannot_be_swept(self, world_dir, tmp_path):
        code = run(["ablate", "--world", str(world_dir), "--out", str(tmp_path / "s"), "--sweep", "token_dim=8,16"])
        assert code == EXIT_CONFIG


def test_parse_sweep_is_a_cartesian_product():
    cells = parse_sweep(["alpha=0,0.5", "loss_variant=nearid,infonce_sym"])
    assert cells == [
        {"alpha": "0", "loss_variant": "nearid"},
        {"alpha": "0", "loss_variant": "infonce_sym"},
        {"alpha": "0.5", "loss_variant": "nearid"},
        {"alpha": "0.5", "loss_variant": "infonce_sym"},
    ]
    assert parse_sweep([]) == [{}]
    with pytest.raises(ConfigError):
        parse_sweep(["alpha"])


def test_ecdf():
    assert ecdf([0.3, 0.1, 0.2, 0.4]) == [(0.1, 0.25), (0.2, 0.5), (0.3, 0.75), (0.4, 1.0)]


def test_loss_alias_and_boolean_flags():
    args = build_parser().parse_args(["eval", "frozen", "--world", "w", "--report", "r", "--loss", "infonce_sym", "--kpca"])
    assert args.loss_variant == "infonce_sym"
    assert args.kpca == "true"
    assert args.fg_only is None
