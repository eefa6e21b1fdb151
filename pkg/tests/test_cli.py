import json
import shutil

import pytest
import torch
from PIL import Image

from scpreid import cli
from scpreid.config import (
    DataConfig,
    EvalConfig,
    LossWeights,
    ModelConfig,
    PKBatchSpec,
    RunConfig,
    TrainConfig,
    load_run_config,
    save_run_config,
)
from scpreid.data import parse_sample_filename
from scpreid.evaluation import load_gallery
from scpreid.model import Model, save_model_checkpoint
from conftest import parse_loss_csv


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One end-to-end CLI walkthrough shared by the read-only assertions:
    synthesise train and eval pools, train for two epochs, and keep paths."""
    root = tmp_path_factory.mktemp("cliwalk")
    train_dir = root / "data" / "train"
    pool_dir = root / "data" / "pool"
    query_dir = root / "data" / "query"
    gallery_dir = root / "data" / "gallery"

    assert cli.main(["synth", "--ids", "8", "--per-id", "4", "--seed", "3", "--out", str(train_dir)]) == 0
    assert cli.main(
        ["synth", "--ids", "4", "--per-id", "4", "--seed", "4", "--id-start", "50", "--out", str(pool_dir)]
    ) == 0

    # split the eval pool: first file of each identity becomes the query
    query_dir.mkdir(parents=True)
    gallery_dir.mkdir(parents=True)
    seen = set()
    for path in sorted(p for p in pool_dir.iterdir() if p.suffix == ".png"):
        identity, _ = parse_sample_filename(path.name)
        target = gallery_dir if identity in seen else query_dir
        seen.add(identity)
        shutil.copy(path, target / path.name)

    cfg = RunConfig(
        run_name="walk",
        output_root=str(root / "runs"),
        model=ModelConfig(channels_C=16, stripes_R=4, dropout_rate=0.25),
        loss=LossWeights(lambda_scp=1.0),
        train=TrainConfig(
            epochs=2,
            lr_initial=1e-3,
            lr_milestones=[(1, 1e-4)],
            batch=PKBatchSpec(P=4, K=2),
            seed=0,
            checkpoint_every=1,
        ),
        data=DataConfig(
            train_dir=str(train_dir),
            query_dir=str(query_dir),
            gallery_dir=str(gallery_dir),
            normalization="compute",
        ),
        eval=EvalConfig(),
    )
    cfg_path = root / "walk.cfg"
    save_run_config(cfg, cfg_path)

    assert cli.main(["train", str(cfg_path)]) == 0
    run_dir = root / "runs" / "walk"
    return {
        "root": root,
        "cfg_path": cfg_path,
        "train_dir": train_dir,
        "query_dir": query_dir,
        "gallery_dir": gallery_dir,
        "run_dir": run_dir,
        "checkpoint": run_dir / "checkpoints" / "epoch_0002.ckpt",
    }


class TestSynth:
    def test_manifest_and_images(self, workspace):
        train_dir = workspace["train_dir"]
        manifest = json.loads((train_dir / "manifest.json").read_text())
        assert manifest["schema"] == 1
        assert manifest["num_files"] == 32
        assert len(list(train_dir.glob("*.png"))) == 32

    def test_refuses_nonempty_target(self, workspace, capsys):
        rc = cli.main(["synth", "--ids", "2", "--out", str(workspace["train_dir"])])
        assert rc == cli.CONFIG_EXIT
        assert "not empty" in capsys.readouterr().err

    def test_rejects_bad_spec(self, tmp_path, capsys):
        rc = cli.main(["synth", "--ids", "0", "--out", str(tmp_path / "x")])
        assert rc == cli.CONFIG_EXIT


class TestTrain:
    def test_run_directory_contents(self, workspace):
        run_dir = workspace["run_dir"]
        assert (run_dir / "loss.csv").is_file()
        assert (run_dir / "checkpoints" / "epoch_0001.ckpt").is_file()
        assert workspace["checkpoint"].is_file()
        rows = parse_loss_csv(run_dir / "loss.csv")
        assert len(rows) == 8  # 32 images / (P*K=8) = 4 steps x 2 epochs
        assert rows[0]["lr"] == 1e-3 and rows[-1]["lr"] == 1e-4

    def test_resolved_config_names_the_classifier_width(self, workspace):
        resolved = load_run_config(workspace["run_dir"] / "resolved_config.yaml")
        assert resolved.model.num_identities == 8
        assert resolved.model.channels_C == 16

    def test_resume_from_explicit_checkpoint(self, workspace, capsys):
        first = workspace["run_dir"] / "checkpoints" / "epoch_0001.ckpt"
        rc = cli.main(["train", str(workspace["cfg_path"]), "--resume", str(first)])
        assert rc == 0
        resumed = parse_loss_csv(workspace["run_dir"] / "loss_resumed.csv")
        assert [r["step"] for r in resumed] == [5, 6, 7, 8]
        full = parse_loss_csv(workspace["run_dir"] / "loss.csv")
        assert resumed == full[4:]  # repr round-trip makes this exact

    def test_bare_resume_flag_on_a_finished_run_is_a_noop(self, workspace, capsys):
        rc = cli.main(["train", str(workspace["cfg_path"]), "--resume"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "no epochs remained" in out

    def test_missing_config_file(self, tmp_path, capsys):
        assert cli.main(["train", str(tmp_path / "none.cfg")]) == cli.CONFIG_EXIT

    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("run_name: x\nmodel:\n  layers: 5\n")
        assert cli.main(["train", str(bad)]) == cli.CONFIG_EXIT
        assert "unknown keys" in capsys.readouterr().err

    def test_missing_train_dir_setting(self, tmp_path, capsys):
        cfg = tmp_path / "no_data.cfg"
        cfg.write_text("run_name: x\n")
        assert cli.main(["train", str(cfg)]) == cli.CONFIG_EXIT
        assert "train_dir" in capsys.readouterr().err


class TestExtract:
    def test_feature_file_round_trip(self, workspace, tmp_path):
        out = tmp_path / "gallery.feat"
        rc = cli.main(
            ["extract", "--checkpoint", str(workspace["checkpoint"]),
             "--images", str(workspace["gallery_dir"]), "--out", str(out)]
        )
        assert rc == 0
        gal = load_gallery(out)
        assert gal.features.shape == (12, 64)  # 4 ids x 3 images, R*C = 64
        assert sorted(set(gal.labels.tolist())) == [50, 51, 52, 53]
        assert (gal.visible_fractions == 1.0).all()

    def test_occluded_extraction_records_visibility(self, workspace, tmp_path):
        out = tmp_path / "occluded.feat"
        rc = cli.main(
            ["extract", "--checkpoint", str(workspace["checkpoint"]),
             "--images", str(workspace["query_dir"]), "--out", str(out),
             "--occlude-fraction", "0.5", "--occlude-anchor", "top", "--occlude-mode", "pad"]
        )
        assert rc == 0
        gal = load_gallery(out)
        assert (gal.visible_fractions == 0.5).all()

    def test_checkpoint_without_preprocess_stats(self, workspace, tmp_path, capsys):
        torch.manual_seed(0)
        bare = tmp_path / "bare.ckpt"
        save_model_checkpoint(bare, Model(ModelConfig(channels_C=16, num_identities=8)))
        rc = cli.main(
            ["extract", "--checkpoint", str(bare),
             "--images", str(workspace["gallery_dir"]), "--out", str(tmp_path / "f.feat")]
        )
        assert rc == cli.CONFIG_EXIT
        assert "preprocessing statistics" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"this is not a checkpoint")
        rc = cli.main(
            ["extract", "--checkpoint", str(bad),
             "--images", str(workspace["gallery_dir"]), "--out", str(tmp_path / "f.feat")]
        )
        assert rc == cli.RUNTIME_EXIT
        assert "magic" in capsys.readouterr().err


class TestEval:
    def test_report_files(self, workspace, tmp_path, capsys):
        out = tmp_path / "report"
        rc = cli.main(
            ["eval", "--checkpoint", str(workspace["checkpoint"]),
             "--query", str(workspace["query_dir"]), "--gallery", str(workspace["gallery_dir"]),
             "--out", str(out)]
        )
        assert rc == 0
        summary = (out / "summary.txt").read_text()
        assert "r = 1 r = 5 r = 10 | mAP" in summary
        assert "queries evaluated: 4" in summary
        cmc_lines = [l for l in (out / "cmc.csv").read_text().splitlines() if not l.startswith("#")]
        assert cmc_lines[0] == "rank,accuracy"
        assert len(cmc_lines) == 1 + 12  # full gallery depth
        ranked = [l for l in (out / "ranked_lists.csv").read_text().splitlines() if not l.startswith("#")]
        assert len(ranked) == 1 + 4 * 12  # every query ranks the whole gallery

    def test_partial_probe_evaluation(self, workspace, tmp_path):
        out = tmp_path / "partial_report"
        rc = cli.main(
            ["eval", "--checkpoint", str(workspace["checkpoint"]),
             "--query", str(workspace["query_dir"]), "--gallery", str(workspace["gallery_dir"]),
             "--out", str(out), "--mode", "prefix_by_visibility",
             "--occlude-fraction", "0.5", "--occlude-anchor", "top", "--occlude-mode", "pad"]
        )
        assert rc == 0
        assert (out / "summary.txt").is_file()

    def test_empty_gallery_dir(self, workspace, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        rc = cli.main(
            ["eval", "--checkpoint", str(workspace["checkpoint"]),
             "--query", str(workspace["query_dir"]), "--gallery", str(empty),
             "--out", str(tmp_path / "r")]
        )
        assert rc == cli.CONFIG_EXIT


class TestActivmap:
    def test_part_map_images(self, workspace, tmp_path):
        image = next(iter(sorted(workspace["gallery_dir"].glob("*.png"))))
        out = tmp_path / "maps"
        rc = cli.main(
            ["activmap", "--checkpoint", str(workspace["checkpoint"]),
             "--image", str(image), "--out", str(out), "--upscale", "4"]
        )
        assert rc == 0
        files = sorted(p.name for p in out.iterdir())
        assert files == ["part_0.png", "part_1.png", "part_2.png", "part_3.png"]
        with Image.open(out / "part_0.png") as img:
            assert img.mode == "L"
            assert img.size == (4 * 4, 8 * 4)  # (W, H) upscaled from 4x8

    def test_missing_image(self, workspace, tmp_path, capsys):
        rc = cli.main(
            ["activmap", "--checkpoint", str(workspace["checkpoint"]),
             "--image", str(tmp_path / "none.png"), "--out", str(tmp_path / "m")]
        )
        assert rc == cli.RUNTIME_EXIT


class TestSweep:
    def test_lambda_axis(self, workspace, tmp_path, capsys):
        out = tmp_path / "sweep.csv"
        rc = cli.main(
            ["sweep", str(workspace["cfg_path"]), "--axis", "lambda",
             "--values", "0", "10", "--out", str(out)]
        )
        assert rc == 0
        lines = [l for l in out.read_text().splitlines() if not l.startswith("#")]
        assert lines[0] == "axis,value,status,rank1,rank5,rank10,map"
        rows = [l.split(",") for l in lines[1:]]
        assert [r[:3] for r in rows] == [["lambda", "0", "ok"], ["lambda", "10", "ok"]]
        for row in rows:
            assert 0.0 <= float(row[3]) <= 1.0  # rank1 is a fraction
            assert 0.0 <= float(row[6]) <= 1.0  # mAP too

    def test_invalid_axis_value_is_reported_per_row(self, workspace, tmp_path, capsys):
        out = tmp_path / "sweep_bad.csv"
        rc = cli.main(
            ["sweep", str(workspace["cfg_path"]), "--axis", "R",
             "--values", "3", "--out", str(out)]
        )
        assert rc == 0  # the sweep survives; the row carries the error
        lines = [l for l in out.read_text().splitlines() if not l.startswith("#")]
        assert "error" in lines[1]

    def test_needs_eval_directories(self, workspace, tmp_path, capsys):
        cfg = load_run_config(workspace["cfg_path"])
        import dataclasses

        stripped = dataclasses.replace(
            cfg, data=dataclasses.replace(cfg.data, query_dir="", gallery_dir="")
        )
        path = tmp_path / "nodirs.cfg"
        save_run_config(stripped, path)
        rc = cli.main(["sweep", str(path), "--axis", "lambda", "--values", "1", "--out", str(tmp_path / "s.csv")])
        assert rc == cli.CONFIG_EXIT
