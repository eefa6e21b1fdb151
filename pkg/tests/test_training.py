import dataclasses

import numpy as np
import pytest
import torch

from scpreid.checkpoint import load_container
from scpreid.config import LossWeights, ModelConfig, PKBatchSpec, PreprocessConfig, TrainConfig
from scpreid.model import Model
from scpreid.training import (
    LOSS_CSV_COLUMNS,
    TrainingDiverged,
    batch_losses,
    lr_at,
    make_optimizer,
    overfit_smoke,
    train,
)
from conftest import parse_loss_csv


def _small_model(**overrides):
    base = dict(channels_C=16, stripes_R=4, num_identities=8)
    base.update(overrides)
    torch.manual_seed(0)
    return Model(ModelConfig(**base))


def _short_config(**overrides):
    base = dict(
        epochs=2,
        lr_initial=1e-3,
        lr_milestones=[(1, 1e-4)],
        batch=PKBatchSpec(P=4, K=2),
        seed=0,
        checkpoint_every=1,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestLrSchedule:
    def test_reference_preset_table(self):
        cfg = TrainConfig(
            epochs=300, lr_initial=1e-3, lr_milestones=[(80, 1e-4), (180, 1e-5)]
        )
        expected = {0: 1e-3, 79: 1e-3, 80: 1e-4, 179: 1e-4, 180: 1e-5, 299: 1e-5}
        for epoch, lr in expected.items():
            assert lr_at(epoch, cfg) == lr, epoch

    def test_no_milestones(self):
        cfg = TrainConfig(epochs=5, lr_initial=0.02, lr_milestones=[])
        assert all(lr_at(e, cfg) == 0.02 for e in range(5))

    def test_negative_epoch(self):
        with pytest.raises(ValueError, match="epoch"):
            lr_at(-1, TrainConfig())


class TestMakeOptimizer:
    def test_coupled_default_is_adam(self):
        cfg = TrainConfig(lr_initial=3e-4, weight_decay=0.01, adam_epsilon=1e-7)
        opt = make_optimizer(_small_model(), cfg)
        assert type(opt) is torch.optim.Adam
        group = opt.param_groups[0]
        assert group["lr"] == 3e-4
        assert group["weight_decay"] == 0.01
        assert group["eps"] == 1e-7

    def test_decoupled_variant_is_adamw(self):
        opt = make_optimizer(_small_model(), TrainConfig(decoupled_weight_decay=True))
        assert type(opt) is torch.optim.AdamW


class TestBatchLosses:
    def _batch(self, b=6):
        g = torch.Generator().manual_seed(1)
        images = torch.randn(b, 3, 64, 32, generator=g)
        labels = torch.tensor([0, 0, 1, 1, 2, 2][:b])
        return images, labels

    def test_total_matches_weighted_sum(self):
        model = _small_model()
        images, labels = self._batch()
        weights = LossWeights(lambda_scp=3.5)
        bd = batch_losses(model, images, labels, weights)
        vals = bd.floats()
        assert vals["total"] == pytest.approx(
            vals["l_class"] + vals["l_metric"] + 3.5 * vals["l_scp"], rel=1e-6
        )

    def test_local_attachment_uses_local_logits(self):
        model = _small_model(loss_attachment="local")
        images, labels = self._batch()
        bd = batch_losses(model, images, labels, LossWeights())
        vals = bd.floats()
        assert all(np.isfinite(v) for v in vals.values())
        assert vals["l_class"] > 0.0

    def test_both_attachment_sums_branch_losses(self):
        # with dropout disabled and weights shared, the dual attachment must
        # decompose exactly into the two single-branch losses
        images, labels = self._batch()
        weights = LossWeights()
        both = _small_model(loss_attachment="both", dropout_rate=0.0)
        single = {
            "global": _small_model(loss_attachment="global", dropout_rate=0.0),
            "local": _small_model(loss_attachment="local", dropout_rate=0.0),
        }
        for model in single.values():
            model.backbone.load_state_dict(both.backbone.state_dict())
            model.expand.load_state_dict(both.expand.state_dict())
        single["global"].classifier_global.load_state_dict(both.classifier_global.state_dict())
        single["local"].classifier_local.load_state_dict(both.classifier_local.state_dict())
        per_branch = {}
        for attach, model in {**single, "both": both}.items():
            model.eval()
            per_branch[attach] = batch_losses(model, images, labels, weights).floats()
        assert per_branch["both"]["l_class"] == pytest.approx(
            per_branch["global"]["l_class"] + per_branch["local"]["l_class"], rel=1e-5
        )
        assert per_branch["both"]["l_metric"] == pytest.approx(
            per_branch["global"]["l_metric"] + per_branch["local"]["l_metric"], rel=1e-5
        )
        # the alignment term does not depend on the attachment
        assert per_branch["both"]["l_scp"] == pytest.approx(
            per_branch["global"]["l_scp"], rel=1e-6
        )


class TestTrainValidation:
    def test_needs_two_identities(self, small_cohort):
        dataset, pp = small_cohort
        solo = [s for s in dataset if s.identity == 0]
        with pytest.raises(ValueError, match="two identities"):
            train(_small_model(), solo, _short_config(), LossWeights(), pp)

    def test_needs_p_identities(self, small_cohort):
        dataset, pp = small_cohort
        cfg = _short_config(batch=PKBatchSpec(P=16, K=2))
        with pytest.raises(ValueError, match="P=16"):
            train(_small_model(), dataset, cfg, LossWeights(), pp)

    def test_labels_must_fit_classifier(self, small_cohort):
        dataset, pp = small_cohort
        with pytest.raises(ValueError, match="relabel"):
            train(_small_model(num_identities=4), dataset, _short_config(), LossWeights(), pp)


@pytest.fixture(scope="module")
def run(small_cohort, tmp_path_factory):
    dataset, pp = small_cohort
    run_dir = tmp_path_factory.mktemp("trainloop")
    model = _small_model()
    result = train(model, dataset, _short_config(), LossWeights(), pp, run_dir=run_dir)
    return result, run_dir, pp


class TestTrainLoop:
    def test_step_count_and_rows(self, run):
        result, _, _ = run
        # 32 samples / (P*K = 8) = 4 steps per epoch, 2 epochs
        assert result.step == 8
        assert result.epoch == 2
        assert [r["step"] for r in result.rows] == list(range(1, 9))

    def test_csv_matches_rows(self, run):
        result, _, _ = run
        parsed = parse_loss_csv(result.csv_path)
        assert len(parsed) == 8
        for got, want in zip(parsed, result.rows):
            for c in LOSS_CSV_COLUMNS:
                assert got[c] == want[c], c  # repr round-trips floats exactly

    def test_lr_column_follows_schedule(self, run):
        result, _, _ = run
        assert [r["lr"] for r in result.rows] == [1e-3] * 4 + [1e-4] * 4

    def test_total_is_the_weighted_sum_every_step(self, run):
        result, _, _ = run
        lam = LossWeights().lambda_scp
        for r in result.rows:
            expected = r["l_class"] + r["l_metric"] + lam * r["l_scp"]
            assert abs(r["total"] - expected) <= 1e-6 * max(1.0, abs(expected))

    def test_running_means(self, run):
        result, _, _ = run
        for key in ("l_class", "l_metric", "l_scp", "total"):
            mean = sum(r[key] for r in result.rows) / len(result.rows)
            assert result.running[key] == pytest.approx(mean, rel=1e-9)

    def test_checkpoint_files_and_contents(self, run):
        result, run_dir, pp = run
        names = [p.name for p in result.checkpoint_paths]
        assert names == ["epoch_0001.ckpt", "epoch_0002.ckpt"]
        assert result.final_checkpoint == run_dir / "checkpoints" / "epoch_0002.ckpt"
        container = load_container(result.checkpoint_paths[0])
        assert container.step == 4
        assert container.extra["epoch"] == 1
        assert any(k.startswith("model.") for k in container.arrays)
        assert any(k.startswith("opt.") and k.endswith(".exp_avg") for k in container.arrays)
        assert "rng.torch" in container.arrays
        assert "rng.numpy" in container.extra
        restored = PreprocessConfig(**container.extra["preprocess"])
        assert restored == pp

    def test_checkpoint_every_zero_keeps_only_final(self, small_cohort, tmp_path):
        dataset, pp = small_cohort
        result = train(
            _small_model(), dataset, _short_config(checkpoint_every=0), LossWeights(), pp,
            run_dir=tmp_path,
        )
        assert [p.name for p in result.checkpoint_paths] == ["epoch_0002.ckpt"]


class TestResume:
    def test_resumed_trajectory_is_bit_identical(self, small_cohort, tmp_path):
        dataset, pp = small_cohort
        cfg = _short_config()  # 2 epochs, checkpoint each
        dir_a, dir_b = tmp_path / "a", tmp_path / "b"
        result_a = train(_small_model(), dataset, cfg, LossWeights(), pp, run_dir=dir_a)

        midpoint = dir_a / "checkpoints" / "epoch_0001.ckpt"
        result_b = train(
            _small_model(), dataset, cfg, LossWeights(), pp,
            run_dir=dir_b, resume_from=midpoint,
        )

        assert result_b.csv_path == dir_b / "loss_resumed.csv"
        assert [r["step"] for r in result_b.rows] == [5, 6, 7, 8]
        tail = result_a.rows[4:]
        for got, want in zip(result_b.rows, tail):
            assert got == want  # bitwise: same floats, not just close

        final_a = load_container(dir_a / "checkpoints" / "epoch_0002.ckpt")
        final_b = load_container(dir_b / "checkpoints" / "epoch_0002.ckpt")
        assert final_a.step == final_b.step == 8
        assert set(final_a.arrays) == set(final_b.arrays)
        for key in final_a.arrays:
            assert np.array_equal(final_a.arrays[key], final_b.arrays[key]), key


class TestDivergenceGuard:
    def test_nan_weights_raise_with_snapshot(self, small_cohort):
        dataset, pp = small_cohort
        model = _small_model()
        with torch.no_grad():
            model.expand.weight[0, 0, 0, 0] = float("nan")
        with pytest.raises(TrainingDiverged) as exc_info:
            train(model, dataset, _short_config(), LossWeights(), pp)
        snapshot = exc_info.value.snapshot
        assert snapshot["step"] == 0 and snapshot["epoch"] == 0
        assert len(snapshot["batch_indices"]) == 8
        assert not all(np.isfinite(v) for v in snapshot["losses"].values())


class TestOverfitSmoke:
    def test_dataset_contract(self, small_cohort):
        dataset, pp = small_cohort  # 8 identities x 4 images: at the limit
        model = _small_model()
        too_many = dataset + [dataclasses.replace(dataset[0], identity=8)]
        with pytest.raises(ValueError, match="<= 8 identities"):
            overfit_smoke(model, too_many, LossWeights(), pp, max_steps=1)
        solo = [s for s in dataset if s.identity == 0]
        with pytest.raises(ValueError, match="two identities"):
            overfit_smoke(model, solo, LossWeights(), pp, max_steps=1)

    def test_budget_exhaustion_reports_failure(self, small_cohort):
        dataset, pp = small_cohort
        model = _small_model()
        result = overfit_smoke(model, dataset, LossWeights(), pp, max_steps=1)
        assert not result.passed and not bool(result)
        assert result.steps_used == 1
        assert 0.0 <= result.accuracy <= 1.0
