"""Training loop: determinism, checkpointing, loss calibration, ablations."""

import numpy as np
import pytest

from avparse.data import SynthConfig, generate_synthetic_dataset, make_synthetic
from avparse.errors import CheckpointError, ConfigError, TrainingError
from avparse.model import AVMambaNet, ModelConfig, compute_loss
from avparse.trainer import (TextCache, TrainConfig, ablate, augmented_records,
                             evaluate_checkpoint, evaluate_records, forward_record,
                             load_model, save_model, train, train_on_dir)

TINY_MODEL = dict(n_segments=6, dim=12, n_classes=5, d_state=4,
                  d_audio_in=8, d_visual_in=8, text_dim=8)


@pytest.fixture(scope="module")
def tiny_dataset():
    cfg = SynthConfig(seed=5, n_videos=8, n_val=4, n_segments=6, n_classes=5,
                      d_audio=8, d_visual=8)
    return make_synthetic(cfg)


def tiny_train(ds, **overrides):
    model_config = ModelConfig(**TINY_MODEL)
    defaults = dict(epochs=2, batch_size=4, seed=0, eval_every=1)
    defaults.update(overrides)
    return train(model_config, ds.train, ds.classes, ds.val, ds.gt_val,
                 TrainConfig(**defaults))


class TestTrainingLoop:
    def test_same_seed_identical_checkpoints(self, tiny_dataset, tmp_path):
        paths = []
        for run in ("a", "b"):
            model_config = ModelConfig(**TINY_MODEL)
            path = tmp_path / f"ckpt_{run}.mugc"
            train(model_config, tiny_dataset.train, tiny_dataset.classes,
                  tiny_dataset.val, tiny_dataset.gt_val,
                  TrainConfig(epochs=2, batch_size=4, seed=3),
                  checkpoint_path=path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_different_seed_different_checkpoint(self, tiny_dataset, tmp_path):
        blobs = []
        for seed in (0, 1):
            model_config = ModelConfig(**TINY_MODEL)
            path = tmp_path / f"s{seed}.mugc"
            train(model_config, tiny_dataset.train, tiny_dataset.classes,
                  config=TrainConfig(epochs=1, batch_size=4, seed=seed),
                  checkpoint_path=path)
            blobs.append(path.read_bytes())
        assert blobs[0] != blobs[1]

    def test_log_has_one_entry_per_epoch(self, tiny_dataset):
        _, log = tiny_train(tiny_dataset, epochs=3)
        assert [e.epoch for e in log.entries] == [0, 1, 2]
        assert log.parameter_count > 0
        assert all(np.isfinite(e.loss) for e in log.entries)

    def test_untrained_loss_matches_bce_calibration(self, tiny_dataset):
        # sigmoid(~0) everywhere gives ln 2 per BCE term
        model_config = ModelConfig(**TINY_MODEL)
        net = AVMambaNet(model_config, seed=0)
        texts = TextCache(tiny_dataset.classes, model_config.text_dim)
        losses = []
        for record in tiny_dataset.train:
            outputs = forward_record(net, record, texts)
            loss = compute_loss(outputs, record.video_label, record.pseudo_a,
                                record.pseudo_v, record.null_a, record.null_v)
            losses.append(loss.item())
        expected = np.log(2.0) * 3.0  # video + lambda_a + lambda_v terms
        assert np.mean(losses) == pytest.approx(expected, rel=0.2)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_aborts_with_tensor_name(self, tiny_dataset):
        model_config = ModelConfig(**TINY_MODEL)
        net_probe = AVMambaNet(model_config, seed=0)
        del net_probe

        import avparse.trainer as trainer_mod

        original = trainer_mod.AVMambaNet

        class Poisoned(original):
            def __init__(self, config, seed=0):
                super().__init__(config, seed)
                self.proj_a.w.data[0, 0] = np.nan

        trainer_mod.AVMambaNet = Poisoned
        try:
            with pytest.raises(TrainingError, match="non-finite"):
                tiny_train(tiny_dataset, epochs=1)
        finally:
            trainer_mod.AVMambaNet = original

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_diagnostic_names_first_stage(self, tiny_dataset):
        import avparse.trainer as trainer_mod

        original = trainer_mod.AVMambaNet

        class Poisoned(original):
            def __init__(self, config, seed=0):
                super().__init__(config, seed)
                self.proj_a.w.data[0, 0] = np.nan

        trainer_mod.AVMambaNet = Poisoned
        try:
            with pytest.raises(TrainingError, match="tsa_out_a"):
                tiny_train(tiny_dataset, epochs=1)
        finally:
            trainer_mod.AVMambaNet = original


class TestCheckpointRoundTrip:
    def test_save_load_identical_evaluation(self, tiny_dataset, tmp_path):
        net, _ = tiny_train(tiny_dataset)
        report_before = evaluate_records(net, tiny_dataset.val, tiny_dataset.gt_val,
                                         tiny_dataset.classes)
        path = tmp_path / "model.mugc"
        save_model(path, net)
        restored = load_model(path)
        assert restored.config == net.config
        report_after = evaluate_records(restored, tiny_dataset.val, tiny_dataset.gt_val,
                                        tiny_dataset.classes)
        assert report_before.as_row() == report_after.as_row()

    def test_loading_truncated_checkpoint_fails(self, tiny_dataset, tmp_path):
        net, _ = tiny_train(tiny_dataset)
        path = tmp_path / "model.mugc"
        save_model(path, net)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(CheckpointError, match="truncated"):
            load_model(path)

    def test_repeated_evaluation_identical(self, tiny_dataset):
        net, _ = tiny_train(tiny_dataset)
        r1 = evaluate_records(net, tiny_dataset.val, tiny_dataset.gt_val, tiny_dataset.classes)
        r2 = evaluate_records(net, tiny_dataset.val, tiny_dataset.gt_val, tiny_dataset.classes)
        assert r1.as_row() == r2.as_row()


class TestAugmentedTraining:
    def test_multiplier_zero_keeps_base_dataset(self, tiny_dataset):
        records = augmented_records(tiny_dataset.train, TrainConfig(cmrc_multiplier=0.0))
        assert len(records) == len(tiny_dataset.train)

    def test_multiplier_extends_dataset(self, tiny_dataset):
        config = TrainConfig(cmrc_multiplier=1.0, min_count=1, seed=0)
        records = augmented_records(tiny_dataset.train, config)
        assert len(records) == 2 * len(tiny_dataset.train)
        assert all(r.video_id.startswith("cmrc_") for r in records[len(tiny_dataset.train):])


class TestAblation:
    def test_unknown_component_rejected(self, tiny_dataset):
        with pytest.raises(ConfigError, match="unknown component"):
            ablate("fourier", ModelConfig(**TINY_MODEL), tiny_dataset.train,
                   tiny_dataset.classes, tiny_dataset.val, tiny_dataset.gt_val,
                   TrainConfig(epochs=1, batch_size=4))

    def test_cmrc_ablation_trains_on_base_size_only(self, tiny_dataset):
        import avparse.trainer as trainer_mod

        seen_sizes = []
        original = trainer_mod.train

        def spy(model_config, records, classes, *args, **kwargs):
            seen_sizes.append(len(records))
            return original(model_config, records, classes, *args, **kwargs)

        trainer_mod.train = spy
        try:
            ablate("cmrc", ModelConfig(**TINY_MODEL), tiny_dataset.train,
                   tiny_dataset.classes, tiny_dataset.val, tiny_dataset.gt_val,
                   TrainConfig(epochs=1, batch_size=4, cmrc_multiplier=1.0, min_count=1))
        finally:
            trainer_mod.train = original
        assert seen_sizes == [len(tiny_dataset.train)]

    @pytest.mark.parametrize("component,missing_prefix", [
        ("tsa", "tsa_a"), ("mfe", "mfe"), ("plsim", "plsim")])
    def test_structural_removal(self, tiny_dataset, component, missing_prefix):
        net, report = ablate(component, ModelConfig(**TINY_MODEL), tiny_dataset.train,
                             tiny_dataset.classes, tiny_dataset.val, tiny_dataset.gt_val,
                             TrainConfig(epochs=1, batch_size=4))
        prefixes = {name.split(".")[0] for name in net.parameters()}
        assert missing_prefix not in prefixes
        assert 0.0 <= report.seg_type_at_av <= 1.0

    def test_amf_ablation_uses_private_scans(self, tiny_dataset):
        net, _ = ablate("amf", ModelConfig(**TINY_MODEL), tiny_dataset.train,
                        tiny_dataset.classes, tiny_dataset.val, tiny_dataset.gt_val,
                        TrainConfig(epochs=1, batch_size=4))
        names = list(net.parameters())
        assert any(name.startswith("amf.a.") for name in names)
        assert not any("shared" in name for name in names)
        assert not any(name.startswith("amf.mix") for name in names)


class TestDirectoryPipeline:
    def test_train_eval_on_generated_directory(self, tmp_path):
        data_dir = tmp_path / "data"
        out_dir = tmp_path / "run"
        generate_synthetic_dataset(
            SynthConfig(seed=9, n_videos=6, n_val=3, n_segments=6, n_classes=5,
                        d_audio=8, d_visual=8), str(data_dir))
        model_config = ModelConfig(**TINY_MODEL)
        net, log, checkpoint = train_on_dir(
            str(data_dir), str(out_dir), model_config,
            TrainConfig(epochs=2, batch_size=4, seed=1))
        assert (out_dir / "train_log.csv").exists()
        report, preds, _ = evaluate_checkpoint(checkpoint, str(data_dir), "val")
        assert len(preds) == 3
        direct = evaluate_records(net, *_val_args(data_dir))
        assert report.as_row() == direct.as_row()


def _val_args(data_dir):
    from avparse.data import load_split

    split = load_split(str(data_dir), "val")
    return split.records, split.gt, split.classes


class TestOracleInjection:
    def test_ground_truth_injection_scores_one(self, tiny_dataset):
        from avparse.trainer import evaluate_oracle

        report = evaluate_oracle(tiny_dataset.gt_val)
        assert report.as_row() == [1.0] * 10
