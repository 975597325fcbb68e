import os

import numpy as np
import pytest

from phantomage import encoder as enc
from phantomage import rnc
from phantomage import train as tr
from phantomage.augment import AugmentConfig


def compare_models(a, b):
    assert a.encoder.checksum() == b.encoder.checksum()
    assert np.array_equal(a.head.weight, b.head.weight)
    assert a.head.bias == b.head.bias


class TestDataLoading:
    def test_splits_loaded(self, tiny_split_data):
        assert set(tiny_split_data) == {"train", "val", "test"}
        train = tiny_split_data["train"]
        assert len(train.volumes) == len(train.ages) == len(train.ids)
        assert len(train.volumes) > len(tiny_split_data["val"].volumes)

    def test_indices_point_into_manifest(self, tiny_split_data):
        all_idx = np.concatenate([tiny_split_data[s].indices
                                  for s in ("train", "val", "test")])
        assert sorted(all_idx.tolist()) == list(range(30))


class TestEpochStreams:
    def test_perm_deterministic_and_epoch_dependent(self):
        a = tr._epoch_perm(1, 3, 10)
        assert np.array_equal(a, tr._epoch_perm(1, 3, 10))
        assert not np.array_equal(a, tr._epoch_perm(1, 4, 10))

    def test_batches_drop_singletons(self):
        batches = list(tr._batches(np.arange(9), 4))
        assert [len(b) for b in batches] == [4, 4]  # trailing 1-sample batch dropped


class TestConfigValidation:
    def test_bad_pipeline(self):
        with pytest.raises(ValueError):
            tr.TrainingConfig(pipeline="svm").validate()

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            tr.TrainingConfig(batch_size=1).validate()

    def test_augment_seed_defaults_to_seed(self):
        assert tr.TrainingConfig(seed=9).effective_augment_seed == 9
        assert tr.TrainingConfig(seed=9, augment_seed=2).effective_augment_seed == 2


class TestTwoStage:
    def test_trains_and_improves_head(self, tiny_split_data, small_encoder_config,
                                      fast_training_config, no_augment):
        res = tr.train_rnc_two_stage(tiny_split_data, small_encoder_config,
                                     rnc.RncConfig(), no_augment,
                                     fast_training_config)
        stages = {r["stage"] for r in res.history}
        assert stages == {1, 2}
        assert len(res.history) == 4  # 2 stage-1 + 2 stage-2 epochs
        preds = enc.predict_age(res.encoder, res.head,
                                tiny_split_data["val"].volumes)
        assert np.isfinite(preds).all()

    def test_stage2_freezes_encoder(self, tiny_split_data, small_encoder_config,
                                    no_augment):
        cfg = tr.TrainingConfig(stage1_epochs=1, stage2_epochs=3,
                                baseline_epochs=1, seed=3, checkpoint_every=0)
        short = tr.train_rnc_two_stage(tiny_split_data, small_encoder_config,
                                       rnc.RncConfig(), no_augment, cfg)
        cfg2 = tr.TrainingConfig(stage1_epochs=1, stage2_epochs=9,
                                 baseline_epochs=1, seed=3, checkpoint_every=0)
        long = tr.train_rnc_two_stage(tiny_split_data, small_encoder_config,
                                      rnc.RncConfig(), no_augment, cfg2)
        # more stage-2 epochs move the head but never the encoder
        assert short.encoder.checksum() == long.encoder.checksum()
        assert not np.array_equal(short.head.weight, long.head.weight)

    def test_resume_bit_exact(self, tiny_split_data, small_encoder_config,
                              fast_training_config, tmp_path, monkeypatch):
        aug = AugmentConfig()
        full = tr.train_rnc_two_stage(tiny_split_data, small_encoder_config,
                                      rnc.RncConfig(), aug, fast_training_config,
                                      out_dir=str(tmp_path / "full"))
        # kill the run after the first stage-1 epoch, then resume from its
        # checkpoint with the same budget
        orig = tr._stage1_epoch
        calls = {"n": 0}

        def interrupting(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] > 1:
                raise KeyboardInterrupt
            return orig(*args, **kwargs)

        monkeypatch.setattr(tr, "_stage1_epoch", interrupting)
        with pytest.raises(KeyboardInterrupt):
            tr.train_rnc_two_stage(tiny_split_data, small_encoder_config,
                                   rnc.RncConfig(), aug, fast_training_config,
                                   out_dir=str(tmp_path / "part"))
        monkeypatch.setattr(tr, "_stage1_epoch", orig)
        resumed = tr.train_rnc_two_stage(tiny_split_data, small_encoder_config,
                                         rnc.RncConfig(), aug, fast_training_config,
                                         out_dir=str(tmp_path / "part"), resume=True)
        compare_models(full, resumed)
        assert [r["train_loss"] for r in full.history] == \
               [r["train_loss"] for r in resumed.history]


class TestEndToEnd:
    def test_trains(self, tiny_split_data, small_encoder_config,
                    fast_training_config, no_augment):
        cfg = tr.TrainingConfig(**{**fast_training_config.__dict__,
                                   "pipeline": "end-to-end"})
        res = tr.train_end_to_end(tiny_split_data, small_encoder_config,
                                  no_augment, cfg)
        assert len(res.history) == 2
        assert res.meta["pipeline"] == "end-to-end"
        preds = enc.predict_age(res.encoder, res.head,
                                tiny_split_data["val"].volumes)
        assert np.isfinite(preds).all()

    def test_early_stopping_restores_best(self, tiny_split_data,
                                          small_encoder_config, no_augment):
        # patience 1 with enough epochs must stop before the budget and
        # report the best epoch it restored
        cfg = tr.TrainingConfig(pipeline="end-to-end", baseline_epochs=10,
                                patience=1, seed=3, checkpoint_every=0)
        res = tr.train_end_to_end(tiny_split_data, small_encoder_config,
                                  no_augment, cfg)
        if res.meta["early_stop_epoch"] is not None:
            assert res.meta["early_stop_epoch"] < 10
            assert res.meta["best_epoch"] <= res.meta["early_stop_epoch"]
            best_val = min(r["val_metric"] for r in res.history)
            best_row = [r for r in res.history
                        if r["val_metric"] == best_val][0]
            assert best_row["epoch"] == res.meta["best_epoch"]

    def test_resume_bit_exact(self, tiny_split_data, small_encoder_config,
                              tmp_path):
        aug = AugmentConfig()
        cfg4 = tr.TrainingConfig(pipeline="end-to-end", baseline_epochs=4,
                                 patience=10, seed=3, checkpoint_every=1)
        full = tr.train_end_to_end(tiny_split_data, small_encoder_config, aug,
                                   cfg4, out_dir=str(tmp_path / "full"))
        cfg2 = tr.TrainingConfig(pipeline="end-to-end", baseline_epochs=2,
                                 patience=10, seed=3, checkpoint_every=1)
        tr.train_end_to_end(tiny_split_data, small_encoder_config, aug, cfg2,
                            out_dir=str(tmp_path / "part"))
        resumed = tr.train_end_to_end(tiny_split_data, small_encoder_config, aug,
                                      cfg4, out_dir=str(tmp_path / "part"),
                                      resume=True)
        compare_models(full, resumed)
        assert [r["val_metric"] for r in full.history] == \
               [r["val_metric"] for r in resumed.history]


class TestDispatch:
    def test_run_training_routes(self, tiny_split_data, small_encoder_config,
                                 fast_training_config, no_augment):
        res = tr.run_training(tiny_split_data, small_encoder_config,
                              rnc.RncConfig(), no_augment, fast_training_config)
        assert res.meta["pipeline"] == "rnc-two-stage"

    def test_unknown_pipeline(self, tiny_split_data, small_encoder_config,
                              fast_training_config, no_augment):
        cfg = tr.TrainingConfig(**{**fast_training_config.__dict__})
        cfg.pipeline = "mystery"
        with pytest.raises(ValueError):
            tr.run_training(tiny_split_data, small_encoder_config,
                            rnc.RncConfig(), no_augment, cfg)


class TestHistoryCsv:
    def test_roundtrip(self, tmp_path):
        rows = [tr._history_row(1, 1, 0.5, 2.25, 0.1),
                tr._history_row(2, 2, 0.25, 1.0e-3, 0.01)]
        path = str(tmp_path / "h.csv")
        tr.write_history_csv(path, rows, provenance="run abc")
        assert tr.read_history_csv(path) == rows

    def test_repr_precision_survives(self, tmp_path):
        rows = [tr._history_row(1, 1, 1 / 3, np.pi, 0.1)]
        path = str(tmp_path / "h.csv")
        tr.write_history_csv(path, rows)
        back = tr.read_history_csv(path)
        assert back[0]["train_loss"] == rows[0]["train_loss"]
        assert back[0]["val_metric"] == rows[0]["val_metric"]


class TestTwoViewBatching:
    def test_two_view_batch_duplicates_subjects(self, tiny_split_data,
                                                small_encoder_config):
        cfg = tr.TrainingConfig(stage1_epochs=1, stage2_epochs=1, seed=3,
                                checkpoint_every=0)
        rcfg = rnc.RncConfig(batch_mode="two-views")
        res = tr.train_rnc_two_stage(tiny_split_data, small_encoder_config,
                                     rcfg, AugmentConfig(), cfg)
        assert np.isfinite([r["train_loss"] for r in res.history]).all()
