import copy

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from sslbench import trainer as T
from sslbench.augment import AugmentConfig
from sslbench.data_ingest import SynthSpec, class_weights, generate_synthetic_dataset, split_dataset
from sslbench.encoders import ConvEncoder, ViTEncoder, load_checkpoint
from sslbench.ssl_losses import SSLConfig
from sslbench.task_heads import ClassificationModel, DenseModel

ACFG = AugmentConfig(size=32)


def _small_conv():
    return ConvEncoder(widths=(8, 16, 32, 32), blocks=(1, 1, 1, 1))


@pytest.fixture(scope="module")
def cls_data():
    m = generate_synthetic_dataset(SynthSpec(n=24, task="classification", height=32, width=32), seed=0)
    return m, split_dataset(m, seed=0)


def _cls_model(m):
    torch.manual_seed(0)
    return ClassificationModel(_small_conv(), len(m.class_names))


# schedule -----------------------------------------------------------------------


def test_schedule_examples():
    assert T.lr_schedule_step(10, 1e-4) == (5e-5, 0)
    assert T.lr_schedule_step(10, 1.5e-6) == (1e-6, 0)
    assert T.lr_schedule_step(9, 1e-4) == (1e-4, 9)
    assert T.lr_schedule_step(10, 1e-6) == (1e-6, 0)


@given(st.lists(st.booleans(), max_size=200), st.floats(1e-6, 1e-2))
def test_schedule_non_increasing_above_floor(improvements, rate):
    stale, prev = 0, rate
    for imp in improvements:
        stale = 0 if imp else stale + 1
        rate, stale = T.lr_schedule_step(stale, rate)
        assert 1e-6 <= rate <= prev
        prev = rate


def test_halving_happens_exactly_at_patience():
    rate, stale, hist = 1e-3, 0, []
    for _ in range(25):
        stale += 1
        rate, stale = T.lr_schedule_step(stale, rate)
        hist.append(rate)
    assert hist[8] == 1e-3 and hist[9] == 5e-4 and hist[18] == 5e-4 and hist[19] == 2.5e-4


def test_improvement_is_strict():
    assert T.improved(0.5, None, "max")
    assert not T.improved(0.5, 0.5, "max") and not T.improved(0.5, 0.5, "min")
    assert T.improved(0.4, 0.5, "min") and T.improved(0.6, 0.5, "max")


def test_defaults():
    assert T.TrainConfig.full_scale_defaults("segmentation").epochs == 200
    d = T.TrainConfig.full_scale_defaults("depth")
    assert (d.batch_size, d.lr, d.patience, d.lr_floor, d.epochs) == (48, 1e-4, 10, 1e-6, 50)
    desk = T.TrainConfig.desk_defaults("classification")
    assert desk.batch_size == 12 and desk.epochs <= 20


def test_batches_never_leave_a_single_sample():
    b = T._batches(13, 12, np.arange(13))
    assert [len(x) for x in b] == [13]
    assert [len(x) for x in T._batches(24, 12, np.arange(24))] == [12, 12]


# fine-tuning loop ------------------------------------------------------------------


def test_checkpoint_gate_keeps_best_epoch(cls_data, tmp_path, monkeypatch):
    m, splits = cls_data
    scores = iter([0.8, 0.5])
    monkeypatch.setattr(T, "validation_score", lambda *a, **k: next(scores))
    model = _cls_model(m)
    snaps = {}
    cfg = T.TrainConfig(batch_size=8, epochs=2, lr=1e-2)
    rec, best = T.train(cfg, model, splits, m, "classification", ACFG,
                        checkpoint_path=tmp_path / "c.npz",
                        on_epoch=lambda e, r: snaps.__setitem__(e, copy.deepcopy(model.state_dict())))
    assert rec.best_epoch == 0 and rec.best_score == 0.8
    assert any(not torch.equal(snaps[0][k], snaps[1][k]) for k in snaps[0])
    for k, v in snaps[0].items():
        assert torch.equal(model.state_dict()[k], v) and torch.equal(best[k], v)
    state, header = load_checkpoint(tmp_path / "c.npz")
    assert header["epoch"] == 0 and header["checkpoint_id"] == rec.checkpoint_id
    for k, v in state.items():
        assert torch.equal(torch.as_tensor(v), snaps[0][k])


def test_plateau_inside_train(cls_data, monkeypatch):
    m, splits = cls_data
    monkeypatch.setattr(T, "validation_score", lambda *a, **k: 0.5)
    cfg = T.TrainConfig(batch_size=12, epochs=6, lr=1e-3, patience=2, lr_floor=3e-4)
    rec, _ = T.train(cfg, _cls_model(m), splits, m, "classification", ACFG)
    assert rec.lr == [1e-3, 1e-3, 1e-3, 5e-4, 5e-4, 3e-4]
    assert rec.best_epoch == 0


def test_train_is_deterministic(cls_data):
    m, splits = cls_data
    cfg = T.TrainConfig(batch_size=8, epochs=2, lr=1e-3, seed=3)
    w = class_weights(m)
    r1, s1 = T.train(cfg, _cls_model(m), splits, m, "classification", ACFG, w)
    r2, s2 = T.train(cfg, _cls_model(m), splits, m, "classification", ACFG, w)
    assert r1.train_loss == r2.train_loss and r1.val_score == r2.val_score
    assert r1.checkpoint_id == r2.checkpoint_id
    assert all(torch.equal(s1[k], s2[k]) for k in s1)


def test_non_finite_loss_aborts(cls_data, monkeypatch):
    m, splits = cls_data
    monkeypatch.setattr(T, "task_loss", lambda model, x, *a: model(x).sum() * float("nan"))
    with pytest.raises(T.TrainingError) as ei:
        T.train(T.TrainConfig(batch_size=8, epochs=1), _cls_model(m), splits, m, "classification", ACFG)
    snap = ei.value.snapshot
    assert snap["epoch"] == 0 and snap["step"] == 0 and len(snap["batch_ids"]) == 8


def test_train_rejects_empty_validation(cls_data):
    m, splits = cls_data
    splits = copy.copy(splits)
    splits.val = []
    with pytest.raises(ValueError):
        T.train(T.TrainConfig(epochs=1), _cls_model(m), splits, m, "classification", ACFG)


@pytest.mark.parametrize("task", ["segmentation", "depth"])
def test_dense_train_and_evaluate(task):
    m = generate_synthetic_dataset(SynthSpec(n=14, task=task, height=40, width=48), seed=1)
    splits = split_dataset(m, (0.6, 0.2, 0.2), seed=0)
    torch.manual_seed(0)
    model = DenseModel(_small_conv(), task)
    rec, _ = T.train(T.TrainConfig(batch_size=4, epochs=1, lr=1e-3), model, splits, m, task, ACFG)
    assert len(rec.train_loss) == 1 and np.isfinite(rec.train_loss[0])
    res = T.evaluate(model, m, splits.test, task, ACFG)
    assert len(res["per_image"]) == len(splits.test)
    key = "mDice" if task == "segmentation" else "mRMSE"
    assert np.isfinite(res["metrics"][key])


def test_prepare_sample_mirrors_targets():
    m = generate_synthetic_dataset(SynthSpec(n=2, task="depth", height=32, width=32), seed=0)
    x, t = T.prepare_sample(m, m.records[0], "depth", ACFG, None)
    assert x.shape == (32, 32, 3) and t["depth"].shape == (32, 32) and t["lens"].dtype == bool


# pretraining ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def unlabeled():
    return generate_synthetic_dataset(SynthSpec(n=64, task="classification", height=32, width=32), seed=5)


def test_mocov3_loss_decreases(unlabeled):
    torch.manual_seed(0)
    cfg = T.TrainConfig(epochs=5, lr=1e-3, seed=0)
    res = T.pretrain(cfg, SSLConfig(workers=2, per_worker_batch=8), _small_conv(), unlabeled, ACFG, "synthetic")
    assert res.losses[-1] < res.losses[0]


def test_barlow_identical_views_one_dim(unlabeled):
    torch.manual_seed(0)

    def same(img, seed):
        from sslbench.augment import preprocess_eval

        x, _ = preprocess_eval(img, "classification", ACFG)
        return x, x

    ssl = SSLConfig(algorithm="barlow", workers=2, per_worker_batch=8, proj_dim=1)
    res = T.pretrain(T.TrainConfig(epochs=1, lr=1e-3), ssl, _small_conv(), unlabeled, ACFG, "synthetic", views_fn=same)
    assert res.losses[0] < 1e-3


def test_mae_needs_token_encoder(unlabeled):
    with pytest.raises(ValueError, match="MAE requires token encoder"):
        T.pretrain(T.TrainConfig(epochs=1), SSLConfig(algorithm="mae"), _small_conv(), unlabeled, ACFG)


def test_mae_pretrain_runs(unlabeled):
    torch.manual_seed(0)
    enc = ViTEncoder(img_size=32, patch=8, dim=32, depth=2, heads=2)
    res = T.pretrain(T.TrainConfig(epochs=1, lr=1e-3), SSLConfig(algorithm="mae", per_worker_batch=16), enc, unlabeled, ACFG, "synthetic")
    assert np.isfinite(res.losses[0])


def test_pretrain_header_provenance(unlabeled, tmp_path):
    torch.manual_seed(0)
    res = T.pretrain(T.TrainConfig(epochs=1, seed=4), SSLConfig(per_worker_batch=16), _small_conv(), unlabeled, ACFG, "ds-abc", tmp_path / "p.npz")
    _, header = load_checkpoint(tmp_path / "p.npz")
    assert header["algorithm"] == "mocov3" and header["dataset_id"] == "ds-abc" and header["seed"] == 4
    assert header["checkpoint_id"] == res.checkpoint_id
    assert header["encoder"]["arch"] == "conv"


def test_pretrain_needs_a_full_batch(unlabeled):
    with pytest.raises(ValueError, match="at least"):
        T.pretrain(T.TrainConfig(epochs=1), SSLConfig(workers=4, per_worker_batch=32), _small_conv(), unlabeled, ACFG)
