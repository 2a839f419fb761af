import json
from pathlib import Path

import numpy as np
import pytest

from depthlab.dataset_io import generate_dataset, load_batch
from depthlab.losses import weighted_l1
from depthlab.networks import DepthNet, NetworkConfig, load_model
from depthlab.nn import Parameter
from depthlab.trainer import (
    AdamState, TrainConfig, TrainConfigError, TrainState, adam_step, lr_schedule, pretrain_then_adapt, train,
)

SMALL = NetworkConfig(encoder_channels=(4, 4, 8, 8, 8), fusion_channels=4, seg_feature_channels=4,
                      posenet_channels=(4, 4, 8, 8, 8))


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    return {
        "synth": generate_dataset(root / "synth", 4, 2, seed=1, height=32, width=64),
        "real": generate_dataset(root / "real", 4, 2, seed=2, height=32, width=64),
        "single": generate_dataset(root / "single", 2, 1, seed=3, height=32, width=64, n_frames=1),
    }


def _cfg(**kw):
    base = dict(regime="supervised", batch_size=2, lr0=1e-3, epochs=2, seed=5, flip_prob=0.5)
    base.update(kw)
    return TrainConfig(**base)


def _log(path):
    out = []
    for line in Path(path).read_text().splitlines():
        record = json.loads(line)
        record.pop("wall_time", None)
        out.append(record)
    return out


def test_first_adam_step_has_learning_rate_size():
    for scale in (1e-6, 1.0, 1e6):
        p = Parameter(np.zeros(3, dtype=np.float64))
        adam_step({"p": p}, {"p": np.array([scale, -scale, 2 * scale])}, AdamState(), lr=0.01)
        np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-2)


def test_adam_on_square():
    w = Parameter(np.array([1.0]))
    adam_step({"w": w}, {"w": 2 * w.data}, AdamState(), lr=0.1)
    assert w.data[0] == pytest.approx(0.9, abs=1e-6)


def test_adam_zero_gradient_is_a_fixed_point():
    w = Parameter(np.array([0.3, -2.0]))
    state = AdamState()
    for _ in range(3):
        adam_step({"w": w}, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(w.data, np.float32([0.3, -2.0]))


def test_adam_decoupled_weight_decay():
    w = Parameter(np.array([2.0]))
    adam_step({"w": w}, {"w": None}, AdamState(), lr=0.1, weight_decay=0.5)
    assert w.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adam_skips_non_finite_gradient(caplog):
    w = Parameter(np.array([1.0]))
    v = Parameter(np.array([1.0]))
    state = AdamState()
    assert not adam_step({"w": w, "v": v}, {"w": np.array([1.0]), "v": np.array([np.nan])}, state, lr=0.1)
    assert w.data[0] == 1.0 and state.t == 0
    assert "v" in caplog.text


def test_lr_schedule_values():
    assert lr_schedule(0) == pytest.approx(1.5e-4)
    assert lr_schedule(50) == pytest.approx(7.5e-5)
    assert lr_schedule(100) == pytest.approx(3.75e-5)
    assert lr_schedule(25) == pytest.approx(1.5e-4 / np.sqrt(2))


@pytest.mark.parametrize("bad", [dict(batch_size=0), dict(lr0=0.0), dict(epochs=-1), dict(crop=(30, 64)),
                                 dict(eval_every=0), dict(regime="unsupervised")])
def test_config_validation(bad):
    with pytest.raises((TrainConfigError, ValueError)):
        _cfg(**bad)


def test_config_round_trips_through_dict():
    cfg = _cfg(crop=(32, 64))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_zero_epochs_writes_initial_checkpoint_only(data, tmp_path):
    result = train(data["synth"], "scaffnet", _cfg(epochs=0), str(tmp_path), SMALL)
    assert Path(result.log_path).read_text() == ""
    assert [p.name for p in (tmp_path / "ckpt").iterdir()] == ["epoch_000"]
    assert (tmp_path / "best" / "depth.ckpt").read_bytes() == (tmp_path / "ckpt/epoch_000/depth.ckpt").read_bytes()


def test_photometric_regime_needs_neighbours(data, tmp_path):
    with pytest.raises(TrainConfigError, match="neighbour"):
        train(data["single"], "scaffnet", _cfg(regime="self_supervised"), str(tmp_path), SMALL)


def test_training_is_deterministic(data, tmp_path):
    cfg = _cfg(regime="semi_supervised", epochs=1)
    train(data["synth"], "segguided", cfg, str(tmp_path / "a"), SMALL)
    train(data["synth"], "segguided", cfg, str(tmp_path / "b"), SMALL)
    assert _log(tmp_path / "a/log.jsonl") == _log(tmp_path / "b/log.jsonl")
    assert (tmp_path / "a/best/depth.ckpt").read_bytes() == (tmp_path / "b/best/depth.ckpt").read_bytes()
    assert (tmp_path / "a/best/pose.ckpt").read_bytes() == (tmp_path / "b/best/pose.ckpt").read_bytes()


def test_log_records_are_complete(data, tmp_path):
    result = train(data["synth"], "segguided", _cfg(regime="self_supervised", epochs=1), str(tmp_path), SMALL)
    steps = [h for h in result.history if "step" in h]
    assert len(steps) == 2
    for record in steps:
        assert {"step", "epoch", "lr", "grad_norm", "losses", "wall_time"} <= set(record)
        assert np.isfinite(record["grad_norm"])
        assert set(record["losses"]) >= {"total", "depth", "photometric", "smoothness"}


def test_resume_matches_uninterrupted_run(data, tmp_path):
    full = train(data["synth"], "segguided", _cfg(epochs=3), str(tmp_path / "full"), SMALL)
    train(data["synth"], "segguided", _cfg(epochs=2), str(tmp_path / "part"), SMALL)
    resumed = train(data["synth"], "segguided", _cfg(epochs=3), str(tmp_path / "part"), SMALL, resume=True)
    assert _log(full.log_path) == _log(resumed.log_path)
    assert Path(full.last_dir, "depth.ckpt").read_bytes() == Path(resumed.last_dir, "depth.ckpt").read_bytes()


def test_resume_without_checkpoints_fails(data, tmp_path):
    with pytest.raises(TrainConfigError):
        train(data["synth"], "segguided", _cfg(), str(tmp_path), SMALL, resume=True)


def test_best_checkpoint_has_minimum_validation_loss(data, tmp_path):
    result = train(data["synth"], "scaffnet", _cfg(epochs=4, keep_last=2, lr0=3e-3), str(tmp_path), SMALL)
    vals = [h["val_loss"] for h in result.history if h.get("event") == "val"]
    assert len(vals) == 4
    best = TrainState.load(str(Path(result.best_dir) / "state.ckpt"))
    assert best.best_val == min(vals)
    assert best.epoch == 1 + int(np.argmin(vals))
    assert sorted(p.name for p in (tmp_path / "ckpt").iterdir()) == ["epoch_000", "epoch_003", "epoch_004"]


def test_training_reduces_loss(data, tmp_path):
    result = train(data["synth"], "segguided", _cfg(epochs=15, lr0=3e-2, flip_prob=0.0), str(tmp_path), SMALL)
    losses = [h["losses"]["total"] for h in result.history if "step" in h]
    assert np.mean(losses[-2:]) < 0.5 * np.mean(losses[:2])


def _val_loss(model, manifest):
    model.eval()
    records = load_batch(manifest, "val", range(2))
    pred = model(np.stack([r.sparse for r in records]), np.stack([r.seg.labels for r in records]))
    return float(weighted_l1(pred, np.stack([r.gt for r in records])).data)


def test_two_phase_protocol(data, tmp_path):
    synth = _cfg(regime="synthetic", epochs=10, lr0=3e-2, flip_prob=0.0)
    adapt = _cfg(regime="semi_supervised", epochs=1)
    dirs = pretrain_then_adapt(data["synth"], data["real"], "segguided", synth, adapt, str(tmp_path), SMALL)
    assert set(dirs) == {"synthetic", "semi_supervised"}
    for phase in ("synthetic", "semi_supervised"):
        header = json.loads((tmp_path / phase / "log.jsonl").read_text().splitlines()[0])
        assert header["event"] == "phase" and header["phase"] == phase and len(header["config_hash"]) == 16
    pretrained = load_model(str(Path(dirs["synthetic"]) / "depth.ckpt"))
    assert _val_loss(pretrained, data["real"]) < _val_loss(DepthNet("segguided", SMALL, seed=5), data["real"])


def test_two_phase_protocol_requires_synthetic_first(data, tmp_path):
    with pytest.raises(TrainConfigError):
        pretrain_then_adapt(data["synth"], data["real"], "segguided", _cfg(), None, str(tmp_path), SMALL)


def test_adaptation_checkpoint_must_match_config(data, tmp_path):
    train(data["synth"], "segguided", _cfg(epochs=0), str(tmp_path / "a"), SMALL)
    with pytest.raises(ValueError):
        train(data["synth"], "scaffnet", _cfg(epochs=0), str(tmp_path / "b"), SMALL,
              init_checkpoint=str(tmp_path / "a/best/depth.ckpt"))
