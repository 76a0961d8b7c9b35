import numpy as np
import pandas as pd
import pytest
import torch

from app.config import MaskGenConfig, ModelConfig, ScheduleConfig, TrainConfig, build_config
from app.exceptions import ConfigError, TrainingError
from data.synthetic import make_dataset, render_scene
from diffusion.scheduler import NoiseSchedule
from models.checkpoint import new_checkpoint
from training.masks import bounce, generate_mask_sequence
from training.trainer import (
    LOG_COLUMNS,
    TrainingBatch,
    epsilon_loss,
    fit_codec,
    make_training_batch,
    train,
    train_two_stage,
)


def _samples(n=1, f=4, size=16):
    return [
        (render_scene(size, size, f, seed=i), generate_mask_sequence(size, size, f, MaskGenConfig(seed=i)))
        for i in range(n)
    ]


def _snapshot(params):
    return [p.detach().clone() for p in params]


# ----------------------------------------------------------------------
# mask generator
# ----------------------------------------------------------------------

def test_zero_rate_gives_empty_masks():
    masks = generate_mask_sequence(16, 16, 5, MaskGenConfig(rate=0.0))
    assert masks.data.shape == (5, 1, 16, 16)
    assert not masks.data.any()


@pytest.mark.parametrize("shape", ["rectangle", "ellipse", "stroke"])
def test_mask_generation_is_deterministic(shape):
    cfg = MaskGenConfig(rate=0.25, shape=shape, seed=9, direction=45.0)
    a = generate_mask_sequence(24, 32, 6, cfg)
    b = generate_mask_sequence(24, 32, 6, cfg)
    assert np.array_equal(a.data, b.data)
    assert set(np.unique(a.data)) <= {0.0, 1.0}


def test_rectangle_coverage_matches_rate_on_average():
    coverage = [
        generate_mask_sequence(32, 32, 4, MaskGenConfig(rate=0.3, seed=seed)).data.mean()
        for seed in range(1000)
    ]
    assert 0.2 <= float(np.mean(coverage)) <= 0.4


@pytest.mark.parametrize("shape", ["rectangle", "ellipse"])
def test_coverage_is_monotone_in_rate(shape):
    rates = np.arange(0.05, 0.7, 0.1)
    means = [
        np.mean([
            generate_mask_sequence(32, 32, 2, MaskGenConfig(rate=float(r), shape=shape, seed=s)).data.mean()
            for s in range(30)
        ])
        for r in rates
    ]
    rho = pd.Series(rates).corr(pd.Series(means), method="spearman")
    assert rho > 0.9


def test_stroke_reaches_target_area():
    masks = generate_mask_sequence(32, 32, 1, MaskGenConfig(rate=0.2, shape="stroke", seed=4))
    assert masks.data[0].mean() >= 0.2


def test_horizontal_drift_keeps_rows_fixed():
    cfg = MaskGenConfig(rate=0.05, direction=0.0, speed=3.0, jitter=0.0, seed=2)
    masks = generate_mask_sequence(64, 64, 3, cfg).data[:, 0]
    cols = [np.nonzero(m.any(axis=0))[0].mean() for m in masks]
    rows = [np.nonzero(m.any(axis=1))[0].mean() for m in masks]
    assert len(set(cols)) > 1
    assert rows[0] == rows[1] == rows[2]


def test_bounce_stays_in_range():
    values = np.linspace(-30, 30, 121)
    folded = bounce(values, 0.0, 10.0)
    assert folded.min() >= 0.0 and folded.max() <= 10.0
    assert bounce(np.array([12.0]), 0.0, 10.0)[0] == pytest.approx(8.0)


def test_invalid_rate_is_a_config_error():
    with pytest.raises(ConfigError):
        build_config(MaskGenConfig, {"rate": 1.5})


def test_make_dataset_layout(tmp_path):
    written = make_dataset(tmp_path / "corpus", n_videos=2, h=16, w=16, f=3)
    assert [p.name for p in written] == ["video_000", "video_001"]
    assert len(list((written[0] / "frames").glob("*.png"))) == 3
    assert len(list((written[1] / "masks").glob("*.png"))) == 3


# ----------------------------------------------------------------------
# batches and loss
# ----------------------------------------------------------------------

def test_training_batch_is_reproducible(tiny_checkpoint):
    (frames, masks), = _samples()
    schedule = NoiseSchedule.from_config(tiny_checkpoint.schedule)

    a = make_training_batch(frames, masks, tiny_checkpoint.codec, schedule, torch.Generator().manual_seed(3))
    b = make_training_batch(frames, masks, tiny_checkpoint.codec, schedule, torch.Generator().manual_seed(3))

    assert torch.equal(a.noisy, b.noisy) and torch.equal(a.eps, b.eps) and torch.equal(a.t, b.t)
    assert tuple(a.noisy.shape) == (4, 4, 4, 4)
    assert tuple(a.cond.shape) == (4, 9, 4, 4)
    assert torch.equal(a.cond[:, 5:], a.noisy)


def test_batch_at_timestep_zero_is_nearly_clean(tiny_checkpoint):
    (frames, masks), = _samples()
    schedule = NoiseSchedule.from_config(tiny_checkpoint.schedule)
    batch = make_training_batch(
        frames, masks, tiny_checkpoint.codec, schedule, torch.Generator().manual_seed(0), t=0, per_frame_t=True
    )
    assert batch.t.tolist() == [0, 0, 0, 0]
    assert float((batch.noisy - batch.clean).abs().mean()) < 2e-2


def test_lossless_batches_have_no_condition(lossless_checkpoint):
    (frames, masks), = _samples()
    schedule = NoiseSchedule.from_config(lossless_checkpoint.schedule)
    batch = make_training_batch(frames, masks, lossless_checkpoint.codec, schedule, torch.Generator())
    assert batch.cond is None
    assert batch.noisy.shape[1] == 48


def test_epsilon_loss():
    eps = torch.randn(2, 4, 3, 3)
    assert float(epsilon_loss(eps, eps)) == 0.0
    assert float(epsilon_loss(eps + 1.0, eps)) == pytest.approx(1.0)


# ----------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------

def test_stage_two_only_changes_motion_parameters(tiny_checkpoint):
    model = tiny_checkpoint.model
    groups = model.parameter_groups()
    frozen = [p for name, ps in groups.items() if name != "motion_params" for p in ps]
    frozen_before = _snapshot(frozen)
    motion_before = _snapshot(groups["motion_params"])

    train(tiny_checkpoint, _samples(), TrainConfig(stage=2, lr=1e-3, n_steps=3, clip_frames=4))

    assert all(torch.equal(a, b) for a, b in zip(frozen_before, frozen))
    assert any(not torch.equal(a, b) for a, b in zip(motion_before, groups["motion_params"]))


def test_stage_one_leaves_motion_untouched(tiny_checkpoint):
    model = tiny_checkpoint.model
    motion_before = _snapshot(model.parameter_groups()["motion_params"])
    spatial_before = _snapshot(model.parameter_groups()["spatial_params"])

    log = train(tiny_checkpoint, _samples(2), TrainConfig(stage=1, lr=1e-3, n_steps=3, batch_size=2))

    assert all(torch.equal(a, b) for a, b in zip(motion_before, model.parameter_groups()["motion_params"]))
    assert any(not torch.equal(a, b) for a, b in zip(spatial_before, model.parameter_groups()["spatial_params"]))
    assert model.motion_enabled
    assert list(log.columns) == LOG_COLUMNS
    assert log["step"].tolist() == [0, 1, 2]
    assert tiny_checkpoint.training["stages"][-1]["stage"] == 1


def test_training_is_seeded():
    logs = []
    for _ in range(2):
        checkpoint = new_checkpoint(ModelConfig(base_width=8, norm_groups=2, num_heads=2), schedule=ScheduleConfig(steps=2))
        logs.append(train(checkpoint, _samples(), TrainConfig(stage=1, lr=1e-3, n_steps=2, seed=5)))
    pd.testing.assert_frame_equal(logs[0], logs[1])


def test_log_is_appended(tmp_path, tiny_checkpoint):
    path = tmp_path / "logs" / "train.csv"
    train(tiny_checkpoint, _samples(), TrainConfig(stage=1, lr=1e-3, n_steps=2), log_path=path)
    train(tiny_checkpoint, _samples(), TrainConfig(stage=2, lr=1e-3, n_steps=3, clip_frames=2), log_path=path)

    log = pd.read_csv(path)
    assert list(log.columns) == LOG_COLUMNS
    assert log["stage"].tolist() == [1, 1, 2, 2, 2]


def test_non_finite_loss_is_reported(tiny_checkpoint):
    noisy = torch.full((1, 4, 4, 4), float("nan"))
    batch = TrainingBatch(clean=noisy, noisy=noisy, cond=None, t=torch.tensor([10]), eps=torch.zeros_like(noisy))
    with pytest.raises(TrainingError, match="non-finite"):
        train(tiny_checkpoint, [], TrainConfig(stage=1, n_steps=1), fixed_batch=batch)


def test_no_samples_is_an_error(tiny_checkpoint):
    with pytest.raises(TrainingError, match="no training samples"):
        train(tiny_checkpoint, [], TrainConfig(n_steps=1))


def test_fit_codec_reduces_reconstruction_error(tiny_checkpoint):
    losses = fit_codec(tiny_checkpoint.codec, [render_scene(16, 16, 4, seed=1)], n_steps=60, lr=1e-3)
    assert len(losses) == 60
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    assert float(tiny_checkpoint.codec.scaling_factor) != 1.0


def test_fit_codec_skips_lossless(lossless_checkpoint):
    assert fit_codec(lossless_checkpoint.codec, [render_scene(16, 16, 2)], n_steps=5) == []
    assert float(lossless_checkpoint.codec.scaling_factor) == 1.0


@pytest.mark.slow
def test_toy_overfit():
    checkpoint = new_checkpoint(ModelConfig(base_width=16, norm_groups=4), schedule=ScheduleConfig(steps=2))
    frames = render_scene(32, 32, 8, seed=0)
    masks = generate_mask_sequence(32, 32, 8, MaskGenConfig(seed=0))
    fit_codec(checkpoint.codec, [frames], n_steps=200)
    schedule = NoiseSchedule.from_config(checkpoint.schedule)
    batch = make_training_batch(
        frames, masks, checkpoint.codec, schedule, torch.Generator().manual_seed(0), per_frame_t=True
    )

    log = pd.concat([
        train(checkpoint, [], TrainConfig(stage=1, lr=1e-3, n_steps=400), fixed_batch=batch),
        train(checkpoint, [], TrainConfig(stage=2, lr=1e-3, n_steps=100), fixed_batch=batch),
    ], ignore_index=True)

    assert log["loss"].iloc[-1] <= 0.1 * log["loss"].iloc[0]


def test_two_stage_training_concatenates_logs(tiny_checkpoint):
    log = train_two_stage(
        tiny_checkpoint,
        _samples(),
        TrainConfig(lr=1e-3, n_steps=2),
        TrainConfig(lr=1e-3, n_steps=2, clip_frames=3),
    )
    assert log["stage"].tolist() == [1, 1, 2, 2]
    assert [s["stage"] for s in tiny_checkpoint.training["stages"]] == [1, 2]
