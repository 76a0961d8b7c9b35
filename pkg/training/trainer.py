"""
Two-stage training harness

Stage 1 trains the spatial UNet, the conditioning branch, the fusion
projections and the null embedding on single frames with the motion module
switched off. Stage 2 switches it on and trains only the motion parameters
on clips. Loss: mean squared error between predicted and true noise.
"""
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import tqdm

from app.config import TrainConfig
from app.exceptions import TrainingError
from data.video_io import MaskSequence, VideoFrames
from diffusion.scheduler import NoiseSchedule, add_noise
from models.checkpoint import Checkpoint
from models.codec import DEFAULT_LATENT_CHANNELS, LatentCodec, assemble_condition, downsample_mask, masked_image_latent
from models.denoiser import DiffuEraserModel

logger = logging.getLogger(__name__)

STAGE_GROUPS = {
    1: ("spatial_params", "branch_params", "fusion_params", "null_text_embedding"),
    2: ("motion_params",),
}

LOG_COLUMNS = ["stage", "step", "loss", "lr"]
CODEC_BATCH = 16

Sample = Tuple[VideoFrames, MaskSequence]


@dataclass
class TrainingBatch:
    clean: torch.Tensor            # [f, c, h/4, w/4]
    noisy: torch.Tensor            # [f, c, h/4, w/4]
    cond: Optional[torch.Tensor]   # [f, 9, h/4, w/4], None for lossless-width latents
    t: torch.Tensor                # [f] or [1]
    eps: torch.Tensor              # target

    @property
    def num_frames(self) -> int:
        return self.noisy.shape[0]


def make_training_batch(
    frames: VideoFrames,
    masks: MaskSequence,
    codec: LatentCodec,
    schedule: NoiseSchedule,
    rng: torch.Generator,
    t: Optional[int] = None,
    per_frame_t: bool = False,
) -> TrainingBatch:
    """
    Sample t uniformly from [0, T) (one per clip, or one per frame), draw the
    target noise and build the noisy latent and the conditioning latent.
    """
    clean = codec.encode(frames)
    f = clean.shape[0]
    if t is not None:
        timesteps = torch.full((f if per_frame_t else 1,), int(t), dtype=torch.long)
    else:
        timesteps = torch.randint(0, schedule.T, (f if per_frame_t else 1,), generator=rng)
    eps = torch.randn(clean.shape, generator=rng, dtype=clean.dtype)
    noisy = add_noise(schedule, clean, eps, timesteps if per_frame_t else int(timesteps[0]))

    cond = None
    if clean.shape[1] == DEFAULT_LATENT_CHANNELS:
        masked = masked_image_latent(codec, frames, masks)
        cond = assemble_condition(masked, downsample_mask(masks).to(clean.device), noisy)
    return TrainingBatch(clean=clean, noisy=noisy, cond=cond, t=timesteps, eps=eps)


def epsilon_loss(eps_pred: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(eps_pred, eps)


def configure_stage(model: DiffuEraserModel, stage: int) -> List[torch.nn.Parameter]:
    """Set the motion switch and requires_grad flags for a stage; returns trainable params"""
    if stage not in STAGE_GROUPS:
        raise TrainingError(f"unknown training stage {stage}")
    model.motion_enabled = stage == 2
    return model.set_trainable(STAGE_GROUPS[stage])


def train_step(model: DiffuEraserModel, optimizer: torch.optim.Optimizer, batch: TrainingBatch) -> float:
    """One optimizer step on the L2 epsilon loss; only parameters with requires_grad change"""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    eps_pred = model(batch.noisy, batch.t, batch.cond)
    loss = epsilon_loss(eps_pred, batch.eps)
    if not torch.isfinite(loss):
        stats = {
            "t": batch.t.tolist(),
            "noisy_absmax": float(batch.noisy.abs().max()),
            "pred_finite": bool(torch.isfinite(eps_pred).all()),
        }
        logger.error(f"Non-finite loss: {stats}")
        raise TrainingError(f"non-finite loss {float(loss)} ({stats})")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def _select(sample: Sample, indices: Sequence[int]) -> Sample:
    frames, masks = sample
    return frames.select(indices), masks.select(indices)


def sample_batch(
    samples: Sequence[Sample],
    config: TrainConfig,
    codec: LatentCodec,
    schedule: NoiseSchedule,
    rng: torch.Generator,
) -> TrainingBatch:
    """Stage 1: `batch_size` single frames with per-frame t. Stage 2: one contiguous clip."""
    video = samples[int(torch.randint(0, len(samples), (1,), generator=rng))]
    f = video[0].num_frames
    if config.stage == 1:
        indices = torch.randint(0, f, (config.batch_size,), generator=rng).tolist()
        return make_training_batch(*_select(video, indices), codec, schedule, rng, per_frame_t=True)
    length = min(config.clip_frames, f)
    start = int(torch.randint(0, f - length + 1, (1,), generator=rng))
    return make_training_batch(*_select(video, range(start, start + length)), codec, schedule, rng)


def train(
    checkpoint: Checkpoint,
    samples: Sequence[Sample],
    config: Optional[TrainConfig] = None,
    log_path: Optional[Path] = None,
    fixed_batch: Optional[TrainingBatch] = None,
) -> pd.DataFrame:
    """
    Run one training stage in place on `checkpoint.model`

    Args:
        checkpoint: Model, codec and schedule to train; the codec stays frozen
        samples: (frames, masks) training videos
        config: Stage, learning rate, step count, batch shape and seed
        log_path: Optional CSV destination for the (stage, step, loss, lr) log
        fixed_batch: Reuse one batch for every step (overfitting checks)

    Returns:
        DataFrame with one row per step
    """
    config = config or TrainConfig()
    if not samples and fixed_batch is None:
        raise TrainingError("no training samples")
    model, codec = checkpoint.model, checkpoint.codec
    schedule = NoiseSchedule.from_config(checkpoint.schedule)
    rng = torch.Generator().manual_seed(config.seed)

    params = configure_stage(model, config.stage)
    if not params:
        raise TrainingError(f"stage {config.stage} has no trainable parameters")
    optimizer = torch.optim.Adam(params, lr=config.lr)
    logger.info(
        f"Stage {config.stage}: {sum(p.numel() for p in params)} trainable parameters, "
        f"{config.n_steps} steps at lr={config.lr}"
    )

    rows: List[Dict] = []
    bar = tqdm(range(config.n_steps), desc=f"stage {config.stage}", disable=not sys.stderr.isatty())
    for step in bar:
        batch = fixed_batch if fixed_batch is not None else sample_batch(samples, config, codec, schedule, rng)
        loss = train_step(model, optimizer, batch)
        rows.append({"stage": config.stage, "step": step, "loss": loss, "lr": config.lr})
        if step % config.log_every == 0:
            bar.set_postfix(loss=f"{loss:.4f}")
            logger.debug(f"stage {config.stage} step {step}: loss {loss:.6f}")

    # motion modules of a stage-1-only model are still identity maps
    model.motion_enabled = True
    model.eval()
    log = pd.DataFrame(rows, columns=LOG_COLUMNS)
    history = checkpoint.training.setdefault("stages", [])
    history.append({
        "stage": config.stage,
        "steps": config.n_steps,
        "lr": config.lr,
        "final_loss": float(log["loss"].iloc[-1]) if len(log) else None,
    })
    if log_path is not None:
        append_training_log(log, log_path)
    return log


def append_training_log(log: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    log.to_csv(path, mode="a", header=not path.exists(), index=False)
    return path


def fit_codec(
    codec: LatentCodec,
    frames: Sequence[VideoFrames],
    n_steps: int = 500,
    lr: float = 1e-3,
    seed: int = 0,
) -> List[float]:
    """
    Fit the default-mode autoencoder by reconstruction MSE and set
    scaling_factor = 1 / std(latent). Lossless codecs are left untouched.
    """
    if codec.mode == "lossless":
        logger.info("Lossless codec needs no fitting")
        return []
    data = torch.cat([codec.as_tensor(v) for v in frames])
    gen = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(list(codec.encoder.parameters()) + list(codec.decoder.parameters()), lr=lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, n_steps), eta_min=lr * 0.05)
    losses = []
    codec.train()
    for step in tqdm(range(n_steps), desc="codec", disable=not sys.stderr.isatty()):
        idx = torch.randint(0, data.shape[0], (min(CODEC_BATCH, data.shape[0]),), generator=gen)
        x = data[idx]
        optimizer.zero_grad(set_to_none=True)
        loss = F.mse_loss(codec.decode_raw(codec.encode_raw(x)), x)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite codec loss at step {step}")
        loss.backward()
        optimizer.step()
        scheduler.step()
        losses.append(float(loss.detach()))
    codec.eval()
    with torch.no_grad():
        std = float(codec.encode_raw(data).std())
    codec.scaling_factor.fill_(1.0 / std if std > 0 and math.isfinite(std) else 1.0)
    logger.info(f"Codec fitted: final mse {losses[-1] if losses else float('nan'):.5f}, scale {float(codec.scaling_factor):.4f}")
    return losses


def train_two_stage(
    checkpoint: Checkpoint,
    samples: Sequence[Sample],
    stage1: TrainConfig,
    stage2: TrainConfig,
    log_path: Optional[Path] = None,
) -> pd.DataFrame:
    """Stage 1 followed by stage 2; returns the concatenated log"""
    logs = [
        train(checkpoint, samples, stage1.model_copy(update={"stage": 1}), log_path),
        train(checkpoint, samples, stage2.model_copy(update={"stage": 2}), log_path),
    ]
    return pd.concat(logs, ignore_index=True)
