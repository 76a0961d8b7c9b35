"""
Prior inpainting and prior injection

builtin_prior    zero-motion temporal propagation of known pixels, then a
                 harmonic (Jacobi) fill of pixels never visible in any frame
external_prior   any program honouring `<cmd> --frames D --masks D --out D`
inject_prior     DDIM-invert the encoded prior and blend it with seeded noise
"""
import logging
import shlex
import subprocess
import sys
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import ndimage
from tqdm import tqdm

from app.exceptions import CodecError, PriorError, VideoIOError
from data.cache_manager import CacheManager, get_cache_manager
from data.video_io import MaskSequence, VideoFrames, load_frames, save_frames, save_masks
from diffusion.planner import partition_clips
from diffusion.scheduler import NoiseSchedule, ddim_invert
from models.codec import LatentCodec, downsample_mask, masked_image_latent
from models.denoiser import DiffuEraserModel

logger = logging.getLogger(__name__)

HARMONIC_TOL = 1e-4
HARMONIC_MAX_ITERS = 10_000
EMPTY_FRAME_FILL = 0.5
VALIDATION_TOL = 1.0 / 255.0 + 1e-6

_NEIGHBOUR_KERNEL = np.array([[0.0, 0.25, 0.0], [0.25, 0.0, 0.25], [0.0, 0.25, 0.0]])


@dataclass(frozen=True)
class PriorResult:
    frames: VideoFrames
    source: Literal["builtin", "external"]


def _check_aligned(frames: VideoFrames, masks: MaskSequence):
    if masks.data.shape[0] != frames.num_frames or masks.data.shape[2:] != frames.data.shape[2:]:
        raise PriorError(f"mask shape {masks.data.shape} does not match frames {frames.data.shape}")


# ----------------------------------------------------------------------
# built-in propagation prior
# ----------------------------------------------------------------------

def nearest_known_frame(masked: np.ndarray) -> np.ndarray:
    """
    For a boolean [f, h, w] hole map, the index of the temporally nearest frame
    in which each pixel is visible (ties go to the earlier frame), or -1.
    """
    f = masked.shape[0]
    known = ~masked
    prev_idx = np.full(masked.shape, -1, dtype=np.int64)
    next_idx = np.full(masked.shape, -1, dtype=np.int64)
    last = np.full(masked.shape[1:], -1, dtype=np.int64)
    for t in range(f):
        last = np.where(known[t], t, last)
        prev_idx[t] = last
    last = np.full(masked.shape[1:], -1, dtype=np.int64)
    for t in reversed(range(f)):
        last = np.where(known[t], t, last)
        next_idx[t] = last

    t_axis = np.arange(f)[:, None, None]
    d_prev = np.where(prev_idx >= 0, t_axis - prev_idx, np.iinfo(np.int64).max)
    d_next = np.where(next_idx >= 0, next_idx - t_axis, np.iinfo(np.int64).max)
    return np.where(d_prev <= d_next, prev_idx, next_idx)


def harmonic_fill(data: np.ndarray, holes: np.ndarray, tol: float = HARMONIC_TOL, max_iters: int = HARMONIC_MAX_ITERS) -> np.ndarray:
    """
    Jacobi iteration of 4-neighbour averaging inside `holes` ([f, h, w] bool)
    for [f, c, h, w] data; values outside the holes are fixed boundary values.
    Holes start at the mean of their frame's visible pixels (0.5 for frames
    with nothing visible).
    """
    out = data.astype(np.float64, copy=True)
    if not holes.any():
        return out
    hole4 = np.broadcast_to(holes[:, None], out.shape)
    visible = ~holes[:, None]
    counts = visible.sum(axis=(2, 3))
    sums = np.where(visible, out, 0.0).sum(axis=(2, 3))
    init = np.where(counts > 0, sums / np.maximum(counts, 1), EMPTY_FRAME_FILL)
    out = np.where(hole4, init[:, :, None, None], out)

    kernel = _NEIGHBOUR_KERNEL[None, None]
    with tqdm(total=max_iters, desc="harmonic fill", leave=False, disable=not sys.stderr.isatty()) as bar:
        for i in range(max_iters):
            averaged = ndimage.convolve(out, kernel, mode="nearest")
            update = np.where(hole4, averaged, out)
            delta = float(np.abs(update - out).max())
            out = update
            bar.update(1)
            if delta < tol:
                logger.debug(f"Harmonic fill converged after {i + 1} iterations")
                break
        else:
            logger.warning(f"Harmonic fill stopped at {max_iters} iterations (last update {delta:.2e})")
    return out


def builtin_prior(frames: VideoFrames, masks: MaskSequence) -> PriorResult:
    """Propagation prior; reads only unmasked input pixels"""
    _check_aligned(frames, masks)
    data = frames.data
    masked = masks.data[:, 0] > 0
    if not masked.any():
        return PriorResult(frames=frames, source="builtin")

    source = nearest_known_frame(masked)
    found = source >= 0
    gather = np.where(found, source, np.arange(data.shape[0])[:, None, None])
    propagated = np.take_along_axis(data, np.broadcast_to(gather[:, None], data.shape), axis=0)
    filled = np.where(masked[:, None], propagated, data)

    unknown = masked & ~found
    if unknown.any():
        logger.info(f"Harmonic fill for {int(unknown.sum())} pixels never visible in any frame")
        filled = harmonic_fill(filled, unknown)

    out = np.where(masked[:, None], np.clip(filled, 0.0, 1.0), data).astype(data.dtype)
    return PriorResult(frames=replace(frames, data=out), source="builtin")


# ----------------------------------------------------------------------
# external prior program
# ----------------------------------------------------------------------

def validate_prior(result: np.ndarray, frames: VideoFrames, masks: MaskSequence) -> np.ndarray:
    """Check an external result against the input; returns it with unmasked pixels restored exactly"""
    if result.shape != frames.data.shape:
        raise PriorError(f"hole left unfilled: prior returned {result.shape}, expected {frames.data.shape}")
    if not np.isfinite(result).all():
        raise PriorError("hole left unfilled: prior output contains non-finite values")
    unmasked = np.broadcast_to(masks.data == 0, result.shape)
    drift = np.abs(result - frames.data)[unmasked]
    if drift.size and drift.max() > VALIDATION_TOL:
        raise PriorError(
            f"prior modified unmasked pixels (max deviation {drift.max():.4f} > 1/255)"
        )
    return np.where(unmasked, frames.data, np.clip(result, 0.0, 1.0)).astype(frames.data.dtype)


def external_prior(command: str, frames: VideoFrames, masks: MaskSequence, timeout: Optional[float] = None) -> PriorResult:
    _check_aligned(frames, masks)
    argv = shlex.split(command)
    if not argv:
        raise PriorError("empty prior command")

    with tempfile.TemporaryDirectory(prefix="diffueraser_prior_") as tmp:
        tmp = Path(tmp)
        frames_dir, masks_dir, out_dir = tmp / "frames", tmp / "masks", tmp / "out"
        save_frames(frames, frames_dir, crop=False)
        save_masks(masks, masks_dir, crop=False)
        out_dir.mkdir()
        full = argv + ["--frames", str(frames_dir), "--masks", str(masks_dir), "--out", str(out_dir)]
        logger.info(f"Running external prior: {' '.join(full)}")
        try:
            proc = subprocess.run(full, capture_output=True, text=True, timeout=timeout, check=False)
        except (OSError, subprocess.TimeoutExpired) as e:
            logger.error(f"External prior could not run: {e}")
            raise PriorError(f"prior command failed: {e}") from e
        if proc.returncode != 0:
            tail = (proc.stderr or "").strip().splitlines()[-5:]
            raise PriorError(f"prior command exited with code {proc.returncode}: {' | '.join(tail)}")
        try:
            result = load_frames(out_dir)
        except VideoIOError as e:
            raise PriorError(f"hole left unfilled: {e}") from e

    if result.num_frames != frames.num_frames:
        raise PriorError(f"hole left unfilled: prior wrote {result.num_frames} of {frames.num_frames} frames")
    data = validate_prior(result.data, frames, masks)
    return PriorResult(frames=replace(frames, data=data), source="external")


def two_pass_external_prior(
    command: str,
    frames: VideoFrames,
    masks: MaskSequence,
    sampled: Sequence[int],
) -> PriorResult:
    """
    Run the prior on the sampled frames first, then hand their completed
    frames back as fully visible guidance frames for the full pass.
    """
    sampled = list(sampled)
    if not sampled or len(sampled) == frames.num_frames:
        return external_prior(command, frames, masks)
    first = external_prior(command, frames.select(sampled), masks.select(sampled))

    guided = frames.data.copy()
    guided[sampled] = first.frames.data
    guide_masks = masks.data.copy()
    guide_masks[sampled] = 0.0
    second = external_prior(command, replace(frames, data=guided), replace(masks, data=guide_masks))
    data = np.where(masks.data > 0, second.frames.data, frames.data).astype(frames.data.dtype)
    return PriorResult(frames=replace(frames, data=data), source="external")


# ----------------------------------------------------------------------
# prior injection
# ----------------------------------------------------------------------

def model_fingerprint(model: torch.nn.Module) -> torch.Tensor:
    return torch.cat([v.detach().reshape(-1).to(torch.float64).cpu() for v in model.state_dict().values()])


def invert_video(
    latent: torch.Tensor,
    schedule: NoiseSchedule,
    model: DiffuEraserModel,
    masked_latent: Optional[torch.Tensor] = None,
    mask_small: Optional[torch.Tensor] = None,
    clip_len: int = 22,
    refine_iters: int = 0,
    cache: Optional[CacheManager] = None,
) -> Tuple[torch.Tensor, Dict[int, torch.Tensor]]:
    """
    Clip-wise DDIM inversion of a latent video (offset-0 partition).
    Returns the latent at the largest inference timestep and the full
    trajectory {t: latent}. Results are cached by content.
    """
    cache = cache or get_cache_manager()
    key = CacheManager.create_cache_key(
        "inversion",
        latent=latent,
        masked_latent=masked_latent,
        mask_small=mask_small,
        timesteps=list(schedule.inference_timesteps),
        clip_len=clip_len,
        refine_iters=refine_iters,
        weights=model_fingerprint(model),
    )

    def compute():
        final = torch.empty_like(latent)
        trajectory = {t: torch.empty_like(latent) for t in schedule.inference_timesteps}
        for span in partition_clips(latent.shape[0], clip_len, 0):
            sl = slice(span.start, span.end)
            eps_fn = model.epsilon_fn(
                masked_latent[sl] if masked_latent is not None else None,
                mask_small[sl] if mask_small is not None else None,
            )
            z, traj = ddim_invert(schedule, latent[sl], eps_fn, refine_iters=refine_iters, return_trajectory=True)
            final[sl] = z
            for t, value in traj.items():
                trajectory[t][sl] = value
        return final, trajectory

    return cache.get_or_compute(key, compute)


def seeded_noise(shape, seed: int, dtype: torch.dtype = torch.float32, device="cpu") -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(shape), generator=gen, dtype=dtype).to(device)


def inject_prior(
    prior: PriorResult,
    masks: MaskSequence,
    codec: LatentCodec,
    schedule: NoiseSchedule,
    model: DiffuEraserModel,
    strength: float = 1.0,
    seed: int = 0,
    clip_len: int = 22,
    refine_iters: int = 0,
    cache: Optional[CacheManager] = None,
) -> torch.Tensor:
    """strength * ddim_invert(encode(prior)) + (1 - strength) * seeded Gaussian"""
    if not 0.0 <= strength <= 1.0:
        raise PriorError(f"strength must lie in [0, 1], got {strength}")
    if codec.latent_channels != model.config.latent_channels:
        raise CodecError(
            f"codec produces {codec.latent_channels}-channel latents, model expects {model.config.latent_channels}"
        )
    _check_aligned(prior.frames, masks)

    if strength == 0.0:
        latent = codec.encode(prior.frames).to(model.dtype)
        return seeded_noise(latent.shape, seed, dtype=latent.dtype, device=latent.device)

    latent, z_inv, _ = encode_and_invert(
        prior, masks, codec, schedule, model,
        clip_len=clip_len, refine_iters=refine_iters, cache=cache,
    )
    if strength == 1.0:
        return z_inv.clone()
    z_rand = seeded_noise(latent.shape, seed, dtype=latent.dtype, device=latent.device)
    return strength * z_inv + (1.0 - strength) * z_rand


def encode_and_invert(
    prior: PriorResult,
    masks: MaskSequence,
    codec: LatentCodec,
    schedule: NoiseSchedule,
    model: DiffuEraserModel,
    clip_len: int = 22,
    refine_iters: int = 0,
    cache: Optional[CacheManager] = None,
) -> Tuple[torch.Tensor, torch.Tensor, Dict[int, torch.Tensor]]:
    """Encoded prior latent, its inversion and the inversion trajectory {t: latent}"""
    latent = codec.encode(prior.frames).to(model.dtype)
    masked_latent = mask_small = None
    if model.has_branch:
        masked_latent = masked_image_latent(codec, prior.frames, masks).to(model.dtype)
        mask_small = downsample_mask(masks).to(device=latent.device, dtype=model.dtype)
    z_inv, trajectory = invert_video(
        latent, schedule, model, masked_latent, mask_small,
        clip_len=clip_len, refine_iters=refine_iters, cache=cache,
    )
    return latent, z_inv, trajectory


def known_latent_mask(masks: MaskSequence) -> torch.Tensor:
    """
    [1, 1, h/4, w/4] boolean map of latent cells whose pixels are all visible
    in at least one frame. The prior recovers these cells by propagation;
    the remaining cells cover pixels that must be generated.
    """
    never_visible = (masks.data > 0).all(axis=0, keepdims=True).astype(np.float32)
    return downsample_mask(never_visible) == 0
