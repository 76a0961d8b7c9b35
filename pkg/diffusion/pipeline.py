"""
Video inpainting pipeline

mask dilation -> prior -> DDIM inversion -> pre-inference on sampled frames ->
staggered clip-wise denoising with anchor replacement -> decode -> blurred-mask blend

Latent cells the prior recovers by propagation are held on the prior's
inversion trajectory at every timestep; the denoiser generates the rest.

Every stage re-raises package errors tagged with its stage name.
"""
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import torch

from app.config import InferenceConfig
from app.exceptions import DiffuEraserError, PlanError
from data.cache_manager import CacheManager, get_cache_manager
from data.video_io import MaskSequence, VideoFrames, blend_output, pad_to_multiple
from diffusion.planner import ClipSpan, TemporalPlan, build_plan, sample_preinference_frames
from diffusion.prior import (
    PriorResult,
    builtin_prior,
    encode_and_invert,
    external_prior,
    inject_prior,
    invert_video,
    known_latent_mask,
    two_pass_external_prior,
)
from diffusion.scheduler import FINAL_TIMESTEP, NoiseSchedule, ddim_step
from models.checkpoint import Checkpoint
from models.codec import DOWNSAMPLE, downsample_mask, masked_image_latent
from models.denoiser import DiffuEraserModel

logger = logging.getLogger(__name__)

EpsilonModel = Callable[[torch.Tensor, int], torch.Tensor]

STAGES = ("prior", "inversion", "pre-inference", "denoise", "decode", "blend")


@contextmanager
def pipeline_stage(name: str):
    try:
        yield
    except DiffuEraserError as e:
        logger.error(f"Stage '{name}' failed: {e.message}")
        raise e.with_stage(name)


@dataclass(frozen=True)
class BranchInputs:
    """Static parts of the conditioning latent; the noisy part is added per call"""
    masked_latent: torch.Tensor
    mask_small: torch.Tensor

    def __getitem__(self, sl) -> "BranchInputs":
        return BranchInputs(self.masked_latent[sl], self.mask_small[sl])


@dataclass(frozen=True)
class KnownLatents:
    """Boolean cell map [1, 1, h, w] and the prior latent at every timestep (FINAL_TIMESTEP = clean)"""
    cells: torch.Tensor
    path: Dict[int, torch.Tensor]

    def apply(self, latents: torch.Tensor, t: int, rows: Optional[Sequence[int]] = None) -> torch.Tensor:
        target = self.path[t] if rows is None else self.path[t][list(rows)]
        return torch.where(self.cells, target.to(device=latents.device, dtype=latents.dtype), latents)


@dataclass(frozen=True)
class TraceEntry:
    phase: str
    position: int
    t: int
    t_prev: int
    start: int
    end: int
    anchors: Tuple[int, ...] = ()


@dataclass
class InpaintResult:
    frames: VideoFrames
    prior: PriorResult
    plan: Optional[TemporalPlan]
    trace: List[TraceEntry] = field(default_factory=list)
    runtime_seconds: float = 0.0

    def main_trace(self) -> List[TraceEntry]:
        return [e for e in self.trace if e.phase == "main"]


def denoise_clip(
    latents: torch.Tensor,
    t: int,
    t_prev: int,
    branch_inputs: Optional[BranchInputs],
    model: Union[DiffuEraserModel, EpsilonModel],
    schedule: NoiseSchedule,
    clip_len: Optional[int] = None,
) -> torch.Tensor:
    """One joint epsilon prediction and one DDIM step for a whole clip"""
    if clip_len is not None and latents.shape[0] > clip_len:
        raise PlanError(f"clip of {latents.shape[0]} frames exceeds clip_len={clip_len}")
    if isinstance(model, DiffuEraserModel):
        eps_fn = model.epsilon_fn(
            branch_inputs.masked_latent if branch_inputs is not None else None,
            branch_inputs.mask_small if branch_inputs is not None else None,
        )
    else:
        eps_fn = model
    return ddim_step(schedule, latents, eps_fn(latents, t), t, t_prev)


def apply_anchors(
    latents: torch.Tensor,
    anchors: Sequence[int],
    anchor_latents_at_t: Mapping[int, torch.Tensor],
) -> torch.Tensor:
    """Overwrite the anchor frames (clip-relative indices) with their pinned latents"""
    if not anchors:
        return latents
    out = latents.clone()
    for i in anchors:
        if i not in anchor_latents_at_t:
            raise PlanError(f"missing anchor latent for clip frame {i}")
        out[i] = anchor_latents_at_t[i]
    return out


def run_prior(frames: VideoFrames, masks: MaskSequence, config: InferenceConfig) -> PriorResult:
    if config.prior_command is None:
        return builtin_prior(frames, masks)
    if config.guidance_enabled and frames.num_frames > config.clip_len:
        sampled = sample_preinference_frames(frames.num_frames, config.clip_len)
        return two_pass_external_prior(config.prior_command, frames, masks, sampled)
    return external_prior(config.prior_command, frames, masks)


def _model_multiple(model: DiffuEraserModel) -> int:
    return DOWNSAMPLE * (1 << (len(model.config.level_widths) - 1))


def _sample_all_timesteps(
    z: torch.Tensor,
    branch: Optional[BranchInputs],
    model: DiffuEraserModel,
    schedule: NoiseSchedule,
    trace: List[TraceEntry],
    known: Optional[KnownLatents] = None,
    rows: Optional[Sequence[int]] = None,
) -> torch.Tensor:
    """Pre-inference: the sampled frames denoised as a single clip"""
    for i, (t, t_prev) in enumerate(schedule.step_pairs()):
        if known is not None:
            z = known.apply(z, t, rows)
        z = denoise_clip(z, t, t_prev, branch, model, schedule)
        trace.append(TraceEntry("pre", i, t, t_prev, 0, z.shape[0]))
    if known is not None:
        z = known.apply(z, FINAL_TIMESTEP, rows)
    return z


def _anchor_latents(
    plan: TemporalPlan,
    trajectory: Dict[int, torch.Tensor],
    t: int,
    span: ClipSpan,
    anchors: Tuple[int, ...],
) -> Dict[int, torch.Tensor]:
    rows = {frame: row for row, frame in enumerate(plan.preinference_indices)}
    return {a - span.start: trajectory[t][rows[a]] for a in anchors}


def run_inpainting(
    frames: VideoFrames,
    masks: MaskSequence,
    checkpoint: Checkpoint,
    config: Optional[InferenceConfig] = None,
    cache: Optional[CacheManager] = None,
) -> InpaintResult:
    config = config or InferenceConfig()
    cache = cache or get_cache_manager()
    model, codec = checkpoint.model, checkpoint.codec
    started = time.perf_counter()

    if masks.data.shape[0] != frames.num_frames or masks.data.shape[2:] != frames.data.shape[2:]:
        raise PlanError(
            f"mask shape {masks.data.shape} does not match frames {frames.data.shape}"
        ).with_stage("prior")
    n = frames.num_frames
    h, w = frames.size
    hole = masks
    masks = masks.dilated(config.mask_dilation)

    multiple = _model_multiple(model)
    work_frames = replace(frames, data=pad_to_multiple(frames.data, multiple))
    work_masks = replace(masks, data=pad_to_multiple(masks.data, multiple))

    with pipeline_stage("prior"):
        prior = run_prior(work_frames, work_masks, config)
        logger.info(f"Prior ({prior.source}) completed for {n} frames")

    if config.bypass_diffusion:
        with pipeline_stage("blend"):
            generated = replace(frames, data=prior.frames.data[:, :, :h, :w])
            output = blend_output(generated, frames, masks, config.blur_sigma, core=hole)
        return InpaintResult(output, prior, None, [], time.perf_counter() - started)

    guidance = config.guidance_enabled and n > config.clip_len
    with pipeline_stage("denoise"):
        plan = build_plan(n, config.clip_len, config.steps, guidance=guidance)
        schedule = NoiseSchedule.from_config(checkpoint.schedule, steps=config.steps)

    device = next(model.parameters()).device
    model.eval()

    with pipeline_stage("inversion"):
        z = inject_prior(
            prior, work_masks, codec, schedule, model,
            strength=config.prior_strength,
            seed=config.seed,
            clip_len=config.clip_len,
            refine_iters=config.inversion_refine_iters,
            cache=cache,
        ).to(device)
        branch = None
        if model.has_branch:
            branch = BranchInputs(
                masked_image_latent(codec, work_frames, work_masks).to(device=device, dtype=model.dtype),
                downsample_mask(work_masks).to(device=device, dtype=model.dtype),
            )
        known = None
        if config.pin_known_latents and config.prior_strength > 0:
            prior_latent, _, prior_path = encode_and_invert(
                prior, work_masks, codec, schedule, model,
                clip_len=config.clip_len,
                refine_iters=config.inversion_refine_iters,
                cache=cache,
            )
            known = KnownLatents(
                known_latent_mask(work_masks).to(device),
                {**prior_path, FINAL_TIMESTEP: prior_latent},
            )
            share = float(known.cells.float().mean())
            logger.info(f"{share:.1%} of latent cells are recoverable from the prior")

    trace: List[TraceEntry] = []
    trajectory: Dict[int, torch.Tensor] = {}
    if plan.preinference_indices:
        with pipeline_stage("pre-inference"):
            idx = list(plan.preinference_indices)
            pre_branch = branch[idx] if branch is not None else None
            x0_pre = _sample_all_timesteps(z[idx].clone(), pre_branch, model, schedule, trace, known, idx)
            _, trajectory = invert_video(
                x0_pre, schedule, model,
                pre_branch.masked_latent if pre_branch is not None else None,
                pre_branch.mask_small if pre_branch is not None else None,
                clip_len=config.clip_len,
                refine_iters=config.inversion_refine_iters,
                cache=cache,
            )
            logger.info(f"Pre-inference on {len(idx)} sampled frames done")

    with pipeline_stage("denoise"):
        for i, (t, t_prev) in enumerate(schedule.step_pairs()):
            if known is not None:
                z = known.apply(z, t)
            spans = plan.per_timestep[i]
            for j, span in enumerate(spans):
                sl = slice(span.start, span.end)
                anchors = plan.anchors_for(i, j)
                clip = z[sl]
                if anchors:
                    clip = apply_anchors(
                        clip,
                        [a - span.start for a in anchors],
                        _anchor_latents(plan, trajectory, t, span, anchors),
                    )
                z[sl] = denoise_clip(
                    clip, t, t_prev, branch[sl] if branch is not None else None,
                    model, schedule, config.clip_len,
                )
                trace.append(TraceEntry("main", i, t, t_prev, span.start, span.end, anchors))
            logger.info(f"Timestep {i + 1}/{schedule.steps} (t={t}): {len(spans)} clips")
        if known is not None:
            z = known.apply(z, FINAL_TIMESTEP)

    with pipeline_stage("decode"):
        decoded = codec.decode(z)[:, :, :h, :w].astype(frames.data.dtype)
        generated = replace(frames, data=decoded)

    with pipeline_stage("blend"):
        output = blend_output(generated, frames, masks, config.blur_sigma, core=hole)

    runtime = time.perf_counter() - started
    logger.info(f"Inpainted {n} frames in {runtime:.2f}s")
    return InpaintResult(output, prior, plan, trace, runtime)


def inpaint_video(
    frames: VideoFrames,
    masks: MaskSequence,
    checkpoint: Checkpoint,
    config: Optional[InferenceConfig] = None,
) -> VideoFrames:
    return run_inpainting(frames, masks, checkpoint, config).frames
