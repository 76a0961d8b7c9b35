"""
Command-line surface for DiffuEraser Desk

Subcommands: inpaint, train, plan, eval, make-dataset
Flag names mirror the InferenceConfig / TrainConfig / MaskGenConfig fields;
flags override config-file values, which override defaults.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from app.config import (
    EXIT_CODES,
    AppConfig,
    CodecConfig,
    InferenceConfig,
    MaskGenConfig,
    ModelConfig,
    RuntimeConfig,
    ScheduleConfig,
    TrainConfig,
    apply_seed_override,
    build_config,
    initialize_logging,
    load_config_file,
)
from app.exceptions import ConfigError, DiffuEraserError, PlanError
from data.synthetic import make_dataset
from data.video_io import MaskSequence, VideoFrames, load_frames, load_masks, save_frames
from diffusion.pipeline import run_inpainting
from diffusion.planner import build_plan
from models.checkpoint import load_checkpoint, new_checkpoint, save_checkpoint
from models.codec import DEFAULT_LATENT_CHANNELS, LOSSLESS_LATENT_CHANNELS
from training.trainer import fit_codec, train
from utils.metrics import compute_metrics

logger = logging.getLogger(__name__)

INFERENCE_FLAGS = {
    "clip_len": int,
    "steps": int,
    "seed": int,
    "prior_strength": float,
    "blur_sigma": float,
    "prior_command": str,
    "inversion_refine_iters": int,
    "mask_dilation": int,
}
TRAIN_FLAGS = {
    "stage": int,
    "lr": float,
    "batch_size": int,
    "n_steps": int,
    "clip_frames": int,
    "seed": int,
    "log_every": int,
}
MASK_FLAGS = {
    "rate": float,
    "direction": float,
    "speed": float,
    "jitter": float,
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_typed_flags(parser: argparse.ArgumentParser, flags: Dict[str, type]):
    for name, kind in flags.items():
        parser.add_argument(_flag(name), dest=name, type=kind, default=None)


def _collect(args: argparse.Namespace, names) -> Dict[str, Any]:
    return {name: getattr(args, name) for name in names if getattr(args, name, None) is not None}


def _require_path(path: Optional[str], what: str) -> Path:
    if path is None or not Path(path).exists():
        raise ConfigError(f"{what} not found: {path}")
    return Path(path)


def build_parser() -> argparse.ArgumentParser:
    app = AppConfig()
    parser = argparse.ArgumentParser(prog="diffueraser", description=f"{app.title} - {app.subtitle}")
    parser.add_argument("--version", action="version", version=app.version)
    parser.add_argument("--log-level", default=None, help="overrides DIFFUERASER_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    inpaint = sub.add_parser("inpaint", help="inpaint a frame directory")
    inpaint.add_argument("--frames", required=True)
    inpaint.add_argument("--masks", required=True, help="mask directory or a single mask file")
    inpaint.add_argument("--out", required=True)
    inpaint.add_argument("--checkpoint", required=True)
    inpaint.add_argument("--config", default=None, help="JSON or YAML InferenceConfig")
    inpaint.add_argument("--ground-truth", default=None)
    inpaint.add_argument("--report", default=None)
    _add_typed_flags(inpaint, INFERENCE_FLAGS)
    inpaint.add_argument("--guidance-enabled", dest="guidance_enabled", action=argparse.BooleanOptionalAction, default=None)
    inpaint.add_argument("--bypass-diffusion", dest="bypass_diffusion", action=argparse.BooleanOptionalAction, default=None)
    inpaint.add_argument("--pin-known-latents", dest="pin_known_latents", action=argparse.BooleanOptionalAction, default=None)

    train = sub.add_parser("train", help="run one training stage")
    train.add_argument("--data", required=True, help="directory of video_*/{frames,masks}")
    train.add_argument("--checkpoint", required=True, help="output checkpoint path")
    train.add_argument("--init", default=None, help="checkpoint to resume from")
    train.add_argument("--config", default=None, help="JSON or YAML TrainConfig")
    train.add_argument("--log", default=None, help="CSV training log (appended)")
    train.add_argument("--codec-mode", choices=["default", "lossless"], default="default")
    train.add_argument("--codec-steps", type=int, default=300, help="codec fitting steps for a fresh checkpoint")
    train.add_argument("--schedule-steps", type=int, default=None, help="inference steps stored in a fresh checkpoint")
    _add_typed_flags(train, TRAIN_FLAGS)

    plan = sub.add_parser("plan", help="print the temporal plan as JSON")
    plan.add_argument("--n-frames", dest="n_frames", type=int, required=True)
    plan.add_argument("--clip-len", dest="clip_len", type=int, default=22)
    plan.add_argument("--steps", type=int, default=50)
    plan.add_argument("--guidance-enabled", dest="guidance_enabled", action=argparse.BooleanOptionalAction, default=True)

    evaluate = sub.add_parser("eval", help="score an output directory against ground truth")
    evaluate.add_argument("--output", required=True)
    evaluate.add_argument("--ground-truth", required=True)
    evaluate.add_argument("--masks", required=True)
    evaluate.add_argument("--report", default=None)

    dataset = sub.add_parser("make-dataset", help="write a synthetic training corpus")
    dataset.add_argument("--out", required=True)
    dataset.add_argument("--n-videos", dest="n_videos", type=int, default=4)
    dataset.add_argument("--height", type=int, default=32)
    dataset.add_argument("--width", type=int, default=32)
    dataset.add_argument("--frames", type=int, default=22)
    dataset.add_argument("--seed", type=int, default=None)
    dataset.add_argument("--shape", choices=["rectangle", "ellipse", "stroke"], default=None)
    _add_typed_flags(dataset, MASK_FLAGS)
    return parser


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_inpaint(args: argparse.Namespace) -> int:
    runtime = RuntimeConfig()
    flags = _collect(args, list(INFERENCE_FLAGS) + ["guidance_enabled", "bypass_diffusion", "pin_known_latents"])
    config = build_config(InferenceConfig, load_config_file(args.config), flags)
    config = apply_seed_override(config, runtime)
    ckpt_path = _require_path(args.checkpoint, "checkpoint")
    frames_path = _require_path(args.frames, "frames directory")
    masks_path = _require_path(args.masks, "masks")

    checkpoint = load_checkpoint(ckpt_path, device=runtime.device)
    frames = load_frames(frames_path)
    masks = load_masks(masks_path, frames.num_frames)
    result = run_inpainting(frames, masks, checkpoint, config)
    save_frames(result.frames, args.out)

    if args.ground_truth:
        truth = load_frames(_require_path(args.ground_truth, "ground truth"))
        report = compute_metrics(
            result.frames.cropped().data,
            truth.cropped().data,
            _cropped_masks(masks, frames),
            runtime_seconds=result.runtime_seconds,
        )
        report_path = report.save(args.report or Path(args.out) / "report.json")
        logger.info(f"Report written to {report_path}: mean masked PSNR {report.psnr_mean:.2f} dB")
    return EXIT_CODES["success"]


def _cropped_masks(masks: MaskSequence, frames: VideoFrames):
    h, w = frames.crop or frames.size
    return masks.data[:, :, :h, :w]


def _load_corpus(data_dir: Path):
    videos = sorted(p for p in data_dir.iterdir() if (p / "frames").is_dir())
    if not videos:
        raise ConfigError(f"no video_*/frames directories in {data_dir}")
    samples = []
    for video in videos:
        frames = load_frames(video / "frames")
        masks = load_masks(video / "masks", frames.num_frames)
        samples.append((frames, masks))
    return samples


def cmd_train(args: argparse.Namespace) -> int:
    runtime = RuntimeConfig()
    config = build_config(TrainConfig, load_config_file(args.config), _collect(args, TRAIN_FLAGS))
    config = apply_seed_override(config, runtime)
    samples = _load_corpus(_require_path(args.data, "training data"))

    if args.init:
        checkpoint = load_checkpoint(_require_path(args.init, "checkpoint"), device=runtime.device)
    else:
        codec_config = CodecConfig(mode=args.codec_mode, seed=config.seed)
        latent_channels = LOSSLESS_LATENT_CHANNELS if args.codec_mode == "lossless" else DEFAULT_LATENT_CHANNELS
        model_config = ModelConfig(latent_channels=latent_channels, seed=config.seed)
        schedule = build_config(ScheduleConfig, {"steps": args.schedule_steps})
        checkpoint = new_checkpoint(model_config, codec_config, schedule)
        fit_codec(checkpoint.codec, [frames for frames, _ in samples], n_steps=args.codec_steps, seed=config.seed)

    log = train(checkpoint, samples, config, log_path=args.log)
    save_checkpoint(checkpoint, args.checkpoint)
    logger.info(f"Stage {config.stage} finished: loss {log['loss'].iloc[0]:.4f} -> {log['loss'].iloc[-1]:.4f}")
    return EXIT_CODES["success"]


def cmd_plan(args: argparse.Namespace) -> int:
    try:
        plan = build_plan(args.n_frames, args.clip_len, args.steps, guidance=args.guidance_enabled)
    except PlanError as e:
        raise ConfigError(e.message) from e
    print(json.dumps(plan.to_dict()))
    return EXIT_CODES["success"]


def cmd_eval(args: argparse.Namespace) -> int:
    output = load_frames(_require_path(args.output, "output directory"))
    truth = load_frames(_require_path(args.ground_truth, "ground truth"))
    masks = load_masks(_require_path(args.masks, "masks"), output.num_frames)
    report = compute_metrics(output.cropped().data, truth.cropped().data, _cropped_masks(masks, output))
    if args.report:
        report.save(args.report)
    print(json.dumps(report.to_dict()))
    return EXIT_CODES["success"]


def cmd_make_dataset(args: argparse.Namespace) -> int:
    values = _collect(args, list(MASK_FLAGS) + ["shape", "seed"])
    mask_config = apply_seed_override(build_config(MaskGenConfig, values))
    if min(args.height, args.width, args.frames, args.n_videos) < 1:
        raise ConfigError("height, width, frames and n-videos must be >= 1")
    make_dataset(
        args.out,
        n_videos=args.n_videos,
        h=args.height,
        w=args.width,
        f=args.frames,
        seed=mask_config.seed,
        mask_config=mask_config,
    )
    return EXIT_CODES["success"]


COMMANDS = {
    "inpaint": cmd_inpaint,
    "train": cmd_train,
    "plan": cmd_plan,
    "eval": cmd_eval,
    "make-dataset": cmd_make_dataset,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CODES["success"] if e.code == 0 else EXIT_CODES["usage"]

    try:
        initialize_logging(args.log_level)
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CODES["usage"]
    except DiffuEraserError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CODES["runtime"]
