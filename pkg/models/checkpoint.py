"""
Checkpoint archive for DiffuEraser Desk

A single safetensors file. Tensors are stored under two prefixes:
    model.<name>   DiffuEraserModel state dict, e.g. model.unet.down.0.temporal.to_q.weight,
                   model.fusion.0.conv.weight, model.null_text_embedding
    codec.<name>   LatentCodec state dict, e.g. codec.encoder.0.weight, codec.scaling_factor,
                   codec.perm / codec.signs in lossless mode
The metadata entry "header" holds a JSON document:
    {"format": "diffueraser-desk/1", "model": {...ModelConfig},
     "codec": {...CodecConfig}, "schedule": {"T", "beta_start", "beta_end", "steps"},
     "training": {...free-form history}}
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file

from app.config import CodecConfig, ModelConfig, ScheduleConfig
from app.exceptions import CheckpointError
from models.codec import LatentCodec
from models.denoiser import DiffuEraserModel

logger = logging.getLogger(__name__)

FORMAT_TAG = "diffueraser-desk/1"


@dataclass
class Checkpoint:
    model: DiffuEraserModel
    codec: LatentCodec
    schedule: ScheduleConfig
    training: Dict[str, Any] = field(default_factory=dict)

    def header(self) -> Dict[str, Any]:
        return {
            "format": FORMAT_TAG,
            "model": self.model.config.model_dump(mode="json"),
            "codec": self.codec.config.model_dump(mode="json"),
            "schedule": self.schedule.model_dump(mode="json"),
            "training": self.training,
        }


def new_checkpoint(
    model_config: Optional[ModelConfig] = None,
    codec_config: Optional[CodecConfig] = None,
    schedule: Optional[ScheduleConfig] = None,
) -> Checkpoint:
    codec_config = codec_config or CodecConfig()
    codec = LatentCodec(codec_config)
    model_config = model_config or ModelConfig(latent_channels=codec.latent_channels)
    if model_config.latent_channels != codec.latent_channels:
        raise CheckpointError(
            f"model latent_channels={model_config.latent_channels} but codec mode "
            f"{codec_config.mode!r} produces {codec.latent_channels}"
        )
    return Checkpoint(DiffuEraserModel(model_config), codec, schedule or ScheduleConfig())


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"model.{k}": v.detach().contiguous().cpu() for k, v in checkpoint.model.state_dict().items()}
    tensors.update({f"codec.{k}": v.detach().contiguous().cpu() for k, v in checkpoint.codec.state_dict().items()})
    save_file(tensors, str(path), metadata={"header": json.dumps(checkpoint.header())})
    logger.info(f"Saved checkpoint with {len(tensors)} tensors to {path}")
    return path


def read_header(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as fh:
            meta = fh.metadata() or {}
        return json.loads(meta["header"])
    except (SafetensorError, OSError, ValueError, KeyError) as e:
        raise CheckpointError(f"malformed checkpoint header in {path}: {e}") from e


def load_checkpoint(path, device: str = "cpu") -> Checkpoint:
    header = read_header(path)
    if header.get("format") != FORMAT_TAG:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format')!r}")
    try:
        tensors = load_file(str(path), device=device)
    except (SafetensorError, OSError) as e:
        raise CheckpointError(f"could not read checkpoint tensors: {e}") from e

    checkpoint = new_checkpoint(
        ModelConfig(**header["model"]),
        CodecConfig(**header["codec"]),
        ScheduleConfig(**header["schedule"]),
    )
    checkpoint.training = header.get("training", {})
    for prefix, module in (("model.", checkpoint.model), ("codec.", checkpoint.codec)):
        state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        try:
            module.load_state_dict(state, strict=True)
        except RuntimeError as e:
            raise CheckpointError(f"checkpoint tensors do not match architecture: {e}") from e
    checkpoint.model.to(device).eval()
    checkpoint.codec.to(device).eval()
    logger.info(f"Loaded checkpoint from {path}")
    return checkpoint
