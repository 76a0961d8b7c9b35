"""
Dual-branch denoiser for DiffuEraser Desk

Main denoising UNet with spatial self-attention, cross-attention and temporal
attention at every level, plus a BrushNet-style conditioning branch whose
per-level features are added to the UNet through zero-initialized 1x1
projections.

Parameter groups (disjoint, individually freezable):
    spatial_params       main UNet weights except the motion modules
    motion_params        temporal attention weights
    branch_params        conditioning branch weights
    fusion_params        zero projections, one per UNet level
    null_text_embedding  learned context sequence for cross-attention
"""
import logging
from typing import Callable, Dict, List, Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.config import ModelConfig
from app.exceptions import ModelError
from models.attention import CrossAttention, SpatialSelfAttention, TemporalAttention, ZeroProjection, sinusoidal_embedding
from models.codec import CONDITION_CHANNELS, DEFAULT_LATENT_CHANNELS, assemble_condition

logger = logging.getLogger(__name__)

Timestep = Union[int, float, torch.Tensor]
BranchFeatures = List[torch.Tensor]

PARAMETER_GROUPS = ("spatial_params", "motion_params", "branch_params", "fusion_params", "null_text_embedding")


class TimestepEmbedding(nn.Module):
    def __init__(self, base_dim: int, emb_dim: int):
        super().__init__()
        self.base_dim = base_dim
        self.mlp = nn.Sequential(nn.Linear(base_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        param = self.mlp[0].weight
        return self.mlp(sinusoidal_embedding(t, self.base_dim).to(param.dtype))


class ResBlock(nn.Module):
    """Conv residual block with multiplicative timestep modulation h * (1 + s(t))"""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, norm_groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(norm_groups, in_ch, eps=1e-6)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_scale = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(norm_groups, out_ch, eps=1e-6)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h * (1.0 + self.time_scale(emb)[:, :, None, None])
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class LevelBlock(nn.Module):
    """ResBlock -> self-attention -> cross-attention [-> temporal attention]"""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, config: ModelConfig, temporal: bool):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, emb_dim, config.norm_groups)
        self.self_attn = SpatialSelfAttention(out_ch, config.num_heads, config.norm_groups)
        self.cross_attn = CrossAttention(out_ch, config.context_dim, config.num_heads, config.norm_groups)
        self.temporal = (
            TemporalAttention(
                out_ch,
                config.num_heads,
                position_encoding=config.temporal_position_encoding,
                max_frames=config.max_frames,
            )
            if temporal
            else None
        )

    def forward(self, x: torch.Tensor, emb: torch.Tensor, context: torch.Tensor, motion: bool) -> torch.Tensor:
        h = self.res(x, emb)
        h = self.self_attn(h)
        h = self.cross_attn(h, context)
        if self.temporal is not None and motion:
            h = self.temporal(h)
        return h


class MainUNet(nn.Module):
    def __init__(self, config: ModelConfig, emb_dim: int):
        super().__init__()
        widths = config.level_widths
        self.widths = widths
        self.conv_in = nn.Conv2d(config.latent_channels, widths[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.down.append(LevelBlock(prev, w, emb_dim, config, temporal=True))
            if i < len(widths) - 1:
                self.downsample.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            prev = w

        self.mid = LevelBlock(widths[-1], widths[-1], emb_dim, config, temporal=True)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        prev = widths[-1]
        for i in reversed(range(len(widths))):
            w = widths[i]
            self.up.append(LevelBlock(prev + w, w, emb_dim, config, temporal=True))
            if i > 0:
                self.upsample.append(nn.Conv2d(w, widths[i - 1], 3, padding=1))
                prev = widths[i - 1]

        self.norm_out = nn.GroupNorm(config.norm_groups, widths[0], eps=1e-6)
        self.conv_out = nn.Conv2d(widths[0], config.latent_channels, 3, padding=1)

    def forward(
        self,
        x: torch.Tensor,
        emb: torch.Tensor,
        context: torch.Tensor,
        fused: Optional[List[Optional[torch.Tensor]]],
        motion: bool,
    ) -> torch.Tensor:
        h = self.conv_in(x)
        skips = []
        for i, level in enumerate(self.down):
            h = level(h, emb, context, motion)
            if fused is not None:
                if fused[i].shape != h.shape:
                    raise ModelError(f"branch level {i} shape {tuple(fused[i].shape)} != UNet {tuple(h.shape)}")
                h = h + fused[i]
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)

        h = self.mid(h, emb, context, motion)

        for j, level in enumerate(self.up):
            h = level(torch.cat([h, skips.pop()], dim=1), emb, context, motion)
            if j < len(self.upsample):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[j](h)

        return self.conv_out(F.silu(self.norm_out(h)))

    def level_shapes(self, f: int, h: int, w: int) -> List[tuple]:
        return [(f, width, h >> i, w >> i) for i, width in enumerate(self.widths)]


class BrushNetBranch(nn.Module):
    """Per-frame spatial branch over the 9-channel conditioning latent (no motion module)"""

    def __init__(self, config: ModelConfig, emb_dim: int):
        super().__init__()
        widths = config.level_widths
        self.conv_in = nn.Conv2d(CONDITION_CHANNELS, widths[0], 3, padding=1)
        self.levels = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.levels.append(LevelBlock(prev, w, emb_dim, config, temporal=False))
            if i < len(widths) - 1:
                self.downsample.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            prev = w

    def forward(self, cond: torch.Tensor, emb: torch.Tensor, context: torch.Tensor) -> BranchFeatures:
        h = self.conv_in(cond)
        features = []
        for i, level in enumerate(self.levels):
            h = level(h, emb, context, motion=False)
            features.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        return features


class DiffuEraserModel(nn.Module):
    """Main UNet + conditioning branch + fusion projections + null context"""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        widths = self.config.level_widths
        emb_dim = 4 * widths[0]

        # seeded init without disturbing the caller's global RNG
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.config.seed)
            self.time_embed = TimestepEmbedding(widths[0], emb_dim)
            self.unet = MainUNet(self.config, emb_dim)
            self.branch_time_embed = TimestepEmbedding(widths[0], emb_dim)
            self.branch = (
                BrushNetBranch(self.config, emb_dim)
                if self.config.latent_channels == DEFAULT_LATENT_CHANNELS
                else None
            )
            self.fusion = nn.ModuleList([ZeroProjection(w) for w in widths])
            self.null_text_embedding = nn.Parameter(
                torch.randn(self.config.null_tokens, self.config.context_dim) * 0.02
            )
        self.motion_enabled = True

    @property
    def has_branch(self) -> bool:
        return self.branch is not None

    @property
    def dtype(self) -> torch.dtype:
        return self.null_text_embedding.dtype

    # ------------------------------------------------------------------
    # parameter groups
    # ------------------------------------------------------------------

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        groups: Dict[str, List[nn.Parameter]] = {name: [] for name in PARAMETER_GROUPS}
        for name, param in self.named_parameters():
            if name == "null_text_embedding":
                groups["null_text_embedding"].append(param)
            elif name.startswith("fusion."):
                groups["fusion_params"].append(param)
            elif name.startswith(("branch.", "branch_time_embed.")):
                groups["branch_params"].append(param)
            elif ".temporal." in name:
                groups["motion_params"].append(param)
            else:
                groups["spatial_params"].append(param)
        return groups

    def set_trainable(self, group_names) -> List[nn.Parameter]:
        """Freeze everything except the named groups; returns the trainable parameters"""
        unknown = set(group_names) - set(PARAMETER_GROUPS)
        if unknown:
            raise ModelError(f"unknown parameter groups: {sorted(unknown)}")
        trainable = []
        for name, params in self.parameter_groups().items():
            for p in params:
                p.requires_grad_(name in group_names)
                if name in group_names:
                    trainable.append(p)
        return trainable

    # ------------------------------------------------------------------
    # forward passes
    # ------------------------------------------------------------------

    def _timesteps(self, t: Timestep, f: int, device) -> torch.Tensor:
        t = torch.as_tensor(t, device=device).reshape(-1)
        if t.numel() not in (1, f):
            raise ModelError(f"timestep tensor has {t.numel()} entries for {f} frames")
        return t.expand(f) if t.numel() == 1 else t

    def brushnet_forward(self, cond: torch.Tensor, t: Timestep) -> BranchFeatures:
        """[f, 9, h, w] conditioning latent -> one feature map per UNet level"""
        if self.branch is None:
            raise ModelError("this model has no conditioning branch (lossless latent width)")
        if cond.ndim != 4 or cond.shape[1] != CONDITION_CHANNELS:
            raise ModelError(f"conditioning latent must have {CONDITION_CHANNELS} channels, got {tuple(cond.shape)}")
        emb = self.branch_time_embed(self._timesteps(t, cond.shape[0], cond.device))
        return self.branch(cond, emb, self.null_text_embedding)

    def denoiser_forward(
        self,
        noisy: torch.Tensor,
        t: Timestep,
        branch: Optional[BranchFeatures] = None,
    ) -> torch.Tensor:
        """Epsilon prediction with the same shape as `noisy`"""
        if noisy.ndim != 4 or noisy.shape[1] != self.config.latent_channels:
            raise ModelError(
                f"noisy latent must be [f, {self.config.latent_channels}, h, w], got {tuple(noisy.shape)}"
            )
        n_levels = len(self.config.level_widths)
        if noisy.shape[-2] % (1 << (n_levels - 1)) or noisy.shape[-1] % (1 << (n_levels - 1)):
            raise ModelError(f"latent size {tuple(noisy.shape[-2:])} not divisible by {1 << (n_levels - 1)}")
        fused = None
        if branch is not None:
            if len(branch) != len(self.fusion):
                raise ModelError(f"expected {len(self.fusion)} branch levels, got {len(branch)}")
            fused = [proj(feat) for proj, feat in zip(self.fusion, branch)]
        emb = self.time_embed(self._timesteps(t, noisy.shape[0], noisy.device))
        return self.unet(noisy, emb, self.null_text_embedding, fused, self.motion_enabled)

    def forward(self, noisy: torch.Tensor, t: Timestep, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
        branch = self.brushnet_forward(cond, t) if cond is not None else None
        return self.denoiser_forward(noisy, t, branch)

    def epsilon_fn(
        self,
        masked_latent: Optional[torch.Tensor] = None,
        mask_small: Optional[torch.Tensor] = None,
    ) -> Callable[[torch.Tensor, Timestep], torch.Tensor]:
        """
        Inference-time epsilon predictor x, t -> eps. With a masked-image latent
        and latent mask the branch input is re-assembled from the current x on
        every call; without them (or for lossless-width models) the branch is skipped.
        """
        use_branch = self.has_branch and masked_latent is not None and mask_small is not None

        def predict(x: torch.Tensor, t: Timestep) -> torch.Tensor:
            with torch.no_grad():
                if not use_branch:
                    return self.denoiser_forward(x, t)
                return self(x, t, assemble_condition(masked_latent, mask_small, x))

        return predict
