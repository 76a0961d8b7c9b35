"""
Attention blocks for the denoiser: spatial self-attention, cross-attention to
the learned null context, and temporal attention across frames (motion module).
All blocks take frame-major feature maps [f, c, *spatial] and are residual.
"""
import math

import torch
import torch.nn as nn
from einops import rearrange

from app.exceptions import ModelError


def sinusoidal_embedding(positions: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """[n] positions -> [n, dim] sin/cos features (dim must be even)"""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64, device=positions.device) / half
    )
    args = positions.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def multi_head_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    """q [b, n, c], k/v [b, m, c] -> [b, n, c]"""
    q, k, v = (rearrange(t, "b n (h d) -> b h n d", h=heads) for t in (q, k, v))
    scale = q.shape[-1] ** -0.5
    weights = torch.softmax(torch.einsum("bhnd,bhmd->bhnm", q, k) * scale, dim=-1)
    out = torch.einsum("bhnm,bhmd->bhnd", weights, v)
    return rearrange(out, "b h n d -> b n (h d)")


class SpatialSelfAttention(nn.Module):
    """Self-attention over the h*w tokens of each frame"""

    def __init__(self, channels: int, heads: int, norm_groups: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(norm_groups, channels, eps=1e-6)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f, c, h, w = x.shape
        tokens = rearrange(self.norm(x), "f c h w -> f (h w) c")
        out = multi_head_attention(self.to_q(tokens), self.to_k(tokens), self.to_v(tokens), self.heads)
        return x + rearrange(self.to_out(out), "f (h w) c -> f c h w", h=h, w=w)


class CrossAttention(nn.Module):
    """Each frame's tokens attend to a shared context sequence [L, context_dim]"""

    def __init__(self, channels: int, context_dim: int, heads: int, norm_groups: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(norm_groups, channels, eps=1e-6)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(context_dim, channels)
        self.to_v = nn.Linear(context_dim, channels)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        f, c, h, w = x.shape
        tokens = rearrange(self.norm(x), "f c h w -> f (h w) c")
        ctx = context.expand(f, *context.shape[-2:]) if context.ndim == 2 else context
        out = multi_head_attention(self.to_q(tokens), self.to_k(ctx), self.to_v(ctx), self.heads)
        return x + rearrange(self.to_out(out), "f (h w) c -> f c h w", h=h, w=w)


class TemporalAttention(nn.Module):
    """
    Motion module: attention across the frame axis, independently at every
    spatial location. Frame-position encodings enter queries and keys only,
    so a single frame reduces to x + to_out(to_v(x)). The output projection
    starts at zero, making a fresh module an identity map.
    """

    def __init__(
        self,
        channels: int,
        heads: int,
        position_encoding: bool = True,
        max_frames: int = 256,
        zero_init: bool = True,
    ):
        super().__init__()
        self.heads = heads
        self.channels = channels
        self.position_encoding = position_encoding
        self.max_frames = max_frames
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.to_out = nn.Linear(channels, channels)
        if zero_init:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: [f, c, *spatial] -> same shape"""
        f, c = x.shape[:2]
        spatial = x.shape[2:]
        tokens = rearrange(x.reshape(f, c, -1), "f c s -> s f c")
        qk_in = tokens
        if self.position_encoding:
            if f > self.max_frames:
                raise ModelError(f"{f} frames exceed max_frames={self.max_frames}")
            positions = torch.arange(f, device=x.device)
            pe = sinusoidal_embedding(positions, c).to(x.dtype)
            qk_in = tokens + pe[None]
        out = multi_head_attention(self.to_q(qk_in), self.to_k(qk_in), self.to_v(tokens), self.heads)
        out = rearrange(self.to_out(out), "s f c -> f c s").reshape(f, c, *spatial)
        return x + out


class ZeroProjection(nn.Module):
    """1x1 convolution initialized to exactly zero (branch-to-UNet fusion)"""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)
