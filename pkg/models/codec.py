"""
Latent codec for DiffuEraser Desk
Pixel frames <-> latents at 4x spatial downsampling, and the 9-channel
conditioning latent fed to the branch network.

Latents are plain tensors:
    LatentVideo         [f, c_lat, h/4, w/4]  (c_lat = 4 default, 48 lossless)
    ConditioningLatent  [f, 9, h/4, w/4]      masked-image latent | mask | noisy latent
"""
import logging
from typing import Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.config import CodecConfig
from app.exceptions import CodecError
from data.video_io import MaskSequence, VideoFrames

logger = logging.getLogger(__name__)

DOWNSAMPLE = 4
DEFAULT_LATENT_CHANNELS = 4
LOSSLESS_LATENT_CHANNELS = 3 * DOWNSAMPLE * DOWNSAMPLE
CONDITION_CHANNELS = 2 * DEFAULT_LATENT_CHANNELS + 1

ArrayLike = Union[torch.Tensor, np.ndarray, VideoFrames, MaskSequence]


def _check_divisible(h: int, w: int):
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise CodecError(f"frame size {h}x{w} is not divisible by {DOWNSAMPLE}")


class _Residual(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class LatentCodec(nn.Module):
    """
    Two modes:
      default  - small convolutional autoencoder to 4 channels, fitted by
                 training.trainer.fit_codec; latents scaled to ~unit variance
      lossless - space-to-depth(4) followed by a fixed signed channel
                 permutation; exactly invertible
    """

    def __init__(self, config: CodecConfig = None):
        super().__init__()
        self.config = config or CodecConfig()
        self.mode = self.config.mode
        self.register_buffer("scaling_factor", torch.tensor(1.0))

        if self.mode == "lossless":
            gen = torch.Generator().manual_seed(self.config.seed)
            perm = torch.randperm(LOSSLESS_LATENT_CHANNELS, generator=gen)
            signs = torch.randint(0, 2, (LOSSLESS_LATENT_CHANNELS,), generator=gen) * 2 - 1
            self.register_buffer("perm", perm)
            self.register_buffer("signs", signs.to(torch.float32))
            self.encoder = None
            self.decoder = None
        else:
            hid = self.config.hidden_channels
            self.encoder = nn.Sequential(
                nn.Conv2d(3, hid, 3, padding=1),
                nn.SiLU(),
                nn.Conv2d(hid, hid, 4, stride=2, padding=1),
                _Residual(hid),
                nn.SiLU(),
                nn.Conv2d(hid, hid, 4, stride=2, padding=1),
                _Residual(hid),
                nn.SiLU(),
                nn.Conv2d(hid, DEFAULT_LATENT_CHANNELS, 1),
            )
            self.decoder = nn.Sequential(
                nn.Conv2d(DEFAULT_LATENT_CHANNELS, hid, 3, padding=1),
                _Residual(hid),
                nn.SiLU(),
                nn.ConvTranspose2d(hid, hid, 4, stride=2, padding=1),
                _Residual(hid),
                nn.SiLU(),
                nn.ConvTranspose2d(hid, hid, 4, stride=2, padding=1),
                nn.SiLU(),
                nn.Conv2d(hid, 3, 3, padding=1),
            )

    @property
    def latent_channels(self) -> int:
        return LOSSLESS_LATENT_CHANNELS if self.mode == "lossless" else DEFAULT_LATENT_CHANNELS

    @property
    def dtype(self) -> torch.dtype:
        return self.scaling_factor.dtype

    @property
    def device(self) -> torch.device:
        return self.scaling_factor.device

    def as_tensor(self, frames: ArrayLike) -> torch.Tensor:
        if isinstance(frames, (VideoFrames, MaskSequence)):
            frames = frames.data
        if isinstance(frames, np.ndarray):
            frames = torch.from_numpy(np.ascontiguousarray(frames))
        return frames.to(device=self.device, dtype=self.dtype)

    def encode_raw(self, x: torch.Tensor) -> torch.Tensor:
        """Unscaled encoder output; gradients flow (used when fitting the codec)"""
        if self.mode == "lossless":
            z = F.pixel_unshuffle(x, DOWNSAMPLE)
            return z[:, self.perm] * self.signs.to(z.dtype)[None, :, None, None]
        return self.encoder(x)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        if self.mode == "lossless":
            unmixed = torch.empty_like(z)
            unmixed[:, self.perm] = z * self.signs.to(z.dtype)[None, :, None, None]
            return F.pixel_shuffle(unmixed, DOWNSAMPLE)
        return self.decoder(z)

    def encode(self, frames: ArrayLike) -> torch.Tensor:
        """[f, 3, h, w] pixels -> [f, c_lat, h/4, w/4] latents"""
        x = self.as_tensor(frames)
        if x.ndim != 4 or x.shape[1] != 3:
            raise CodecError(f"expected [f, 3, h, w] frames, got {tuple(x.shape)}")
        _check_divisible(*x.shape[-2:])
        with torch.no_grad():
            return self.encode_raw(x) * self.scaling_factor

    def decode(self, latent: torch.Tensor) -> np.ndarray:
        """[f, c_lat, h/4, w/4] latents -> [f, 3, h, w] pixels clipped to [0, 1]"""
        if latent.ndim != 4 or latent.shape[1] != self.latent_channels:
            raise CodecError(
                f"latent has {latent.shape[1] if latent.ndim == 4 else '?'} channels, "
                f"codec mode {self.mode!r} expects {self.latent_channels}"
            )
        with torch.no_grad():
            x = self.decode_raw(latent.to(device=self.device, dtype=self.dtype) / self.scaling_factor)
        return x.clamp(0.0, 1.0).cpu().numpy()


def downsample_mask(masks: ArrayLike) -> torch.Tensor:
    """4x4 max-pool: a latent pixel is masked if any pixel it covers is masked"""
    if isinstance(masks, MaskSequence):
        masks = masks.data
    if isinstance(masks, np.ndarray):
        masks = torch.from_numpy(np.ascontiguousarray(masks))
    if masks.ndim != 4 or masks.shape[1] != 1:
        raise CodecError(f"expected [f, 1, h, w] masks, got {tuple(masks.shape)}")
    _check_divisible(*masks.shape[-2:])
    return F.max_pool2d(masks.to(torch.float32), kernel_size=DOWNSAMPLE)


def masked_image_latent(codec: LatentCodec, frames: ArrayLike, masks: ArrayLike) -> torch.Tensor:
    """encode(frames * (1 - mask))"""
    x = codec.as_tensor(frames)
    m = codec.as_tensor(masks)
    return codec.encode(x * (1.0 - m))


def assemble_condition(
    masked_latent: torch.Tensor,
    mask_small: torch.Tensor,
    noisy: torch.Tensor,
) -> torch.Tensor:
    """Concatenate masked-image latent (4) | mask (1) | noisy latent (4) -> 9 channels"""
    if masked_latent.shape[1] != DEFAULT_LATENT_CHANNELS or noisy.shape[1] != DEFAULT_LATENT_CHANNELS:
        raise CodecError(
            f"conditioning requires {DEFAULT_LATENT_CHANNELS}-channel latents "
            f"(lossless mode is not supported), got {masked_latent.shape[1]} and {noisy.shape[1]}"
        )
    if mask_small.shape[1] != 1:
        raise CodecError(f"mask must have 1 channel, got {mask_small.shape[1]}")
    f, _, h, w = noisy.shape
    for name, t in (("masked_latent", masked_latent), ("mask", mask_small)):
        if t.shape[0] != f or tuple(t.shape[-2:]) != (h, w):
            raise CodecError(f"{name} shape {tuple(t.shape)} does not match noisy latent {tuple(noisy.shape)}")
    return torch.cat([masked_latent.to(noisy.dtype), mask_small.to(noisy.dtype), noisy], dim=1)
