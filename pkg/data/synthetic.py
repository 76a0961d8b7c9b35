"""
Synthetic video corpus: smooth colour gradients with textured sprites

Pixel values are multiples of 1/255 so a PNG round trip is lossless.
"""
import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from app.config import MaskGenConfig
from data.video_io import MaskSequence, VideoFrames, save_frames, save_masks
from training.masks import generate_mask_sequence

logger = logging.getLogger(__name__)


def _quantize(data: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(data, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def render_scene(h: int, w: int, f: int, seed: int = 0, static: bool = False, sprite_speed: float = 1.0) -> VideoFrames:
    """
    Background gradient plus one sinusoidally textured square sprite.
    The gradient phase drifts and the sprite moves unless `static`.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    c0, c1, c2 = rng.uniform(0.1, 0.9, size=(3, 3))
    drift = 0.0 if static else rng.uniform(-0.02, 0.02)

    size = max(2, min(h, w) // 3)
    sy, sx = rng.uniform(0, h - size), rng.uniform(0, w - size)
    vy, vx = (0.0, 0.0) if static else sprite_speed * rng.normal(0, 1, size=2)
    freq = rng.uniform(1.0, 2.5)
    color = rng.uniform(0.2, 1.0, size=3)

    frames = np.empty((f, 3, h, w), dtype=np.float64)
    for t in range(f):
        phase = yy + xx + drift * t
        bg = (c0[:, None, None] * (1 - phase) + c1[:, None, None] * phase) * 0.8
        bg += 0.2 * c2[:, None, None] * np.sin(np.pi * phase)
        y0 = int(round(np.clip(sy + vy * t, 0, h - size)))
        x0 = int(round(np.clip(sx + vx * t, 0, w - size)))
        gy, gx = np.mgrid[0:size, 0:size] / size
        texture = 0.5 + 0.5 * np.sin(2 * np.pi * freq * gx) * np.cos(2 * np.pi * freq * gy)
        bg[:, y0:y0 + size, x0:x0 + size] = color[:, None, None] * texture
        frames[t] = bg
    return VideoFrames(data=_quantize(frames), fps=25.0)


def sliding_box_masks(h: int, w: int, f: int, box: Optional[Tuple[int, int]] = None) -> MaskSequence:
    """
    A box sweeping horizontally back and forth, one pixel per frame.
    Every covered pixel is uncovered in some frame once f exceeds the box width.
    """
    bh, bw = box or (max(1, h // 4), max(1, w // 4))
    y0 = (h - bh) // 2
    travel = max(1, w - bw)
    data = np.zeros((f, 1, h, w), dtype=np.float32)
    for t in range(f):
        phase = t % (2 * travel)
        x0 = phase if phase <= travel else 2 * travel - phase
        data[t, 0, y0:y0 + bh, x0:x0 + bw] = 1.0
    return MaskSequence(data)


def static_benchmark(h: int = 32, w: int = 32, f: int = 30, seed: int = 0) -> Tuple[VideoFrames, MaskSequence]:
    """Static scene with a moving hole where every masked pixel is visible in some frame"""
    return render_scene(h, w, f, seed=seed, static=True), sliding_box_masks(h, w, f)


def blank_masked(frames: VideoFrames, masks: MaskSequence, value: float = 0.0) -> VideoFrames:
    """The input a user would supply: ground truth with the masked content removed"""
    data = frames.data.copy()
    data[np.broadcast_to(masks.data > 0, data.shape)] = value
    return VideoFrames(data=data, fps=frames.fps, crop=frames.crop)


def make_dataset(
    out_dir,
    n_videos: int = 4,
    h: int = 32,
    w: int = 32,
    f: int = 22,
    seed: int = 0,
    mask_config: Optional[MaskGenConfig] = None,
) -> List[Path]:
    """Write <out>/video_NNN/{frames,masks} directories; returns the video directories"""
    out_dir = Path(out_dir)
    mask_config = mask_config or MaskGenConfig()
    written = []
    for i in range(n_videos):
        video_dir = out_dir / f"video_{i:03d}"
        frames = render_scene(h, w, f, seed=seed + i)
        cfg = mask_config.model_copy(update={"seed": mask_config.seed + i})
        masks = generate_mask_sequence(h, w, f, cfg)
        save_frames(frames, video_dir / "frames")
        save_masks(masks, video_dir / "masks")
        written.append(video_dir)
    logger.info(f"Wrote {n_videos} synthetic videos to {out_dir}")
    return written
