"""
Synthetic mask sequences for training and benchmarks
A shape with area close to `rate` is drawn on frame 0 and then drifts along
`direction` with per-frame jitter, bouncing off the frame borders.
"""
import logging
from typing import Callable, Tuple

import numpy as np

from app.config import MaskGenConfig
from app.exceptions import ConfigError
from data.video_io import MaskSequence

logger = logging.getLogger(__name__)

Footprint = Callable[[np.ndarray, np.ndarray], np.ndarray]
BBox = Tuple[float, float, float, float]  # y0, y1, x0, x1

MAX_STROKE_STAMPS = 2000


def _rectangle(rng: np.random.Generator, h: int, w: int, area: float) -> Tuple[Footprint, BBox]:
    aspect = float(np.exp(rng.uniform(-0.7, 0.7)))
    rh = float(np.clip(np.sqrt(area * aspect), 1.0, h))
    rw = float(np.clip(area / rh, 1.0, w))
    rh = float(np.clip(area / rw, 1.0, h))
    y0 = rng.uniform(0.0, h - rh)
    x0 = rng.uniform(0.0, w - rw)

    def footprint(yy, xx):
        return (yy >= y0) & (yy < y0 + rh) & (xx >= x0) & (xx < x0 + rw)

    return footprint, (y0, y0 + rh, x0, x0 + rw)


def _ellipse(rng: np.random.Generator, h: int, w: int, area: float) -> Tuple[Footprint, BBox]:
    aspect = float(np.exp(rng.uniform(-0.7, 0.7)))
    ry = float(np.clip(np.sqrt(area * aspect / np.pi), 0.5, h / 2))
    rx = float(np.clip(area / (np.pi * ry), 0.5, w / 2))
    ry = float(np.clip(area / (np.pi * rx), 0.5, h / 2))
    cy = rng.uniform(ry, h - ry)
    cx = rng.uniform(rx, w - rx)

    def footprint(yy, xx):
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0

    return footprint, (cy - ry, cy + ry, cx - rx, cx + rx)


def _stroke(rng: np.random.Generator, h: int, w: int, area: float) -> Tuple[Footprint, BBox]:
    """Brush stroke: discs stamped along a random walk until the area is reached"""
    radius = max(1.5, 0.08 * min(h, w))
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    canvas = np.zeros((h, w), dtype=bool)
    y, x = rng.uniform(0, h), rng.uniform(0, w)
    angle = rng.uniform(0, 2 * np.pi)
    centers = []
    for _ in range(MAX_STROKE_STAMPS):
        centers.append((y, x))
        canvas |= (yy - y) ** 2 + (xx - x) ** 2 <= radius ** 2
        if canvas.sum() >= area:
            break
        angle += rng.normal(0.0, 0.6)
        y = float(np.clip(y + radius * np.sin(angle), 0, h))
        x = float(np.clip(x + radius * np.cos(angle), 0, w))
    pts = np.array(centers)

    def footprint(gy, gx):
        hit = np.zeros(np.broadcast(gy, gx).shape, dtype=bool)
        for cy, cx in pts:
            hit |= (gy - cy) ** 2 + (gx - cx) ** 2 <= radius ** 2
        return hit

    bbox = (pts[:, 0].min() - radius, pts[:, 0].max() + radius, pts[:, 1].min() - radius, pts[:, 1].max() + radius)
    return footprint, bbox


SHAPES = {"rectangle": _rectangle, "ellipse": _ellipse, "stroke": _stroke}


def bounce(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Fold an unbounded path into [lo, hi] by reflection at both ends"""
    if hi <= lo:
        return np.full_like(values, lo)
    span = hi - lo
    phase = np.mod(values - lo, 2 * span)
    return lo + np.where(phase <= span, phase, 2 * span - phase)


def drift_offsets(f: int, bbox: BBox, h: int, w: int, cfg: MaskGenConfig, rng: np.random.Generator) -> np.ndarray:
    """[f, 2] (dy, dx) per frame; frame 0 has zero offset"""
    theta = np.deg2rad(cfg.direction)
    velocity = cfg.speed * np.array([-np.sin(theta), np.cos(theta)])
    steps = np.tile(velocity, (f, 1)) + rng.normal(0.0, cfg.jitter, size=(f, 2))
    steps[0] = 0.0
    path = np.cumsum(steps, axis=0)
    y0, y1, x0, x1 = bbox
    dy = bounce(path[:, 0], min(0.0, -y0), max(0.0, h - y1))
    dx = bounce(path[:, 1], min(0.0, -x0), max(0.0, w - x1))
    return np.stack([dy, dx], axis=1)


def generate_mask_sequence(h: int, w: int, f: int, cfg: MaskGenConfig = None) -> MaskSequence:
    """
    Generate a moving binary mask sequence

    Args:
        h, w: Frame size in pixels
        f: Number of frames
        cfg: Target area fraction, drift direction (degrees, 0 = rightwards,
            90 = upwards), shape and seed

    Returns:
        MaskSequence [f, 1, h, w]; identical for identical arguments
    """
    cfg = cfg or MaskGenConfig()
    if not 0.0 <= cfg.rate <= 1.0:
        raise ConfigError(f"rate must lie in [0, 1], got {cfg.rate}")
    if min(h, w, f) < 1:
        raise ConfigError(f"invalid mask sequence size {f}x{h}x{w}")

    data = np.zeros((f, 1, h, w), dtype=np.float32)
    if cfg.rate == 0.0:
        return MaskSequence(data)

    rng = np.random.default_rng(cfg.seed)
    footprint, bbox = SHAPES[cfg.shape](rng, h, w, cfg.rate * h * w)
    offsets = drift_offsets(f, bbox, h, w, cfg, rng)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    for i, (dy, dx) in enumerate(offsets):
        data[i, 0] = footprint(yy - dy, xx - dx)
    logger.debug(f"Generated {cfg.shape} mask sequence, frame-0 coverage {data[0].mean():.3f}")
    return MaskSequence(data)
