"""
Frame and mask directory I/O plus output compositing for DiffuEraser Desk
Videos live on disk as directories of frame_%05d.png files with a meta.json sidecar
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from app.config import FRAME_PATTERN, IMAGE_SUFFIXES, META_FILENAME, RuntimeConfig
from app.exceptions import VideoIOError

logger = logging.getLogger(__name__)

MASK_THRESHOLD = 0.5
MIN_SIDE = 16
SIDE_MULTIPLE = 8


@dataclass(frozen=True)
class VideoFrames:
    """Frame stack [f, 3, h, w] in [0, 1]; `crop` is the pre-padding (h, w)"""
    data: np.ndarray
    fps: Optional[float] = None
    crop: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[1] != 3:
            raise VideoIOError(f"frames must be [f, 3, h, w], got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise VideoIOError("no frames")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def size(self) -> Tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]

    def cropped(self) -> "VideoFrames":
        if self.crop is None:
            return self
        h, w = self.crop
        return replace(self, data=self.data[:, :, :h, :w], crop=None)

    def select(self, indices) -> "VideoFrames":
        return replace(self, data=self.data[list(indices)])


@dataclass(frozen=True)
class MaskSequence:
    """Binary masks [f, 1, h, w]; 1 marks pixels to complete"""
    data: np.ndarray
    crop: Optional[Tuple[int, int]] = field(default=None)

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[1] != 1:
            raise VideoIOError(f"masks must be [f, 1, h, w], got {self.data.shape}")
        if not np.isin(self.data, (0, 1)).all():
            raise VideoIOError("mask values must be exactly 0 or 1")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    def coverage(self) -> np.ndarray:
        """Per-frame masked fraction"""
        return self.data.reshape(self.num_frames, -1).mean(axis=1)

    def select(self, indices) -> "MaskSequence":
        return replace(self, data=self.data[list(indices)])

    def dilated(self, iterations: int) -> "MaskSequence":
        return replace(self, data=dilate_masks(self.data, iterations))

    @classmethod
    def empty_like(cls, frames: VideoFrames) -> "MaskSequence":
        f, _, h, w = frames.data.shape
        return cls(np.zeros((f, 1, h, w), dtype=np.float32), crop=frames.crop)


def padded_size(h: int, w: int, multiple: int = SIDE_MULTIPLE) -> Tuple[int, int]:
    """Smallest size >= (h, w) that is >= 16 and divisible by `multiple`"""
    def _side(n: int) -> int:
        return max(MIN_SIDE, -(-n // multiple) * multiple)
    return _side(h), _side(w)


def pad_to_multiple(array: np.ndarray, multiple: int = SIDE_MULTIPLE) -> np.ndarray:
    """Reflect-pad the trailing two axes of [f, c, h, w] to the ingestion size"""
    h, w = array.shape[-2:]
    ph, pw = padded_size(h, w, multiple)
    if (ph, pw) == (h, w):
        return array
    pad = [(0, 0)] * (array.ndim - 2) + [(0, ph - h), (0, pw - w)]
    mode = "reflect" if min(h, w) > 1 else "edge"
    return np.pad(array, pad, mode=mode)


def _list_images(path: Path) -> List[Path]:
    if not path.is_dir():
        raise VideoIOError(f"not a directory: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise VideoIOError(f"no frames in {path}")
    return files


def _read_image(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert(mode), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as e:
        raise VideoIOError(f"unreadable file {path}: {e}") from e


def _read_all(files: List[Path], mode: str) -> List[np.ndarray]:
    # map() keeps filename order regardless of completion order
    workers = max(1, RuntimeConfig().num_workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        images = list(pool.map(lambda p: _read_image(p, mode), files))
    sizes = {img.shape[:2] for img in images}
    if len(sizes) != 1:
        raise VideoIOError(f"inconsistent image sizes: {sorted(sizes)}")
    return images


def _read_meta(path: Path) -> dict:
    meta_path = path / META_FILENAME
    if not meta_path.is_file():
        return {}
    try:
        return json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        logger.warning(f"Ignoring unreadable sidecar {meta_path}: {e}")
        return {}


def load_frames(path) -> VideoFrames:
    """Load a frame directory, sorted by filename, reflect-padded for the codec"""
    path = Path(path)
    files = _list_images(path)
    images = _read_all(files, "RGB")
    data = np.stack([img.transpose(2, 0, 1) for img in images]).astype(np.float32)
    h, w = data.shape[-2:]
    meta = _read_meta(path)
    logger.info(f"Loaded {len(files)} frames of {h}x{w} from {path}")
    return VideoFrames(data=pad_to_multiple(data), fps=meta.get("fps"), crop=(h, w))


def binarize(gray: np.ndarray, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    return (gray >= threshold).astype(np.float32)


def dilate_masks(data: np.ndarray, iterations: int) -> np.ndarray:
    """Grow every frame's mask by `iterations` steps of a 3x3 cross"""
    if iterations <= 0:
        return data
    out = np.empty_like(data)
    for i, frame in enumerate(data[:, 0] > 0):
        out[i, 0] = ndimage.binary_dilation(frame, iterations=iterations)
    return out


def load_masks(path, f: int, dilation: int = 0) -> MaskSequence:
    """
    Load masks from a directory (one per frame) or a single file broadcast to
    all `f` frames. Grayscale is binarized at 0.5 and padded like the frames.
    """
    path = Path(path)
    files = [path] if path.is_file() else _list_images(path)
    if len(files) not in (1, f):
        raise VideoIOError(f"mask count {len(files)} does not match frame count {f}")
    images = _read_all(files, "L")
    data = np.stack([binarize(img)[None] for img in images])
    if len(files) == 1 and f > 1:
        data = np.repeat(data, f, axis=0)
    data = dilate_masks(data, dilation)
    h, w = data.shape[-2:]
    return MaskSequence(data=pad_to_multiple(data), crop=(h, w))


def _to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_frames(frames: VideoFrames, path, crop: bool = True) -> List[Path]:
    """Write frame_%05d.png files plus the meta.json sidecar"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    out = frames.cropped() if crop else frames
    written = []
    for i, frame in enumerate(out.data):
        target = path / FRAME_PATTERN.format(i)
        Image.fromarray(_to_uint8(frame.transpose(1, 2, 0))).save(target)
        written.append(target)
    h, w = frames.crop or frames.size
    (path / META_FILENAME).write_text(json.dumps({"fps": frames.fps, "crop": [h, w]}))
    logger.info(f"Wrote {len(written)} frames to {path}")
    return written


def save_masks(masks: MaskSequence, path, crop: bool = True) -> List[Path]:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    data = masks.data
    if crop and masks.crop is not None:
        data = data[:, :, :masks.crop[0], :masks.crop[1]]
    written = []
    for i, frame in enumerate(data):
        target = path / FRAME_PATTERN.format(i)
        Image.fromarray(_to_uint8(frame[0])).save(target)
        written.append(target)
    return written


def blur_masks(masks: MaskSequence, blur_sigma: float) -> np.ndarray:
    """Gaussian-blurred masks restricted to the mask support"""
    m = masks.data.astype(np.float64)
    if blur_sigma <= 0:
        return m
    blurred = ndimage.gaussian_filter(m, sigma=(0, 0, blur_sigma, blur_sigma), mode="nearest")
    # feathering stays inside the hole so unmasked pixels keep weight 0
    weights = np.clip(blurred, 0.0, 1.0) * m
    weights[np.isclose(weights, 1.0, rtol=0.0, atol=1e-12)] = 1.0
    return weights


def blend_output(
    generated: VideoFrames,
    original: VideoFrames,
    masks: MaskSequence,
    blur_sigma: float = 2.0,
    core: Optional[MaskSequence] = None,
) -> VideoFrames:
    """
    Composite generated content into the input with blurred-mask weights.
    Pixels of `core` (the undilated hole) inside `masks` take the generated
    value outright, so the feathering only spans the dilation ring.
    """
    if blur_sigma < 0:
        raise VideoIOError("blur_sigma must be >= 0")
    if generated.data.shape != original.data.shape:
        raise VideoIOError(f"shape mismatch: {generated.data.shape} vs {original.data.shape}")
    for name, m in (("mask", masks), ("core mask", core)):
        if m is not None and (m.data.shape[0] != original.num_frames or m.data.shape[2:] != original.data.shape[2:]):
            raise VideoIOError(f"{name} shape {m.data.shape} does not match frames {original.data.shape}")

    weights = blur_masks(masks, blur_sigma)
    if core is not None:
        weights = np.maximum(weights, ((core.data > 0) & (masks.data > 0)).astype(np.float64))
    gen = generated.data.astype(np.float64)
    inp = original.data.astype(np.float64)
    out = np.where(weights >= 1.0, gen, inp + weights * (gen - inp))
    out = np.clip(out, 0.0, 1.0).astype(original.data.dtype)
    return replace(original, data=out)
