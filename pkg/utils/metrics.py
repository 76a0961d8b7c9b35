"""
Evaluation metrics for DiffuEraser Desk
Masked-region PSNR, temporal stability and known/unknown pixel accounting
"""
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd

from app.config import PSNR_CAP_DB
from app.exceptions import MetricsError
from data.video_io import MaskSequence, VideoFrames

ArrayLike = Union[VideoFrames, MaskSequence, np.ndarray]


def _array(value: ArrayLike) -> np.ndarray:
    if isinstance(value, (VideoFrames, MaskSequence)):
        value = value.data
    return np.asarray(value, dtype=np.float64)


def psnr_from_mse(mse: float, cap: float = PSNR_CAP_DB) -> float:
    """PSNR in dB for signals in [0, 1], capped for (near) perfect reconstructions"""
    if mse <= 0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def masked_psnr(output: np.ndarray, ground_truth: np.ndarray, masks: np.ndarray) -> List[Optional[float]]:
    """
    Per-frame PSNR restricted to masked pixels

    Args:
        output: [f, 3, h, w] frames
        ground_truth: [f, 3, h, w] reference frames
        masks: [f, 1, h, w] binary masks

    Returns:
        One value per frame; None for frames without masked pixels
    """
    values = []
    for out_t, gt_t, m_t in zip(output, ground_truth, masks):
        sel = np.broadcast_to(m_t > 0, out_t.shape)
        if not sel.any():
            values.append(None)
            continue
        mse = float(np.mean((out_t[sel] - gt_t[sel]) ** 2))
        values.append(psnr_from_mse(mse))
    return values


def temporal_stability(frames: ArrayLike, masks: ArrayLike) -> float:
    """Mean over t of the mean |x_t - x_{t-1}| inside the union of all masks"""
    data, m = _array(frames), _array(masks)
    union = np.broadcast_to(m.max(axis=0) > 0, data.shape[1:])
    if data.shape[0] < 2 or not union.any():
        return 0.0
    diffs = [float(np.abs(data[t] - data[t - 1])[union].mean()) for t in range(1, data.shape[0])]
    return float(np.mean(diffs))


def known_pixel_fraction(masks: ArrayLike) -> float:
    """Share of masked pixels that are unmasked in at least one other frame"""
    m = _array(masks)[:, 0] > 0
    total = int(m.sum())
    if total == 0:
        return 1.0
    visible_somewhere = (~m).any(axis=0)
    return float((m & visible_somewhere[None]).sum() / total)


@dataclass
class EvalReport:
    psnr_in_mask: List[Optional[float]]
    psnr_mean: float
    temporal_stability: float
    runtime_seconds: float = 0.0
    known_pixel_fraction: float = 1.0
    reference_stability: Optional[float] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def per_frame_table(self) -> pd.DataFrame:
        return pd.DataFrame({
            "frame": range(len(self.psnr_in_mask)),
            "psnr_in_mask": self.psnr_in_mask,
        })

    def to_dict(self) -> Dict[str, Any]:
        report = asdict(self)
        report["per_frame"] = json.loads(self.per_frame_table().to_json(orient="records"))
        return report

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def compute_metrics(
    output: ArrayLike,
    ground_truth: ArrayLike,
    masks: ArrayLike,
    runtime_seconds: float = 0.0,
) -> EvalReport:
    """
    Evaluate an inpainted video against its ground truth

    Args:
        output: Inpainted frames
        ground_truth: Reference frames, same shape
        masks: Masks used for inpainting, [f, 1, h, w]
        runtime_seconds: Wall time of the run being evaluated

    Returns:
        EvalReport with per-frame and mean masked PSNR (capped at 99 dB),
        temporal stability of the output and of the ground truth, and the
        known-pixel fraction of the masks
    """
    out, gt, m = _array(output), _array(ground_truth), _array(masks)
    if out.shape != gt.shape:
        raise MetricsError(f"output {out.shape} and ground truth {gt.shape} differ in shape")
    if m.ndim != 4 or m.shape[1] != 1 or m.shape[0] != out.shape[0] or m.shape[2:] != out.shape[2:]:
        raise MetricsError(f"mask shape {m.shape} does not match frames {out.shape}")
    if runtime_seconds < 0:
        raise MetricsError("runtime_seconds must be non-negative")

    per_frame = masked_psnr(out, gt, m)
    valid = [v for v in per_frame if v is not None]
    return EvalReport(
        psnr_in_mask=per_frame,
        psnr_mean=float(np.mean(valid)) if valid else PSNR_CAP_DB,
        temporal_stability=temporal_stability(out, m),
        runtime_seconds=float(runtime_seconds),
        known_pixel_fraction=known_pixel_fraction(m),
        reference_stability=temporal_stability(gt, m),
    )
