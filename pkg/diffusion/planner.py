"""
Temporal planner for long-sequence inference

Clip partitions per inference timestep (alternating start / mid-clip offsets),
pre-inference frame sampling and the anchor map that ties the two together.
Plans are immutable values; to_dict() is the JSON form printed by `plan`.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Sequence, Tuple

from app.exceptions import PlanError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class ClipSpan:
    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise PlanError(f"invalid clip span [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    def __contains__(self, index: int) -> bool:
        return self.start <= index < self.end

    @property
    def frames(self) -> range:
        return range(self.start, self.end)

    def as_list(self) -> List[int]:
        return [self.start, self.end]


@dataclass(frozen=True)
class TemporalPlan:
    n_frames: int
    clip_len: int
    per_timestep: Tuple[Tuple[ClipSpan, ...], ...]
    preinference_indices: Tuple[int, ...] = ()
    # anchor_map[i][j]: pre-inference indices inside span j of timestep position i
    anchor_map: Tuple[Tuple[Tuple[int, ...], ...], ...] = field(default=())

    @property
    def steps(self) -> int:
        return len(self.per_timestep)

    def boundaries(self, position: int) -> List[int]:
        """Interior clip boundaries used at a denoising-order position"""
        return [span.start for span in self.per_timestep[position] if span.start > 0]

    def anchors_for(self, position: int, span_index: int) -> Tuple[int, ...]:
        if not self.anchor_map:
            return ()
        return self.anchor_map[position][span_index]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_frames": self.n_frames,
            "clip_len": self.clip_len,
            "steps": self.steps,
            "per_timestep": [[span.as_list() for span in spans] for spans in self.per_timestep],
            "preinference": list(self.preinference_indices),
            "anchors": [[list(a) for a in spans] for spans in self.anchor_map],
        }


def _check_sizes(n_frames: int, clip_len: int):
    if n_frames < 1:
        raise PlanError(f"n_frames must be >= 1, got {n_frames}")
    if clip_len < 1:
        raise PlanError(f"clip_len must be >= 1, got {clip_len}")


def partition_clips(n_frames: int, clip_len: int, offset: int = 0) -> List[ClipSpan]:
    """[0, offset) if offset > 0, then clip_len-wide spans, then the remainder"""
    _check_sizes(n_frames, clip_len)
    if not 0 <= offset < clip_len:
        raise PlanError(f"offset must lie in [0, clip_len={clip_len}), got {offset}")

    spans = []
    start = 0
    if offset > 0:
        spans.append(ClipSpan(0, min(offset, n_frames)))
        start = spans[-1].end
    while start < n_frames:
        end = min(start + clip_len, n_frames)
        spans.append(ClipSpan(start, end))
        start = end
    return spans


def staggered_offset(position: int, clip_len: int) -> int:
    """Even denoising-order positions start at frame 0, odd ones at mid-clip"""
    return 0 if position % 2 == 0 else clip_len // 2


def staggered_plan(n_frames: int, clip_len: int, n_inference_steps: int) -> TemporalPlan:
    _check_sizes(n_frames, clip_len)
    if n_inference_steps < 1:
        raise PlanError(f"n_inference_steps must be >= 1, got {n_inference_steps}")
    per_timestep = tuple(
        tuple(partition_clips(n_frames, clip_len, staggered_offset(i, clip_len)))
        for i in range(n_inference_steps)
    )
    return TemporalPlan(n_frames=n_frames, clip_len=clip_len, per_timestep=per_timestep)


def sample_preinference_frames(n_frames: int, clip_len: int) -> List[int]:
    """Every ceil(n / clip_len)-th frame, so the samples fit one clip"""
    _check_sizes(n_frames, clip_len)
    stride = math.ceil(n_frames / clip_len)
    return list(range(0, n_frames, stride))


def anchor_plan(plan: TemporalPlan, preinference_indices: Sequence[int] = None) -> TemporalPlan:
    """
    Fill anchor_map with the pre-inference indices contained in every span.
    `preinference_indices` replaces the plan's own when given; an empty
    sequence disables guidance (all anchor sets empty).
    """
    indices = tuple(plan.preinference_indices if preinference_indices is None else preinference_indices)
    if list(indices) != sorted(set(indices)):
        raise PlanError("pre-inference indices must be strictly increasing")
    if indices and not (0 <= indices[0] and indices[-1] < plan.n_frames):
        raise PlanError(f"pre-inference indices out of range [0, {plan.n_frames})")
    if len(indices) > plan.clip_len:
        raise PlanError(f"{len(indices)} pre-inference indices exceed clip_len={plan.clip_len}")

    anchor_map = tuple(
        tuple(tuple(i for i in indices if i in span) for span in spans)
        for spans in plan.per_timestep
    )
    return replace(plan, preinference_indices=indices, anchor_map=anchor_map)


def build_plan(n_frames: int, clip_len: int, steps: int, guidance: bool = True) -> TemporalPlan:
    """staggered_plan + sample_preinference_frames + anchor_plan"""
    plan = staggered_plan(n_frames, clip_len, steps)
    indices = sample_preinference_frames(n_frames, clip_len) if guidance else []
    plan = anchor_plan(plan, indices)
    logger.debug(f"Plan for {n_frames} frames: clip_len={clip_len}, steps={steps}, anchors={len(indices)}")
    return plan
