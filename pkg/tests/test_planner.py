import json

import pytest

from app.exceptions import PlanError
from diffusion.planner import (
    ClipSpan,
    anchor_plan,
    build_plan,
    partition_clips,
    sample_preinference_frames,
    staggered_offset,
    staggered_plan,
)


def _covers_exactly(spans, n):
    frames = [i for span in spans for i in span.frames]
    return frames == list(range(n))


def test_partition_without_offset():
    assert [s.as_list() for s in partition_clips(50, 22)] == [[0, 22], [22, 44], [44, 50]]


def test_partition_with_offset():
    assert [s.as_list() for s in partition_clips(50, 22, 11)] == [[0, 11], [11, 33], [33, 50]]


def test_partition_shorter_than_offset():
    assert [s.as_list() for s in partition_clips(5, 22, 11)] == [[0, 5]]


def test_partition_rejects_bad_arguments():
    with pytest.raises(PlanError):
        partition_clips(10, 4, 4)
    with pytest.raises(PlanError):
        partition_clips(0, 4)
    with pytest.raises(PlanError):
        partition_clips(10, 0)


def test_clip_span_validation():
    assert len(ClipSpan(3, 7)) == 4
    assert 3 in ClipSpan(3, 7) and 7 not in ClipSpan(3, 7)
    with pytest.raises(PlanError):
        ClipSpan(4, 4)
    with pytest.raises(PlanError):
        ClipSpan(-1, 2)


def test_staggered_offsets():
    assert [staggered_offset(i, 22) for i in range(4)] == [0, 11, 0, 11]
    assert staggered_offset(1, 1) == 0


def test_two_step_plan_boundaries():
    plan = staggered_plan(44, 22, 2)
    assert plan.boundaries(0) == [22]
    assert plan.boundaries(1) == [11, 33]


def test_single_step_plan_uses_start_aligned_partition():
    plan = staggered_plan(50, 22, 1)
    assert plan.steps == 1
    assert [s.as_list() for s in plan.per_timestep[0]] == [[0, 22], [22, 44], [44, 50]]


@pytest.mark.parametrize("clip_len", [4, 8, 22])
@pytest.mark.parametrize("steps", [1, 2, 3, 50])
def test_every_frame_denoised_once_per_timestep(clip_len, steps):
    for n in range(1, 201):
        plan = staggered_plan(n, clip_len, steps)
        assert plan.steps == steps
        for spans in plan.per_timestep:
            assert _covers_exactly(spans, n), (n, clip_len, steps)
            assert all(len(span) <= clip_len for span in spans)


@pytest.mark.parametrize("clip_len", [4, 8, 22])
def test_consecutive_boundaries_do_not_coincide(clip_len):
    for k in range(2, 10):
        plan = staggered_plan(k * clip_len, clip_len, 2)
        assert not set(plan.boundaries(0)) & set(plan.boundaries(1))


def test_single_frame_video():
    plan = build_plan(1, 22, 3)
    assert all([s.as_list() for s in spans] == [[0, 1]] for spans in plan.per_timestep)
    assert plan.preinference_indices == (0,)


def test_preinference_sampling():
    assert sample_preinference_frames(88, 22) == list(range(0, 88, 4))
    assert sample_preinference_frames(22, 22) == list(range(22))
    assert sample_preinference_frames(1, 22) == [0]
    for n in range(1, 300):
        assert len(sample_preinference_frames(n, 22)) <= 22


def test_anchor_map_for_second_clip():
    plan = anchor_plan(staggered_plan(44, 22, 2), list(range(0, 44, 2)))
    assert plan.anchors_for(0, 1) == tuple(range(22, 44, 2))
    assert plan.anchors_for(1, 0) == (0, 2, 4, 6, 8, 10)


def test_anchor_map_for_short_leading_clip():
    plan = anchor_plan(staggered_plan(44, 22, 2), list(range(0, 44, 4)))
    assert plan.per_timestep[1][0].as_list() == [0, 11]
    assert plan.anchors_for(1, 0) == (0, 4, 8)


@pytest.mark.parametrize("n, clip_len, steps", [(44, 22, 2), (100, 8, 3), (37, 5, 4), (3, 22, 2)])
def test_anchor_sets_partition_the_samples(n, clip_len, steps):
    plan = build_plan(n, clip_len, steps)
    for i, spans in enumerate(plan.per_timestep):
        union = []
        for j, span in enumerate(spans):
            anchors = plan.anchors_for(i, j)
            assert all(a in span for a in anchors)
            union.extend(anchors)
        assert union == list(plan.preinference_indices)


def test_empty_samples_disable_guidance():
    plan = build_plan(44, 22, 2, guidance=False)
    assert plan.preinference_indices == ()
    assert all(plan.anchors_for(i, j) == () for i in range(2) for j in range(len(plan.per_timestep[i])))


def test_anchor_plan_validation():
    plan = staggered_plan(10, 4, 2)
    with pytest.raises(PlanError, match="increasing"):
        anchor_plan(plan, [3, 1])
    with pytest.raises(PlanError, match="range"):
        anchor_plan(plan, [0, 10])
    with pytest.raises(PlanError, match="exceed"):
        anchor_plan(plan, [0, 1, 2, 3, 4])


def test_plan_json_is_deterministic():
    a = json.dumps(build_plan(44, 22, 2).to_dict())
    b = json.dumps(build_plan(44, 22, 2).to_dict())
    assert a == b
    data = json.loads(a)
    assert data["per_timestep"] == [[[0, 22], [22, 44]], [[0, 11], [11, 33], [33, 44]]]
    assert data["preinference"] == list(range(0, 44, 2))
    assert set(data) == {"n_frames", "clip_len", "steps", "per_timestep", "preinference", "anchors"}
