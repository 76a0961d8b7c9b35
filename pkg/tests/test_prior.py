import sys
import textwrap
from pathlib import Path

import numpy as np
import pytest
import torch

from app.exceptions import CodecError, PriorError
from data.synthetic import render_scene, static_benchmark
from data.video_io import MaskSequence, VideoFrames
from diffusion.prior import (
    PriorResult,
    builtin_prior,
    encode_and_invert,
    external_prior,
    harmonic_fill,
    inject_prior,
    invert_video,
    known_latent_mask,
    nearest_known_frame,
    seeded_noise,
    two_pass_external_prior,
    validate_prior,
)
from diffusion.scheduler import NoiseSchedule
from models.codec import downsample_mask, masked_image_latent
from training.masks import generate_mask_sequence
from app.config import MaskGenConfig

REPO_ROOT = Path(__file__).resolve().parents[1]

COPY_PROGRAM = """
import argparse, shutil
from pathlib import Path

parser = argparse.ArgumentParser()
parser.add_argument("--frames")
parser.add_argument("--masks")
parser.add_argument("--out")
args = parser.parse_args()
files = sorted(Path(args.frames).glob("*.png"))
{body}
"""


def _program(tmp_path, name, body):
    path = tmp_path / f"{name}.py"
    path.write_text(COPY_PROGRAM.format(body=textwrap.dedent(body)))
    return f"{sys.executable} {path}"


@pytest.fixture
def identity_command(tmp_path):
    return _program(tmp_path, "identity", """
for f in files:
    shutil.copy(f, Path(args.out) / f.name)
""")


def _masks(data):
    return MaskSequence(np.asarray(data, dtype=np.float32))


# ----------------------------------------------------------------------
# built-in prior
# ----------------------------------------------------------------------

def test_nearest_known_frame_prefers_earlier_on_ties():
    masked = np.zeros((5, 1, 1), dtype=bool)
    masked[1:4] = True
    assert nearest_known_frame(masked)[:, 0, 0].tolist() == [0, 0, 0, 4, 4]


def test_nearest_known_frame_never_visible():
    masked = np.ones((3, 1, 2), dtype=bool)
    masked[1, 0, 1] = False
    assert nearest_known_frame(masked)[:, 0].tolist() == [[-1, 1], [-1, 1], [-1, 1]]


def test_static_pixel_copied_from_other_frame(rng):
    base = rng.random((1, 3, 16, 16)).astype(np.float32)
    frames = VideoFrames(np.repeat(base, 3, axis=0))
    m = np.zeros((3, 1, 16, 16))
    m[1, 0, 5, 7] = 1

    out = builtin_prior(frames, _masks(m)).frames.data

    assert np.array_equal(out[1, :, 5, 7], frames.data[0, :, 5, 7])


def test_tie_copies_from_earlier_frame(rng):
    frames = VideoFrames(rng.random((3, 3, 16, 16)).astype(np.float32))
    m = np.zeros((3, 1, 16, 16))
    m[1, 0, 2, 3] = 1

    out = builtin_prior(frames, _masks(m)).frames.data

    assert np.array_equal(out[1, :, 2, 3], frames.data[0, :, 2, 3])


def test_never_visible_region_with_constant_surroundings():
    data = np.full((3, 3, 16, 16), 0.3, dtype=np.float32)
    data[..., 4:12, 4:12] = 0.9
    m = np.zeros((3, 1, 16, 16))
    m[..., 4:12, 4:12] = 1

    out = builtin_prior(VideoFrames(data), _masks(m)).frames.data

    np.testing.assert_allclose(out[..., 4:12, 4:12], 0.3, atol=1e-3)


def test_harmonic_fill_interpolates_between_boundaries():
    data = np.zeros((1, 1, 3, 5))
    data[..., 4] = 1.0
    holes = np.zeros((1, 3, 5), dtype=bool)
    holes[:, :, 1:4] = True

    out = harmonic_fill(data, holes, tol=1e-10)

    np.testing.assert_allclose(out[0, 0, 1], [0.0, 0.25, 0.5, 0.75, 1.0], atol=1e-6)


def test_empty_mask_returns_input_unchanged(rng):
    frames = VideoFrames(rng.random((2, 3, 16, 16)).astype(np.float32))
    out = builtin_prior(frames, MaskSequence.empty_like(frames))
    assert np.array_equal(out.frames.data, frames.data)
    assert out.source == "builtin"


def test_builtin_prior_is_idempotent_and_preserves_unmasked_pixels():
    frames = render_scene(16, 24, 6, seed=2)
    masks = generate_mask_sequence(16, 24, 6, MaskGenConfig(rate=0.4, seed=3, speed=2.0))

    once = builtin_prior(frames, masks).frames
    twice = builtin_prior(once, masks).frames

    assert np.array_equal(once.data, twice.data)
    unmasked = np.broadcast_to(masks.data == 0, frames.data.shape)
    assert np.array_equal(once.data[unmasked], frames.data[unmasked])
    assert once.data.min() >= 0.0 and once.data.max() <= 1.0


def test_builtin_prior_ignores_masked_input_content(rng):
    frames, masks = static_benchmark(16, 16, 8)
    scrambled = frames.data.copy()
    hole = np.broadcast_to(masks.data > 0, scrambled.shape)
    scrambled[hole] = rng.random(int(hole.sum()))

    a = builtin_prior(frames, masks).frames.data
    b = builtin_prior(VideoFrames(scrambled), masks).frames.data

    np.testing.assert_array_equal(a, b)


def test_static_benchmark_is_recovered_exactly():
    frames, masks = static_benchmark(32, 32, 30)
    out = builtin_prior(frames, masks).frames.data
    assert np.abs(out - frames.data).max() <= 1.0 / 255.0


def test_misaligned_masks_are_rejected(rng):
    frames = VideoFrames(rng.random((2, 3, 16, 16)).astype(np.float32))
    with pytest.raises(PriorError):
        builtin_prior(frames, _masks(np.zeros((3, 1, 16, 16))))


# ----------------------------------------------------------------------
# external prior
# ----------------------------------------------------------------------

def test_validate_prior_restores_unmasked_pixels(rng):
    frames = VideoFrames(rng.random((1, 3, 16, 16)).astype(np.float32))
    m = np.zeros((1, 1, 16, 16))
    m[..., :8] = 1
    result = frames.data + 0.5 / 255.0

    out = validate_prior(result, frames, _masks(m))

    assert np.array_equal(out[..., 8:], frames.data[..., 8:])


@pytest.mark.parametrize("mutate", ["shape", "nan"])
def test_validate_prior_reports_unfilled_holes(rng, mutate):
    frames = VideoFrames(rng.random((2, 3, 16, 16)).astype(np.float32))
    masks = MaskSequence.empty_like(frames)
    result = frames.data[:1] if mutate == "shape" else np.where(frames.data > 0.5, np.nan, frames.data)
    with pytest.raises(PriorError, match="hole left unfilled"):
        validate_prior(result, frames, masks)


def test_identity_program_with_empty_masks(identity_command):
    frames = render_scene(16, 16, 3, seed=4)
    out = external_prior(identity_command, frames, MaskSequence.empty_like(frames))
    assert np.array_equal(out.frames.data, frames.data)
    assert out.source == "external"


def test_program_touching_unmasked_pixels_is_rejected(tmp_path):
    command = _program(tmp_path, "blank", """
from PIL import Image
for f in files:
    img = Image.open(f).convert("RGB")
    img.putpixel((0, 0), (0, 0, 0) if img.getpixel((0, 0))[0] > 128 else (255, 255, 255))
    img.save(Path(args.out) / f.name)
""")
    frames = render_scene(16, 16, 2, seed=4)
    with pytest.raises(PriorError, match="unmasked"):
        external_prior(command, frames, MaskSequence.empty_like(frames))


def test_program_writing_too_few_frames(tmp_path):
    command = _program(tmp_path, "short", """
shutil.copy(files[0], Path(args.out) / files[0].name)
""")
    frames = render_scene(16, 16, 3, seed=4)
    with pytest.raises(PriorError, match="hole left unfilled"):
        external_prior(command, frames, MaskSequence.empty_like(frames))


def test_failing_program(tmp_path):
    command = _program(tmp_path, "fail", """
raise SystemExit(3)
""")
    frames = render_scene(16, 16, 1, seed=4)
    with pytest.raises(PriorError, match="code 3"):
        external_prior(command, frames, MaskSequence.empty_like(frames))


def test_missing_program():
    frames = render_scene(16, 16, 1, seed=4)
    with pytest.raises(PriorError):
        external_prior("/nonexistent/prior-program", frames, MaskSequence.empty_like(frames))


def test_reference_program_matches_builtin():
    command = f"{sys.executable} {REPO_ROOT / 'scripts' / 'propagation_prior.py'}"
    frames, masks = static_benchmark(16, 16, 6)

    external = external_prior(command, frames, masks).frames.data
    builtin = builtin_prior(frames, masks).frames.data

    assert np.array_equal(external, builtin)


def test_two_pass_prior_only_changes_masked_pixels(identity_command):
    frames, masks = static_benchmark(16, 16, 6)
    out = two_pass_external_prior(identity_command, frames, masks, [0, 3]).frames.data
    unmasked = np.broadcast_to(masks.data == 0, out.shape)
    assert np.array_equal(out[unmasked], frames.data[unmasked])


# ----------------------------------------------------------------------
# prior injection
# ----------------------------------------------------------------------

@pytest.fixture
def injection_inputs(tiny_checkpoint, scene):
    frames = scene
    masks = generate_mask_sequence(16, 16, scene.num_frames, MaskGenConfig(rate=0.3, seed=1))
    prior = builtin_prior(frames, masks)
    schedule = NoiseSchedule.from_config(tiny_checkpoint.schedule)
    return prior, masks, tiny_checkpoint, schedule


def _inject(inputs, cache, **kwargs):
    prior, masks, checkpoint, schedule = inputs
    return inject_prior(prior, masks, checkpoint.codec, schedule, checkpoint.model, clip_len=3, cache=cache, **kwargs)


def test_zero_strength_is_seeded_noise(injection_inputs, cache):
    z = _inject(injection_inputs, cache, strength=0.0, seed=11)
    assert torch.equal(z, seeded_noise(z.shape, 11))


def test_full_strength_is_inversion(injection_inputs, cache):
    prior, masks, checkpoint, schedule = injection_inputs
    z = _inject(injection_inputs, cache, strength=1.0)

    latent = checkpoint.codec.encode(prior.frames)
    expected, trajectory = invert_video(
        latent,
        schedule,
        checkpoint.model,
        masked_image_latent(checkpoint.codec, prior.frames, masks),
        downsample_mask(masks),
        clip_len=3,
        cache=cache,
    )

    assert torch.equal(z, expected)
    assert sorted(trajectory) == sorted(schedule.inference_timesteps)
    assert cache.hits >= 1


def test_partial_strength_mixes(injection_inputs, cache):
    z_inv = _inject(injection_inputs, cache, strength=1.0, seed=5)
    z_rand = _inject(injection_inputs, cache, strength=0.0, seed=5)
    z_mix = _inject(injection_inputs, cache, strength=0.25, seed=5)
    assert torch.equal(z_mix, 0.25 * z_inv + 0.75 * z_rand)


def test_injection_is_deterministic(injection_inputs):
    from data.cache_manager import CacheManager

    a = _inject(injection_inputs, CacheManager(max_entries=1), strength=0.5, seed=2)
    b = _inject(injection_inputs, CacheManager(max_entries=1), strength=0.5, seed=2)
    assert torch.equal(a, b)


def test_injection_errors(injection_inputs, lossless_checkpoint, cache):
    prior, masks, checkpoint, schedule = injection_inputs
    with pytest.raises(PriorError):
        _inject(injection_inputs, cache, strength=1.5)
    with pytest.raises(CodecError):
        inject_prior(prior, masks, lossless_checkpoint.codec, schedule, checkpoint.model, cache=cache)


def test_lossless_injection_skips_branch(lossless_checkpoint, scene, cache):
    frames = scene
    masks = MaskSequence.empty_like(frames)
    schedule = NoiseSchedule.from_config(lossless_checkpoint.schedule)
    z = inject_prior(
        PriorResult(frames, "builtin"), masks, lossless_checkpoint.codec, schedule, lossless_checkpoint.model,
        cache=cache,
    )
    assert tuple(z.shape) == (4, 48, 4, 4)


def test_encode_and_invert_matches_full_strength(injection_inputs, cache):
    prior, masks, checkpoint, schedule = injection_inputs
    latent, z_inv, trajectory = encode_and_invert(
        prior, masks, checkpoint.codec, schedule, checkpoint.model, clip_len=3, cache=cache,
    )
    assert torch.equal(latent, checkpoint.codec.encode(prior.frames))
    assert torch.equal(z_inv, _inject(injection_inputs, cache, strength=1.0))
    assert sorted(trajectory) == sorted(schedule.inference_timesteps)


def test_known_latent_mask_marks_cells_never_visible():
    data = np.zeros((3, 1, 16, 16), dtype=np.float32)
    data[:, :, 0:4, 0:4] = 1
    data[:, :, 5, 9] = 1
    data[0, :, 12:16, 12:16] = 1

    known = known_latent_mask(MaskSequence(data))

    assert known.shape == (1, 1, 4, 4) and known.dtype == torch.bool
    assert not known[0, 0, 0, 0] and not known[0, 0, 1, 2]
    assert known[0, 0, 3, 3]
    assert int(known.sum()) == 14
