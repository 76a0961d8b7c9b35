import pytest
import torch
import torch.nn as nn
from einops import rearrange
from torch.autograd import gradcheck

from app.exceptions import ModelError
from models.attention import (
    CrossAttention,
    SpatialSelfAttention,
    TemporalAttention,
    ZeroProjection,
    sinusoidal_embedding,
)


def _value_path(module: TemporalAttention, x: torch.Tensor) -> torch.Tensor:
    f, c = x.shape[:2]
    tokens = rearrange(x.reshape(f, c, -1), "f c s -> s f c")
    out = module.to_out(module.to_v(tokens))
    return x + rearrange(out, "s f c -> f c s").reshape(x.shape)


def test_sinusoidal_embedding_shape_and_range():
    emb = sinusoidal_embedding(torch.arange(10), 8)
    assert tuple(emb.shape) == (10, 8)
    assert emb.dtype == torch.float64
    assert float(emb.abs().max()) <= 1.0
    assert torch.equal(emb[0], torch.tensor([0.0] * 4 + [1.0] * 4, dtype=torch.float64))


def test_fresh_temporal_attention_is_identity():
    x = torch.randn(5, 8, 3, 3)
    assert torch.equal(TemporalAttention(8, 2)(x), x)


@pytest.mark.parametrize("position_encoding", [True, False])
def test_single_frame_reduces_to_value_path(position_encoding):
    module = TemporalAttention(8, 2, position_encoding=position_encoding, zero_init=False)
    x = torch.randn(1, 8, 4, 4)
    torch.testing.assert_close(module(x), _value_path(module, x), atol=1e-6, rtol=0)


def test_frame_constant_input_stays_frame_constant():
    module = TemporalAttention(8, 2, position_encoding=True, zero_init=False)
    x = torch.randn(1, 8, 3, 3).expand(6, -1, -1, -1).contiguous()

    out = module(x)

    for i in range(1, 6):
        torch.testing.assert_close(out[i], out[0], atol=1e-6, rtol=0)


def test_permutation_equivariant_without_position_encoding():
    module = TemporalAttention(8, 2, position_encoding=False, zero_init=False)
    x = torch.randn(5, 8, 2, 2)
    perm = torch.tensor([4, 2, 0, 1, 3])
    torch.testing.assert_close(module(x[perm]), module(x)[perm], atol=1e-5, rtol=1e-5)


def test_position_encoding_breaks_equivariance():
    torch.manual_seed(3)
    module = TemporalAttention(8, 2, position_encoding=True, zero_init=False)
    x = torch.randn(5, 8, 2, 2)
    perm = torch.tensor([4, 2, 0, 1, 3])
    assert not torch.allclose(module(x[perm]), module(x)[perm], atol=1e-4)


def test_max_frames_enforced():
    module = TemporalAttention(4, 2, max_frames=3)
    with pytest.raises(ModelError, match="max_frames"):
        module(torch.zeros(4, 4, 1, 1))


def test_temporal_attention_gradcheck():
    module = TemporalAttention(4, 2, zero_init=False).double()
    x = torch.randn(3, 4, 2, 2, dtype=torch.float64, requires_grad=True)
    assert gradcheck(module, (x,), eps=1e-6, atol=1e-5, rtol=1e-4)


def test_spatial_self_attention_gradcheck():
    module = SpatialSelfAttention(4, 2, norm_groups=2).double()
    x = torch.randn(2, 4, 2, 3, dtype=torch.float64, requires_grad=True)
    assert gradcheck(module, (x,), eps=1e-6, atol=1e-5, rtol=1e-4)


def test_cross_attention_gradcheck():
    module = CrossAttention(4, context_dim=3, heads=2, norm_groups=2).double()
    x = torch.randn(2, 4, 2, 2, dtype=torch.float64, requires_grad=True)
    context = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
    assert gradcheck(lambda a, b: module(a, b), (x, context), eps=1e-6, atol=1e-5, rtol=1e-4)


def test_zero_projection_starts_at_zero_and_is_differentiable():
    module = ZeroProjection(4)
    assert bool((module(torch.randn(2, 4, 3, 3)) == 0).all())

    module = module.double()
    nn.init.normal_(module.conv.weight)
    x = torch.randn(2, 4, 3, 3, dtype=torch.float64, requires_grad=True)
    assert gradcheck(module, (x,), eps=1e-6, atol=1e-5, rtol=1e-4)
