import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from aliaug.codec import (
    Codec,
    LoRAConv2d,
    LoRALinear,
    ShapeError,
    ZeroConv,
    inject_lora,
    lora_rank_for,
    wrap_lora,
)


@pytest.fixture(scope="module")
def codec():
    torch.manual_seed(0)
    return Codec()


def test_encode_shapes(codec):
    z, taps = codec.encode(torch.randn(2, 3, 64, 64))
    assert z.shape == (2, 4, 8, 8)
    assert [t.shape[1:] for t in taps] == [(32, 32, 32), (64, 16, 16), (128, 8, 8)]


def test_encode_512(codec):
    with torch.no_grad():
        z, _ = codec.encode(torch.zeros(1, 3, 512, 512))
    assert z.shape == (1, 4, 64, 64)


def test_encode_rejects_bad_size(codec):
    with pytest.raises(ShapeError):
        codec.encode(torch.zeros(1, 3, 60, 64))


def test_zero_convs_hide_taps_at_init(codec):
    x = torch.randn(1, 3, 64, 64)
    z, taps = codec.encode(x)
    a = codec.decode(z, taps)
    b = codec.decode(z, [torch.zeros_like(t) for t in taps])
    torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_zero_latent_decodes_finite(codec):
    z = torch.zeros(1, 4, 8, 8)
    taps = [torch.zeros(1, c, s, s) for c, s in ((32, 32), (64, 16), (128, 8))]
    out = codec.decode(z, taps)
    assert out.shape == (1, 3, 64, 64) and torch.isfinite(out).all()
    assert out.abs().max() <= 1.0


def test_single_encoder_instance_for_mask_and_image():
    codec = Codec()
    names = [n for n, _ in codec.named_modules() if n.startswith("encoder")]
    assert names.count("encoder") == 1
    x = torch.randn(1, 3, 16, 16)
    codec.encoder.blocks[0].down.weight.data.mul_(2.0)
    z1, _ = codec.encode(x)
    z2, _ = codec.encoder(x)
    torch.testing.assert_close(z1, z2)


def test_nonzero_zero_conv_lets_taps_through(codec):
    codec = Codec()
    with torch.no_grad():
        for zc in codec.skip_convs:
            zc.weight.normal_(0, 0.1)
    z, taps = codec.encode(torch.randn(1, 3, 32, 32))
    base = codec.decode(z, taps)
    taps[0] = taps[0] + 1.0
    assert (codec.decode(z, taps) - base).abs().max() > 0


# -- LoRA -------------------------------------------------------------------------------

def test_lora_64x64_rank8_param_count():
    ad = wrap_lora(nn.Linear(64, 64), 8)
    trainable = sum(p.numel() for p in ad.parameters() if p.requires_grad)
    assert trainable == 1024 and ad.base_weight.numel() == 4096


@settings(max_examples=20, deadline=None)
@given(d_in=st.integers(1, 24), d_out=st.integers(1, 24), rank=st.integers(1, 8), seed=st.integers(0, 999))
def test_lora_linear_identity_at_init(d_in, d_out, rank, seed):
    rank = min(rank, d_in, d_out)
    lin = nn.Linear(d_in, d_out)
    ad = LoRALinear(lin, rank, seed=seed)
    x = torch.randn(5, d_in)
    torch.testing.assert_close(ad(x), lin(x), rtol=0, atol=1e-7)
    assert sum(p.numel() for p in ad.parameters()) == rank * (d_in + d_out)


@settings(max_examples=15, deadline=None)
@given(c_in=st.integers(1, 8), c_out=st.integers(1, 8), k=st.sampled_from([1, 3]), stride=st.sampled_from([1, 2]))
def test_lora_conv_identity_at_init(c_in, c_out, k, stride):
    conv = nn.Conv2d(c_in, c_out, k, stride=stride, padding=k // 2)
    rank = lora_rank_for(conv, 4)
    ad = LoRAConv2d(conv, rank)
    x = torch.randn(2, c_in, 8, 8)
    torch.testing.assert_close(ad(x), conv(x), rtol=0, atol=1e-6)
    assert ad.d_in == c_in * k * k and ad.d_out == c_out


def test_lora_delta_formula():
    lin = nn.Linear(6, 5)
    ad = LoRALinear(lin, 2, alpha=4.0)
    with torch.no_grad():
        ad.lora_B.normal_()
    expected = lin.weight + (4.0 / 2) * ad.lora_B @ ad.lora_A
    torch.testing.assert_close(ad.effective_weight(), expected)


def test_invalid_rank_rejected():
    with pytest.raises(ValueError):
        wrap_lora(nn.Linear(4, 3), 4)
    with pytest.raises(TypeError):
        wrap_lora(nn.GroupNorm(1, 4), 2)


def test_inject_lora_skips_zero_convs_and_clamps_rank():
    codec = Codec()
    adapters = inject_lora(codec, 4)
    assert all(isinstance(zc, ZeroConv) for zc in codec.skip_convs)
    assert min(a.rank for a in adapters) == 3  # 3-channel output conv
    assert all(a.rank <= 4 for a in adapters)
    assert not any(isinstance(m, nn.Conv2d) and not isinstance(m, ZeroConv) for m in codec.modules())
