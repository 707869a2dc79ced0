import math

import pytest
import torch

from aliaug.backbone import PromptEmbedder, UNet, UNetConfig, UnknownPromptError, time_embed
from aliaug.codec import ShapeError, inject_lora


def test_distinct_prompts_distinct_embeddings():
    emb = PromptEmbedder(5, seed=0)
    a, b = emb(torch.tensor([1])), emb(torch.tensor([2]))
    assert (a != b).any()
    torch.testing.assert_close(emb(torch.tensor([1])), a, rtol=0, atol=0)
    assert a.shape == (1, 4, 64)


def test_unknown_prompt_strict_and_lenient():
    with pytest.raises(UnknownPromptError):
        PromptEmbedder(5)(torch.tensor([7]))
    lenient = PromptEmbedder(5, strict=False)
    torch.testing.assert_close(lenient(torch.tensor([7])), lenient(torch.tensor([-1])))


def test_time_embed_at_zero():
    e = time_embed(0, 64)[0]
    assert torch.all(e[:32] == 0) and torch.all(e[32:] == 1)


def test_time_embed_values_and_range():
    e = time_embed(999, 8)[0]
    freqs = [math.exp(-math.log(10000.0) * i / 4) for i in range(4)]
    expected = [math.sin(999 * f) for f in freqs] + [math.cos(999 * f) for f in freqs]
    torch.testing.assert_close(e, torch.tensor(expected, dtype=torch.float32), atol=2e-4, rtol=0)
    assert not torch.equal(time_embed(3, 64), time_embed(4, 64))
    for bad in (-1, 1000):
        with pytest.raises(ValueError):
            time_embed(bad)


@pytest.mark.parametrize("channels", [(64, 128), (32, 64), (16, 16)])
@pytest.mark.parametrize("size", [2, 4, 8])
def test_unet_shape_preserved(channels, size):
    cfg = UNetConfig(channels=channels)
    net = UNet(cfg)
    z = torch.randn(2, 4, size, size)
    out = net(z, time_embed(999), torch.randn(2, 4, 64))
    assert out.shape == z.shape


def test_unet_rejects_bad_latent():
    net = UNet()
    with pytest.raises(ShapeError):
        net(torch.randn(1, 3, 8, 8), time_embed(999), torch.randn(1, 4, 64))


def test_zero_context_removes_prompt_dependence():
    net = UNet().double()
    z = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    t = time_embed(999, dtype=torch.float64)
    zero = torch.zeros(1, 4, 64, dtype=torch.float64)
    emb = PromptEmbedder(5).double()
    torch.testing.assert_close(net(z, t, zero), net(z, t, zero))
    assert not torch.allclose(net(z, t, emb(torch.tensor([1]))), net(z, t, emb(torch.tensor([2]))))


def test_attention_projection_gradients_match_finite_differences():
    torch.manual_seed(0)
    net = UNet(UNetConfig(channels=(16, 16))).double()
    adapters = inject_lora(net, 2)
    with torch.no_grad():
        for a in adapters:
            a.lora_B.normal_(0, 0.1)
    z = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    t = time_embed(999, 64, dtype=torch.float64)
    ctx = torch.randn(1, 4, 64, dtype=torch.float64)
    w = torch.randn(1, 4, 2, 2, dtype=torch.float64)

    def loss():
        return (net(z, t, ctx) * w).sum()

    for proj in net.attention_projections():
        for p in (proj.lora_A, proj.lora_B):
            grad, = torch.autograd.grad(loss(), p)
            idx = torch.randperm(p.numel())[:5]
            for i in idx:
                flat = p.data.view(-1)
                old = flat[i].item()
                h = 1e-6
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                fd = (up - down) / (2 * h)
                an = grad.view(-1)[i].item()
                assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-8) or abs(fd - an) < 1e-9
