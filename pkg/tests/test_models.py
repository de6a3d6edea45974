import numpy as np
import pytest
import torch

from memvad import memory as mem
from memvad.models import (
    MemoryGuidedNet,
    ModelConfig,
    desk_config,
    flatten_features,
    fuse,
    skip_ablation_probe,
)

VARIANTS = [
    dict(task="prediction", use_memory=True),
    dict(task="prediction", use_memory=False),
    dict(task="reconstruction", use_memory=True),
    dict(task="reconstruction", use_memory=False),
    dict(task="denoise_reconstruction", use_memory=True, noise_ratio=0.25),
]


def _net(seed=0, **kw):
    torch.manual_seed(seed)
    return MemoryGuidedNet(desk_config(**kw))


def _frames(cfg, size=64, batch=2, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(batch, cfg.in_channels, size, size, generator=gen) * 2 - 1


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.input_frames, cfg.use_skips, cfg.in_channels) == (4, True, 12)
        rec = ModelConfig(task="reconstruction")
        assert (rec.input_frames, rec.use_skips) == (1, False)
        assert ModelConfig(task="denoise_reconstruction").use_skips

    def test_invalid_combinations(self):
        with pytest.raises(ValueError):
            ModelConfig(task="prediction", input_frames=1)
        with pytest.raises(ValueError):
            ModelConfig(task="reconstruction", use_skips=True)
        with pytest.raises(ValueError):
            ModelConfig(noise_ratio=1.0)
        with pytest.raises(ValueError):
            ModelConfig(task="segmentation")


def test_full_scale_feature_map_geometry():
    torch.manual_seed(0)
    net = MemoryGuidedNet(ModelConfig(task="reconstruction"))
    net.eval()
    with torch.no_grad():
        feat, skips = net.encode(torch.zeros(1, 3, 256, 256))
    assert feat.shape == (1, 512, 32, 32)
    assert skips is None
    assert flatten_features(feat).shape == (1, 1024, 512)


@pytest.mark.parametrize("kw", VARIANTS)
def test_shape_round_trip(kw):
    net = _net(**kw)
    bank = mem.MemoryBank.random(10, 64)
    x = _frames(net.config)
    out = net(x, bank)
    assert out.output.shape == (2, 3, 64, 64)
    assert out.output.abs().max() <= 1.0
    if kw["use_memory"]:
        assert out.queries.shape == (2, 64, 64)
        assert out.match_weights.shape == (2, 64, 10)
        assert out.update_weights.shape == (2, 10, 64)
    else:
        assert out.queries is None and out.match_weights is None


def test_desk_feature_map():
    net = _net(task="reconstruction")
    feat, _ = net.encode(_frames(net.config))
    assert feat.shape == (2, 64, 8, 8)


def test_skips_at_three_resolutions():
    net = _net(task="prediction")
    _, skips = net.encode(_frames(net.config))
    assert [tuple(s.shape[2:]) for s in skips] == [(64, 64), (32, 32), (16, 16)]


def test_deterministic_given_seed():
    outs = []
    for _ in range(2):
        net = _net(seed=7, task="prediction")
        net.eval()
        with torch.no_grad():
            outs.append(net(_frames(net.config), mem.MemoryBank.random(10, 64, seed=1)).output)
    assert torch.equal(outs[0], outs[1])
    assert torch.isfinite(outs[0]).all()


def test_memory_independence_when_disabled():
    net = _net(task="prediction", use_memory=False)
    net.eval()
    x = _frames(net.config)
    with torch.no_grad():
        a = net(x).output
        b = net(x, mem.MemoryBank.random(10, 64)).output
    assert torch.equal(a, b)


def test_input_validation():
    net = _net(task="prediction")
    with pytest.raises(ValueError, match="input"):
        net(torch.zeros(1, 3, 64, 64), mem.MemoryBank.random(10, 64))
    with pytest.raises(ValueError, match="divisible"):
        net(torch.zeros(1, 12, 60, 60), mem.MemoryBank.random(10, 64))
    with pytest.raises(ValueError, match="bank"):
        net(torch.zeros(1, 12, 64, 64))


def test_decoder_requires_skips():
    net = _net(task="prediction")
    feat, _ = net.encode(_frames(net.config))
    fused = torch.cat([feat, feat], dim=1)
    with pytest.raises(ValueError, match="skip"):
        net.decode(fused, None)
    with pytest.raises(ValueError, match="depth"):
        net.decode(feat, None)


class TestFuse:
    def test_full_scale_depth(self):
        feat = torch.zeros(1, 512, 32, 32)
        assert fuse(feat, torch.zeros(1, 1024, 512)).shape == (1, 1024, 32, 32)

    def test_identical_halves(self):
        feat = torch.randn(2, 4, 3, 3)
        out = fuse(feat, flatten_features(feat))
        assert torch.equal(out[:, :4], out[:, 4:])

    def test_index_oracle(self):
        feat = torch.randn(1, 3, 2, 2)
        read = torch.randn(1, 4, 3)
        out = fuse(feat, read)
        for c in range(3):
            for y in range(2):
                for x in range(2):
                    assert out[0, c, y, x] == feat[0, c, y, x]
                    assert out[0, 3 + c, y, x] == read[0, y * 2 + x, c]

    def test_mismatch(self):
        with pytest.raises(ValueError):
            fuse(torch.zeros(1, 3, 2, 2), torch.zeros(1, 5, 3))


def test_gradient_flows_to_encoder_and_bank():
    net = _net(task="reconstruction")
    items = mem.MemoryBank.random(10, 64, seed=2).items.clone().requires_grad_(True)
    x = _frames(net.config)
    loss = net(x, items).output.pow(2).mean()
    loss.backward()
    enc_grad = net.encoder.stage1[0].weight.grad
    assert enc_grad is not None and enc_grad.abs().sum() > 0
    assert items.grad is not None and items.grad.abs().sum() > 0

    # finite-difference spot check on one bank entry, in double precision
    net = net.double().eval()
    items64 = items.detach().double()
    x64 = x.double()
    cols = items64.clone().requires_grad_(True)
    net.zero_grad()
    net(x64, cols).output.pow(2).mean().backward()
    idx = torch.nonzero(cols.grad.abs() == cols.grad.abs().max())[0].tolist()
    h = 1e-5

    def f(delta):
        p = items64.clone()
        p[tuple(idx)] += delta
        with torch.no_grad():
            return float(net(x64, p).output.pow(2).mean())

    fd = (f(h) - f(-h)) / (2 * h)
    assert fd == pytest.approx(float(cols.grad[tuple(idx)]), rel=1e-3)


@pytest.mark.parametrize("mode", ["zeros", "ones", "random"])
def test_skip_ablation_probe_runs(mode):
    net = _net(task="prediction")
    res = skip_ablation_probe(net, _frames(net.config), mem.MemoryBank.random(10, 64), mode)
    assert res["mode"] == mode
    assert np.isfinite(res["mean_abs_change"]) and res["max_abs_change"] >= res["mean_abs_change"]


def test_skip_ablation_needs_skips():
    net = _net(task="reconstruction")
    with pytest.raises(ValueError):
        skip_ablation_probe(net, _frames(net.config), mem.MemoryBank.random(10, 64))
