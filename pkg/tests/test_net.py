import numpy as np
import pytest
import torch

from wxdiff.net import DenoiserNet, NetConfig, init_net, param_count

CFG = NetConfig()


def test_conditioning_slices_zero_at_init():
    net = init_net(CFG, seed=1)
    C = CFG.latent_channels
    assert float(net.in_conv.weight[:, C:, ...].abs().sum()) == 0.0
    assert float(net.in_conv.weight[:, :C, ...].abs().sum()) > 0.0


def test_biases_zero_at_init():
    net = init_net(CFG, seed=1)
    for name, p in net.named_parameters():
        if name.endswith("bias"):
            assert float(p.abs().sum()) == 0.0


def test_same_seed_identical_weights():
    a = init_net(CFG, seed=42)
    b = init_net(CFG, seed=42)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    c = init_net(CFG, seed=43)
    assert any(not torch.equal(x, y) for x, y in zip(a.parameters(), c.parameters()))


def test_init_invariant_to_conditioning():
    net = init_net(CFG, seed=3)
    noisy = torch.randn(1, CFG.latent_channels, 4, 16, 16,
                        generator=torch.Generator().manual_seed(0))
    outs = []
    for seed in (1, 2):
        g = torch.Generator().manual_seed(seed)
        cond = torch.randn(1, CFG.latent_channels, 4, 16, 16, generator=g)
        cmap = torch.rand(1, 6, 4, 16, 16, generator=g)
        x = torch.cat([noisy, cond, cmap], dim=1)
        outs.append(net(x, torch.tensor([0.2])))
    assert float((outs[0] - outs[1]).abs().max()) <= 1e-6


def test_forward_shapes():
    net = init_net(CFG, seed=0)
    for L, H, W in ((1, 16, 16), (8, 16, 16), (4, 32, 32)):
        x = torch.randn(2, CFG.in_channels, L, H, W)
        y = net(x, torch.tensor([0.1, 0.3]))
        assert tuple(y.shape) == (2, CFG.out_channels, L, H, W)


def test_forward_rejects_bad_shapes():
    net = init_net(CFG, seed=0)
    with pytest.raises(ValueError, match="input channels"):
        net(torch.randn(1, 7, 2, 16, 16), torch.tensor([0.0]))
    with pytest.raises(ValueError, match="divisible"):
        net(torch.randn(1, CFG.in_channels, 2, 17, 17), torch.tensor([0.0]))


def test_param_count_frozen():
    # pure function of the config; regression-pinned
    assert param_count(DenoiserNet(CFG)) == 368044


def test_temporally_uniform_input_is_fixed_point():
    net = init_net(CFG, seed=9)
    frame = torch.randn(1, CFG.in_channels, 1, 16, 16,
                        generator=torch.Generator().manual_seed(5))
    x = frame.repeat(1, 1, 6, 1, 1)
    y = net(x, torch.tensor([0.1]))
    perm = torch.randperm(6, generator=torch.Generator().manual_seed(1))
    y_perm = net(x[:, :, perm], torch.tensor([0.1]))
    assert torch.allclose(y, y_perm, atol=1e-6)


def test_bounded_inputs_finite_outputs():
    net = init_net(CFG, seed=2)
    for scale in (1.0, 10.0):
        x = torch.empty(1, CFG.in_channels, 3, 16, 16).uniform_(-scale, scale)
        y = net(x, torch.tensor([2.0]))
        assert torch.isfinite(y).all()


def test_l1_temporal_degenerates_gracefully():
    net = init_net(CFG, seed=4)
    x = torch.randn(2, CFG.in_channels, 1, 16, 16)
    y = net(x, torch.tensor([0.0, 0.5]))
    assert torch.isfinite(y).all()
    assert y.shape[2] == 1
