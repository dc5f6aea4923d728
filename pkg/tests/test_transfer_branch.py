import numpy as np
import pytest
import torch

from posetransfer.errors import ConfigError, DimensionError
from posetransfer.transfer_branch import (
    PoseTransferBranch,
    TransferBlock,
    TransferBranchConfig,
)

from _helpers import fd_vs_analytic, rel_err, sample_coords

TINY = TransferBranchConfig(base_channels=4, num_downsamples=3, num_blocks=2)


def make_inputs(b=1, h=16, w=16, dtype=torch.float32, seed=0):
    g = torch.Generator().manual_seed(seed)
    img = torch.rand(b, 3, h, w, generator=g, dtype=dtype) * 2 - 1
    ps = torch.rand(b, 18, h, w, generator=g, dtype=dtype)
    pt = torch.rand(b, 18, h, w, generator=g, dtype=dtype)
    return img, ps, pt


def test_forward_shapes_and_ranges():
    torch.manual_seed(0)
    net = PoseTransferBranch(TINY)
    img, ps, pt = make_inputs(b=2, h=24, w=16)
    coarse, guidance = net(img, ps, pt)
    assert coarse.shape == (2, 3, 24, 16)
    assert guidance.shape == (2, TINY.guidance_channels, 3, 2)
    assert coarse.min() >= -1.0 and coarse.max() <= 1.0


def test_guidance_channels_follow_config():
    assert TransferBranchConfig(base_channels=64).guidance_channels == 256
    assert TransferBranchConfig(base_channels=16, num_downsamples=2).guidance_channels == 32


def test_rejects_indivisible_size():
    net = PoseTransferBranch(TINY)
    img, ps, pt = make_inputs(h=20, w=16)  # 20 % 8 != 0
    with pytest.raises(DimensionError):
        net(img, ps, pt)


def test_rejects_wrong_pose_channels():
    net = PoseTransferBranch(TINY)
    img, ps, pt = make_inputs()
    with pytest.raises(ConfigError):
        net(img, ps[:, :17], pt)


def test_rejects_mismatched_pose_size():
    net = PoseTransferBranch(TINY)
    img, ps, pt = make_inputs()
    with pytest.raises(DimensionError):
        net(img, ps, pt[:, :, :8, :8])


def test_config_validation():
    with pytest.raises(ConfigError):
        PoseTransferBranch(TransferBranchConfig(num_blocks=0))


def test_zeroed_pose_stream_gives_half_gate():
    torch.manual_seed(1)
    block = TransferBlock(channels=6)
    with torch.no_grad():
        for p in block.pose_stack.parameters():
            p.zero_()
        for p in block.gate_conv.parameters():
            p.zero_()
    img = torch.randn(1, 6, 8, 8)
    out_img, out_pose = block(img, torch.zeros(1, 6, 8, 8))
    assert torch.equal(out_pose, torch.zeros_like(out_pose))
    expected = img + 0.5 * block.image_stack(img)
    assert torch.allclose(out_img, expected, atol=0)


def test_deterministic_given_seed():
    torch.manual_seed(7)
    a = PoseTransferBranch(TINY)
    torch.manual_seed(7)
    b = PoseTransferBranch(TINY)
    img, ps, pt = make_inputs(seed=3)
    ca, _ = a(img, ps, pt)
    cb, _ = b(img, ps, pt)
    assert torch.equal(ca, cb)


def test_guidance_loss_reaches_encoders_and_blocks_not_decoder():
    # a loss on the guidance map must backprop into every pre-decoder block
    torch.manual_seed(2)
    net = PoseTransferBranch(TINY).double()
    img, ps, pt = make_inputs(dtype=torch.float64, seed=4)
    _, guidance = net(img, ps, pt)
    guidance.pow(2).mean().backward()
    for name, p in net.named_parameters():
        if name.startswith("decoder"):
            assert p.grad is None or p.grad.abs().sum() == 0, name
        else:
            assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_guidance_gradients_match_finite_differences():
    torch.manual_seed(3)
    rng = np.random.default_rng(0)
    net = PoseTransferBranch(TINY).double()
    img, ps, pt = make_inputs(dtype=torch.float64, seed=5)

    def loss():
        _, g = net(img, ps, pt)
        return g.pow(2).mean()

    # conv biases feeding straight into InstanceNorm are cancelled by the
    # mean subtraction, so only weights carry useful gradient here
    for pname in ("image_encoder.0.0.weight", "pose_encoder.1.0.weight",
                  "blocks.1.gate_conv.weight", "blocks.0.image_stack.0.weight"):
        param = dict(net.named_parameters())[pname]
        coords = sample_coords(rng, param.shape, 3)
        an, fd = fd_vs_analytic(loss, param, coords)
        assert rel_err(an, fd) < 1e-3, pname
