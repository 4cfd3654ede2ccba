import numpy as np
import pytest
import torch

from vesselseg.data import ValidationError
from vesselseg.model import (BaseBlock, BottleneckFusion, ChannelAttention,
                             ConnectBlock, DualEncoderNet, ModelConfig,
                             ResInceptionBlock, SeqIncrementalBlock, SkipFusion,
                             SpatialAttention, StackedGeneralizationBlock,
                             load_checkpoint, parameter_payload_mb,
                             save_checkpoint)

CFG = ModelConfig()


def finite_diff_grad(f, x, step=1e-4):
    """Central-difference gradient of scalar f wrt tensor x (double precision)."""
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


@pytest.mark.parametrize("block_cls,extra", [
    (BaseBlock, {}), (SeqIncrementalBlock, {}), (StackedGeneralizationBlock, {}),
    (ResInceptionBlock, {}),
])
def test_blocks_preserve_spatial_dims(block_cls, extra):
    block = block_cls(3, 16, CFG)
    block.eval()
    out = block(torch.rand(1, 3, 32, 32))
    assert out.shape == (1, 16, 32, 32)


def test_connect_block_shape():
    block = ConnectBlock(8, CFG)
    block.eval()
    assert block(torch.rand(1, 8, 16, 16)).shape == (1, 8, 16, 16)


def test_blocks_eval_deterministic():
    block = BaseBlock(3, 16, CFG)
    block.eval()
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(block(x), block(x))


def test_base_block_zero_weights_gives_zero_output():
    block = BaseBlock(3, 4, ModelConfig(dropblock_rate=0.0))
    with torch.no_grad():
        for p in block.parameters():
            p.zero_()
        bn = block.body[2]
        bn.weight.fill_(1.0)
        bn.running_mean.zero_()
        bn.running_var.fill_(1.0)
    block.eval()
    out = block(torch.rand(1, 3, 8, 8))
    assert torch.equal(out, torch.zeros_like(out))


def test_channel_attention_shape_and_zero_mlp():
    att = ChannelAttention(64, reduction=8)
    f = torch.rand(1, 64, 16, 16)
    assert att(f).shape == f.shape
    with torch.no_grad():
        for p in att.parameters():
            p.zero_()
    assert torch.allclose(att(f), 0.5 * f)


def test_channel_attention_constant_input_pools_agree():
    att = ChannelAttention(8, reduction=4)
    f = torch.arange(8, dtype=torch.float32).view(1, 8, 1, 1).expand(1, 8, 6, 6).contiguous()
    avg = torch.nn.functional.adaptive_avg_pool2d(f, 1)
    expected = f * torch.sigmoid(2 * att.mlp(avg))
    assert torch.allclose(att(f), expected, atol=1e-6)


def test_spatial_attention_shape_zero_conv_and_parity():
    att = SpatialAttention(7)
    f = torch.rand(1, 64, 16, 16)
    assert att(f).shape == f.shape
    with torch.no_grad():
        att.conv.weight.zero_()
    assert torch.allclose(att(f), 0.5 * f)
    with pytest.raises(ValidationError):
        SpatialAttention(4)


def test_bottleneck_fusion_shapes_and_nonnegativity():
    fuse = BottleneckFusion(64, 128, CFG)
    fuse.eval()
    fx, fy = torch.rand(1, 64, 8, 8), torch.rand(1, 64, 8, 8)
    out = fuse(fx, fy)
    assert out.shape == (1, 128, 8, 8)
    assert (out >= 0).all()
    with pytest.raises(ValidationError):
        fuse(fx, torch.rand(1, 64, 4, 4))


def test_bottleneck_fusion_gradient_matches_finite_differences():
    torch.manual_seed(0)
    fuse = BottleneckFusion(4, 4, ModelConfig(attention_reduction=2,
                                              spatial_kernel=3)).double()
    fuse.eval()
    fx = torch.rand(1, 4, 4, 4, dtype=torch.float64)
    fy = torch.rand(1, 4, 4, 4, dtype=torch.float64)
    fx_var = fx.clone().requires_grad_(True)
    fuse(fx_var, fy).mean().backward()
    numeric = finite_diff_grad(lambda: fuse(fx, fy).mean().item(), fx)
    denom = numeric.abs().max().item()
    assert (fx_var.grad - numeric).abs().max().item() / denom < 1e-3


def test_skip_fusion_shape_contract_and_validation():
    skip = SkipFusion(enc_ch=64, dec_in_ch=128, out_ch=64)
    skip.eval()
    lx = torch.rand(1, 64, 16, 16)
    ly = torch.rand(1, 64, 16, 16)
    hx = torch.rand(1, 128, 8, 8)
    assert skip(lx, ly, hx).shape == (1, 64, 16, 16)
    with pytest.raises(ValidationError):
        skip(lx, ly, torch.rand(1, 128, 16, 16))
    with pytest.raises(ValidationError):
        skip(lx, torch.rand(1, 64, 8, 8), hx)


def test_skip_fusion_zeroed_attention_path():
    skip = SkipFusion(enc_ch=4, dec_in_ch=8, out_ch=4)
    skip.eval()
    with torch.no_grad():
        skip.att_pre.weight.zero_(), skip.att_pre.bias.zero_()
        skip.att_post.weight.zero_(), skip.att_post.bias.zero_()
    lx, ly = torch.rand(1, 4, 8, 8), torch.rand(1, 4, 8, 8)
    hx = torch.rand(1, 8, 4, 4)
    cat = torch.cat([lx, ly], dim=1)
    fused = skip.refine(skip.dilated_path(cat) + skip.local_path(cat))
    high = skip.project_high(torch.nn.functional.interpolate(
        hx, scale_factor=2, mode="bilinear", align_corners=False))
    expected = skip.merge(torch.cat([high, 0.5 * fused], dim=1))
    assert torch.allclose(skip(lx, ly, hx), expected, atol=1e-6)


def test_skip_fusion_gradient_matches_finite_differences():
    torch.manual_seed(1)
    skip = SkipFusion(enc_ch=3, dec_in_ch=4, out_ch=3).double()
    skip.eval()
    lx = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    ly = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    hx = torch.rand(1, 4, 2, 2, dtype=torch.float64)
    lx_var = lx.clone().requires_grad_(True)
    skip(lx_var, ly, hx).mean().backward()
    numeric = finite_diff_grad(lambda: skip(lx, ly, hx).mean().item(), lx)
    denom = numeric.abs().max().item()
    assert (lx_var.grad - numeric).abs().max().item() / denom < 1e-3


@pytest.mark.parametrize("size", [16, 32, 64])
def test_forward_shape_sweep(size):
    model = DualEncoderNet()
    model.eval()
    out = model(torch.rand(1, 3, size, size), torch.rand(1, 1, size, size))
    assert out.shape == (1, 1, size, size)
    assert (out > 0).all() and (out < 1).all()


def test_forward_validations():
    model = DualEncoderNet()
    model.eval()
    with pytest.raises(ValidationError, match="divisible by 8"):
        model(torch.rand(1, 3, 30, 30), torch.rand(1, 1, 30, 30))
    with pytest.raises(ValidationError):
        model(torch.rand(1, 3, 32, 32), torch.rand(1, 1, 64, 64))


def test_eval_determinism_bit_exact():
    model = DualEncoderNet()
    model.eval()
    raw, inv = torch.rand(1, 3, 32, 32), torch.rand(1, 1, 32, 32)
    assert torch.equal(model(raw, inv), model(raw, inv))


def test_training_mode_stochastic():
    model = DualEncoderNet()
    model.train()
    raw, inv = torch.rand(1, 3, 64, 64), torch.rand(1, 1, 64, 64)
    torch.manual_seed(0)
    a = model(raw, inv)
    torch.manual_seed(1)
    b = model(raw, inv)
    assert (a - b).abs().max() > 0


def test_parameter_payload_within_budget():
    mb = parameter_payload_mb(DualEncoderNet())
    assert 2.0 <= mb <= 4.0


def test_ablation_variants_run():
    for flags in (dict(use_fff=False, use_frf=False, use_resincept=False),
                  dict(use_fff=True, use_frf=False, use_resincept=True)):
        model = DualEncoderNet(ModelConfig(**flags))
        model.eval()
        out = model(torch.rand(1, 3, 32, 32), torch.rand(1, 1, 32, 32))
        assert out.shape == (1, 1, 32, 32)


def test_checkpoint_roundtrip_and_mismatch(tmp_path):
    model = DualEncoderNet()
    model.eval()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, {"note": "test"})
    loaded, manifest = load_checkpoint(path)
    assert manifest["note"] == "test"
    raw, inv = torch.rand(1, 3, 32, 32), torch.rand(1, 1, 32, 32)
    assert torch.equal(model(raw, inv), loaded(raw, inv))
    with pytest.raises(ValidationError):
        load_checkpoint(path, ModelConfig(bottleneck_channels=64))
    bad = tmp_path / "bad.ckpt"
    torch.save({"format": "other"}, bad)
    with pytest.raises(ValidationError):
        load_checkpoint(bad)
