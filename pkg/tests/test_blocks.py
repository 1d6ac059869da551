import pytest
import torch

from promptic.blocks import SwinBlock, SwinLayer, SwinStage, effective_window, pad_spatial


def _identity_init(module):
    """Zero every residual branch so each Swin layer is the identity."""
    with torch.no_grad():
        for layer in module.modules():
            if isinstance(layer, SwinLayer):
                layer.attn.proj.weight.zero_()
                layer.attn.proj.bias.zero_()
                layer.mlp.fc2.weight.zero_()
                layer.mlp.fc2.bias.zero_()


def test_effective_window_halves_until_it_fits():
    assert effective_window(32, 32, 8) == 8
    assert effective_window(4, 16, 8) == 4
    assert effective_window(2, 2, 8, min_window=4) == 4
    assert effective_window(1, 1, 8) == 2


def test_pad_spatial_reflects_and_falls_back_to_replicate():
    x = torch.arange(6.0).view(1, 2, 3, 1)
    y = pad_spatial(x, 1, 1)
    assert y.shape == (1, 3, 4, 1)
    assert y[0, 2, :3, 0].tolist() == [0.0, 1.0, 2.0]  # reflect of row 1 about row 1 is row 0
    z = pad_spatial(torch.ones(1, 1, 1, 1), 3, 3)
    assert torch.all(z == 1)


def test_plain_block_ignores_missing_prompts():
    torch.manual_seed(0)
    block = SwinBlock(8, 16, depth=2, num_heads=2, window_size=4)
    x = torch.randn(2, 8, 16, 16)
    assert block(x).shape == (2, 16, 8, 8)


def test_identity_layers_reduce_block_to_its_convolution():
    torch.manual_seed(0)
    for resample in ("down", "up"):
        block = SwinBlock(8, 12, depth=2, num_heads=2, window_size=4, resample=resample,
                          prompt_channels=5, prompt_stride=4 if resample == "down" else 2)
        _identity_init(block)
        x = torch.randn(1, 8, 16, 16)
        H = 8 if resample == "down" else 16
        prompt_map = torch.randn(1, 5, 16, 16) if resample == "down" else torch.randn(1, 5, H, H)
        out = block(x, prompt_map)
        assert torch.allclose(out, block.resample_conv(x), atol=1e-6)


def test_prompted_block_windows_carry_a_quarter_as_many_prompts():
    torch.manual_seed(0)
    block = SwinBlock(4, 8, depth=2, num_heads=2, window_size=4, prompt_channels=3, prompt_stride=4)
    counts = []

    def hook(mod, args, kwargs, out):
        counts.append((args[0].shape[1], args[1].shape[1], args[0].shape[0]))

    for layer in block.stage.layers:
        layer.attn.register_forward_hook(hook, with_kwargs=True)
    block(torch.randn(1, 4, 32, 32), torch.randn(1, 3, 32, 32))
    # 32x32 input -> 16x16 tokens -> 16 windows of 4x4 per layer
    assert counts == [(16, 4, 16), (16, 4, 16)]


def test_prompts_change_the_output():
    torch.manual_seed(0)
    block = SwinBlock(4, 8, depth=2, num_heads=2, window_size=4, prompt_channels=3, prompt_stride=4)
    with torch.no_grad():
        for layer in block.stage.layers:
            layer.attn.prompt_bias_table.fill_(1.0)
    x = torch.randn(1, 4, 32, 32)
    a = block(x, torch.randn(1, 3, 32, 32))
    b = block(x, torch.randn(1, 3, 32, 32))
    assert not torch.allclose(a, b)


def test_prompt_grid_mismatch_is_reported():
    block = SwinBlock(4, 8, depth=2, num_heads=2, window_size=4, prompt_channels=3, prompt_stride=4)
    with pytest.raises(ValueError, match="half the image grid"):
        block(torch.randn(1, 4, 32, 32), torch.randn(1, 3, 16, 16))


def test_plain_stage_rejects_prompts():
    stage = SwinStage(8, 2, 2, 4)
    with pytest.raises(ValueError):
        stage(torch.randn(1, 8, 8, 8), torch.randn(1, 8, 8, 8))


@pytest.mark.parametrize("size", [(2, 2), (4, 4), (6, 10), (12, 20), (16, 16)])
def test_layer_handles_small_and_odd_grids(size):
    torch.manual_seed(0)
    layer = SwinLayer(8, 2, window_size=8, shifted=True, prompted=True)
    H, W = size
    x = torch.randn(1, H, W, 8)
    p = torch.randn(1, H // 2, W // 2, 8)
    out = layer(x, p)
    assert out.shape == x.shape and torch.isfinite(out).all()


def test_shift_is_disabled_when_the_map_fits_one_window():
    layer = SwinLayer(8, 2, window_size=8, shifted=True)
    assert layer.geometry(8, 8) == (8, 8, 8, 0)
    assert layer.geometry(16, 24) == (8, 16, 24, 4)


def test_per_layer_prompts_give_each_layer_its_own_conv():
    stage = SwinStage(8, 3, 2, 4, prompt_channels=4, per_layer_prompts=True)
    assert len(stage.prompt_convs) == 3
    out = stage(torch.randn(1, 8, 8, 8), torch.randn(1, 4, 8, 8))
    assert out.shape == (1, 8, 8, 8)


def test_prompted_layer_needs_window_divisible_by_four():
    with pytest.raises(ValueError):
        SwinLayer(8, 2, window_size=6, prompted=True)
