import numpy as np
import pytest
import torch

from noisylab.adapters import (
    VARIANTS,
    AdapterError,
    AdaptFormer,
    LoRA,
    ReinLite,
    VPT,
    init_adapter,
    load_adapter,
    save_adapter,
    trainable_param_count,
    variant_from_dict,
    variant_to_dict,
)
from noisylab.backbone import attention_block

from conftest import TINY
from oracles import finite_difference_errors, gradcheck_model

RESIDUAL_VARIANTS = [LoRA(rank=4), AdaptFormer(bottleneck=4), ReinLite(token_count=6, rank=3)]
ALL_VARIANTS = RESIDUAL_VARIANTS + [VPT(prompt_count=2)]


@pytest.mark.parametrize("variant", RESIDUAL_VARIANTS, ids=lambda v: v.kind)
def test_fresh_adapter_is_identity(tiny_backbone, images, variant):
    stack = init_adapter(variant, TINY, seed=1)
    plain = tiny_backbone.forward_features(images)
    adapted = tiny_backbone.forward_features(images, stack)
    assert (plain - adapted).abs().max() < 1e-5


def test_fresh_vpt_changes_output(tiny_backbone, images):
    stack = init_adapter(VPT(prompt_count=2, init_std=0.5), TINY, seed=1)
    diff = (tiny_backbone.forward_features(images) - tiny_backbone.forward_features(images, stack)).abs().max()
    assert diff > 1e-4


def test_vpt_sequence_shape_law(tiny_backbone, images):
    stack = init_adapter(VPT(prompt_count=2), TINY, seed=0)
    x = tiny_backbone.patch_embed(images)
    n = x.shape[1]
    grown = stack.prepend(0, x)
    assert grown.shape[1] == n + 2
    assert torch.equal(grown[:, 0], x[:, 0])  # class token stays first
    out = attention_block(grown, tiny_backbone.blocks[0])
    assert stack.strip(0, out).shape == x.shape


def test_lora_init_factors():
    stack = init_adapter(LoRA(rank=4), TINY, seed=0)
    for layer in stack.layers:
        for t in ("q", "v"):
            assert layer[f"{t}_A"].shape == (4, 16) and layer[f"{t}_A"].abs().sum() > 0
            assert layer[f"{t}_B"].shape == (16, 4) and not layer[f"{t}_B"].any()
    assert LoRA(rank=4).scaling == 2.0
    assert LoRA(rank=4, alpha=4.0).scaling == 1.0


def test_lora_dense_oracle_one_token():
    stack = init_adapter(LoRA(rank=4), TINY, seed=0)
    rng = np.random.default_rng(0)
    with torch.no_grad():
        stack.layers[1]["v_B"].copy_(torch.from_numpy(rng.standard_normal((16, 4)).astype(np.float32)))
    x = rng.standard_normal(16)
    a = stack.layers[1]["v_A"].detach().double().numpy()
    b = stack.layers[1]["v_B"].detach().double().numpy()
    want = 2.0 * (b @ (a @ x))
    got = stack.qkv_delta(1, "v", torch.tensor(x[None, None], dtype=torch.float32))[0, 0].detach().numpy()
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)
    assert stack.qkv_delta(1, "k", torch.zeros(1, 1, 16)) is None


def test_adaptformer_zero_up_gives_zero_residual():
    stack = init_adapter(AdaptFormer(bottleneck=4), TINY, seed=0)
    x = torch.randn(2, 5, 16)
    assert not stack.residual(0, x).any()
    with torch.no_grad():
        stack.down[0].weight.zero_()
        stack.up[0].weight.normal_()
    assert not stack.residual(0, x).any()  # relu(0) = 0 and up bias is 0


def test_param_count_examples():
    lora = init_adapter(LoRA(rank=4), TINY)
    assert trainable_param_count(lora) == 512
    vpt = init_adapter(VPT(prompt_count=4), TINY)
    assert trainable_param_count(vpt) == 128


@pytest.mark.parametrize("variant", ALL_VARIANTS + [LoRA(rank=3, targets=("q", "k", "v"))], ids=lambda v: v.kind)
def test_param_count_matches_tensors(variant):
    stack = init_adapter(variant, TINY)
    assert trainable_param_count(stack) == sum(p.numel() for p in stack.parameters())


@pytest.mark.parametrize("bad", [LoRA(rank=0), LoRA(rank=16), AdaptFormer(bottleneck=16), VPT(prompt_count=0),
                                 ReinLite(token_count=16), LoRA(targets=("o",))])
def test_variant_size_errors(bad):
    with pytest.raises(AdapterError):
        init_adapter(bad, TINY)


def test_variant_dict_round_trip():
    for variant in ALL_VARIANTS:
        assert variant_from_dict(variant_to_dict(variant)) == variant
    assert set(VARIANTS) == {"lora", "adaptformer", "vpt", "rein_lite"}
    with pytest.raises(AdapterError, match="unknown adapter kind"):
        variant_from_dict({"kind": "prefix"})
    with pytest.raises(AdapterError, match="bad lora"):
        variant_from_dict({"kind": "lora", "rnak": 3})


@pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.kind)
def test_save_load_adapter(tmp_path, tiny_backbone, images, variant):
    stack = init_adapter(variant, TINY, seed=4)
    with torch.no_grad():
        for p in stack.parameters():
            p.add_(0.1)
    loaded = load_adapter(save_adapter(stack, tmp_path / "a.vitw"))
    assert loaded.variant == variant
    torch.testing.assert_close(tiny_backbone.forward_features(images, loaded),
                               tiny_backbone.forward_features(images, stack), rtol=0, atol=0)


@pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.kind)
def test_gradients_reach_every_adapter_tensor(tiny_backbone, images, variant):
    stack = init_adapter(variant, TINY, seed=2)
    with torch.no_grad():
        for p in stack.parameters():
            p.add_(0.05)
    tiny_backbone.forward_features(images, stack).square().sum().backward()
    for name, p in stack.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name
    assert all(p.grad is None for p in tiny_backbone.parameters())


@pytest.mark.parametrize("variant", [LoRA(rank=2), AdaptFormer(bottleneck=3), VPT(prompt_count=2),
                                     ReinLite(token_count=3, rank=2)], ids=lambda v: v.kind)
def test_finite_difference_gradients(variant):
    model, loss_fn = gradcheck_model(variant, seed=0)
    errors = finite_difference_errors(model, loss_fn)
    assert max(errors.values()) < 1e-3, errors
