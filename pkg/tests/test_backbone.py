import pytest
import torch

from hilogcd.backbone import ShapeError, TextEncoder, TinyViT, VitConfig


@pytest.fixture
def vit():
    torch.manual_seed(0)
    return TinyViT(VitConfig(image_size=16, patch_size=4, embed_dim=32, depth=3, heads=4)).double()


def test_feature_bundle_shapes(vit):
    x = torch.rand(5, 3, 16, 16)
    fb = vit(x)
    assert fb.patch_embeddings.shape == (5, 16, 32)
    assert len(fb.layer_cls) == 4
    assert all(c.shape == (5, 32) for c in fb.layer_cls)
    assert fb.mid_patch_feats.shape == (5, 16, 32)
    assert torch.allclose(fb.last_attn_cls.sum(-1), torch.ones(5))
    assert torch.all(fb.last_attn_cls >= 0)


def test_wrong_image_shape(vit):
    with pytest.raises(ShapeError):
        vit(torch.rand(2, 3, 20, 20))
    with pytest.raises(ShapeError):
        vit(torch.rand(2, 1, 16, 16))


def test_config_validation():
    with pytest.raises(ShapeError):
        VitConfig(image_size=30, patch_size=4)
    with pytest.raises(ShapeError):
        VitConfig(embed_dim=30, heads=4)
    with pytest.raises(ShapeError):
        VitConfig(depth=2, dom_tap=3)


def test_patchify_orders_patches_row_major(vit):
    x = torch.zeros(1, 3, 16, 16)
    x[0, :, 4:8, 8:12] = 1.0      # patch (row 1, col 2) -> index 6
    pix = vit.patch_pixels(x)
    assert pix.shape == (1, 16, 48)
    hot = torch.nonzero(pix[0].abs().sum(-1)).flatten().tolist()
    assert hot == [6]


def test_encode_to_layer_matches_forward(vit):
    x = torch.rand(3, 3, 16, 16)
    fb = vit(x)
    toks = vit.with_cls(vit.patchify(x))
    mid = vit.encode_to_layer(toks, 1)
    assert torch.allclose(mid[:, 0], fb.layer_cls[1])
    full = vit.encode_to_layer(mid, 3, start=1)
    assert torch.allclose(vit.norm(full[:, 0]), fb.layer_cls[3])
    with pytest.raises(ValueError):
        vit.encode_to_layer(toks, 4)


def test_forward_tokens_equals_forward(vit):
    x = torch.rand(2, 3, 16, 16)
    a = vit(x).layer_cls[-1]
    b = vit.forward_tokens(vit.patchify(x)).layer_cls[-1]
    assert torch.equal(a, b)
    assert torch.equal(vit.cls_attention(x), vit.cls_attention(vit.patchify(x)))


def test_text_encoder_frozen_and_deterministic():
    enc = TextEncoder(token_dim=16, out_dim=16, max_len=8).double()
    assert len(list(enc.parameters())) == 0
    seq = torch.randn(3, 5, 16)
    assert torch.equal(enc(seq), enc(seq))
    assert enc(seq).shape == (3, 16)
    other = TextEncoder(token_dim=16, out_dim=16, max_len=8).double()
    assert all(torch.equal(a, b) for a, b in zip(enc.weights().values(), other.weights().values()))
    with pytest.raises(ShapeError):
        enc(torch.randn(0, 16))
    with pytest.raises(ShapeError):
        enc(torch.randn(9, 16))


def test_text_encoder_gradients_reach_tokens_only():
    enc = TextEncoder(token_dim=16, out_dim=16, max_len=8).double()
    seq = torch.randn(4, 16, requires_grad=True)
    enc(seq).sum().backward()
    assert seq.grad is not None and seq.grad.abs().sum() > 0
