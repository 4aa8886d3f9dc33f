import math

import numpy as np
import pytest
import torch
from scipy.special import erf

from styleflow.fusion import (
    FusionConfig,
    FusionHead,
    StyleAttention,
    export_sam_response,
    predict,
    rank_by_response,
    sam_response,
    style_attention,
)
from styleflow.errors import RangeError, ShapeError

from conftest import central_fd_check


def mini_cfg(**kw):
    base = dict(content_dim=4, content_tokens=2, style_dim=3, style_tokens=2, attn_dim=4, value_dim=4,
                tte_depth=1, tte_heads=1, tte_mlp_dim=8)
    base.update(kw)
    return FusionConfig(**base)


def mini_head(seed=0, **kw):
    torch.manual_seed(seed)
    return FusionHead(mini_cfg(**kw)).double().eval()


def inputs(rng, n=2, cfg=None):
    cfg = cfg or mini_cfg()
    emb = torch.from_numpy(rng.standard_normal((n, cfg.style_dim, 2, cfg.style_tokens // 2)))
    content = torch.from_numpy(rng.standard_normal((n, cfg.content_dim, cfg.content_tokens)))
    return emb, content


def test_two_by_two_softmax_example():
    cfg = FusionConfig(content_dim=1, content_tokens=2, style_dim=1, style_tokens=2, attn_dim=1, value_dim=1,
                       tte_heads=1)
    sam = StyleAttention(cfg).double()
    with torch.no_grad():
        for lin in (sam.phi_q, sam.phi_k):
            lin.weight.fill_(1.0)
            lin.bias.zero_()
    queries = torch.tensor([[[1.0], [0.0]]], dtype=torch.float64)
    keys = torch.tensor([[[0.0], [math.log(3.0)]]], dtype=torch.float64)
    _, w, _ = sam(keys, queries)
    np.testing.assert_allclose(w[0].detach().numpy(), [[0.25, 0.75], [0.5, 0.5]], atol=1e-9)


def test_equal_logits_give_uniform_rows(rng):
    head = mini_head()
    with torch.no_grad():
        head.sam.phi_k.weight.zero_()
    w, _ = style_attention(*inputs(rng), head)
    torch.testing.assert_close(w, torch.full_like(w, 0.5), rtol=0, atol=1e-12)


def test_rows_sum_to_one_over_100_seeds():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        head = mini_head(seed)
        w, out = style_attention(*inputs(rng), head)
        assert torch.allclose(w.sum(-1), torch.ones(w.shape[:-1], dtype=w.dtype), atol=1e-6)
        assert out.shape == (2, 4, 2)


def test_softmax_shift_invariance(rng):
    head = mini_head()
    emb, content = inputs(rng)
    w1, _ = style_attention(emb, content, head)
    with torch.no_grad():
        q = head.sam.phi_q(content.transpose(1, 2))
        k = head.sam.phi_k(emb.flatten(2).transpose(1, 2))
    logits = q @ k.transpose(1, 2) / math.sqrt(head.cfg.attn_dim)
    shifted = (logits + 7.3).softmax(-1)
    torch.testing.assert_close(shifted, w1, rtol=0, atol=1e-6)


def test_residual_bypass_is_bit_exact(rng):
    head = mini_head()
    with torch.no_grad():
        head.sam.phi.weight.zero_()
        head.sam.phi.bias.zero_()
    plain = FusionHead(mini_cfg(use_sam=False)).double().eval()
    plain.load_state_dict(head.state_dict())  # the no-SAM head never calls its sam module
    emb, content = inputs(rng)
    assert torch.equal(predict(emb, content, head), predict(emb, content, plain))


def test_zero_classifier_gives_half(rng):
    head = mini_head()
    with torch.no_grad():
        head.f_cls.weight.zero_()
        head.f_cls.bias.zero_()
    p = predict(*inputs(rng), head)
    assert torch.equal(p, torch.full_like(p, 0.5))


def _layer_norm(x, ln):
    g, b = ln.weight.detach().numpy(), ln.bias.detach().numpy()
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + ln.eps) * g + b


def _lin(x, layer):
    return x @ layer.weight.detach().numpy().T + layer.bias.detach().numpy()


def _softmax(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def test_miniature_head_matches_hand_oracle(rng):
    head = mini_head(3)
    emb, content = inputs(rng, n=1)
    e = emb[0].numpy()  # (3, 2, 1)
    c = content[0].numpy().T  # tokens (2, 4)
    style_tokens = np.stack([e[:, b, l] for b in range(2) for l in range(1)])  # (2, 3)
    sam = head.sam
    q, k, v = _lin(c, sam.phi_q), _lin(style_tokens, sam.phi_k), _lin(style_tokens, sam.phi_v)
    w = _softmax(q @ k.T / math.sqrt(4))
    x = c + _lin(w @ v, sam.phi)
    tte = head.tte
    x = x + tte.pos_embed.detach().numpy()[0]
    blk = tte.blocks[0]
    h = _layer_norm(x, blk.norm1)
    qkv = _lin(h, blk.attn.qkv)
    qq, kk, vv = qkv[:, :4], qkv[:, 4:8], qkv[:, 8:]
    x = x + _lin(_softmax(qq @ kk.T / 2.0) @ vv, blk.attn.proj)
    h = _layer_norm(x, blk.norm2)
    u = _lin(h, blk.mlp[0])
    u = 0.5 * u * (1 + erf(u / math.sqrt(2)))
    x = x + _lin(u, blk.mlp[2])
    x = _layer_norm(x, tte.norm)
    logit = _lin(x.mean(0), head.f_cls)
    expect = 1 / (1 + np.exp(-logit))
    got = predict(emb, content, head).detach().numpy()
    np.testing.assert_allclose(got, expect, atol=1e-6)


def test_predict_gradients_match_central_differences(rng):
    head = mini_head(5)
    emb, content = inputs(rng)
    central_fd_check(lambda: predict(emb, content, head).sum(), list(head.parameters()), points=60)


def test_shape_errors(rng):
    head = mini_head()
    emb, content = inputs(rng)
    with pytest.raises(ShapeError):
        head(emb, content[:, :3])
    with pytest.raises(ShapeError):
        head(emb[:, :2], content)


def test_full_scale_attention_shapes():
    head = FusionHead(FusionConfig(tte_depth=1, tte_mlp_dim=64)).eval()
    with torch.no_grad():
        w, out = style_attention(torch.randn(1, 4096, 2, 2), torch.randn(1, 1024, 16), head)
    assert tuple(w.shape) == (1, 16, 4)
    assert tuple(out.shape) == (1, 1024, 16)


def test_config_validation():
    with pytest.raises(RangeError):
        FusionConfig(pool="max")
    with pytest.raises(RangeError):
        FusionConfig(content_dim=10, tte_heads=3)


# ---- SAM response -------------------------------------------------------------

def test_uniform_weights_unit_values_give_one():
    w = torch.full((1, 16, 4), 0.25, dtype=torch.float64)
    v = torch.nn.functional.normalize(torch.randn(1, 4, 8, dtype=torch.float64), dim=-1)
    assert sam_response(w, v).item() == pytest.approx(1.0, abs=1e-12)


def test_doubled_values_double_response(rng):
    w = torch.from_numpy(rng.dirichlet(np.ones(4), size=(2, 16)))
    v = torch.from_numpy(rng.standard_normal((2, 4, 8)))
    r = sam_response(w, v)
    r2 = sam_response(w, 2 * v)
    torch.testing.assert_close(r2, 2 * r, rtol=1e-12, atol=0)


def test_ranking_matches_loop_oracle(rng):
    w = rng.dirichlet(np.ones(4), size=(10, 16))
    v = rng.standard_normal((10, 4, 8))
    got = sam_response(torch.from_numpy(w), torch.from_numpy(v)).numpy()
    oracle = []
    for i in range(10):
        total = 0.0
        for qi in range(16):
            for ki in range(4):
                total += w[i, qi, ki] * math.sqrt(sum(x * x for x in v[i, ki]))
        oracle.append(total / 16)
    np.testing.assert_allclose(got, oracle, rtol=1e-12)
    assert rank_by_response(got) == sorted(range(10), key=lambda i: -oracle[i])


def test_export_sam_csv(tmp_path):
    path = export_sam_response([("a@0", 0.5, 1.25), ("b@0", 0.25, 2.0)], tmp_path / "s.csv")
    lines = path.read_text().splitlines()
    assert lines == ["clip_id,score,response", "a@0,0.5,1.25", "b@0,0.25,2.0"]
