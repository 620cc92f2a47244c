"""Tests for the dual-path block and the U-shaped network assembly."""

import numpy as np
import pytest

from dehaze import network as N
from dehaze import tensor as T
from dehaze.guidance import AggregationWeights
from dehaze.checkpoint import FormatError
from dehaze.encoder import EncoderOutputs
from dehaze.errors import ConfigError
from dehaze.tensor import ShapeError, Tensor

from oracles import gradcheck

TINY = N.ModelConfig(widths=(4, 6, 8), blocks=(1, 1, 1), window_size=4, state_dim=4,
                     patch=8, d_s=8)
TINY_ADD = N.ModelConfig(widths=(4, 6, 8), blocks=(1, 1, 1), window_size=4, state_dim=4,
                         patch=8, d_s=8, fusion="add")


def fake_outputs(rng, b, hp, wp, d=6):
    grid = rng.normal(size=(b, hp, wp, d)).astype(np.float32)
    text = rng.normal(size=(2, d)).astype(np.float32)
    return EncoderOutputs(image_embed=grid, text_embed=text, logit_scale=10.0)


# -- config ------------------------------------------------------------------------


def test_config_defaults_and_pad_multiple():
    cfg = N.ModelConfig()
    assert cfg.widths == (16, 32, 64) and cfg.blocks == (2, 2, 2)
    assert cfg.pad_multiple == 32
    assert TINY.pad_multiple == 16


def test_config_validation():
    with pytest.raises(ConfigError):
        N.ModelConfig(widths=(8, 16), blocks=(1, 1, 1))
    with pytest.raises(ConfigError):
        N.ModelConfig(widths=(), blocks=())
    with pytest.raises(ConfigError):
        N.ModelConfig(widths=(8, 0), blocks=(1, 1))
    with pytest.raises(ConfigError):
        N.ModelConfig(fusion="mean")
    with pytest.raises(ConfigError):
        N.ModelConfig(window_size=0)


def test_config_json_round_trip(tmp_path):
    cfg = N.ModelConfig(widths=(8, 16, 32), blocks=(1, 2, 1), window_size=4,
                        fusion="add", normalized_weights=False)
    cfg.to_json(tmp_path / "cfg.json")
    assert N.ModelConfig.from_json(tmp_path / "cfg.json") == cfg


def test_config_json_rejects_unknown_fields(tmp_path):
    (tmp_path / "cfg.json").write_text('{"widths": [4, 8], "blocks": [1, 1], "depth": 3}')
    with pytest.raises(ConfigError):
        N.ModelConfig.from_json(tmp_path / "cfg.json")


def test_pad_to_multiple():
    x = np.zeros((1, 30, 47, 3), np.float32)
    padded, (h, w) = N.pad_to_multiple(x, 16)
    assert padded.shape == (1, 32, 48, 3) and (h, w) == (30, 47)
    same, _ = N.pad_to_multiple(np.zeros((1, 32, 32, 3), np.float32), 16)
    assert same.shape == (1, 32, 32, 3)
    with pytest.raises(ShapeError):
        N.pad_to_multiple(np.zeros((32, 32, 3), np.float32), 16)


# -- block -------------------------------------------------------------------------


def _const_weights(b, h, w, short=0.5, dtype=np.float64):
    return AggregationWeights(
        w_short=Tensor(np.full((b, h, w), short, dtype)),
        w_long=Tensor(np.full((b, h, w), 1.0 - short, dtype)))


def test_block_zero_output_projections_is_identity():
    rng = np.random.default_rng(0)
    p = N.BlockParams.init(rng, channels=4, state_dim=4)
    p.attn.w_v.data[:] = 0.0
    p.mamba.w_out.data[:] = 0.0
    p.ffn_w2.data[:] = 0.0
    x = Tensor(rng.uniform(size=(2, 8, 8, 4)).astype(np.float32))
    y = N.dual_path_block(x, p, _const_weights(2, 8, 8, dtype=np.float32), TINY)
    assert np.array_equal(y.data, x.data)


def test_block_short_weight_one_equals_attention_only():
    rng = np.random.default_rng(1)
    p = N.BlockParams.init(rng, channels=4, state_dim=4)
    x = Tensor(rng.uniform(size=(1, 8, 8, 4)).astype(np.float32))
    w = AggregationWeights(w_short=Tensor(np.ones((1, 8, 8), np.float32)),
                           w_long=Tensor(np.zeros((1, 8, 8), np.float32)))
    got = N.dual_path_block(x, p, w, TINY)

    from dehaze.attention import WindowConfig, window_attention
    normed = T.layer_norm(x, p.norm1_gamma, p.norm1_beta)
    y = T.add(x, window_attention(normed, WindowConfig(4, 4), p.attn))
    normed2 = T.layer_norm(y, p.norm2_gamma, p.norm2_beta)
    want = T.add(y, T.linear(T.silu(T.linear(normed2, p.ffn_w1, p.ffn_b1)),
                             p.ffn_w2, p.ffn_b2))
    assert np.array_equal(got.data, want.data)


def test_block_requires_weights_for_guided_fusion():
    p = N.BlockParams.init(np.random.default_rng(2), channels=4, state_dim=4)
    x = Tensor(np.zeros((1, 4, 4, 4), np.float32))
    with pytest.raises(ConfigError):
        N.dual_path_block(x, p, None, TINY)
    out = N.dual_path_block(x, p, None, TINY_ADD)  # add fusion needs no weights
    assert out.shape == x.shape


def _float64_block(rng, channels, state_dim):
    p = N.BlockParams.init(rng, channels, state_dim)
    for name, t in p.named("b").items():
        t.data = t.data.astype(np.float64)
        t.requires_grad = False
    return p


def test_block_gradcheck_tiny_dims():
    rng = np.random.default_rng(3)
    p = _float64_block(rng, channels=4, state_dim=4)
    w = _const_weights(1, 8, 8, short=0.3)
    cfg = N.ModelConfig(widths=(4, 4, 4), blocks=(1, 1, 1), window_size=4,
                        state_dim=4, d_s=8)
    proj = rng.normal(size=(4, 1))

    def build(x):
        return T.sum_(T.matmul(N.dual_path_block(x, p, w, cfg), Tensor(proj)))

    x0 = rng.uniform(0.1, 0.9, (1, 8, 8, 4))
    assert gradcheck(build, [x0], sample=40, rng=np.random.default_rng(0)) < 1e-4


def test_down_up_shape_contract_and_gradcheck():
    rng = np.random.default_rng(4)
    down_w = rng.normal(size=(3, 3, 4, 8)) / 6.0
    up_w = rng.normal(size=(3, 3, 4, 8)) / 6.0

    x = Tensor(rng.normal(size=(1, 16, 16, 4)))
    down = T.conv2d(x, Tensor(down_w), stride=2)
    assert down.shape == (1, 8, 8, 8)
    up = T.conv2d_transpose(down, Tensor(up_w), stride=2)
    assert up.shape == (1, 16, 16, 4)

    def build_down(xa, wa):
        return T.mean_(T.mul(T.conv2d(xa, wa, stride=2), T.conv2d(xa, wa, stride=2)))

    def build_up(xa, wa):
        return T.mean_(T.absolute(T.conv2d_transpose(xa, wa, stride=2)))

    r = np.random.default_rng(0)
    assert gradcheck(build_down, [rng.normal(size=(1, 8, 8, 3)),
                                  rng.normal(size=(3, 3, 3, 5)) / 5], sample=30, rng=r) < 1e-5
    assert gradcheck(build_up, [rng.normal(size=(1, 4, 4, 5)),
                                rng.normal(size=(3, 3, 3, 5)) / 5], sample=30, rng=r) < 1e-5


# -- network -----------------------------------------------------------------------


def test_untrained_network_is_identity():
    # zero-initialized output head + global residual
    net = N.DehazeNet(TINY, np.random.default_rng(5), d_image=6)
    rng = np.random.default_rng(6)
    img = rng.uniform(size=(1, 16, 16, 3)).astype(np.float32)
    out = net.forward(img, fake_outputs(rng, 1, 2, 2), train=True)
    assert np.array_equal(out.data, img)


def test_identity_survives_padding_and_unpadding():
    net = N.DehazeNet(TINY_ADD, np.random.default_rng(7))
    rng = np.random.default_rng(8)
    img = rng.uniform(size=(2, 13, 21, 3)).astype(np.float32)
    out = net.forward(img, train=True)
    assert out.shape == (2, 13, 21, 3)
    assert np.array_equal(out.data, img)


def test_forward_shape_any_size_with_guidance():
    net = N.DehazeNet(TINY, np.random.default_rng(9), d_image=6)
    rng = np.random.default_rng(10)
    img = rng.uniform(size=(1, 20, 35, 3)).astype(np.float32)  # pads to 32x48
    out = net.forward(img, fake_outputs(rng, 1, 4, 6))
    assert out.shape == (1, 20, 35, 3)
    assert (out.data >= 0).all() and (out.data <= 1).all()


def test_forward_rejects_mismatched_grid():
    net = N.DehazeNet(TINY, np.random.default_rng(11), d_image=6)
    rng = np.random.default_rng(12)
    img = rng.uniform(size=(1, 20, 35, 3)).astype(np.float32)
    with pytest.raises(ConfigError, match="padded"):
        net.forward(img, fake_outputs(rng, 1, 3, 5))  # grid for the unpadded size


def test_forward_requires_outputs_for_guided_fusion():
    net = N.DehazeNet(TINY, np.random.default_rng(13), d_image=6)
    with pytest.raises(ConfigError):
        net.forward(np.zeros((1, 16, 16, 3), np.float32))


def test_clamp_applies_only_at_inference():
    net = N.DehazeNet(TINY_ADD, np.random.default_rng(14))
    net.out_w.data[:] = np.random.default_rng(15).normal(size=net.out_w.shape) * 5
    img = np.random.default_rng(16).uniform(size=(1, 16, 16, 3)).astype(np.float32)
    raw = net.forward(img, train=True).data
    clamped = net.forward(img, train=False).data
    assert raw.min() < 0 or raw.max() > 1
    assert clamped.min() >= 0 and clamped.max() <= 1
    assert np.array_equal(clamped, np.clip(raw, 0, 1))


def test_same_seed_same_network():
    rng1 = np.random.default_rng(17)
    rng2 = np.random.default_rng(17)
    a = N.DehazeNet(TINY, rng1, d_image=6)
    b = N.DehazeNet(TINY, rng2, d_image=6)
    pa, pb = a.named_params(), b.named_params()
    assert set(pa) == set(pb)
    for k in pa:
        assert np.array_equal(pa[k].data, pb[k].data), k


def test_param_names_follow_convention():
    net = N.DehazeNet(TINY, np.random.default_rng(18), d_image=6)
    names = set(net.named_params())
    for expected in ("stem.w", "enc.0.0.attn.w_q", "enc.2.0.mamba.s6.a_log",
                     "down.0.w", "up.1.w", "skip.0.w", "dec.1.0.ffn.w2",
                     "guide.enc0.sem.wq_img", "guide.dec0.head.w", "out.w"):
        assert expected in names, expected
    add_net = N.DehazeNet(TINY_ADD, np.random.default_rng(18))
    assert not any(n.startswith("guide.") for n in add_net.named_params())


def test_skip_ablation_changes_output():
    net = N.DehazeNet(TINY_ADD, np.random.default_rng(19))
    net.out_w.data[:] = np.random.default_rng(20).normal(size=net.out_w.shape) * 0.1
    img = np.random.default_rng(21).uniform(size=(1, 16, 16, 3)).astype(np.float32)
    base = net.forward(img, train=True).data.copy()
    w0 = net.cfg.widths[0]
    net.skip_w[0].data[w0:, :] = 0.0  # kill the encoder half of the concat
    ablated = net.forward(img, train=True).data
    assert np.abs(base - ablated).max() > 0


def test_gradient_reaches_every_parameter():
    net = N.DehazeNet(TINY, np.random.default_rng(22), d_image=6)
    rng = np.random.default_rng(23)
    # the output head starts at zero (identity network), which blocks gradient
    # into the trunk on the very first backward; give it a live value first
    net.out_w.data[:] = rng.normal(size=net.out_w.shape).astype(np.float32) * 0.05
    img = rng.uniform(size=(1, 16, 16, 3)).astype(np.float32)
    target = rng.uniform(size=(1, 16, 16, 3)).astype(np.float32)
    out = net.forward(img, fake_outputs(rng, 1, 2, 2), train=True)
    T.mean_(T.absolute(T.sub(out, Tensor(target)))).backward()
    params = net.named_params()
    missing = [k for k, t in params.items() if t.grad is None]
    assert missing == []
    for key in ("guide.enc0.head.w", "guide.dec0.head.w"):
        assert (params[key].grad != 0).mean() >= 0.99, key
    assert np.abs(params["out.w"].grad).max() > 0


def test_stage_weights_computed_once_per_stage(monkeypatch):
    calls = []
    original = N.refined_semantic_map

    def counting(*args, **kwargs):
        calls.append(1)
        return original(*args, **kwargs)

    monkeypatch.setattr(N, "refined_semantic_map", counting)
    cfg = N.ModelConfig(widths=(4, 6, 8), blocks=(3, 3, 3), window_size=4,
                        state_dim=4, patch=8, d_s=8)
    net = N.DehazeNet(cfg, np.random.default_rng(24), d_image=6)
    rng = np.random.default_rng(25)
    net.forward(rng.uniform(size=(1, 16, 16, 3)).astype(np.float32),
                fake_outputs(rng, 1, 2, 2))
    # 3 encoder stages + 2 decoder stages, regardless of blocks per stage
    assert len(calls) == 5


def test_save_load_round_trip(tmp_path):
    net = N.DehazeNet(TINY, np.random.default_rng(26), d_image=6)
    rng = np.random.default_rng(27)
    net.out_w.data[:] = rng.normal(size=net.out_w.shape) * 0.1
    img = rng.uniform(size=(1, 16, 16, 3)).astype(np.float32)
    outputs = fake_outputs(rng, 1, 2, 2)
    want = net.forward(img, outputs).data

    net.save(tmp_path / "net.tmda")
    back = N.DehazeNet.load(tmp_path / "net.tmda", TINY, d_image=6)
    assert np.array_equal(back.forward(img, outputs).data, want)


def test_load_rejects_mismatched_architecture(tmp_path):
    net = N.DehazeNet(TINY, np.random.default_rng(28), d_image=6)
    net.save(tmp_path / "net.tmda")
    with pytest.raises(FormatError):
        N.DehazeNet.load(tmp_path / "net.tmda", TINY_ADD)
    smaller = N.ModelConfig(widths=(2, 6, 8), blocks=(1, 1, 1), window_size=4,
                            state_dim=4, patch=8, d_s=8)
    with pytest.raises(FormatError):
        N.DehazeNet.load(tmp_path / "net.tmda", smaller, d_image=6)


def test_default_config_with_real_encoder():
    from dehaze.encoder import TinyEncoder
    from dehaze.guidance import encoder_outputs
    enc = TinyEncoder(np.random.default_rng(29))
    enc.freeze()
    net = N.DehazeNet(N.ModelConfig(blocks=(1, 1, 1)), np.random.default_rng(30))
    img = np.random.default_rng(31).uniform(size=(1, 32, 32, 3)).astype(np.float32)
    padded, _ = N.pad_to_multiple(img, net.cfg.pad_multiple)
    out = net.forward(img, encoder_outputs(enc, padded.data))
    assert out.shape == (1, 32, 32, 3)
    assert np.isfinite(out.data).all()
