import math

import numpy as np
import pytest

from tlkit import autograd as ag
from tlkit.errors import ConfigError, FormatError, InputError, ShapeError
from tlkit.gradcheck import gradcheck_model, numeric_grad, randomized_params, relative_error
from tlkit.losses import cross_entropy_soft
from tlkit.vit import (
    ModelConfig,
    block_forward,
    build_model,
    decode_checkpoint,
    drop_rates,
    encode_checkpoint,
    lvvit_config,
    model_forward,
    param_count,
    param_shapes,
    patch_embed,
    sample_drop_decisions,
    tiny_config,
    to_tensors,
)


def test_build_model_is_deterministic():
    cfg = tiny_config(depth=2, embed_dim=16, num_heads=2)
    a = build_model(cfg, 7)
    b = build_model(cfg, 7)
    assert list(a) == list(b)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    c = build_model(cfg, 8)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_heads_must_divide_dim():
    with pytest.raises(ConfigError) as exc:
        tiny_config(embed_dim=16, num_heads=3)
    assert exc.value.field == "num_heads"


def test_strides_must_divide_image():
    with pytest.raises(ConfigError) as exc:
        ModelConfig(image_size=30, patch_convs=((4, 4, -1),), embed_dim=8, num_heads=2)
    assert exc.value.field == "patch_convs"


def test_init_scheme():
    cfg = tiny_config()
    p = build_model(cfg, 0)
    assert not p["blocks.0.attn.proj.weight"].any()
    assert not p["blocks.1.mlp.fc2.weight"].any()
    assert not p["head.bias"].any()
    np.testing.assert_array_equal(p["blocks.0.norm1.weight"], 1.0)
    w = p["blocks.0.attn.qkv.weight"]
    assert np.abs(w).max() <= 0.04 + 1e-12
    assert 0.01 < w.std() < 0.02


@pytest.mark.parametrize("name,expected", [("S", 26e6), ("M", 56e6)])
def test_lvvit_param_counts(name, expected):
    count = param_count(lvvit_config(name))
    assert abs(count - expected) <= 0.05 * expected


def test_param_count_depth_zero_by_hand():
    cfg = tiny_config(depth=0)
    convs = (4 * 3 * 3 * 3 + 4) + (16 * 4 * 2 * 2 + 16)
    cls_and_pos = 16 + 17 * 16
    final_norm = 2 * 16
    assert param_count(cfg, include_head=False) == convs + cls_and_pos + final_norm
    heads = 2 * (16 * 8 + 8)
    assert param_count(cfg) == convs + cls_and_pos + final_norm + heads


def test_shared_head_drops_token_head():
    assert "token_head.weight" not in param_shapes(tiny_config(shared_head=True))
    assert param_count(tiny_config()) - param_count(tiny_config(shared_head=True)) == 16 * 8 + 8


def test_param_count_matches_built_tensors():
    cfg = tiny_config(depth=3)
    assert sum(v.size for v in build_model(cfg, 0).values()) == param_count(cfg)


def test_patch_embed_token_count():
    cfg = ModelConfig(
        image_size=64, patch_convs=((7, 2, 8), (3, 1, 8), (3, 1, 8), (8, 8, -1)), embed_dim=16, num_heads=2
    )
    assert cfg.num_tokens == 16
    params = build_model(cfg, 0)
    out = patch_embed(params, cfg, np.zeros((2, 3, 64, 64)))
    assert out.shape == (2, 16, 16)


def test_patch_embed_zero_weights_give_zero_tokens():
    cfg = tiny_config()
    params = {k: np.zeros_like(v) for k, v in build_model(cfg, 0).items()}
    x = np.random.default_rng(0).uniform(size=(2, 3, 16, 16))
    assert not patch_embed(params, cfg, x).data.any()


def test_patch_embed_matches_flatten_matmul_oracle():
    cfg = ModelConfig(image_size=16, patch_convs=((8, 8, -1),), embed_dim=16, num_heads=2, depth=0)
    rng = np.random.default_rng(3)
    params = build_model(cfg, 0)
    params["patch.0.weight"] = rng.standard_normal(params["patch.0.weight"].shape)
    params["patch.0.bias"] = rng.standard_normal(16)
    images = rng.standard_normal((2, 3, 16, 16))
    out = patch_embed(params, cfg, images).data
    w = params["patch.0.weight"].reshape(16, -1)
    for b in range(2):
        for r in range(2):
            for c in range(2):
                patch = images[b, :, 8 * r : 8 * r + 8, 8 * c : 8 * c + 8].reshape(-1)
                np.testing.assert_allclose(out[b, r * 2 + c], w @ patch + params["patch.0.bias"], rtol=0, atol=1e-12)


def test_patch_embed_rejects_wrong_size():
    cfg = tiny_config()
    with pytest.raises(ShapeError):
        patch_embed(build_model(cfg, 0), cfg, np.zeros((1, 3, 32, 32)))


def _tokens(rng, cfg, b=2):
    return rng.standard_normal((b, cfg.num_tokens + 1, cfg.embed_dim))


def test_dropped_block_is_identity():
    cfg = tiny_config()
    rng = np.random.default_rng(0)
    params = randomized_params(cfg, 0)
    x = _tokens(rng, cfg)
    out = block_forward(params, 0, cfg, ag.Tensor(x), drop=True)
    assert np.array_equal(out.data, x)
    per_sample = block_forward(params, 0, cfg, ag.Tensor(x), drop=np.array([True, False]), keep_prob=0.9)
    assert np.array_equal(per_sample.data[0], x[0])
    assert not np.array_equal(per_sample.data[1], x[1])


def test_zero_output_projections_make_block_identity():
    cfg = tiny_config()
    rng = np.random.default_rng(1)
    params = randomized_params(cfg, 1)
    params["blocks.0.attn.proj.weight"][:] = 0
    params["blocks.0.attn.proj.bias"][:] = 0
    params["blocks.0.mlp.fc2.weight"][:] = 0
    params["blocks.0.mlp.fc2.bias"][:] = 0
    x = _tokens(rng, cfg)
    out = block_forward(params, 0, cfg, ag.Tensor(x))
    assert np.array_equal(out.data, x)
    assert out.shape == x.shape


def test_block_residual_scale():
    cfg1 = tiny_config(residual_scale=1.0)
    cfg2 = tiny_config(residual_scale=2.0)
    params = randomized_params(cfg1, 2)
    x = _tokens(np.random.default_rng(2), cfg1)
    # with the MLP branch silenced the update is exactly attn/s
    for k in ("blocks.0.mlp.fc2.weight", "blocks.0.mlp.fc2.bias"):
        params[k][:] = 0
    d1 = block_forward(params, 0, cfg1, ag.Tensor(x)).data - x
    d2 = block_forward(params, 0, cfg2, ag.Tensor(x)).data - x
    np.testing.assert_allclose(d2, d1 / 2, rtol=1e-12, atol=1e-14)


def test_block_gradient_matches_finite_differences():
    cfg = tiny_config()
    rng = np.random.default_rng(4)
    params = {k: v for k, v in randomized_params(cfg, 4).items() if k.startswith("blocks.0.")}
    x = _tokens(rng, cfg)
    readout = rng.standard_normal(x.shape)

    def value():
        return float((block_forward(params, 0, cfg, ag.Tensor(x)).data * readout).sum())

    leaves = to_tensors(params)
    xt = ag.Tensor(x, requires_grad=True)
    ag.sum_(ag.mul(block_forward(leaves, 0, cfg, xt), readout)).backward()
    d = cfg.embed_dim
    worst = 0.0
    for name, arr in params.items():
        ana, num = leaves[name].grad, numeric_grad(value, arr)
        if name.endswith("qkv.bias"):
            # softmax is shift invariant, so the key bias gets exactly zero gradient;
            # the differences there are pure cancellation noise
            assert np.abs(ana[d : 2 * d]).max() <= 1e-12
            assert np.abs(num[d : 2 * d]).max() <= 1e-8
            ana, num = np.delete(ana, np.s_[d : 2 * d]), np.delete(num, np.s_[d : 2 * d])
        worst = max(worst, relative_error(ana, num).max())
    worst = max(worst, relative_error(xt.grad, numeric_grad(value, x)).max())
    assert worst <= 1e-4


def test_model_forward_shapes():
    cfg = tiny_config()
    cls, tok = model_forward(build_model(cfg, 0), cfg, np.zeros((2, 3, 16, 16)))
    assert cls.shape == (2, 8)
    assert tok.shape == (2, 16, 8)


def test_zero_heads_give_uniform_loss():
    cfg = tiny_config()
    params = randomized_params(cfg, 5)
    for k in ("head.weight", "head.bias", "token_head.weight", "token_head.bias"):
        params[k][:] = 0
    rng = np.random.default_rng(5)
    cls, tok = model_forward(params, cfg, rng.uniform(size=(2, 3, 16, 16)))
    assert not cls.data.any() and not tok.data.any()
    label = rng.dirichlet(np.ones(8))
    assert float(cross_entropy_soft(cls.data[0], label)) == pytest.approx(math.log(8), abs=1e-12)


def test_model_forward_rejects_non_finite():
    cfg = tiny_config()
    x = np.zeros((1, 3, 16, 16))
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(InputError):
        model_forward(build_model(cfg, 0), cfg, x)


def test_model_forward_deterministic_in_training_mode():
    cfg = tiny_config(stoch_depth_rate=0.5)
    params = randomized_params(cfg, 6)
    x = np.random.default_rng(6).uniform(size=(4, 3, 16, 16))
    runs = [
        model_forward(params, cfg, x, rng=np.random.default_rng(11), training=True)[0].data.tobytes()
        for _ in range(2)
    ]
    assert runs[0] == runs[1]


def test_eval_mode_ignores_stochastic_depth():
    cfg = tiny_config(stoch_depth_rate=0.9)
    params = randomized_params(cfg, 7)
    x = np.random.default_rng(7).uniform(size=(2, 3, 16, 16))
    a = model_forward(params, cfg, x, rng=np.random.default_rng(1))[0].data
    b = model_forward(params, cfg, x, rng=np.random.default_rng(2))[0].data
    assert np.array_equal(a, b)


def test_full_model_gradient_check():
    report = gradcheck_model(tiny_config(), seed=1)
    assert report.max_error <= 1e-4, report.worst


def test_shared_head_gradient_check():
    report = gradcheck_model(tiny_config(shared_head=True, depth=1), seed=2)
    assert report.max_error <= 1e-4, report.worst


def test_drop_rate_schedule_is_linear():
    assert drop_rates(5, 0.1) == pytest.approx([0.0, 0.025, 0.05, 0.075, 0.1])
    assert drop_rates(1, 0.1) == [0.0]


def test_stochastic_depth_frequency():
    rng = np.random.default_rng(0)
    decisions = sample_drop_decisions(rng, 3, 10_000, 0.4)
    for rate, d in zip(drop_rates(3, 0.4), decisions):
        assert abs(d.mean() - rate) <= 0.02


def test_checkpoint_round_trip():
    cfg = tiny_config()
    params = randomized_params(cfg, 8)
    blob = encode_checkpoint(cfg, params)
    assert blob[:4] == b"TLCK"
    cfg2, params2 = decode_checkpoint(blob)
    assert cfg2 == cfg
    for k in params:
        assert np.array_equal(params2[k], params[k].astype(np.float32))
    # tensors follow declaration order, each 4 + 4*n bytes
    text = cfg.to_text().encode()
    assert len(blob) == 4 + 2 + 4 + len(text) + sum(4 + 4 * v.size for v in params.values())


def test_checkpoint_errors():
    cfg = tiny_config()
    blob = encode_checkpoint(cfg, build_model(cfg, 0))
    with pytest.raises(FormatError) as exc:
        decode_checkpoint(b"XXXX" + blob[4:])
    assert exc.value.offset == 0
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:-3])
    with pytest.raises(FormatError):
        decode_checkpoint(blob + b"\0")


def test_config_text_round_trip():
    cfg = lvvit_config("S", num_classes=10, shared_head=True)
    assert ModelConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_text("bogus=1\n")
