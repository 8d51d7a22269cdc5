"""Minimal vision transformer with a convolutional patch embedding.

Parameters live in a plain ordered dict of numpy arrays (``ViTParams``); the
forward pass is functional and records a graph through :mod:`tlkit.autograd`
so that ``loss.backward()`` fills ``.grad`` on the leaf tensors.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import autograd as ag
from .errors import ConfigError, FormatError, InputError, ShapeError

# LV-ViT default stem: kernels [7,3,3,8], strides [2,1,1,8], 64 filters except the last.
DEFAULT_PATCH_CONVS = ((7, 2, 64), (3, 1, 64), (3, 1, 64), (8, 8, -1))


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    embed_dim: int = 16
    mlp_ratio: float = 3.0
    num_heads: int = 2
    # (kernel, stride, filters); filters == -1 means embed_dim
    patch_convs: tuple = DEFAULT_PATCH_CONVS
    residual_scale: float = 2.0
    stoch_depth_rate: float = 0.1
    num_classes: int = 8
    image_size: int = 64
    shared_head: bool = False
    in_chans: int = 3

    def __post_init__(self):
        convs = tuple(tuple(int(v) for v in c) for c in self.patch_convs)
        object.__setattr__(self, "patch_convs", convs)
        self.validate()

    @property
    def conv_filters(self):
        return [self.embed_dim if f == -1 else f for _, _, f in self.patch_convs]

    @property
    def total_stride(self):
        return math.prod(s for _, s, _ in self.patch_convs)

    @property
    def grid_side(self):
        return self.image_size // self.total_stride

    @property
    def num_tokens(self):
        return self.grid_side**2

    @property
    def hidden_dim(self):
        return int(round(self.embed_dim * self.mlp_ratio))

    def validate(self):
        for name in ("depth",):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative", name)
        for name in ("embed_dim", "num_heads", "num_classes", "image_size", "in_chans"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive", name)
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive", "mlp_ratio")
        if self.residual_scale <= 0:
            raise ConfigError("residual_scale must be positive", "residual_scale")
        if not 0.0 <= self.stoch_depth_rate <= 1.0:
            raise ConfigError("stoch_depth_rate must lie in [0, 1]", "stoch_depth_rate")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim={self.embed_dim} is not divisible by num_heads={self.num_heads}",
                "num_heads",
            )
        if not self.patch_convs:
            raise ConfigError("at least one patch conv is required", "patch_convs")
        if self.patch_convs[-1][2] not in (-1, self.embed_dim):
            raise ConfigError("the last patch conv must output embed_dim filters", "patch_convs")
        size = self.image_size
        for k, s, f in self.patch_convs:
            if k <= 0 or s <= 0 or (f <= 0 and f != -1):
                raise ConfigError("patch conv kernel/stride/filters must be positive", "patch_convs")
            if size % s or ag.conv_output_size(size, k, s, conv_padding(k, s)) != size // s:
                raise ConfigError(
                    f"patch conv (kernel={k}, stride={s}) does not map {size} to {size // s}",
                    "patch_convs",
                )
            size //= s

    # key=value text form shared by config files and checkpoints

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "patch_convs":
                v = ",".join(f"{k}:{s}:{n}" for k, s, n in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        return cls.from_mapping(parse_kv(text))

    @classmethod
    def from_mapping(cls, kv):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in kv.items():
            if key not in known:
                raise ConfigError(f"unknown model config key {key!r}", key)
            try:
                if key == "patch_convs":
                    kwargs[key] = tuple(tuple(int(p) for p in c.split(":")) for c in raw.split(","))
                elif key == "shared_head":
                    kwargs[key] = parse_bool(raw)
                elif key in ("mlp_ratio", "residual_scale", "stoch_depth_rate"):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = int(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}", key) from exc
        return cls(**kwargs)


def parse_kv(text):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_bool(raw):
    low = str(raw).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def conv_padding(kernel, stride):
    return (kernel - stride + 1) // 2


def lvvit_config(name, num_classes=1000, **overrides):
    """Table-1 LV-ViT sizes: T, S, M, L."""
    sizes = {
        "T": dict(depth=12, embed_dim=240, num_heads=4),
        "S": dict(depth=16, embed_dim=384, num_heads=6),
        "M": dict(depth=20, embed_dim=512, num_heads=8),
        "L": dict(depth=24, embed_dim=768, num_heads=12),
    }
    base = dict(
        mlp_ratio=3.0,
        patch_convs=DEFAULT_PATCH_CONVS,
        residual_scale=2.0,
        stoch_depth_rate=0.1,
        num_classes=num_classes,
        image_size=288 if name == "L" else 224,
    )
    base.update(sizes[name])
    base.update(overrides)
    return ModelConfig(**base)


def tiny_config(**overrides):
    """Depth-2, width-16 model with a 4x4 token grid and 8 classes (gradient checks)."""
    base = dict(
        depth=2,
        embed_dim=16,
        mlp_ratio=2.0,
        num_heads=2,
        patch_convs=((3, 2, 4), (2, 2, -1)),
        residual_scale=2.0,
        stoch_depth_rate=0.0,
        num_classes=8,
        image_size=16,
    )
    base.update(overrides)
    return ModelConfig(**base)


# ----------------------------------------------------------------- parameters


def param_shapes(config, include_head=True):
    """Ordered ``name -> shape`` for every learnable tensor."""
    d, hid, k = config.embed_dim, config.hidden_dim, config.num_classes
    shapes = {}
    cin = config.in_chans
    for i, ((ks, _, _), f) in enumerate(zip(config.patch_convs, config.conv_filters)):
        shapes[f"patch.{i}.weight"] = (f, cin, ks, ks)
        shapes[f"patch.{i}.bias"] = (f,)
        cin = f
    shapes["cls_token"] = (1, 1, d)
    shapes["pos_embed"] = (1, config.num_tokens + 1, d)
    for layer in range(config.depth):
        p = f"blocks.{layer}."
        shapes[p + "norm1.weight"] = (d,)
        shapes[p + "norm1.bias"] = (d,)
        shapes[p + "attn.qkv.weight"] = (d, 3 * d)
        shapes[p + "attn.qkv.bias"] = (3 * d,)
        shapes[p + "attn.proj.weight"] = (d, d)
        shapes[p + "attn.proj.bias"] = (d,)
        shapes[p + "norm2.weight"] = (d,)
        shapes[p + "norm2.bias"] = (d,)
        shapes[p + "mlp.fc1.weight"] = (d, hid)
        shapes[p + "mlp.fc1.bias"] = (hid,)
        shapes[p + "mlp.fc2.weight"] = (hid, d)
        shapes[p + "mlp.fc2.bias"] = (d,)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    if include_head:
        shapes["head.weight"] = (d, k)
        shapes["head.bias"] = (k,)
        if not config.shared_head:
            shapes["token_head.weight"] = (d, k)
            shapes["token_head.bias"] = (k,)
    return shapes


def param_count(config, include_head=True):
    return sum(math.prod(s) for s in param_shapes(config, include_head).values())


def _trunc_normal(rng, shape, std, dtype):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def build_model(config, seed, dtype=np.float64):
    """Deterministic initial parameters for ``(config, seed)``."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(("attn.proj.weight", "mlp.fc2.weight")):
            params[name] = np.zeros(shape, dtype=dtype)
        elif leaf == "bias":
            params[name] = np.zeros(shape, dtype=dtype)
        elif "norm" in name:
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = _trunc_normal(rng, shape, 0.02, dtype)
    return params


def to_tensors(params):
    return {k: ag.Tensor(v, requires_grad=True) for k, v in params.items()}


def _leaf(params, name):
    p = params[name]
    return p if isinstance(p, ag.Tensor) else ag.Tensor(p)


# -------------------------------------------------------------------- forward


def patch_embed(params, config, images):
    """(B, C, H, W) images -> (B, N, D) tokens."""
    images = ag.as_tensor(images)
    b, c, h, w = images.shape
    if c != config.in_chans or h != config.image_size or w != config.image_size:
        raise ShapeError(
            f"expected images of shape (B, {config.in_chans}, {config.image_size}, "
            f"{config.image_size}), got {images.shape}"
        )
    x = images
    last = len(config.patch_convs) - 1
    for i, (k, s, _) in enumerate(config.patch_convs):
        x = ag.conv2d(x, _leaf(params, f"patch.{i}.weight"), _leaf(params, f"patch.{i}.bias"), s, conv_padding(k, s))
        if i != last:
            x = ag.gelu(x)
    d = config.embed_dim
    x = ag.reshape(x, (b, d, -1))
    return ag.transpose(x, (0, 2, 1))


def add_class_token_and_positions(params, tokens):
    b = tokens.shape[0]
    cls = ag.broadcast_to(_leaf(params, "cls_token"), (b, 1, tokens.shape[2]))
    x = ag.concat([cls, tokens], axis=1)
    return ag.add(x, _leaf(params, "pos_embed"))


def attention(params, prefix, x, num_heads):
    b, t, d = x.shape
    dh = d // num_heads
    qkv = ag.linear(x, _leaf(params, prefix + "qkv.weight"), _leaf(params, prefix + "qkv.bias"))
    qkv = ag.transpose(ag.reshape(qkv, (b, t, 3, num_heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = (ag.getitem(qkv, i) for i in range(3))
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), dh**-0.5)
    out = ag.matmul(ag.softmax(scores), v)
    out = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (b, t, d))
    return ag.linear(out, _leaf(params, prefix + "proj.weight"), _leaf(params, prefix + "proj.bias"))


def mlp(params, prefix, x):
    h = ag.gelu(ag.linear(x, _leaf(params, prefix + "fc1.weight"), _leaf(params, prefix + "fc1.bias")))
    return ag.linear(h, _leaf(params, prefix + "fc2.weight"), _leaf(params, prefix + "fc2.bias"))


def block_forward(params, layer, config, x, drop=False, keep_prob=1.0):
    """Pre-norm block: ``x + attn(ln(x))/s`` then ``+ mlp(ln(x))/s``.

    ``drop`` is a bool or a per-sample boolean array; dropped samples pass
    through unchanged.  Surviving branches are rescaled by ``1/keep_prob``.
    """
    drop_arr = np.asarray(drop, dtype=bool)
    if drop_arr.ndim == 0 and drop_arr:
        return ag.as_tensor(x)
    p = f"blocks.{layer}."
    s = 1.0 / config.residual_scale
    gate = None
    if drop_arr.ndim == 1:
        gate = ((~drop_arr).astype(x.dtype) / x.dtype.type(keep_prob))[:, None, None]
    elif keep_prob != 1.0:
        gate = x.dtype.type(1.0 / keep_prob)

    def branch(f):
        f = ag.scale(f, s)
        return ag.mul(f, gate) if gate is not None else f

    h = ag.layer_norm(x, _leaf(params, p + "norm1.weight"), _leaf(params, p + "norm1.bias"))
    x = ag.add(x, branch(attention(params, p + "attn.", h, config.num_heads)))
    h = ag.layer_norm(x, _leaf(params, p + "norm2.weight"), _leaf(params, p + "norm2.bias"))
    return ag.add(x, branch(mlp(params, p + "mlp.", h)))


def drop_rates(depth, max_rate):
    """Linear per-layer stochastic-depth schedule ``max_rate * l / (depth - 1)``."""
    if depth == 1:
        return [0.0]
    return [max_rate * layer / (depth - 1) for layer in range(depth)]


def sample_drop_decisions(rng, depth, batch, max_rate):
    return [rng.random(batch) < r for r in drop_rates(depth, max_rate)]


@dataclass
class TokenMix:
    """Mix partner indices and a flat (N,) token mask; 1 keeps the sample's own token."""

    partner: np.ndarray
    mask: np.ndarray


def model_forward(
    params,
    config,
    images,
    rng=None,
    training=False,
    token_mix=None,
    drop_rate=None,
    drop_decisions=None,
):
    """Return ``(cls_logits (B,K), token_logits (B,N,K))`` as graph tensors.

    In training mode stochastic depth draws per-sample decisions from ``rng``
    unless ``drop_decisions`` is supplied.  ``token_mix`` applies MixToken to
    the patch tokens before positions are added.
    """
    data = images.data if isinstance(images, ag.Tensor) else np.asarray(images)
    if not np.isfinite(data).all():
        raise InputError("images contain non-finite values")
    tokens = patch_embed(params, config, images)
    if token_mix is not None:
        from .mixtoken import mix_tokens_batch

        tokens = mix_tokens_batch(tokens, token_mix.partner, token_mix.mask)
    x = add_class_token_and_positions(params, tokens)
    b = x.shape[0]
    rate = config.stoch_depth_rate if drop_rate is None else drop_rate
    rates = drop_rates(config.depth, rate)
    if training and drop_decisions is None and rate > 0:
        if rng is None:
            raise InputError("training with stochastic depth needs an rng")
        drop_decisions = sample_drop_decisions(rng, config.depth, b, rate)
    for layer in range(config.depth):
        if training and drop_decisions is not None:
            x = block_forward(params, layer, config, x, drop_decisions[layer], 1.0 - rates[layer])
        else:
            x = block_forward(params, layer, config, x)
    x = ag.layer_norm(x, _leaf(params, "norm.weight"), _leaf(params, "norm.bias"))
    cls_feat = ag.getitem(x, (slice(None), 0))
    tok_feat = ag.getitem(x, (slice(None), slice(1, None)))
    cls_logits = ag.linear(cls_feat, _leaf(params, "head.weight"), _leaf(params, "head.bias"))
    tprefix = "head" if config.shared_head else "token_head"
    token_logits = ag.linear(tok_feat, _leaf(params, tprefix + ".weight"), _leaf(params, tprefix + ".bias"))
    return cls_logits, token_logits


# ----------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"TLCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, config, params):
    with open(path, "wb") as f:
        f.write(encode_checkpoint(config, params))


def encode_checkpoint(config, params):
    text = config.to_text().encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), struct.pack("<I", len(text)), text]
    for name, shape in param_shapes(config).items():
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        if arr.shape != tuple(shape):
            raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
        out.append(struct.pack("<I", arr.size))
        out.append(arr.tobytes())
    return b"".join(out)


def load_checkpoint(path):
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def decode_checkpoint(blob):
    """Return ``(config, params)`` with float32 parameters."""
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(blob) < 10:
        raise FormatError("truncated checkpoint header", len(blob))
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (n,) = struct.unpack_from("<I", blob, 6)
    off = 10
    if off + n > len(blob):
        raise FormatError("truncated config block", len(blob))
    config = ModelConfig.from_text(blob[off : off + n].decode("utf-8"))
    off += n
    params = {}
    for name, shape in param_shapes(config).items():
        if off + 4 > len(blob):
            raise FormatError(f"truncated before tensor {name}", off)
        (count,) = struct.unpack_from("<I", blob, off)
        if count != math.prod(shape):
            raise FormatError(f"tensor {name}: expected {math.prod(shape)} values, found {count}", off)
        off += 4
        end = off + 4 * count
        if end > len(blob):
            raise FormatError(f"truncated tensor {name}", len(blob))
        params[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off = end
    if off != len(blob):
        raise FormatError("trailing bytes after last tensor", off)
    return config, params


def with_dtype(params, dtype):
    return {k: np.asarray(v, dtype=dtype).copy() for k, v in params.items()}


__all__ = [
    "ModelConfig",
    "desk_config",
    "TokenMix",
    "block_forward",
    "build_model",
    "decode_checkpoint",
    "encode_checkpoint",
    "load_checkpoint",
    "lvvit_config",
    "model_forward",
    "param_count",
    "param_shapes",
    "patch_embed",
    "save_checkpoint",
    "tiny_config",
    "to_tensors",
]


def desk_config(**overrides):
    """Desk-scale model for the synthetic shapes task: depth 4, width 64, 4x4 tokens on 64x64 input."""
    base = dict(
        depth=4,
        embed_dim=64,
        mlp_ratio=3.0,
        num_heads=4,
        patch_convs=((4, 4, 16), (3, 1, 16), (4, 4, -1)),
        residual_scale=2.0,
        stoch_depth_rate=0.1,
        num_classes=9,
        image_size=64,
    )
    base.update(overrides)
    return ModelConfig(**base)
