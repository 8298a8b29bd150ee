"""The segmenter: frozen ViT encoder with bypass adapters, trainable decoder.

Structure: patch embedding (space_to_depth + linear + learned positions),
pre-norm transformer blocks with windowed attention (global at configured
indices), a neck projection down to the decoder width, a learned dense
prompt added to the image embeddings, and a two-way decoder whose mask token
becomes a dynamic per-pixel classifier.  The decoder emits logits at 1/4
input resolution; the model upsamples them bilinearly to full size.

Every parameter lives in a named registry carrying a trainable flag and a
component tag; the freeze policy is: encoder base frozen, encoder bypasses,
prompt, and decoder trainable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional

from . import tensor as T
from .attention import AttentionParams, BypassLinear, attention_tokens, \
    attention_forward, bypass_linear_forward
from .errors import ConfigError, RegistryError, ShapeError
from .tensor import Tensor

COMPONENTS = ("encoder-base", "encoder-bypass", "prompt", "decoder")


@dataclass
class ModelConfig:
    image_size: int = 128
    patch: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    window: int = 4
    global_block_indices: Optional[tuple] = None  # default: last block only
    mlp_ratio: int = 4
    lora_rank: int = 4
    encoder_bypass: bool = True
    decoder_dim: int = 64
    decoder_blocks: int = 2
    decoder_heads: int = 2
    decoder_mlp_ratio: int = 2
    decoder_bypass: bool = True
    mask_scale: int = 4

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def global_blocks(self) -> tuple:
        if self.global_block_indices is None:
            return (self.depth - 1,) if self.depth else ()
        return tuple(self.global_block_indices)

    @property
    def up_stages(self) -> int:
        return (self.patch // self.mask_scale).bit_length() - 1

    def validate(self) -> "ModelConfig":
        if self.image_size % self.patch:
            raise ConfigError("image_size must be divisible by patch")
        if self.grid % self.window:
            raise ConfigError("patch grid must be divisible by window")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError("decoder_dim must be divisible by decoder_heads")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if self.encoder_bypass and self.lora_rank >= self.embed_dim:
            raise ConfigError("lora_rank must be < embed_dim")
        if self.decoder_bypass and self.lora_rank >= self.decoder_dim:
            raise ConfigError("lora_rank must be < decoder_dim")
        f = self.patch // self.mask_scale
        if self.patch % self.mask_scale or f < 1 or (f & (f - 1)):
            raise ConfigError("patch/mask_scale must be a power of two >= 1")
        return self


# The three scale presets: larger scale = wider and deeper encoder, with a
# deliberately thin decoder so the trainable share stays under 2%.
PRESETS = {
    "toy-B": dict(embed_dim=128, depth=4, heads=4, decoder_dim=12),
    "toy-L": dict(embed_dim=160, depth=5, heads=4, decoder_dim=12),
    "toy-H": dict(embed_dim=192, depth=6, heads=4, decoder_dim=12),
}


def preset_config(name: str, **overrides) -> ModelConfig:
    key = {k.lower(): k for k in PRESETS}.get(name.lower())
    if key is None:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = dict(PRESETS[key])
    base.update(overrides)
    return ModelConfig(**base).validate()


def config_fingerprint(config: ModelConfig) -> str:
    doc = asdict(config)
    doc["global_block_indices"] = list(config.global_blocks)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# parameter registry

@dataclass
class RegEntry:
    tensor: Tensor
    trainable: bool
    component: str


class ParamRegistry:
    """Ordered name -> (tensor, trainable, component) map with the freeze policy."""

    def __init__(self):
        self._entries: dict[str, RegEntry] = {}

    def add(self, name: str, tensor: Tensor, trainable: bool, component: str) -> Tensor:
        if name in self._entries:
            raise RegistryError(f"duplicate parameter name {name!r}")
        if component not in COMPONENTS:
            raise RegistryError(f"unknown component {component!r}")
        if component == "encoder-base" and trainable:
            raise RegistryError(f"{name}: encoder-base entries must be frozen")
        if component in ("encoder-bypass", "prompt", "decoder") and not trainable:
            raise RegistryError(f"{name}: {component} entries must be trainable")
        tensor.requires_grad = trainable
        self._entries[name] = RegEntry(tensor, trainable, component)
        return tensor

    def __len__(self):
        return len(self._entries)

    def __contains__(self, name):
        return name in self._entries

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def get(self, name: str) -> RegEntry:
        if name not in self._entries:
            raise RegistryError(f"unknown parameter {name!r}")
        return self._entries[name]

    def trainable_items(self):
        return [(n, e) for n, e in self._entries.items() if e.trainable]

    def zero_grad(self):
        for e in self._entries.values():
            e.tensor.grad = None


# ---------------------------------------------------------------------------
# model structure

@dataclass
class Norm:
    gamma: Tensor
    beta: Tensor


@dataclass
class EncoderBlock:
    norm1: Norm
    attn: AttentionParams
    norm2: Norm
    fc1: BypassLinear
    fc2: BypassLinear


@dataclass
class DecoderBlock:
    self_attn: AttentionParams
    norm1: Norm
    t2i: AttentionParams
    norm2: Norm
    fc1: BypassLinear
    fc2: BypassLinear
    norm3: Norm
    i2t: AttentionParams
    norm4: Norm


@dataclass
class SegmenterModel:
    config: ModelConfig
    registry: ParamRegistry
    patch: BypassLinear
    pos: Tensor
    blocks: list
    neck: BypassLinear
    prompt_vec: Tensor
    token: Tensor
    dblocks: list
    ups: list
    head: tuple


def _param_seed(base_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class _Builder:
    def __init__(self, registry: ParamRegistry, seed: int):
        self.reg = registry
        self.seed = seed

    def xavier(self, name, shape, trainable, component):
        fan_in, fan_out = shape
        std = (2.0 / (fan_in + fan_out)) ** 0.5
        t = T.gaussian(shape, 0.0, std, _param_seed(self.seed, name))
        return self.reg.add(name, t, trainable, component)

    def gauss(self, name, shape, std, trainable, component):
        t = T.gaussian(shape, 0.0, std, _param_seed(self.seed, name))
        return self.reg.add(name, t, trainable, component)

    def zeros(self, name, shape, trainable, component):
        return self.reg.add(name, T.zeros(shape), trainable, component)

    def ones(self, name, shape, trainable, component):
        return self.reg.add(name, T.constant(shape, 1.0), trainable, component)

    def linear(self, prefix, d_in, d_out, trainable, component):
        W = self.xavier(f"{prefix}.W", (d_in, d_out), trainable, component)
        b = self.zeros(f"{prefix}.b", (d_out,), trainable, component)
        return BypassLinear(W, b)

    def bypass(self, prefix, d_in, d_out, r, base_trainable, base_component,
               bypass_component):
        """Base projection plus W1 ~ N(0, 0.02), W2 = 0 (so output == base at init)."""
        W = self.xavier(f"{prefix}.W", (d_in, d_out), base_trainable, base_component)
        b = self.zeros(f"{prefix}.b", (d_out,), base_trainable, base_component)
        W1 = self.gauss(f"{prefix}.W1", (d_in, r), 0.02, True, bypass_component)
        W2 = self.zeros(f"{prefix}.W2", (r, d_out), True, bypass_component)
        return BypassLinear(W, b, W1, W2, r, enabled=True)

    def norm(self, prefix, dim, trainable, component):
        return Norm(self.ones(f"{prefix}.gamma", (dim,), trainable, component),
                    self.zeros(f"{prefix}.beta", (dim,), trainable, component))


def build_model(config: ModelConfig, seed: int = 0) -> SegmenterModel:
    config.validate()
    reg = ParamRegistry()
    bld = _Builder(reg, seed)
    D, C, r = config.embed_dim, config.decoder_dim, config.lora_rank
    g = config.grid

    patch = bld.linear("encoder.patch", 3 * config.patch * config.patch, D,
                       False, "encoder-base")
    pos = bld.gauss("encoder.pos", (g, g, D), 0.02, False, "encoder-base")

    blocks = []
    for i in range(config.depth):
        p = f"encoder.block{i}"
        if config.encoder_bypass:
            q = bld.bypass(f"{p}.attn.q", D, D, r, False, "encoder-base",
                           "encoder-bypass")
            v = bld.bypass(f"{p}.attn.v", D, D, r, False, "encoder-base",
                           "encoder-bypass")
        else:
            q = bld.linear(f"{p}.attn.q", D, D, False, "encoder-base")
            v = bld.linear(f"{p}.attn.v", D, D, False, "encoder-base")
        k = bld.linear(f"{p}.attn.k", D, D, False, "encoder-base")
        out = bld.linear(f"{p}.attn.out", D, D, False, "encoder-base")
        window = None if i in config.global_blocks else config.window
        attn = AttentionParams(config.heads, D // config.heads, q, k, v, out, window)
        blocks.append(EncoderBlock(
            norm1=bld.norm(f"{p}.norm1", D, False, "encoder-base"),
            attn=attn,
            norm2=bld.norm(f"{p}.norm2", D, False, "encoder-base"),
            fc1=bld.linear(f"{p}.mlp.fc1", D, config.mlp_ratio * D, False, "encoder-base"),
            fc2=bld.linear(f"{p}.mlp.fc2", config.mlp_ratio * D, D, False, "encoder-base"),
        ))

    neck = bld.linear("encoder.neck", D, C, False, "encoder-base")
    prompt_vec = bld.gauss("prompt.vec", (C,), 0.02, True, "prompt")
    token = bld.gauss("decoder.token", (C,), 0.02, True, "decoder")

    dblocks = []
    for j in range(config.decoder_blocks):
        p = f"decoder.block{j}"
        if config.decoder_bypass:
            sq = bld.bypass(f"{p}.self.q", C, C, r, True, "decoder", "decoder")
            sv = bld.bypass(f"{p}.self.v", C, C, r, True, "decoder", "decoder")
        else:
            sq = bld.linear(f"{p}.self.q", C, C, True, "decoder")
            sv = bld.linear(f"{p}.self.v", C, C, True, "decoder")
        sk = bld.linear(f"{p}.self.k", C, C, True, "decoder")
        so = bld.linear(f"{p}.self.out", C, C, True, "decoder")
        self_attn = AttentionParams(config.decoder_heads, C // config.decoder_heads,
                                    sq, sk, sv, so)

        def plain_attn(prefix):
            return AttentionParams(
                config.decoder_heads, C // config.decoder_heads,
                bld.linear(f"{prefix}.q", C, C, True, "decoder"),
                bld.linear(f"{prefix}.k", C, C, True, "decoder"),
                bld.linear(f"{prefix}.v", C, C, True, "decoder"),
                bld.linear(f"{prefix}.out", C, C, True, "decoder"))

        dblocks.append(DecoderBlock(
            self_attn=self_attn,
            norm1=bld.norm(f"{p}.norm1", C, True, "decoder"),
            t2i=plain_attn(f"{p}.t2i"),
            norm2=bld.norm(f"{p}.norm2", C, True, "decoder"),
            fc1=bld.linear(f"{p}.mlp.fc1", C, config.decoder_mlp_ratio * C, True, "decoder"),
            fc2=bld.linear(f"{p}.mlp.fc2", config.decoder_mlp_ratio * C, C, True, "decoder"),
            norm3=bld.norm(f"{p}.norm3", C, True, "decoder"),
            i2t=plain_attn(f"{p}.i2t"),
            norm4=bld.norm(f"{p}.norm4", C, True, "decoder"),
        ))

    ups = []
    c_in = C
    for s in range(config.up_stages):
        c_out = max(1, c_in // 2)
        ups.append(bld.linear(f"decoder.up{s}", c_in, 4 * c_out, True, "decoder"))
        c_in = c_out

    head = (bld.linear("decoder.head.fc1", C, C, True, "decoder"),
            bld.linear("decoder.head.fc2", C, C, True, "decoder"),
            bld.linear("decoder.head.fc3", C, c_in, True, "decoder"))

    return SegmenterModel(config, reg, patch, pos, blocks, neck,
                          prompt_vec, token, dblocks, ups, head)


# ---------------------------------------------------------------------------
# forward passes (batched internally; single-sample wrappers keep the
# one-image signatures)

def _check_batch(images: Tensor, config: ModelConfig):
    s = config.image_size
    if images.data.ndim != 4 or images.shape[1:] != (3, s, s):
        raise ShapeError(f"expected [b, 3, {s}, {s}], got {images.shape}")


def patch_embed_batch(images: Tensor, model: SegmenterModel) -> Tensor:
    cfg = model.config
    _check_batch(images, cfg)
    y = T.space_to_depth(images, cfg.patch)            # [b, 3p^2, g, g]
    y = T.transpose(y, (0, 2, 3, 1))                   # [b, g, g, 3p^2]
    y = bypass_linear_forward(y, model.patch)
    return T.add(y, model.pos)


def patch_embed(image: Tensor, model: SegmenterModel) -> Tensor:
    """[3, H, W] -> [H/p, W/p, embed_dim] (projection plus learned positions)."""
    batched = T.reshape(image, (1, *image.shape))
    out = patch_embed_batch(batched, model)
    return T.reshape(out, out.shape[1:])


def _mlp(x: Tensor, fc1: BypassLinear, fc2: BypassLinear) -> Tensor:
    return bypass_linear_forward(T.gelu(bypass_linear_forward(x, fc1)), fc2)


def encoder_forward_batch(images: Tensor, model: SegmenterModel) -> Tensor:
    x = patch_embed_batch(images, model)
    for blk in model.blocks:
        h = T.layer_norm(x, blk.norm1.gamma, blk.norm1.beta)
        x = T.add(x, attention_forward(h, blk.attn))
        h = T.layer_norm(x, blk.norm2.gamma, blk.norm2.beta)
        x = T.add(x, _mlp(h, blk.fc1, blk.fc2))
    return bypass_linear_forward(x, model.neck)        # [b, g, g, C]


def encoder_forward(image: Tensor, model: SegmenterModel) -> Tensor:
    """[3, H, W] -> [grid, grid, decoder_dim]."""
    batched = T.reshape(image, (1, *image.shape))
    out = encoder_forward_batch(batched, model)
    return T.reshape(out, out.shape[1:])


def prompt_default(model: SegmenterModel) -> Tensor:
    """The learned no-mask prompt vector broadcast over the embedding grid."""
    g, c = model.config.grid, model.config.decoder_dim
    return T.add(T.zeros((g, g, c)), model.prompt_vec)


def decoder_forward_batch(emb: Tensor, prompt: Tensor, model: SegmenterModel) -> Tensor:
    cfg = model.config
    b, g, c = emb.shape[0], cfg.grid, cfg.decoder_dim
    if emb.shape[1:] != (g, g, c) or prompt.shape != (g, g, c):
        raise ShapeError(f"embeddings {emb.shape} / prompt {prompt.shape} "
                         f"do not match grid ({g}, {g}, {c})")
    src = T.reshape(T.add(emb, prompt), (b, g * g, c))
    tokens = T.add(T.zeros((b, 1, c)), model.token)

    for blk in model.dblocks:
        t = T.layer_norm(T.add(tokens, attention_tokens(tokens, blk.self_attn)),
                         blk.norm1.gamma, blk.norm1.beta)
        t = T.layer_norm(T.add(t, attention_tokens(t, blk.t2i, kv=src)),
                         blk.norm2.gamma, blk.norm2.beta)
        t = T.layer_norm(T.add(t, _mlp(t, blk.fc1, blk.fc2)),
                         blk.norm3.gamma, blk.norm3.beta)
        src = T.layer_norm(T.add(src, attention_tokens(src, blk.i2t, kv=t)),
                           blk.norm4.gamma, blk.norm4.beta)
        tokens = t

    feat = T.reshape(src, (b, g, g, c))
    for up in model.ups:
        feat = bypass_linear_forward(feat, up)         # [b, h, w, 4c']
        feat = T.transpose(feat, (0, 3, 1, 2))
        feat = T.depth_to_space(feat, 2)
        feat = T.transpose(feat, (0, 2, 3, 1))
        feat = T.gelu(feat)

    hyper = T.reshape(tokens, (b, c))
    fc1, fc2, fc3 = model.head
    hyper = bypass_linear_forward(T.gelu(bypass_linear_forward(
        T.gelu(bypass_linear_forward(hyper, fc1)), fc2)), fc3)

    q = cfg.image_size // cfg.mask_scale
    u = feat.shape[-1]
    logits = T.matmul(T.reshape(feat, (b, q * q, u)), T.reshape(hyper, (b, u, 1)))
    return T.reshape(logits, (b, q, q))


def decoder_forward(embeddings: Tensor, prompt: Tensor, model: SegmenterModel) -> Tensor:
    """[grid, grid, C] + prompt -> quarter-resolution logits [image/4, image/4]."""
    emb = T.reshape(embeddings, (1, *embeddings.shape))
    out = decoder_forward_batch(emb, prompt, model)
    return T.reshape(out, out.shape[1:])


def model_forward_batch(images: Tensor, model: SegmenterModel) -> Tensor:
    emb = encoder_forward_batch(images, model)
    quarter = decoder_forward_batch(emb, prompt_default(model), model)
    return T.resize(quarter, model.config.mask_scale, "bilinear")


def model_forward(image: Tensor, model: SegmenterModel) -> Tensor:
    """Letterboxed [3, S, S] image -> full-resolution logits [S, S]."""
    batched = T.reshape(image, (1, *image.shape))
    out = model_forward_batch(batched, model)
    return T.reshape(out, out.shape[1:])


# ---------------------------------------------------------------------------
# accounting

def param_partition(model: SegmenterModel):
    """(trainable names, frozen names), exhaustive and disjoint."""
    trainable = [n for n, e in model.registry.items() if e.trainable]
    frozen = [n for n, e in model.registry.items() if not e.trainable]
    return trainable, frozen


def count_params(model: SegmenterModel):
    """(total, trainable) element counts over the registry."""
    total = sum(e.tensor.size for _, e in model.registry.items())
    trainable = sum(e.tensor.size for _, e in model.registry.items() if e.trainable)
    return total, trainable


def count_by_component(model: SegmenterModel) -> dict:
    out = {c: 0 for c in COMPONENTS}
    for _, e in model.registry.items():
        out[e.component] += e.tensor.size
    return out
