"""Four-stage hierarchical transformer encoder.

Stage i turns its input into overlapping patches with a strided convolution,
runs ``layers`` transformer blocks at resolution H/2^(i+1) x W/2^(i+1), and
hands the normalised tokens to both the next stage and the fusion module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Conv2d, LayerNorm, Linear, Module, image_to_tokens, tokens_to_image
from .tensor import Tensor

LAYOUTS = ("sequence", "window")


@dataclass(frozen=True)
class StageConfig:
    heads: int
    layers: int
    channels: int
    reduction: int
    patch_kernel: int
    patch_stride: int
    patch_padding: int
    mlp_ratio: int = 4
    # "sequence": R consecutive tokens are merged (token count / R).
    # "window": R x R spatial windows are merged (token count / R^2).
    reduction_layout: str = "sequence"

    def __post_init__(self):
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if min(self.heads, self.layers, self.channels, self.reduction, self.patch_stride) < 1:
            raise ConfigError(f"stage settings must be positive: {self}")
        if self.reduction_layout not in LAYOUTS:
            raise ConfigError(f"unknown reduction layout {self.reduction_layout!r}")

    @property
    def merge(self) -> int:
        """Number of tokens merged into one key/value token."""
        return self.reduction if self.reduction_layout == "sequence" else self.reduction**2

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


@dataclass
class StageOutput:
    tokens: Tensor  # (B, h*w, C)
    h: int
    w: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tokens.shape


def _merge_tokens(x: Tensor, r: int, h: int, w: int, layout: str) -> Tensor:
    b, n, c = x.shape
    if layout == "sequence":
        if n % r:
            raise ShapeError(f"sequence length {n} not divisible by reduction ratio {r}")
        return x.reshape(b, n // r, c * r)
    if h * w != n:
        raise ShapeError(f"token count {n} does not match spatial size {h}x{w}")
    if h % r or w % r:
        raise ShapeError(f"spatial size {h}x{w} not divisible by reduction window {r}")
    x = x.reshape(b, h // r, r, w // r, r, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // r) * (w // r), r * r * c)


def reduce_sequence(
    x: Tensor,
    r: int,
    weight: Tensor,
    bias: Tensor | None = None,
    layout: str = "sequence",
    h: int | None = None,
    w: int | None = None,
) -> Tensor:
    """Shorten a token sequence: reshape (N, C) -> (N/R, C*R), then project back to C.

    With the ``window`` layout the reshape gathers R x R spatial neighbourhoods
    instead of R consecutive tokens, so ``h`` and ``w`` are required.
    """
    merged = _merge_tokens(x, r, h or 0, w or 0, layout)
    return T.linear(merged, weight, bias)


class SequenceReduction(Module):
    def __init__(self, dim: int, r: int, layout: str, rng: np.random.Generator):
        self.r, self.layout = r, layout
        group = r if layout == "sequence" else r * r
        self.proj = Linear(dim * group, dim, rng)

    def set_identity(self) -> None:
        """Make R=1 reduction an exact pass-through."""
        cin, cout = self.proj.weight.shape
        if cin != cout:
            raise ConfigError("identity reduction needs R=1")
        self.proj.weight.data[...] = np.eye(cin, dtype=self.proj.weight.dtype)
        self.proj.bias.data[...] = 0

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        return reduce_sequence(x, self.r, self.proj.weight, self.proj.bias, self.layout, h, w)


class Attention(Module):
    """Multi-head attention whose key/value sequence is shortened first.

    Called with ``context=None`` it is self-attention; otherwise queries come
    from ``x`` and keys/values from ``context``.
    """

    def __init__(self, dim: int, heads: int, reduction: int, rng: np.random.Generator, layout: str = "sequence"):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        self.scale = (dim // heads) ** -0.5
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.reduce = SequenceReduction(dim, reduction, layout, rng)
        self.proj = Linear(dim, dim, rng)
        self.keep_weights = False
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        return x.reshape(b, n, self.heads, c // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, h: int, w: int, context: Tensor | None = None) -> Tensor:
        b, n, c = x.shape
        if c != self.dim:
            raise ShapeError(f"attention expects {self.dim} channels, got {x.shape}")
        src = x if context is None else context
        if src.shape != x.shape:
            raise ShapeError(f"query {x.shape} and key/value {src.shape} shapes differ")
        kv = self.reduce(src, h, w)
        q = self._split(self.q(x))
        k = self._split(self.k(kv))
        v = self._split(self.v(kv))
        with T.mac_tag("attention_scores"):
            scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * self.scale
            weights = T.softmax(scores, axis=-1)
            if self.keep_weights:
                self.last_weights = weights.data
            out = T.matmul(weights, v)
        out = out.transpose(0, 2, 1, 3).reshape(b, n, c)
        return self.proj(out)


class MixFFN(Module):
    """Linear expand -> 3x3 depthwise conv -> GELU -> linear contract."""

    def __init__(self, dim: int, ratio: int, rng: np.random.Generator):
        hidden = dim * ratio
        self.fc1 = Linear(dim, hidden, rng)
        self.dwconv = Conv2d(hidden, hidden, 3, rng, stride=1, padding=1, groups=hidden)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        if x.shape[1] != h * w:
            raise ShapeError(f"mix_ffn: {x.shape[1]} tokens but spatial size {h}x{w}")
        y = self.fc1(x)
        y = image_to_tokens(self.dwconv(tokens_to_image(y, h, w)))
        return self.fc2(T.gelu(y))


def drop_branch(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Stochastic depth: zero the whole residual branch per sample with prob ``p``."""
    if p <= 0 or rng is None:
        return x
    keep = (rng.random((x.shape[0],) + (1,) * (x.ndim - 1)) >= p).astype(x.dtype)
    return x * (keep / (1.0 - p))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted elementwise dropout; identity when ``p`` is 0 or no rng is given."""
    if p <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    return x * (keep / (1.0 - p))


class Block(Module):
    """Pre-norm transformer layer: attention + residual, Mix-FFN + residual."""

    def __init__(self, cfg: StageConfig, rng: np.random.Generator, drop_path: float = 0.0, drop: float = 0.0):
        c = cfg.channels
        self.norm1 = LayerNorm(c)
        self.attn = Attention(c, cfg.heads, cfg.reduction, rng, cfg.reduction_layout)
        self.norm2 = LayerNorm(c)
        self.ffn = MixFFN(c, cfg.mlp_ratio, rng)
        self.drop_path = drop_path
        self.drop = drop

    def _branch(self, y: Tensor, rng) -> Tensor:
        return drop_branch(dropout(y, self.drop, rng), self.drop_path, rng)

    def __call__(self, x: Tensor, h: int, w: int, rng: np.random.Generator | None = None) -> Tensor:
        x = x + self._branch(self.attn(self.norm1(x), h, w), rng)
        return x + self._branch(self.ffn(self.norm2(x), h, w), rng)


class OverlapPatchEmbed(Module):
    def __init__(self, cin: int, cfg: StageConfig, rng: np.random.Generator):
        self.proj = Conv2d(cin, cfg.channels, cfg.patch_kernel, rng, cfg.patch_stride, cfg.patch_padding)
        self.norm = LayerNorm(cfg.channels)
        self.stride = cfg.patch_stride

    def __call__(self, x: Tensor, stage: int = 1) -> StageOutput:
        h, w = x.shape[2:]
        if h % self.stride or w % self.stride:
            raise ShapeError(f"stage {stage}: spatial size {h}x{w} not divisible by patch stride {self.stride}")
        y = self.proj(x)
        out_h, out_w = y.shape[2:]
        if (out_h, out_w) != (h // self.stride, w // self.stride):
            raise ShapeError(f"stage {stage}: patch embedding produced {out_h}x{out_w}, expected {h // self.stride}x{w // self.stride}")
        return StageOutput(self.norm(image_to_tokens(y)), out_h, out_w)


class Stage(Module):
    def __init__(
        self, cin: int, cfg: StageConfig, rng: np.random.Generator, index: int, drop_path: float = 0.0, drop: float = 0.0
    ):
        self.cfg = cfg
        self.index = index
        self.embed = OverlapPatchEmbed(cin, cfg, rng)
        self.blocks = [Block(cfg, rng, drop_path, drop) for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.channels)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> StageOutput:
        out = self.embed(x, self.index)
        h, w = out.h, out.w
        if self.cfg.reduction_layout == "window" and (h % self.cfg.reduction or w % self.cfg.reduction):
            raise ShapeError(f"stage {self.index}: {h}x{w} tokens not divisible by reduction window {self.cfg.reduction}")
        if self.cfg.reduction_layout == "sequence" and (h * w) % self.cfg.reduction:
            raise ShapeError(f"stage {self.index}: {h * w} tokens not divisible by reduction ratio {self.cfg.reduction}")
        z = out.tokens
        for block in self.blocks:
            z = block(z, h, w, rng)
        return StageOutput(self.norm(z), h, w)


class Encoder(Module):
    def __init__(
        self,
        stages: list[StageConfig],
        rng: np.random.Generator,
        in_channels: int = 3,
        drop_path: float = 0.0,
        drop: float = 0.0,
    ):
        self.configs = list(stages)
        self.stages = []
        cin = in_channels
        for i, cfg in enumerate(self.configs, start=1):
            self.stages.append(Stage(cin, cfg, rng, i, drop_path, drop))
            cin = cfg.channels

    @property
    def total_stride(self) -> int:
        return int(np.prod([c.patch_stride for c in self.configs]))

    def __call__(self, image: Tensor, rng: np.random.Generator | None = None) -> list[StageOutput]:
        if image.ndim != 4:
            raise ShapeError(f"encoder expects (B, C, H, W), got {image.shape}")
        outputs = []
        x = image
        for stage in self.stages:
            out = stage(x, rng)
            outputs.append(out)
            x = tokens_to_image(out.tokens, out.h, out.w)
        return outputs


# functional forms of the layers above
def overlap_patch_embed(x: Tensor, params: OverlapPatchEmbed, stage: int = 1) -> StageOutput:
    return params(x, stage)


def efficient_self_attention(x: Tensor, h: int, w: int, params: Attention) -> Tensor:
    return params(x, h, w)


def mix_ffn(x: Tensor, h: int, w: int, params: MixFFN) -> Tensor:
    return params(x, h, w)


def transformer_block(x: StageOutput, params: Block, rng: np.random.Generator | None = None) -> StageOutput:
    return StageOutput(params(x.tokens, x.h, x.w, rng), x.h, x.w)


def encode(image: Tensor, params: Encoder, rng: np.random.Generator | None = None) -> list[StageOutput]:
    return params(image, rng)


__all__ = [
    "overlap_patch_embed",
    "efficient_self_attention",
    "mix_ffn",
    "transformer_block",
    "encode",
    "dropout",
    "StageConfig",
    "StageOutput",
    "reduce_sequence",
    "SequenceReduction",
    "Attention",
    "MixFFN",
    "Block",
    "OverlapPatchEmbed",
    "Stage",
    "Encoder",
]
