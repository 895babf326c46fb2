"""Temporal transformer: per-stage cross-attention between the two streams.

Queries come from the T1 stream and keys/values from the T2 stream; the T1
tokens are the residual carrier, so with both branches silenced the module
is the identity on T1.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import Attention, StageConfig, StageOutput
from .errors import ContractError
from .nn import Conv2d, LayerNorm, Linear, Module, image_to_tokens, tokens_to_image
from .tensor import Tensor


class FusionMLP(Module):
    def __init__(self, dim: int, ratio: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, dim * ratio, rng)
        self.fc2 = Linear(dim * ratio, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class TemporalLayer(Module):
    """One cross-attention + MLP pair with pre-norms on both inputs."""

    def __init__(self, cfg: StageConfig, rng: np.random.Generator, mlp_ratio: int = 4):
        c = cfg.channels
        self.norm_q = LayerNorm(c)
        self.norm_kv = LayerNorm(c)
        self.attn = Attention(c, cfg.heads, cfg.reduction, rng, cfg.reduction_layout)
        self.norm_mlp = LayerNorm(c)
        self.mlp = FusionMLP(c, mlp_ratio, rng)

    def __call__(self, z: Tensor, y2: Tensor, h: int, w: int) -> Tensor:
        z = z + self.attn(self.norm_q(z), h, w, context=self.norm_kv(y2))
        return z + self.mlp(self.norm_mlp(z))


class TemporalTransformer(Module):
    def __init__(self, cfg: StageConfig, rng: np.random.Generator, depth: int = 2, mlp_ratio: int = 4, stage: int = 0):
        self.cfg = cfg
        self.stage = stage
        self.layers = [TemporalLayer(cfg, rng, mlp_ratio) for _ in range(depth)]

    def silence(self) -> None:
        """Zero both branch output projections of every layer."""
        for layer in self.layers:
            for lin in (layer.attn.proj, layer.mlp.fc2):
                lin.weight.data[...] = 0
                lin.bias.data[...] = 0

    def __call__(self, y1: StageOutput, y2: StageOutput) -> Tensor:
        if y1.shape != y2.shape or (y1.h, y1.w) != (y2.h, y2.w):
            raise ContractError(f"stage {self.stage}: T1 features {y1.shape} and T2 features {y2.shape} differ")
        if y1.shape[-1] != self.cfg.channels:
            raise ContractError(f"stage {self.stage}: expected {self.cfg.channels} channels, got {y1.shape}")
        z = y1.tokens
        for layer in self.layers:
            z = layer(z, y2.tokens, y1.h, y1.w)
        return z


def temporal_transformer(y1: StageOutput, y2: StageOutput, params: TemporalTransformer) -> Tensor:
    return params(y1, y2)


class ConcatFusion(Module):
    """Reference fusion: channel concat followed by a 3x3 convolution."""

    def __init__(self, cfg: StageConfig, rng: np.random.Generator, stage: int = 0):
        self.stage = stage
        self.conv = Conv2d(2 * cfg.channels, cfg.channels, 3, rng, padding=1)

    def __call__(self, y1: StageOutput, y2: StageOutput) -> Tensor:
        if y1.shape != y2.shape:
            raise ContractError(f"stage {self.stage}: T1 features {y1.shape} and T2 features {y2.shape} differ")
        x = T.concat([tokens_to_image(y1.tokens, y1.h, y1.w), tokens_to_image(y2.tokens, y2.h, y2.w)], axis=1)
        return image_to_tokens(T.relu(self.conv(x)))
