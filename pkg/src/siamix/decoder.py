"""All-MLP decoder: unify channels, upsample to H/4 x W/4, concatenate, classify."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .nn import Linear, Module, image_to_tokens, tokens_to_image
from .tensor import Tensor


@dataclass(frozen=True)
class DecoderConfig:
    channels: int
    num_classes: int
    in_channels: tuple[int, ...]

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.channels < 1:
            raise ConfigError(f"decoder channels must be positive, got {self.channels}")


class MLPDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.linear_c = [Linear(c, cfg.channels, rng) for c in cfg.in_channels]
        self.fuse = Linear(len(cfg.in_channels) * cfg.channels, cfg.channels, rng)
        self.classify = Linear(cfg.channels, cfg.num_classes, rng)

    def _check(self, fused: list[Tensor], sizes: list[tuple[int, int]]) -> None:
        if len(fused) != len(self.linear_c) or len(sizes) != len(fused):
            raise ContractError(f"decoder expects {len(self.linear_c)} stage inputs, got {len(fused)}")
        h1, w1 = sizes[0]
        batch = fused[0].shape[0]
        for i, (z, (h, w)) in enumerate(zip(fused, sizes)):
            scale = 2**i
            if z.shape != (batch, h * w, self.cfg.in_channels[i]):
                raise ContractError(f"stage {i + 1}: expected ({batch}, {h * w}, {self.cfg.in_channels[i]}), got {z.shape}")
            if (h * scale, w * scale) != (h1, w1):
                raise ContractError(f"stage {i + 1}: spatial {h}x{w} inconsistent with stage-1 {h1}x{w1}")

    def __call__(self, fused: list[Tensor], sizes: list[tuple[int, int]]) -> Tensor:
        self._check(fused, sizes)
        h1, w1 = sizes[0]
        maps = []
        for z, (h, w), lin in zip(fused, sizes, self.linear_c):
            m = tokens_to_image(lin(z), h, w)
            maps.append(T.bilinear_resize(m, h1, w1))
        f = self.fuse(image_to_tokens(T.concat(maps, axis=1)))
        return tokens_to_image(self.classify(f), h1, w1)


def decode(fused: list[Tensor], sizes: list[tuple[int, int]], params: MLPDecoder) -> Tensor:
    return params(fused, sizes)


def upsample_logits(logits: Tensor, height: int, width: int) -> Tensor:
    """Bilinearly upsample (B, N_cls, H/4, W/4) logits to the input resolution."""
    h, w = logits.shape[2:]
    if (height, width) != (4 * h, 4 * w):
        raise ContractError(f"target {height}x{width} is not 4x the logit size {h}x{w}")
    return T.bilinear_resize(logits, height, width)


def class_map(logits) -> np.ndarray:
    """Argmax over the class axis; returns int64 (B, H, W)."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.argmax(axis=1)
