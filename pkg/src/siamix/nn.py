"""Parameter containers and the handful of layers the model is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Attribute-based parameter registry.

    Parameters, sub-modules and lists of sub-modules assigned as attributes are
    discovered in assignment order, which fixes the parameter ordering used by
    checkpoints and the optimiser.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _walk(self, prefix: str):
        for attr, value in vars(self).items():
            key = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield key, value
            elif isinstance(value, Module):
                yield from value._walk(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{key}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{key}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        """Drop gradient buffers; the next backward pass allocates fresh ones."""
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used to run gradient checks in float64)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled outside +-2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(T.DEFAULT_DTYPE)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (cin, cout)))
        self.bias = Parameter(np.zeros(cout, dtype=T.DEFAULT_DTYPE)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-6):
        self.gamma = Parameter(np.ones(c, dtype=T.DEFAULT_DTYPE))
        self.beta = Parameter(np.zeros(c, dtype=T.DEFAULT_DTYPE))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    """Convolution initialised with fan-out scaled normal weights."""

    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, groups=1, bias=True):
        fan_out = kernel * kernel * cout // groups
        w = rng.standard_normal((cout, cin // groups, kernel, kernel)) * np.sqrt(2.0 / fan_out)
        self.weight = Parameter(w.astype(T.DEFAULT_DTYPE))
        self.bias = Parameter(np.zeros(cout, dtype=T.DEFAULT_DTYPE)) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


def tokens_to_image(x: Tensor, h: int, w: int) -> Tensor:
    """(B, h*w, C) -> (B, C, h, w)."""
    b, n, c = x.shape
    return x.reshape(b, h, w, c).transpose(0, 3, 1, 2)


def image_to_tokens(x: Tensor) -> Tensor:
    """(B, C, h, w) -> (B, h*w, C)."""
    b, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(b, h * w, c)
