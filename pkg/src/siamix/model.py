"""Bi-temporal model assembly, variant table, and audit tools.

Variants ``siamix-0`` .. ``siamix-5`` follow the published per-stage head,
layer and channel settings.  ``nano`` keeps the widths of variant 1 with a
single layer per stage; it is a CPU-sized model for tests, not a published one.
``nano-tiny`` shrinks the widths further for fast unit tests.  ``mono-baseline`` (one encoder, no fusion)
and ``concat-fusion-baseline`` (channel concat + 3x3 conv in place of the
temporal transformer) support the ablation and receptive-field comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .decoder import DecoderConfig, MLPDecoder
from .encoder import Encoder, StageConfig, StageOutput
from .errors import ConfigError, ContractError
from .fusion import ConcatFusion, TemporalTransformer
from .nn import Conv2d, Module, image_to_tokens, tokens_to_image
from .tensor import Tensor

# (heads, layers, channels) per stage
PUBLISHED_TABLE = {
    0: ((1, 2, 32), (2, 2, 64), (5, 2, 160), (8, 2, 256)),
    1: ((1, 2, 64), (2, 2, 128), (5, 2, 320), (8, 2, 512)),
    2: ((1, 3, 64), (2, 3, 128), (5, 6, 320), (8, 3, 512)),
    3: ((1, 3, 64), (2, 3, 128), (5, 18, 320), (8, 3, 512)),
    4: ((1, 3, 64), (2, 8, 128), (5, 27, 320), (8, 3, 512)),
    5: ((1, 3, 64), (2, 6, 128), (5, 40, 320), (8, 3, 512)),
}
PUBLISHED_PARAMS_M = {0: 10.04, 1: 38.57, 2: 60.65, 3: 100.41, 4: 133.95, 5: 175.15}
PUBLISHED_FLOPS_G = {(0, 256): 2.62, (0, 512): 10.53}

REDUCTION = (8, 4, 2, 1)
PATCH = ((7, 4, 3), (3, 2, 1), (3, 2, 1), (3, 2, 1))  # kernel, stride, padding
NANO = ((1, 1, 64), (2, 1, 128), (5, 1, 320), (8, 1, 512))
NANO_TINY = ((1, 1, 8), (1, 1, 16), (2, 1, 24), (4, 1, 32))
# per-channel statistics applied to [0, 1] RGB inputs (the usual ImageNet values)
PIXEL_MEAN = np.array([0.485, 0.456, 0.406]).reshape(1, 3, 1, 1)
PIXEL_STD = np.array([0.229, 0.224, 0.225]).reshape(1, 3, 1, 1)
KINDS = ("siamix", "mono", "concat")


@dataclass(frozen=True)
class ModelVariant:
    name: str
    stages: tuple[StageConfig, ...]
    decoder_channels: int
    kind: str = "siamix"
    fusion_depth: int = 2
    fusion_mlp_ratio: int = 4
    share_encoders: bool = False
    drop_path: float = 0.0
    dropout: float = 0.0
    normalize_input: bool = True
    base: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if len(self.stages) != 4:
            raise ConfigError("a variant needs exactly four stages")
        chans = [s.channels for s in self.stages]
        if any(b <= a for a, b in zip(chans, chans[1:])):
            raise ConfigError(f"stage channels must increase, got {chans}")
        if self.fusion_depth < 1:
            raise ConfigError("fusion_depth must be >= 1")

    @property
    def total_stride(self) -> int:
        return int(np.prod([s.patch_stride for s in self.stages]))


def _stages(table, layout: str = "sequence") -> tuple[StageConfig, ...]:
    return tuple(
        StageConfig(h, l, c, r, k, s, p, reduction_layout=layout)
        for (h, l, c), r, (k, s, p) in zip(table, REDUCTION, PATCH)
    )


def _base_variant(name: str) -> ModelVariant:
    if name == "nano":
        return ModelVariant("nano", _stages(NANO), decoder_channels=256)
    if name == "nano-tiny":
        return ModelVariant("nano-tiny", _stages(NANO_TINY), decoder_channels=64)
    if name.startswith("siamix-"):
        try:
            k = int(name.split("-", 1)[1])
        except ValueError:
            k = -1
        if k in PUBLISHED_TABLE:
            return ModelVariant(name, _stages(PUBLISHED_TABLE[k]), decoder_channels=256 if k <= 1 else 768)
    raise ConfigError(f"unknown variant {name!r}")


def variant_names() -> list[str]:
    return [f"siamix-{k}" for k in PUBLISHED_TABLE] + ["nano", "nano-tiny", "mono-baseline", "concat-fusion-baseline"]


def get_variant(name: str, **overrides) -> ModelVariant:
    """Look up a variant by name.

    Baselines take their stage geometry from a base variant, ``nano`` unless
    given as ``mono-baseline@siamix-5``.  ``reduction_layout`` may be passed
    as an override and is applied to every stage.
    """
    head, _, base = name.partition("@")
    layout = overrides.pop("reduction_layout", None)
    if head in ("mono-baseline", "concat-fusion-baseline"):
        b = _base_variant(base or "nano")
        kind = "mono" if head == "mono-baseline" else "concat"
        v = replace(b, name=name, kind=kind, base=b.name)
    elif base:
        raise ConfigError(f"only baselines accept a base variant, got {name!r}")
    else:
        v = _base_variant(head)
    if layout is not None:
        v = replace(v, stages=tuple(replace(s, reduction_layout=layout) for s in v.stages))
    if overrides:
        try:
            v = replace(v, **overrides)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
    return v


class Model(Module):
    """Two encoders, per-stage fusion, MLP decoder (or a baseline thereof)."""

    def __init__(self, variant: ModelVariant, num_classes: int, seed: int):
        self.variant = variant
        self.num_classes = num_classes
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoder1 = Encoder(list(variant.stages), rng, drop_path=variant.drop_path, drop=variant.dropout)
        if variant.kind == "mono":
            self.encoder2 = None
        elif variant.share_encoders:
            self.encoder2 = self.encoder1
        else:
            self.encoder2 = Encoder(list(variant.stages), rng, drop_path=variant.drop_path, drop=variant.dropout)
        if variant.kind == "siamix":
            self.fusion = [
                TemporalTransformer(cfg, rng, variant.fusion_depth, variant.fusion_mlp_ratio, stage=i)
                for i, cfg in enumerate(variant.stages, start=1)
            ]
        elif variant.kind == "concat":
            self.fusion = [ConcatFusion(cfg, rng, stage=i) for i, cfg in enumerate(variant.stages, start=1)]
        else:
            self.fusion = []
        self.decoder = MLPDecoder(
            DecoderConfig(variant.decoder_channels, num_classes, tuple(s.channels for s in variant.stages)), rng
        )
        self.training = False
        self._drop_rng: np.random.Generator | None = None

    def train(self, rng: np.random.Generator | None = None) -> None:
        self.training = True
        self._drop_rng = rng

    def eval(self) -> None:
        self.training = False
        self._drop_rng = None

    def _normalize(self, x: Tensor) -> Tensor:
        if not self.variant.normalize_input:
            return x
        return (x - PIXEL_MEAN.astype(x.dtype)) * (1.0 / PIXEL_STD).astype(x.dtype)

    def features(self, t1, t2=None) -> dict:
        """Encoder outputs, fused stage tokens and decoder logits."""
        t1 = T.as_tensor(t1)
        if self.variant.kind != "mono":
            if t2 is None:
                raise ContractError("bi-temporal model needs both t1 and t2")
            t2 = T.as_tensor(t2)
            if t1.shape != t2.shape:
                raise ContractError(f"t1 {t1.shape} and t2 {t2.shape} differ in shape")
        if t1.ndim != 4 or t1.shape[1] != 3:
            raise ContractError(f"expected (B, 3, H, W) images, got {t1.shape}")
        rng = self._drop_rng if self.training else None
        t1 = self._normalize(t1)
        t2 = self._normalize(t2) if t2 is not None else None
        y1 = self.encoder1(t1, rng)
        if self.variant.kind == "mono":
            y2 = None
            fused = [y.tokens for y in y1]
        else:
            y2 = self.encoder2(t2, rng)
            fused = [f(a, b) for f, a, b in zip(self.fusion, y1, y2)]
        sizes = [(y.h, y.w) for y in y1]
        logits = self.decoder(fused, sizes)
        return {"t1": y1, "t2": y2, "fused": fused, "sizes": sizes, "logits": logits}

    def __call__(self, t1, t2=None) -> Tensor:
        return self.features(t1, t2)["logits"]


def build(variant: str | ModelVariant, num_classes: int = 2, seed: int = 0) -> Model:
    """Deterministically initialise a model for ``variant``."""
    v = get_variant(variant) if isinstance(variant, str) else variant
    return Model(v, num_classes, seed)


def forward(model: Model, t1, t2=None) -> Tensor:
    return model(t1, t2)


def count_params(model: Module) -> int:
    return model.num_parameters()


# ---------------------------------------------------------------------------
# analytic FLOP accounting (multiply-accumulates, batch 1)
# ---------------------------------------------------------------------------
def _attention_macs(c: int, n: int, merge: int) -> dict[str, int]:
    nr = n // merge
    return {
        "qkvo": 2 * n * c * c + 2 * nr * c * c,
        "reduction": nr * (merge * c) * c,
        "attention_scores": 2 * n * nr * c,
    }


def flop_breakdown(variant: str | ModelVariant, height: int, width: int, num_classes: int = 2) -> dict[str, int]:
    """Per-category multiply-accumulate counts for one forward pass, batch 1.

    Elementwise work (norms, softmax exponentials, GELU, resampling, bias
    adds) is not counted.
    """
    v = get_variant(variant) if isinstance(variant, str) else variant
    if height % v.total_stride or width % v.total_stride:
        raise ContractError(f"{height}x{width} not divisible by {v.total_stride}")
    out: dict[str, int] = {}

    def add(key, n):
        out[key] = out.get(key, 0) + int(n)

    n_enc = 1 if v.kind == "mono" else 2
    h, w, cin = height, width, 3
    sizes = []
    for cfg in v.stages:
        h, w = h // cfg.patch_stride, w // cfg.patch_stride
        n, c = h * w, cfg.channels
        sizes.append((n, c))
        add("encoder.patch_embed", n_enc * n * c * cin * cfg.patch_kernel**2)
        hidden = c * cfg.mlp_ratio
        for _ in range(cfg.layers):
            for key, val in _attention_macs(c, n, cfg.merge).items():
                add(f"encoder.{key}", n_enc * val)
            add("encoder.ffn", n_enc * (2 * n * c * hidden + 9 * n * hidden))
        if v.kind == "siamix":
            for _ in range(v.fusion_depth):
                for key, val in _attention_macs(c, n, cfg.merge).items():
                    add(f"fusion.{key}", val)
                add("fusion.mlp", 2 * n * c * c * v.fusion_mlp_ratio)
        elif v.kind == "concat":
            add("fusion.conv", n * c * 2 * c * 9)
        cin = c
    d = v.decoder_channels
    n1 = sizes[0][0]
    add("decoder", sum(n * c * d for n, c in sizes) + n1 * len(sizes) * d * d + n1 * d * num_classes)
    return out


def count_flops(
    model: Model | str | ModelVariant, height: int, width: int, include_attention_scores: bool = False
) -> int:
    """Multiply-accumulates of all parameterised layers for one 1xHxW forward.

    The Q.K^T and A.V products are excluded unless requested: the published
    FLOP column scales by 10.53/2.62 = 4.02 for a 4x pixel increase, i.e. it
    grows linearly with pixel count and cannot contain terms quadratic in N.
    """
    if isinstance(model, Model):
        variant, ncls = model.variant, model.num_classes
    else:
        variant, ncls = model, 2
    br = flop_breakdown(variant, height, width, ncls)
    return sum(val for key, val in br.items() if include_attention_scores or not key.endswith("attention_scores"))


def attention_score_macs(cfg: StageConfig, height: int, width: int) -> int:
    """Q.K^T plus A.V multiply-accumulates of one attention layer at stage resolution ``height x width``."""
    return _attention_macs(cfg.channels, height * width, cfg.merge)["attention_scores"]


def measure_macs(model: Model, height: int, width: int) -> dict[str, int]:
    """Run a forward pass on zeros and count MACs at the op level."""
    x = np.zeros((1, 3, height, width), dtype=np.float32)
    with T.no_grad(), T.count_macs() as counter:
        model(x, x if model.variant.kind != "mono" else None)
    return dict(counter)


# ---------------------------------------------------------------------------
# effective receptive field
# ---------------------------------------------------------------------------
class ConvBaseline(Module):
    """Two 3x3 stride-1 convolutions with a ReLU between (5x5 receptive field)."""

    kernel = 3
    layers = 2

    def __init__(self, channels: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.conv1 = Conv2d(3, channels, 3, rng, padding=1)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)

    def erf_maps(self, t1, t2=None) -> dict:
        y = self.conv2(T.relu(self.conv1(T.as_tensor(t1))))
        return {1: (y, 1), "logits": (y, 1)}


def _model_erf_maps(model: Model, t1, t2) -> dict:
    feats = model.features(t1, t2)
    maps = {}
    stride = 1
    for i, (z, (h, w), cfg) in enumerate(zip(feats["fused"], feats["sizes"], model.variant.stages), start=1):
        stride *= cfg.patch_stride
        maps[i] = (tokens_to_image(z, h, w), stride)
    maps["logits"] = (feats["logits"], model.variant.stages[0].patch_stride)
    return maps


def erf_probe(model, t1, t2=None, target="logits", position: Sequence[int] | None = None) -> np.ndarray:
    """|d(activation at ``position``)/d(t1)| summed over input channels, scaled to max 1.

    ``target`` is a stage index 1..4 (fused features of that stage) or
    ``"logits"``. ``position`` is (row, col) in input pixels, default centre;
    the activation is the channel sum of the target map at the cell covering it.
    """
    x1 = Tensor(np.asarray(t1.data if isinstance(t1, Tensor) else t1), requires_grad=True)
    if x1.ndim != 4 or x1.shape[0] != 1:
        raise ContractError(f"erf_probe expects a single (1, 3, H, W) image, got {x1.shape}")
    height, width = x1.shape[2:]
    row, col = position if position is not None else (height // 2, width // 2)
    if not (0 <= row < height and 0 <= col < width):
        raise ContractError(f"position {(row, col)} outside {height}x{width} input")
    if isinstance(model, Model):
        x2 = None if t2 is None else T.as_tensor(t2.data if isinstance(t2, Tensor) else t2)
        maps = _model_erf_maps(model, x1, x2)
    else:
        maps = model.erf_maps(x1, t2)
    if target not in maps:
        raise ContractError(f"unknown ERF target {target!r}; choose from {list(maps)}")
    fmap, stride = maps[target]
    act = fmap[0, :, row // stride, col // stride].sum()
    T.backward(act)
    heat = np.abs(x1.grad[0]).sum(axis=0).astype(np.float64)
    peak = heat.max()
    return heat / peak if peak > 0 else heat


def erf_mass_outside(heat: np.ndarray, center: Sequence[int], half: int) -> float:
    """Fraction of heatmap mass outside the (2*half+1)^2 window at ``center``."""
    r, c = center
    inside = heat[max(r - half, 0) : r + half + 1, max(c - half, 0) : c + half + 1].sum()
    total = heat.sum()
    return float((total - inside) / total) if total > 0 else 0.0


def receptive_field(kernels: Sequence[int], strides: Sequence[int]) -> int:
    """Theoretical receptive field of stacked convolutions."""
    rf, jump = 1, 1
    for k, s in zip(kernels, strides):
        rf += (k - 1) * jump
        jump *= s
    return rf


__all__ = [
    "ModelVariant",
    "Model",
    "build",
    "forward",
    "count_params",
    "count_flops",
    "flop_breakdown",
    "measure_macs",
    "attention_score_macs",
    "erf_probe",
    "erf_mass_outside",
    "receptive_field",
    "ConvBaseline",
    "get_variant",
    "variant_names",
    "PUBLISHED_TABLE",
    "PUBLISHED_PARAMS_M",
    "PUBLISHED_FLOPS_G",
    "StageOutput",
    "image_to_tokens",
]
