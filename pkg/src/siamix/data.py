"""Bi-temporal samples: loading, tiling, augmentation, label cleanup, synthesis."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ContractError, DataError
from .tensor import interp_matrix

TASKS = ("detection", "change")


@dataclass
class SamplePair:
    t1: np.ndarray  # (H, W, 3) float32 in [0, 1]
    t2: np.ndarray
    label: np.ndarray  # (H, W) int64
    task: str = "detection"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"unknown task {self.task!r}")
        if self.t1.shape != self.t2.shape or self.t1.shape[:2] != self.label.shape:
            raise DataError(f"t1 {self.t1.shape}, t2 {self.t2.shape} and label {self.label.shape} disagree")

    @property
    def hw(self) -> tuple[int, int]:
        return self.label.shape


def to_batch(samples: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack samples into (B,3,H,W), (B,3,H,W), (B,H,W)."""
    t1 = np.stack([s.t1 for s in samples]).transpose(0, 3, 1, 2)
    t2 = np.stack([s.t2 for s in samples]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(t1), np.ascontiguousarray(t2), np.stack([s.label for s in samples])


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------
def _read(path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    except OSError as exc:
        raise DataError(f"unreadable image {path}: {exc}") from None


def binarize_label(raw: np.ndarray, threshold: int = 0) -> np.ndarray:
    """1 where ``raw > threshold`` else 0."""
    return (np.asarray(raw) > threshold).astype(np.int64)


def load_pair(
    t1_path, t2_path, label_path, task: str = "detection", binarize: bool = False, num_classes: int = 2
) -> SamplePair:
    t1 = _read(t1_path, "RGB")
    t2 = _read(t2_path, "RGB")
    raw = _read(label_path, "L")
    if t1.shape != t2.shape:
        raise DataError(f"size mismatch: {t1_path} is {t1.shape[:2]}, {t2_path} is {t2.shape[:2]}")
    if raw.shape != t1.shape[:2]:
        raise DataError(f"size mismatch: {label_path} is {raw.shape}, images are {t1.shape[:2]}")
    label = binarize_label(raw) if binarize else raw.astype(np.int64)
    if label.max() >= num_classes:
        raise DataError(f"label value {label.max()} in {label_path} exceeds {num_classes - 1}")
    meta = {"source": str(t1_path), "origin": (0, 0)}
    return SamplePair(t1.astype(np.float32) / 255, t2.astype(np.float32) / 255, label, task, meta)


def save_image(path, array: np.ndarray) -> None:
    """Write a [0,1] float RGB/gray image or an integer mask as 8-bit PNG."""
    a = np.asarray(array)
    if a.dtype.kind == "f":
        a = np.clip(np.rint(a * 255), 0, 255)
    Image.fromarray(a.astype(np.uint8)).save(path)


def read_manifest(path) -> list[tuple[Path, Path, Path]]:
    """Tab-separated ``t1 t2 label`` lines; relative paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing manifest: {path}")
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{n}: expected 3 tab-separated fields, got {len(parts)}")
        rows.append(tuple(p if os.path.isabs(p) else path.parent / p for p in map(Path, parts)))
    if not rows:
        raise DataError(f"empty manifest: {path}")
    return rows


def load_dataset(manifest, task: str = "detection", binarize: bool = False) -> list[SamplePair]:
    return [load_pair(a, b, c, task, binarize) for a, b, c in read_manifest(manifest)]


# ---------------------------------------------------------------------------
# tiling and label cleanup
# ---------------------------------------------------------------------------
def _starts(n: int, size: int, step: int, pad: bool) -> tuple[list[int], int]:
    if size > n and not pad:
        raise DataError(f"tile size {size} exceeds image size {n}")
    rem = (n - size) % step if n >= size else 1
    if rem and not pad:
        raise DataError(f"image size {n} not tileable by size {size} with step {step}; pass pad=True")
    count = 1 + max(0, -(-(n - size) // step))
    return [i * step for i in range(count)], (count - 1) * step + size


def tile(sample: SamplePair, size: int, overlap: int = 0, pad: bool = False) -> list[SamplePair]:
    """Cut a sample into ``size`` x ``size`` tiles in row-major order.

    With ``pad`` the canvas is zero-padded at the bottom/right so that the
    last row and column of tiles fit.
    """
    if size < 1 or not 0 <= overlap < size:
        raise ConfigError(f"need size >= 1 and 0 <= overlap < size, got {size}, {overlap}")
    h, w = sample.hw
    step = size - overlap
    rows, ph = _starts(h, size, step, pad)
    cols, pw = _starts(w, size, step, pad)
    t1, t2, lab = sample.t1, sample.t2, sample.label
    if (ph, pw) != (h, w):
        t1 = np.pad(t1, ((0, ph - h), (0, pw - w), (0, 0)))
        t2 = np.pad(t2, ((0, ph - h), (0, pw - w), (0, 0)))
        lab = np.pad(lab, ((0, ph - h), (0, pw - w)))
    out = []
    for r in rows:
        for c in cols:
            win = (slice(r, r + size), slice(c, c + size))
            meta = {**sample.meta, "origin": (r, c)}
            out.append(SamplePair(t1[win].copy(), t2[win].copy(), lab[win].copy(), sample.task, meta))
    return out


def untile(tiles: Sequence[SamplePair], height: int, width: int) -> SamplePair:
    """Reassemble non-overlapping tiles using their recorded origins."""
    if not tiles:
        raise ContractError("no tiles to reassemble")
    c = tiles[0].t1.shape[2]
    t1 = np.zeros((height, width, c), tiles[0].t1.dtype)
    t2 = np.zeros_like(t1)
    lab = np.zeros((height, width), tiles[0].label.dtype)
    for t in tiles:
        r, q = t.meta["origin"]
        th, tw = t.hw
        th, tw = min(th, height - r), min(tw, width - q)
        t1[r : r + th, q : q + tw] = t.t1[:th, :tw]
        t2[r : r + th, q : q + tw] = t.t2[:th, :tw]
        lab[r : r + th, q : q + tw] = t.label[:th, :tw]
    meta = {k: v for k, v in tiles[0].meta.items() if k != "origin"}
    return SamplePair(t1, t2, lab, tiles[0].task, {**meta, "origin": (0, 0)})


def morph_denoise(mask: np.ndarray, kernel: int = 3, erode_iters: int = 1, dilate_iters: int = 1) -> np.ndarray:
    """Opening with a square structuring element: erosions, then dilations.

    Border pixels only consider in-image neighbours.
    """
    if kernel < 3 or kernel % 2 == 0:
        raise ConfigError(f"kernel size must be odd and >= 3, got {kernel}")
    m = np.asarray(mask)
    out = m.copy()
    for _ in range(erode_iters):
        out = ndimage.minimum_filter(out, size=kernel, mode="nearest")
    for _ in range(dilate_iters):
        out = ndimage.maximum_filter(out, size=kernel, mode="nearest")
    return out.astype(m.dtype)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class AugmentPolicy:
    hflip: bool = True
    resize: tuple[float, float] | None = (0.5, 2.0)
    crop: int | None = None  # square crop size; None keeps the resized size
    pad: bool = True  # pad images smaller than the crop instead of failing

    def __post_init__(self):
        if self.resize is not None:
            lo, hi = self.resize
            if not 0 < lo <= hi:
                raise ConfigError(f"invalid resize range {self.resize}")
        if self.crop is not None and self.crop < 1:
            raise ConfigError("crop size must be positive")


FLIP_ONLY = AugmentPolicy(hflip=True, resize=None, crop=None)


def resize_image(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear (half-pixel centres) resize of an (H, W, C) float image."""
    ah = interp_matrix(img.shape[0], h, img.dtype)
    aw = interp_matrix(img.shape[1], w, img.dtype)
    return np.einsum("ih,hwc,jw->ijc", ah, img, aw).astype(img.dtype)


def resize_label(label: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize: output pixel centres map to the covering source pixel."""
    rows = np.minimum(((np.arange(h) + 0.5) * label.shape[0] / h).astype(np.int64), label.shape[0] - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * label.shape[1] / w).astype(np.int64), label.shape[1] - 1)
    return label[rows[:, None], cols[None, :]]


def hflip(sample: SamplePair) -> SamplePair:
    return replace(
        sample,
        t1=sample.t1[:, ::-1].copy(),
        t2=sample.t2[:, ::-1].copy(),
        label=sample.label[:, ::-1].copy(),
    )


def draw_ratio(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def augment(sample: SamplePair, rng: np.random.Generator, policy: AugmentPolicy) -> SamplePair:
    """Apply the same random geometric transform to t1, t2 and label."""
    out = sample
    if policy.resize is not None:
        ratio = draw_ratio(rng, policy.resize)
        h, w = out.hw
        nh, nw = max(1, round(h * ratio)), max(1, round(w * ratio))
        out = replace(
            out,
            t1=resize_image(out.t1, nh, nw),
            t2=resize_image(out.t2, nh, nw),
            label=resize_label(out.label, nh, nw),
        )
    if policy.hflip and rng.random() < 0.5:
        out = hflip(out)
    if policy.crop is not None:
        out = random_crop(out, policy.crop, rng, policy.pad)
    return out


def random_crop(sample: SamplePair, size: int, rng: np.random.Generator, pad: bool = True) -> SamplePair:
    h, w = sample.hw
    if (h < size or w < size) and not pad:
        raise DataError(f"crop {size} larger than image {h}x{w} and padding disabled")
    ph, pw = max(size - h, 0), max(size - w, 0)
    t1, t2, lab = sample.t1, sample.t2, sample.label
    if ph or pw:
        t1 = np.pad(t1, ((0, ph), (0, pw), (0, 0)))
        t2 = np.pad(t2, ((0, ph), (0, pw), (0, 0)))
        lab = np.pad(lab, ((0, ph), (0, pw)))
    r = int(rng.integers(0, t1.shape[0] - size + 1))
    c = int(rng.integers(0, t1.shape[1] - size + 1))
    win = (slice(r, r + size), slice(c, c + size))
    return replace(sample, t1=t1[win].copy(), t2=t2[win].copy(), label=lab[win].copy())


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, sample index), regardless of visiting order."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------
ROOF_COLOURS = np.array(
    [
        [0.85, 0.25, 0.2],
        [0.9, 0.9, 0.92],
        [0.25, 0.35, 0.85],
        [0.95, 0.75, 0.2],
        [0.6, 0.2, 0.6],
        [0.1, 0.8, 0.85],
        [0.95, 0.5, 0.75],
        [0.15, 0.15, 0.2],
    ],
    dtype=np.float32,
)


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the rectangle-building generator (a stand-in for real imagery)."""

    size: int = 64
    buildings: tuple[int, int] = (2, 5)
    building_size: tuple[int, int] = (8, 20)
    p_add: float = 0.5  # chance of each extra candidate building appearing in T2
    p_remove: float = 0.3
    p_alter: float = 0.3  # footprint grows or shrinks
    grid: int = 4  # building edges snap to this pixel grid
    jitter: float = 0.08  # T2 photometric gain/offset amplitude
    texture: float = 0.15  # background texture standard deviation
    texture_scale: float = 1.0  # smoothing sigma of the texture, pixels
    texture_seed: int | None = None

    def __post_init__(self):
        for name in ("p_add", "p_remove", "p_alter", "jitter", "texture"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.buildings
        if lo < 0 or hi < lo:
            raise ConfigError(f"invalid building count range {self.buildings}")
        smin, smax = self.building_size
        if smin < 1 or smax < smin or smax > self.size:
            raise ConfigError(f"invalid building size range {self.building_size}")
        if self.grid < 1:
            raise ConfigError("grid must be >= 1")

    def no_change(self) -> "SceneSpec":
        return replace(self, p_add=0.0, p_remove=0.0, p_alter=0.0, jitter=0.0)


@dataclass
class SynthScene:
    t1: np.ndarray
    t2: np.ndarray
    footprint1: np.ndarray
    footprint2: np.ndarray

    def pair(self, task: str, meta: dict | None = None) -> SamplePair:
        label = self.footprint1 if task == "detection" else self.footprint1 ^ self.footprint2
        return SamplePair(self.t1, self.t2, label.astype(np.int64), task, dict(meta or {}))


def _texture(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    size = spec.size
    base = np.array([0.35, 0.45, 0.25]) + rng.uniform(-0.08, 0.08, 3)
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(spec.texture_scale, spec.texture_scale, 0))
    fine = rng.standard_normal((size, size, 3)) * 0.02
    return np.clip(base + spec.texture * noise / (noise.std() + 1e-8) + fine, 0, 1)


def _rect(rng: np.random.Generator, spec: SceneSpec) -> tuple[int, int, int, int]:
    g = spec.grid
    lo, hi = spec.building_size
    h = max(g, int(rng.integers(lo, hi + 1)) // g * g)
    w = max(g, int(rng.integers(lo, hi + 1)) // g * g)
    r = int(rng.integers(0, (spec.size - h) // g + 1)) * g
    c = int(rng.integers(0, (spec.size - w) // g + 1)) * g
    return r, c, h, w


def _overlaps(rect, others, margin: int) -> bool:
    r, c, h, w = rect
    return any(
        r < r2 + h2 + margin and r2 < r + h + margin and c < c2 + w2 + margin and c2 < c + w + margin
        for r2, c2, h2, w2 in others
    )


def _place(rng, spec, existing, tries: int = 50):
    for _ in range(tries):
        rect = _rect(rng, spec)
        if not _overlaps(rect, existing, spec.grid):
            return rect
    return None


def _paint(img, mask, rect, colour, rng):
    r, c, h, w = rect
    roof = colour + rng.normal(0, 0.02, (h, w, 3))
    img[r : r + h, c : c + w] = np.clip(roof, 0, 1)
    mask[r : r + h, c : c + w] = 1


def synth_scene(rng: np.random.Generator, spec: SceneSpec = SceneSpec()) -> SynthScene:
    """One bi-temporal scene with per-building add/remove/alter edits."""
    tex_rng = rng if spec.texture_seed is None else np.random.default_rng(spec.texture_seed)
    background = _texture(tex_rng, spec)
    n = int(rng.integers(spec.buildings[0], spec.buildings[1] + 1))
    rects: list[tuple] = []
    for _ in range(n):
        rect = _place(rng, spec, rects)
        if rect is not None:
            rects.append(rect)
    # every building in a scene gets its own roof colour while the palette lasts
    order = list(rng.permutation(len(ROOF_COLOURS)))
    pick = lambda: ROOF_COLOURS[order.pop() if order else rng.integers(0, len(ROOF_COLOURS))]
    colours = [pick() for _ in rects]

    after: list[tuple] = []
    after_colours = []
    for rect, colour in zip(rects, colours):
        u = rng.random()
        if u < spec.p_remove:
            continue
        if u < spec.p_remove + (1 - spec.p_remove) * spec.p_alter:
            r, c, h, w = rect
            g = spec.grid
            # edits of at least two grid cells stay resolvable at the 4x output stride
            dh, dw = (int(v) * g for v in rng.choice([-3, -2, 2, 3], 2))
            nh = int(np.clip(h + dh, g, spec.size - r))
            nw = int(np.clip(w + dw, g, spec.size - c))
            candidate = (r, c, nh, nw)
            others = [x for x in rects if x != rect] + after
            if (nh, nw) != (h, w) and not _overlaps(candidate, others, spec.grid):
                rect = candidate
        after.append(rect)
        after_colours.append(colour)
    for _ in range(n):
        if rng.random() < spec.p_add:
            rect = _place(rng, spec, rects + after)
            if rect is not None:
                after.append(rect)
                after_colours.append(pick())

    t1, m1 = background.copy(), np.zeros((spec.size, spec.size), np.int64)
    for rect, colour in zip(rects, colours):
        _paint(t1, m1, rect, colour, rng)
    t2, m2 = background.copy(), np.zeros_like(m1)
    for rect, colour in zip(after, after_colours):
        _paint(t2, m2, rect, colour, rng)
    if spec.jitter:
        gain = 1 + rng.uniform(-spec.jitter, spec.jitter, 3)
        offset = rng.uniform(-spec.jitter, spec.jitter, 3) / 2
        t2 = np.clip(t2 * gain + offset, 0, 1)
    return SynthScene(t1.astype(np.float32), t2.astype(np.float32), m1, m2)


def synth_dataset(count: int, seed: int, spec: SceneSpec = SceneSpec(), task: str = "detection") -> list[SamplePair]:
    return [synth_scene(sample_rng(seed, i), spec).pair(task, {"source": f"synth-{seed}-{i}"}) for i in range(count)]


def write_dataset(root, scenes: Sequence[SynthScene], splits: dict[str, Sequence[int]]) -> dict[str, Path]:
    """Materialise scenes as PNGs plus per-task, per-split manifests.

    Layout: ``images/{i}_t1.png``, ``images/{i}_t2.png``,
    ``labels/{i}_detection.png``, ``labels/{i}_change.png`` and
    ``manifests/{task}/{split}.txt``.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for i, sc in enumerate(scenes):
        save_image(root / "images" / f"{i:04d}_t1.png", sc.t1)
        save_image(root / "images" / f"{i:04d}_t2.png", sc.t2)
        save_image(root / "labels" / f"{i:04d}_detection.png", sc.footprint1)
        save_image(root / "labels" / f"{i:04d}_change.png", sc.footprint1 ^ sc.footprint2)
    written = {}
    for task in TASKS:
        mdir = root / "manifests" / task
        mdir.mkdir(parents=True, exist_ok=True)
        for split, idx in splits.items():
            lines = [
                f"../../images/{i:04d}_t1.png\t../../images/{i:04d}_t2.png\t../../labels/{i:04d}_{task}.png"
                for i in idx
            ]
            path = mdir / f"{split}.txt"
            path.write_text("\n".join(lines) + "\n")
            written[f"{task}/{split}"] = path
    return written
