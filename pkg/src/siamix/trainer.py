"""AdamW with a poly schedule, the training loop, evaluation and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import AugmentPolicy, SamplePair, augment, sample_rng, to_batch
from .decoder import class_map, upsample_logits
from .errors import ConfigError, ContractError, DataError, NumericError
from .model import Model, build, get_variant
from .objectives import LossSpec, MetricsReport, Score, composite_loss, dice_loss, focal_loss, weighted_cross_entropy

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def poly_lr(lr0: float, t: int, total: int, power: float = 1.0) -> float:
    """lr0 * (1 - t/T)^power, exactly 0 at t = T."""
    if not 0 <= t <= total:
        raise ContractError(f"iteration {t} outside [0, {total}]")
    if t == total:
        return 0.0
    return lr0 * (1.0 - t / total) ** power


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr0: float = 6e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper) -> "OptimState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adamw_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimState, lr: float, names=None
) -> None:
    """One in-place AdamW update; weight decay is applied to θ before and apart from the Adam term."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and moment buffers differ in length")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise NumericError(f"non-finite gradient in parameter {name} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ContractError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        buf = np.multiply(g, 1.0 - b1, dtype=m.dtype)
        m *= b1
        m += buf
        np.multiply(g, g, out=buf)
        buf *= 1.0 - b2
        v *= b2
        v += buf
        # p -= lr * (m / c1) / (sqrt(v / c2) + eps), without further temporaries
        np.divide(v, c2, out=buf)
        np.sqrt(buf, out=buf)
        buf += state.eps
        np.divide(m, buf, out=buf)
        buf *= lr / c1
        p -= buf


@dataclass
class TrainConfig:
    variant: str = "nano"
    task: str = "detection"
    loss: str = "dice:1,focal:1"
    gamma: float = 2.0
    class_weights: tuple[float, ...] | None = None
    iters: int = 500
    lr: float = 6e-5
    power: float = 1.0
    batch_size: int = 1
    weight_decay: float = 0.01
    seed: int = 0
    num_classes: int = 2
    eval_interval: int = 100
    checkpoint_interval: int = 0  # periodic checkpoint-NNNNNN.npz files; 0 keeps only the final one
    augment: str = "flip"  # "none", "flip" or "full"
    crop: int | None = None
    reduction_layout: str | None = None
    share_encoders: bool = False

    def __post_init__(self):
        if self.iters < 1:
            raise ConfigError("iters must be >= 1")
        if self.lr <= 0 or self.power <= 0:
            raise ConfigError("lr and power must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.augment not in ("none", "flip", "full"):
            raise ConfigError(f"unknown augment mode {self.augment!r}")
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
        self.loss_spec()

    def loss_spec(self) -> LossSpec:
        return LossSpec.parse(self.loss, class_weights=self.class_weights, gamma=self.gamma)

    def policy(self) -> AugmentPolicy | None:
        if self.augment == "none":
            return None
        if self.augment == "flip":
            return AugmentPolicy(hflip=True, resize=None, crop=self.crop)
        return AugmentPolicy(hflip=True, resize=(0.5, 2.0), crop=self.crop, pad=True)

    def model_overrides(self) -> dict:
        out = {"share_encoders": self.share_encoders}
        if self.reduction_layout:
            out["reduction_layout"] = self.reduction_layout
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def build_model(cfg: TrainConfig) -> Model:
    return build(get_variant(cfg.variant, **cfg.model_overrides()), cfg.num_classes, cfg.seed)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------
def predict(model: Model, t1: np.ndarray, t2: np.ndarray | None) -> np.ndarray:
    """Class map at input resolution for a (B,3,H,W) batch.

    Inputs whose sides are not multiples of the model stride are edge-padded
    for the forward pass and the prediction is cropped back.
    """
    h, w = t1.shape[2:]
    s = model.variant.total_stride
    ph, pw = -h % s, -w % s
    if ph or pw:
        pad = ((0, 0), (0, 0), (0, ph), (0, pw))
        t1 = np.pad(t1, pad, mode="edge")
        t2 = np.pad(t2, pad, mode="edge") if t2 is not None else None
    with T.no_grad():
        logits = model(t1, t2)
        full = upsample_logits(logits, *t1.shape[2:])
    return class_map(full)[:, :h, :w]


def headline(report: MetricsReport, task: str) -> Score:
    """Building-class score for detection, class mean for change."""
    return report.building if task == "detection" else report.class_mean


def evaluate(
    model: Model, dataset: Sequence[SamplePair], task: str | None = None, per_sample: list | None = None
) -> MetricsReport:
    if not dataset:
        raise ContractError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    report = MetricsReport(model.num_classes)
    for s in dataset:
        t1, t2, lab = to_batch([s])
        pred = predict(model, t1, t2)
        report.update(pred, lab)
        if per_sample is not None:
            one = MetricsReport(model.num_classes)
            one.update(pred, lab)
            per_sample.append(one)
    if was_training:
        model.train(model._drop_rng)
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(model: Model, state: OptimState | None, path, iteration: int = 0, config: TrainConfig | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    v = model.variant
    meta = {
        "format": CHECKPOINT_VERSION,
        "variant": v.name,
        "overrides": {
            "share_encoders": v.share_encoders,
            "reduction_layout": v.stages[0].reduction_layout,
            "fusion_depth": v.fusion_depth,
        },
        "num_classes": model.num_classes,
        "seed": model.seed,
        "iteration": iteration,
        "config_hash": config.digest() if config else None,
        "config": asdict(config) if config else None,
    }
    entries = {"META": json.dumps(meta, indent=1, sort_keys=True).encode()}
    for name, p in model.named_parameters():
        entries[f"param/{name}.npy"] = _npy_bytes(p.data)
    if state is not None:
        entries["optim/state.json"] = json.dumps(
            {"t": state.t, "lr0": state.lr0, "betas": state.betas, "eps": state.eps, "weight_decay": state.weight_decay}
        ).encode()
        for i, (m, vv) in enumerate(zip(state.m, state.v)):
            entries[f"optim/m/{i:05d}.npy"] = _npy_bytes(m)
            entries[f"optim/v/{i:05d}.npy"] = _npy_bytes(vv)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        for name, payload in entries.items():
            zf.writestr(zipfile.ZipInfo(name, _ZIP_EPOCH), payload)
    tmp.replace(path)
    return path


def read_checkpoint_meta(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("META"))


def load_checkpoint(path, variant: str | None = None) -> tuple[Model, OptimState | None, dict]:
    """Rebuild the model recorded in ``path`` and restore every buffer bitwise."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing checkpoint: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("META"))
        if meta.get("format") != CHECKPOINT_VERSION:
            raise ConfigError(f"checkpoint format {meta.get('format')} != supported {CHECKPOINT_VERSION}")
        if variant is not None and variant != meta["variant"]:
            raise ConfigError(f"checkpoint holds variant {meta['variant']!r}, expected {variant!r}")
        model = build(get_variant(meta["variant"], **meta["overrides"]), meta["num_classes"], meta["seed"])
        names = set(zf.namelist())
        for name, p in model.named_parameters():
            key = f"param/{name}.npy"
            if key not in names:
                raise ConfigError(f"checkpoint lacks parameter {name}")
            arr = np.load(io.BytesIO(zf.read(key)), allow_pickle=False)
            if arr.shape != p.shape:
                raise ConfigError(f"parameter {name}: stored {arr.shape}, model {p.shape}")
            p.data = arr.astype(arr.dtype.newbyteorder("="))
        state = None
        if "optim/state.json" in names:
            hyper = json.loads(zf.read("optim/state.json"))
            count = len(model.parameters())
            m = [np.load(io.BytesIO(zf.read(f"optim/m/{i:05d}.npy"))) for i in range(count)]
            v = [np.load(io.BytesIO(zf.read(f"optim/v/{i:05d}.npy"))) for i in range(count)]
            m = [a.astype(a.dtype.newbyteorder("=")) for a in m]
            v = [a.astype(a.dtype.newbyteorder("=")) for a in v]
            state = OptimState(m, v, hyper["t"], hyper["lr0"], tuple(hyper["betas"]), hyper["eps"], hyper["weight_decay"])
    return model, state, meta


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------
@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    components: list[dict] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    snapshots: list[tuple[int, MetricsReport]] = field(default_factory=list)
    checkpoint: Path | None = None
    model: Model | None = None
    state: OptimState | None = None

    def final_score(self, task: str) -> Score | None:
        return headline(self.snapshots[-1][1], task) if self.snapshots else None


def _component_values(spec: LossSpec, logits, labels) -> dict:
    out = {}
    with T.no_grad():
        for kind, _ in spec.components:
            if kind == "wce":
                out[kind] = weighted_cross_entropy(logits, labels, spec.class_weights).item()
            elif kind == "focal":
                out[kind] = focal_loss(logits, labels, spec.gamma).item()
            else:
                out[kind] = dice_loss(logits, labels).item()
    return out


def batch_indices(n: int, t: int, batch: int, seed: int) -> list[int]:
    """Sample indices drawn at iteration ``t``: epoch-wise permutations seeded by (seed, epoch)."""
    out = []
    for k in range(t * batch, (t + 1) * batch):
        epoch, pos = divmod(k, n)
        perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED, epoch])).permutation(n)
        out.append(int(perm[pos]))
    return out


def train(
    cfg: TrainConfig,
    dataset: Sequence[SamplePair],
    val: Sequence[SamplePair] | None = None,
    out_dir=None,
    resume=None,
) -> TrainReport:
    """Run ``cfg.iters`` AdamW steps; evaluate every ``eval_interval`` iterations."""
    if not dataset:
        raise ContractError("training dataset is empty")
    spec = cfg.loss_spec()
    policy = cfg.policy()
    out = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        model, state, meta = load_checkpoint(resume, cfg.variant)
        start = meta["iteration"]
        if state is None:
            raise ConfigError(f"checkpoint {resume} has no optimiser state to resume from")
    else:
        model = build_model(cfg)
        state = OptimState.zeros_like([p.data for p in model.parameters()], lr0=cfg.lr, weight_decay=cfg.weight_decay)
        start = 0
    if start > cfg.iters:
        raise ContractError(f"checkpoint iteration {start} beyond configured {cfg.iters}")
    named = list(model.named_parameters())
    params = [p for _, p in named]
    names = [n for n, _ in named]
    report = TrainReport(model=model, state=state)
    train_log = metric_log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume is not None else "w"
        train_log = open(out / "train_log.csv", mode, newline="")
        metric_log = open(out / "metrics.csv", mode, newline="")
        tw, mw = csv.writer(train_log), csv.writer(metric_log)
        if resume is None:
            tw.writerow(["iter", "lr", "loss"] + [k for k, _ in spec.components])
            mw.writerow(["iter", "class", "TP", "FP", "FN", "TN", "F1", "IoU"])
    ckpt_path = out / "checkpoint.npz" if out is not None else None
    try:
        for t in range(start, cfg.iters):
            lr = poly_lr(cfg.lr, t, cfg.iters, cfg.power)
            batch = []
            for j, idx in enumerate(batch_indices(len(dataset), t, cfg.batch_size, cfg.seed)):
                s = dataset[idx]
                if policy is not None:
                    s = augment(s, sample_rng(cfg.seed, t * cfg.batch_size + j), policy)
                batch.append(s)
            t1, t2, labels = to_batch(batch)
            model.train(sample_rng(cfg.seed + 1, t))
            model.zero_grad()
            logits = upsample_logits(model(t1, t2 if model.variant.kind != "mono" else None), *t1.shape[2:])
            loss = composite_loss(spec, logits, labels)
            value = loss.item()
            if not np.isfinite(value):
                if ckpt_path is not None:
                    save_checkpoint(model, state, out / "last_good.npz", t, cfg)
                raise NumericError(f"loss became {value} at iteration {t}")
            comps = _component_values(spec, logits, labels) if len(spec.components) > 1 or train_log else {}
            T.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            try:
                adamw_step([p.data for p in params], grads, state, lr, names)
            except NumericError:
                if ckpt_path is not None:
                    save_checkpoint(model, state, out / "last_good.npz", t, cfg)
                raise
            report.losses.append(value)
            report.lrs.append(lr)
            report.components.append(comps)
            if train_log:
                tw.writerow([t, repr(lr), repr(value)] + [repr(comps.get(k, 0.0)) for k, _ in spec.components])
            done = t + 1
            if cfg.eval_interval and done % cfg.eval_interval == 0:
                metrics = evaluate(model, val if val else dataset)
                report.snapshots.append((done, metrics))
                log.info("iter %d loss %.4f %s", done, value, headline(metrics, cfg.task))
                if metric_log:
                    for row in metrics.rows():
                        mw.writerow([done] + list(row.values()))
                    metric_log.flush()
            if out is not None and cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0 and done < cfg.iters:
                save_checkpoint(model, state, out / f"checkpoint-{done:06d}.npz", done, cfg)
    finally:
        for fh in (train_log, metric_log):
            if fh:
                fh.close()
    model.eval()
    if ckpt_path is not None:
        report.checkpoint = save_checkpoint(model, state, ckpt_path, cfg.iters, cfg)
    return report
