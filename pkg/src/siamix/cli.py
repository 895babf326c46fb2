"""``siamix`` command line: synthesis, training, evaluation, audits and probes.

Every invocation writes ``run_manifest.json`` into its output directory,
including failed ones.  Exit codes: 0 success, 1 usage or configuration
error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import data as D
from . import model as M
from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError
from .objectives import MetricsReport, inverse_frequency_weights
from .trainer import TrainConfig, evaluate, headline, load_checkpoint, predict, train

log = logging.getLogger("siamix")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PARAM_TOLERANCE = 0.10
FLOP_TOLERANCE = 0.15


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def version_string() -> str:
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).parent,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------
def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", type=Path, help="run directory (default runs/<command>)")
    p.add_argument("--config", type=Path, help="YAML file of option values; flags win")
    p.add_argument("--seed", type=int, default=0)


def _train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", default="nano")
    p.add_argument("--task", choices=D.TASKS, default="detection")
    p.add_argument("--data", type=Path, help="dataset root written by `synth` (uses manifests/<task>/)")
    p.add_argument("--manifest", type=Path, help="training manifest (overrides --data)")
    p.add_argument("--val-manifest", type=Path)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--lr", type=float, default=6e-5)
    p.add_argument("--power", type=float, default=1.0)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--loss", default="dice:1,focal:1", help="comma list of kind:weight, kinds wce/focal/dice")
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--class-weights", default=None, help="'auto' or comma-separated floats")
    p.add_argument("--eval-interval", type=int, default=100)
    p.add_argument("--checkpoint-interval", type=int, default=0)
    p.add_argument("--augment", choices=("none", "flip", "full"), default="none")
    p.add_argument("--crop", type=int)
    p.add_argument("--reduction-layout", choices=("sequence", "window"))
    p.add_argument("--share-encoders", action="store_true")
    p.add_argument("--num-classes", type=int, default=2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="siamix", description="Bi-temporal building and change segmentation.")
    parser.add_argument("--version", action="version", version=f"siamix {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic bi-temporal dataset")
    _add_common(p)
    p.add_argument("--pairs", type=int, default=8, help="training pairs")
    p.add_argument("--val", type=int, default=0)
    p.add_argument("--test", type=int, default=0)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    _train_options(p)
    p.add_argument("--resume", type=Path)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--task", choices=D.TASKS, default="detection")
    p.add_argument("--data", type=Path)
    p.add_argument("--split", default="train")
    p.add_argument("--manifest", type=Path)

    p = sub.add_parser("predict", help="write one mask PNG per input pair")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--task", choices=D.TASKS, default="detection")
    p.add_argument("--data", type=Path)
    p.add_argument("--split", default="train")
    p.add_argument("--manifest", type=Path)

    p = sub.add_parser("params", help="parameter audit against the published counts")
    _add_common(p)
    p.add_argument("--variant", action="append", help="repeatable; default: all six published variants")
    p.add_argument("--num-classes", type=int, default=2)

    p = sub.add_parser("flops", help="multiply-accumulate audit")
    _add_common(p)
    p.add_argument("--variant", default="siamix-0")
    p.add_argument("--size", type=int, action="append", help="square input size; repeatable (default 256 and 512)")
    p.add_argument("--include-attention-scores", action="store_true")

    p = sub.add_parser("erf", help="effective receptive field heatmaps")
    _add_common(p)
    p.add_argument("--variant", default="nano")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--target", action="append", help="stage 1-4 or 'logits'; repeatable (default all)")
    p.add_argument("--baseline", action="store_true", help="also probe the two-layer 3x3 conv baseline")

    p = sub.add_parser("prep-cdd", help="binarize grayscale labels and remove speckle by opening")
    _add_common(p)
    p.add_argument("labels", nargs="+", type=Path)
    p.add_argument("--threshold", type=int, default=0)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--erode", type=int, default=1)
    p.add_argument("--dilate", type=int, default=1)

    p = sub.add_parser("tile", help="cut the pairs of a manifest into square tiles")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--task", choices=D.TASKS, default="detection")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--pad", action="store_true")
    p.add_argument("--binarize", action="store_true")

    p = sub.add_parser("ablate", help="mono-temporal baseline vs bi-temporal model on synthetic data")
    _add_common(p)
    _train_options(p)
    p.add_argument("--baseline", default=None, help="baseline variant (default mono-baseline@<variant>)")
    return parser


def parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage() + "siamix: error: a command is required")
    if getattr(args, "config", None):
        try:
            values = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"config {args.config} must be a mapping")
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        values = {k.replace("-", "_"): v for k, v in values.items()}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {unknown}")
        for action in subparser._actions:
            if action.dest in values and action.type is Path and values[action.dest] is not None:
                values[action.dest] = Path(values[action.dest])
        subparser.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def _manifest(args, split: str = "train") -> Path:
    if getattr(args, "manifest", None):
        return args.manifest
    if getattr(args, "data", None):
        return args.data / "manifests" / args.task / f"{split}.txt"
    raise UsageError(f"siamix {args.command}: give --manifest or --data")


def _train_config(args, dataset, variant: str | None = None) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    values = {k: v for k, v in vars(args).items() if k in names and v is not None}
    values["class_weights"] = _class_weights(args.class_weights, dataset, args.num_classes)
    if variant:
        values["variant"] = variant
    return TrainConfig(**values)


def _class_weights(spec: str | None, dataset, num_classes: int) -> tuple[float, ...] | None:
    if spec is None:
        return None
    if spec == "auto":
        return inverse_frequency_weights((s.label for s in dataset), num_classes)
    try:
        return tuple(float(v) for v in spec.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --class-weights {spec!r}") from exc


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)


def _verdict(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


# ---------------------------------------------------------------------------
# commands; each returns a dict of outputs for the manifest
# ---------------------------------------------------------------------------
def cmd_synth(args, out: Path) -> dict:
    spec = D.SceneSpec(size=args.size)
    total = args.pairs + args.val + args.test
    if args.pairs < 1:
        raise ConfigError("--pairs must be >= 1")
    scenes = [D.synth_scene(D.sample_rng(args.seed, i), spec) for i in range(total)]
    splits = {"train": range(args.pairs)}
    if args.val:
        splits["val"] = range(args.pairs, args.pairs + args.val)
    if args.test:
        splits["test"] = range(args.pairs + args.val, total)
    written = D.write_dataset(out, scenes, splits)
    print(f"wrote {total} scenes to {out}")
    return {k: str(v) for k, v in written.items()}


def cmd_train(args, out: Path) -> dict:
    train_set = D.load_dataset(_manifest(args), args.task)
    val_path = args.val_manifest or (args.data / "manifests" / args.task / "val.txt" if args.data else None)
    val_set = D.load_dataset(val_path, args.task) if val_path and Path(val_path).is_file() else None
    cfg = _train_config(args, train_set)
    report = train(cfg, train_set, val_set, out_dir=out, resume=args.resume)
    score = report.final_score(cfg.task)
    if score is None:
        score = headline(evaluate(report.model, val_set or train_set), cfg.task)
    name = "F1_b" if cfg.task == "detection" else "mean F1"
    print(f"final {name}={score.f1:.4f} IoU={score.iou:.4f} loss={report.losses[-1] if report.losses else float('nan'):.4f}")
    return {
        "checkpoint": str(report.checkpoint),
        "train_log": str(out / "train_log.csv"),
        "metrics": str(out / "metrics.csv"),
        "final_f1": score.f1,
        "final_iou": score.iou,
    }


def _eval_set(args):
    return D.load_dataset(_manifest(args, args.split), args.task)


def cmd_eval(args, out: Path) -> dict:
    model, _, meta = load_checkpoint(args.checkpoint)
    dataset = _eval_set(args)
    per_sample: list[MetricsReport] = []
    report = evaluate(model, dataset, args.task, per_sample)
    (out / "metrics.csv").write_text(report.to_csv())
    rows = []
    for s, r in zip(dataset, per_sample):
        for row in r.rows():
            rows.append({"sample": s.meta.get("source", ""), **{k: row[k] for k in ("class", "TP", "FP", "FN", "TN")}})
    _write_csv(out / "per_sample.csv", rows)
    score = headline(report, args.task)
    name = "F1_b" if args.task == "detection" else "mean F1"
    print(f"{name}={score.f1:.6f} IoU={score.iou:.6f} over {len(dataset)} pairs")
    return {"metrics": str(out / "metrics.csv"), "per_sample": str(out / "per_sample.csv"), "f1": score.f1, "iou": score.iou}


def cmd_predict(args, out: Path) -> dict:
    model, _, _ = load_checkpoint(args.checkpoint)
    rows = D.read_manifest(_manifest(args, args.split))
    written = []
    for i, (a, b, c) in enumerate(rows):
        s = D.load_pair(a, b, c, args.task)
        t1, t2, _ = D.to_batch([s])
        pred = predict(model, t1, t2 if model.variant.kind != "mono" else None)[0]
        path = out / f"{i:04d}_{Path(a).stem}_mask.png"
        scale = 255 // max(model.num_classes - 1, 1)
        D.save_image(path, (pred * scale).astype(np.uint8))
        written.append(str(path))
    print(f"wrote {len(written)} masks to {out}")
    return {"masks": written}


def cmd_params(args, out: Path) -> dict:
    names = args.variant or [f"siamix-{k}" for k in M.PUBLISHED_TABLE]
    rows, all_ok = [], True
    for name in names:
        m = M.build(name, args.num_classes, args.seed)
        count = M.count_params(m)
        row = {"variant": name, "params": count, "params_M": round(count / 1e6, 3)}
        key = int(name.split("-")[1]) if name.startswith("siamix-") and name[7:].isdigit() else None
        if key in M.PUBLISHED_PARAMS_M:
            ref = M.PUBLISHED_PARAMS_M[key]
            ok = abs(count / 1e6 - ref) <= PARAM_TOLERANCE * ref
            all_ok &= ok
            row.update(reference_M=ref, ratio=round(count / 1e6 / ref, 4), verdict=_verdict(ok))
            print(f"{name}: {count / 1e6:.2f}M vs {ref}M +-10% -> {_verdict(ok)}")
        else:
            print(f"{name}: {count / 1e6:.3f}M (no published reference)")
        rows.append(row)
    _write_csv(out / "params.csv", rows)
    return {"params": str(out / "params.csv"), "all_pass": bool(all_ok)}


def cmd_flops(args, out: Path) -> dict:
    sizes = args.size or [256, 512]
    variant = M.get_variant(args.variant)
    rows = []
    for size in sizes:
        macs = M.count_flops(variant, size, size, args.include_attention_scores)
        row = {"variant": args.variant, "size": size, "gmacs": round(macs / 1e9, 4), "macs": macs}
        ref = None
        if variant.name.startswith("siamix-") and variant.name[7:].isdigit():
            ref = M.PUBLISHED_FLOPS_G.get((int(variant.name[7:]), size))
        if ref is not None:
            ok = abs(macs / 1e9 - ref) <= FLOP_TOLERANCE * ref
            row.update(reference_G=ref, verdict=_verdict(ok))
            print(f"{args.variant} @{size}: {macs / 1e9:.3f}G vs {ref}G +-15% -> {_verdict(ok)}")
        else:
            print(f"{args.variant} @{size}: {macs / 1e9:.3f}G")
        for key, val in M.flop_breakdown(variant, size, size).items():
            row[key] = val
        rows.append(row)
    _write_csv(out / "flops.csv", rows)
    return {"flops": str(out / "flops.csv")}


def _heatmap_png(path: Path, heat: np.ndarray) -> None:
    D.save_image(path, np.clip(np.rint(heat * 255), 0, 255).astype(np.uint8))


def cmd_erf(args, out: Path) -> dict:
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
    else:
        model = M.build(args.variant, 2, args.seed)
    rng = np.random.default_rng(args.seed)
    t1 = rng.random((1, 3, args.size, args.size)).astype(np.float32)
    t2 = rng.random((1, 3, args.size, args.size)).astype(np.float32)
    targets = args.target or ["1", "2", "3", "4", "logits"]
    outputs = {}
    center = (args.size // 2, args.size // 2)
    for target in targets:
        key = int(target) if target.isdigit() else target
        heat = M.erf_probe(model, t1, t2, key, center)
        path = out / f"erf_{target}.png"
        _heatmap_png(path, heat)
        np.save(out / f"erf_{target}.npy", heat)
        outside = M.erf_mass_outside(heat, center, 3)
        print(f"target {target}: mass outside 7x7 centre window {outside:.4f}")
        outputs[f"erf_{target}"] = str(path)
    if args.baseline:
        heat = M.erf_probe(M.ConvBaseline(seed=args.seed), t1, None, 1, center)
        _heatmap_png(out / "erf_conv_baseline.png", heat)
        np.save(out / "erf_conv_baseline.npy", heat)
        rows, cols = np.nonzero(heat)
        print(f"conv baseline support {np.ptp(rows) + 1}x{np.ptp(cols) + 1} (theory {M.receptive_field([3, 3], [1, 1])})")
        outputs["erf_conv_baseline"] = str(out / "erf_conv_baseline.png")
    return outputs


def cmd_prep_cdd(args, out: Path) -> dict:
    written = []
    for path in args.labels:
        raw = D._read(path, "L")
        mask = D.morph_denoise(D.binarize_label(raw, args.threshold), args.kernel, args.erode, args.dilate)
        dest = out / f"{path.stem}.png"
        D.save_image(dest, (mask * 255).astype(np.uint8))
        written.append(str(dest))
        print(f"{path}: {int(mask.sum())} foreground pixels after cleanup")
    return {"labels": written}


def cmd_tile(args, out: Path) -> dict:
    lines = []
    for dirs in ("images", "labels"):
        (out / dirs).mkdir(parents=True, exist_ok=True)
    for a, b, c in D.read_manifest(args.manifest):
        sample = D.load_pair(a, b, c, args.task, binarize=args.binarize)
        for tile in D.tile(sample, args.size, args.overlap, args.pad):
            r, q = tile.meta["origin"]
            stem = f"{Path(a).stem}_{r}_{q}"
            D.save_image(out / "images" / f"{stem}_t1.png", tile.t1)
            D.save_image(out / "images" / f"{stem}_t2.png", tile.t2)
            D.save_image(out / "labels" / f"{stem}.png", tile.label.astype(np.uint8))
            lines.append(f"images/{stem}_t1.png\timages/{stem}_t2.png\tlabels/{stem}.png")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} tiles to {out}")
    return {"manifest": str(out / "manifest.txt"), "tiles": len(lines)}


def cmd_ablate(args, out: Path) -> dict:
    train_set = D.load_dataset(_manifest(args), args.task)
    val_path = args.data / "manifests" / args.task / "val.txt" if args.data else None
    val_set = D.load_dataset(val_path, args.task) if val_path and val_path.is_file() else train_set
    baseline = args.baseline or f"mono-baseline@{args.variant}"
    results = {}
    for label, variant in (("mono", baseline), ("bi", args.variant)):
        cfg = _train_config(args, train_set, variant)
        report = train(cfg, train_set, None, out_dir=out / label)
        score = headline(evaluate(report.model, val_set), args.task)
        results[label] = {"variant": variant, "f1": score.f1, "iou": score.iou}
        print(f"{label:4s} {variant}: F1={score.f1:.4f} IoU={score.iou:.4f}")
    mono = results["mono"]["f1"]
    delta = (results["bi"]["f1"] - mono) / mono if mono > 0 else float("inf")
    print(f"relative delta F1 (bi vs mono): {delta:+.2%}")
    results["relative_delta_f1"] = delta
    (out / "ablation.json").write_text(json.dumps(results, indent=2))
    return {"ablation": str(out / "ablation.json"), **results}


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "params": cmd_params,
    "flops": cmd_flops,
    "erf": cmd_erf,
    "prep-cdd": cmd_prep_cdd,
    "tile": cmd_tile,
    "ablate": cmd_ablate,
}


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    return value


def _guess_out(argv: list[str], command: str) -> Path:
    for i, tok in enumerate(argv):
        if tok == "--out" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if tok.startswith("--out="):
            return Path(tok.split("=", 1)[1])
    return Path("runs") / command


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    started = time.time()
    command = next((a for a in argv if a in COMMANDS), "unknown")
    out = _guess_out(argv, command)
    manifest = {"command": command, "argv": argv, "version": version_string(), "start": started}
    args = None
    try:
        args = parse(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        out = args.out or Path("runs") / args.command
        out.mkdir(parents=True, exist_ok=True)
        manifest["config"] = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
        manifest["seed"] = getattr(args, "seed", None)
        manifest["outputs"] = COMMANDS[args.command](args, out)
        code = EXIT_OK
    except SystemExit as exc:  # --help / --version
        code = exc.code if isinstance(exc.code, int) else EXIT_OK
        if code == EXIT_OK:
            return EXIT_OK
    except (UsageError, ConfigError) as exc:
        print(exc, file=sys.stderr)
        manifest["error"] = str(exc)
        code = EXIT_USAGE
    except (DataError, ShapeError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        manifest["error"] = str(exc)
        code = EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        manifest["error"] = str(exc)
        code = EXIT_NUMERIC
    manifest["end"] = time.time()
    manifest["exit_code"] = code
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True))
    except OSError as exc:
        print(f"could not write run manifest: {exc}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
