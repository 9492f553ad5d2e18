"""Command-line entry point: ``apnet <subcommand> [options]``.

Subcommands: synth, augment, train, eval, infer, gradcheck. Every subcommand
that writes files takes ``--out`` and writes only inside that directory,
including a ``config.json`` echo of the fully resolved settings. That echo
can be passed back through ``--config`` to repeat the run.

Config files are JSON objects with optional sections ``synth``, ``data``,
``augment``, ``model`` and ``train`` (field names as in SynthSpec,
DeformSpec, ApnetConfig and TrainConfig; ``data`` holds n_series, slices and
split) plus an optional top-level ``preset``. Command-line flags override
values from the file. The ``paths`` and ``gradcheck`` sections of an echoed
config are informational and ignored on input.

Exit codes:

====  ==============================================
0     success
1     gradient check failed
2     usage error (bad flags)
3     invalid configuration
4     missing or undecodable input file, bad data
5     shape mismatch
6     numerical failure or training divergence
7     synthetic generation failed
8     metric undefined on the given data
9     any other internal error
====  ==============================================
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import errors
from .augment import DeformSpec, control_points, warp_pair
from .data import (
    DatasetManifest,
    ManifestEntry,
    SegDataset,
    SynthSpec,
    generate,
    load_image,
    load_labels,
    read_manifest,
    save_image,
    save_labels,
    split_by_series,
    write_manifest,
)
from .metrics import report
from .model import ApnetConfig, load_checkpoint
from .trainer import PRESETS, TrainConfig, apply_preset, evaluate, predict_images, train

log = logging.getLogger("apnet")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_CODES = [
    (errors.ConfigError, 3),
    (errors.DecodeError, 4),
    (errors.DataError, 4),
    (errors.ShapeError, 5),
    (errors.NumericError, 6),
    (errors.TrainingDivergedError, 6),
    (errors.GenerationError, 7),
    (errors.UndefinedMetricError, 8),
    (errors.ApnetError, 9),
]


def palette() -> np.ndarray:
    """Fixed 256-entry RGB colour table used for overlays.

    Entry ``i`` spreads the bits of ``i`` over the three channels, most
    significant colour bit first: bit 3k+0 of ``i`` feeds red, 3k+1 green
    and 3k+2 blue, landing on bit 7-k of that channel. Class 0 is black and
    neighbouring class ids get clearly different colours.
    """
    table = np.zeros((256, 3), dtype=np.uint8)
    for i in range(256):
        c, r, g, b = i, 0, 0, 0
        for k in range(8):
            r |= ((c >> 0) & 1) << (7 - k)
            g |= ((c >> 1) & 1) << (7 - k)
            b |= ((c >> 2) & 1) << (7 - k)
            c >>= 3
        table[i] = r, g, b
    return table


def overlay(image: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend class colours over a grayscale image; background (0) stays gray."""
    gray = np.repeat(image[..., None].astype(np.float64), 3, axis=2)
    colour = palette()[labels].astype(np.float64)
    fg = (labels != 0)[..., None]
    return np.where(fg, (1 - alpha) * gray + alpha * colour, gray).round().astype(np.uint8)


# ---------------------------------------------------------------- config


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise errors.ConfigError(f"config file {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise errors.ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise errors.ConfigError(f"config file {path} must hold a JSON object")
    unknown = set(cfg) - {"synth", "data", "augment", "model", "train", "preset", "paths", "gradcheck"}
    if unknown:
        raise errors.ConfigError(f"config file {path} has unknown sections {sorted(unknown)}")
    return cfg


def _build(cls, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise errors.ConfigError(f"[{section}] unknown keys {sorted(unknown)}; valid keys are {sorted(names)}")
    try:
        return cls(**values)
    except errors.ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise errors.ConfigError(f"[{section}] {exc}") from exc


def _overrides(args, mapping: dict[str, str]) -> dict:
    """Collect flags that were actually given, renamed to config keys."""
    return {key: getattr(args, flag) for flag, key in mapping.items() if getattr(args, flag, None) is not None}


def _echo(out: Path, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True, default=list) + "\n",
                                     encoding="utf-8")


def _require_file(path, what: str) -> Path:
    if path is None:
        raise errors.ConfigError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise errors.DataError(f"{what} {p} does not exist")
    return p


# ------------------------------------------------------------ subcommands


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    spec_values = dict(cfg.get("synth", {}))
    data_values = {"n_series": 10, "slices": 4, "split": [0.6, 0.2, 0.2], **cfg.get("data", {})}
    spec_values.update(_overrides(args, {"seed": "seed", "side": "side"}))
    data_values.update(_overrides(args, {"series": "n_series", "slices": "slices", "split": "split"}))
    spec = _build(SynthSpec, spec_values, "synth")
    if len(data_values["split"]) != 3 or min(data_values["split"]) < 0 or sum(data_values["split"]) <= 0:
        raise errors.ConfigError(f"split needs three non-negative fractions, got {data_values['split']}")
    out = Path(args.out)
    _echo(out, {"synth": dataclasses.asdict(spec), "data": data_values})
    manifest = generate(spec, int(data_values["n_series"]), int(data_values["slices"]), out)
    splits = split_by_series(manifest, data_values["split"], seed=spec.seed)
    for name, part in splits.items():
        write_manifest(out / f"{name}.tsv", part)
    counts = ", ".join(f"{k} {len(v.entries)}" for k, v in splits.items())
    print(f"wrote {len(manifest.entries)} samples ({counts}) to {out}")
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = _load_config(args.config)
    values = {"grid": 4, "max_displacement": None, "alpha": 1.0, "factor": 4, "seed": 0, **cfg.get("augment", {})}
    values.update(_overrides(args, {"grid": "grid", "max_displacement": "max_displacement",
                                    "factor": "factor", "seed": "seed"}))
    factor = int(values.pop("factor"))
    if factor < 1:
        raise errors.ConfigError(f"factor must be >= 1, got {factor}")
    base = _build(DeformSpec, values, "augment")
    src = read_manifest(_require_file(args.manifest, "--manifest"))
    src.validate()
    # fail on a bad lattice before writing anything
    if base.displacement(src.image_side) > 0:
        control_points(src.image_side, src.image_side, base)
    out = Path(args.out)
    _echo(out, {"augment": {**dataclasses.asdict(base), "factor": factor},
                "paths": {"manifest": str(args.manifest)}})
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(base.seed).spawn(len(src.entries))
    entries = []
    for e, child in zip(src.entries, seeds):
        img, lab = load_image(src.resolve(e.image)), load_labels(src.resolve(e.labels))
        stem = Path(e.image).stem
        per_copy = child.generate_state(max(1, factor - 1))
        for k in range(factor):
            if k == 0:
                wi, wl = img, lab
            else:
                wi, wl = warp_pair(img, lab, dataclasses.replace(base, seed=int(per_copy[k - 1])))
            name = f"{stem}_aug{k:02d}.png"
            save_image(out / "images" / name, wi)
            save_labels(out / "labels" / name, wl)
            entries.append(ManifestEntry(f"images/{name}", f"labels/{name}", e.series, e.slice_index))
    write_manifest(out / "manifest.tsv",
                   DatasetManifest(entries, src.num_classes, src.class_names, src.image_side, out))
    print(f"wrote {len(entries)} samples ({factor}x of {len(src.entries)}) to {out}")
    return EXIT_OK


def _resolve_train(args, manifest: DatasetManifest) -> tuple[ApnetConfig, TrainConfig, str | None]:
    cfg = _load_config(args.config)
    preset = args.preset if args.preset is not None else cfg.get("preset")
    model_values = dict(cfg.get("model", {}))
    for key, value in (("num_classes", manifest.num_classes), ("input_size", manifest.image_side)):
        if model_values.setdefault(key, value) != value:
            raise errors.ConfigError(f"[model] {key}={model_values[key]} but the manifest has {value}")
    train_values = dict(cfg.get("train", {}))
    train_values.update(_overrides(args, {"seed": "seed", "iters": "max_iter", "lr": "base_lr",
                                          "batch_size": "batch_size", "augment": "augment",
                                          "val_every": "val_every"}))
    model_cfg = _build(ApnetConfig, model_values, "model")
    train_cfg = _build(TrainConfig, train_values, "train")
    if preset is not None:
        model_cfg, train_cfg = apply_preset(model_cfg, train_cfg, preset)
        # flags beat the preset's augmentation choice
        if args.augment is not None:
            train_cfg = dataclasses.replace(train_cfg, augment=args.augment)
    return model_cfg, train_cfg, preset


def cmd_train(args) -> int:
    manifest = read_manifest(_require_file(args.manifest, "--manifest"))
    model_cfg, train_cfg, preset = _resolve_train(args, manifest)
    val = None
    if args.val_manifest is not None:
        val = SegDataset.from_manifest(read_manifest(_require_file(args.val_manifest, "--val-manifest")))
    manifest.validate()
    out = Path(args.out)
    # presets are already folded into the echoed sections
    _echo(out, {"model": model_cfg.to_dict(), "train": dataclasses.asdict(train_cfg),
                "paths": {"manifest": str(args.manifest), "val_manifest": args.val_manifest}})
    dataset = SegDataset.from_manifest(manifest)
    result = train(model_cfg, train_cfg, dataset, val_dataset=val, out_dir=out)
    tail = result.history[-1]
    msg = f"trained {train_cfg.max_iter} iterations{' (' + preset + ')' if preset else ''}; final loss {tail['loss']:.4f}"
    if result.best_miou is not None:
        msg += f"; best val mIoU {100 * result.best_miou:.2f}"
    print(msg)
    print("attention weights: " + " ".join(f"{s:g}:{w:.4f}" for s, w in
                                           zip(result.config.scales, result.params.attention.weights)))
    return EXIT_OK


def cmd_eval(args) -> int:
    params, config, extra = load_checkpoint(_require_file(args.checkpoint, "--checkpoint"))
    manifest = read_manifest(_require_file(args.manifest, "--manifest"))
    if manifest.image_side != config.input_size or manifest.num_classes != config.num_classes:
        raise errors.ConfigError(
            f"checkpoint expects side {config.input_size} and {config.num_classes} classes; "
            f"manifest has side {manifest.image_side} and {manifest.num_classes} classes")
    manifest.validate()
    cm = evaluate(params, config, SegDataset.from_manifest(manifest))
    rep = report(cm)
    out = Path(args.out)
    _echo(out, {"model": config.to_dict(),
                "paths": {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest)}})
    rep.write(out, "report")
    lam = params.attention.weights
    (out / "attention.tsv").write_text(
        "scale\tweight\n" + "".join(f"{s!r}\t{w!r}\n" for s, w in zip(config.scales, lam)), encoding="utf-8")
    print(rep.to_text())
    print("attention weights: " + " ".join(f"{s:g}:{w:.4f}" for s, w in zip(config.scales, lam)))
    return EXIT_OK


def cmd_infer(args) -> int:
    params, config, _ = load_checkpoint(_require_file(args.checkpoint, "--checkpoint"))
    image_path = _require_file(args.image, "--image")
    image = load_image(image_path)
    if image.shape != (config.input_size, config.input_size):
        raise errors.ShapeError(f"{image_path} is {image.shape}; the checkpoint expects side {config.input_size}")
    pred = predict_images(params, config, image[None])[0].astype(np.uint8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = image_path.stem
    save_labels(out / f"{stem}_labels.png", pred)
    written = [out / f"{stem}_labels.png"]
    if not args.no_overlay:
        Image.fromarray(overlay(image, pred)).save(out / f"{stem}_overlay.png")
        written.append(out / f"{stem}_overlay.png")
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    result = run_suite(range(args.seed, args.seed + args.seeds), tolerance=args.tolerance)
    text = result.to_text()
    print(text)
    if args.out is not None:
        out = Path(args.out)
        _echo(out, {"gradcheck": {"seed": args.seed, "seeds": args.seeds, "tolerance": args.tolerance}})
        (out / "gradcheck.txt").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK if result.passed else EXIT_CHECK_FAILED


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apnet", description="Attention pyramid segmentation toolkit.",
                                epilog="Exit codes: 0 ok, 1 check failed, 2 usage, 3 config, 4 data, "
                                       "5 shape, 6 numeric, 7 generation, 8 metric, 9 other.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file (sections synth/augment/model/train, optional preset)")
        sp.add_argument("--out", required=out_required, help="output directory; nothing is written outside it")

    s = sub.add_parser("synth", help="generate a synthetic twin-organ dataset")
    common(s)
    s.add_argument("--seed", type=int, help="generator seed (synth.seed)")
    s.add_argument("--side", type=int, help="image side in pixels, a multiple of 8 (synth.side)")
    s.add_argument("--series", type=int, help="number of series (data.n_series, default 10)")
    s.add_argument("--slices", type=int, help="slices per series (data.slices, default 4)")
    s.add_argument("--split", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"),
                   help="series fractions for train.tsv/val.tsv/test.tsv (data.split, default 0.6 0.2 0.2)")
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("augment", help="expand a manifest with moving-least-squares deformations")
    common(a)
    a.add_argument("--manifest", required=True, help="input manifest.tsv")
    a.add_argument("--factor", type=int, help="output copies per input image, original included (default 4)")
    a.add_argument("--seed", type=int, help="master seed; each image derives its own (default 0)")
    a.add_argument("--grid", type=int, help="control lattice points per axis (default 4)")
    a.add_argument("--max-displacement", type=float, help="max control point shift in pixels (default 5%% of side)")
    a.set_defaults(func=cmd_augment)

    t = sub.add_parser("train", help="train a model on a manifest")
    common(t)
    t.add_argument("--manifest", required=True, help="training manifest")
    t.add_argument("--val-manifest", help="validation manifest; enables checkpoint_best.npz")
    t.add_argument("--preset", choices=sorted(PRESETS), help="experiment arm (sets scales, SPP and augmentation)")
    t.add_argument("--seed", type=int, help="initialisation and shuffling seed (train.seed)")
    t.add_argument("--iters", type=int, help="iterations (train.max_iter)")
    t.add_argument("--lr", type=float, help="base learning rate (train.base_lr)")
    t.add_argument("--batch-size", type=int, help="images per step (train.batch_size)")
    t.add_argument("--augment", choices=["mls", "cda", "none"], help="on-the-fly augmentation (train.augment)")
    t.add_argument("--val-every", type=int, help="validate every N iterations (train.val_every)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint and write a per-class IoU report")
    common(e)
    e.add_argument("--checkpoint", required=True, help="checkpoint .npz from train")
    e.add_argument("--manifest", required=True, help="test manifest")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="segment one image")
    common(i)
    i.add_argument("--checkpoint", required=True, help="checkpoint .npz from train")
    i.add_argument("--image", required=True, help="8-bit grayscale PNG or PGM")
    i.add_argument("--no-overlay", action="store_true", help="skip the colour overlay PNG")
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and a tiny model")
    g.add_argument("--out", help="optional directory for gradcheck.txt")
    g.add_argument("--seed", type=int, default=0, help="first seed (default 0)")
    g.add_argument("--seeds", type=int, default=10, help="number of seeds per op (default 10)")
    g.add_argument("--tolerance", type=float, default=1e-4, help="max relative error (default 1e-4)")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except errors.ApnetError as exc:
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                print(f"apnet {args.command}: error: {exc}", file=sys.stderr)
                return code
        raise  # unreachable: ApnetError is the last entry
    except ValueError as exc:
        print(f"apnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CODES[0][1]


if __name__ == "__main__":
    sys.exit(main())
