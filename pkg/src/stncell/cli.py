"""Command-line entry point: ``stncell <command> [options]``.

Commands::

    synth      write a synthetic dataset (PNG contexts + manifest)
    crop       cut d_i patches (centred or randomly offset) from an annotation CSV
    train      three-stage CNN-STN training on a whole dataset
    baseline   train the plain CNN on a whole dataset
    eval       score a checkpoint on a dataset
    cv         k-fold cross-validation of both models
    gradcheck  finite-difference gradient suite

Options given on the command line override keys of ``--config``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image, ImageDraw

from .autodiff import no_grad
from .config import TrainConfig, dump_config, load_config
from .data import load_annotations, samples_from_annotations, save_image, to_uint8
from .errors import ContractError, DimensionError, ParseError
from .gradsuite import format_results, run_suite
from .metrics import metrics_csv, render_table
from .networks import load_checkpoint, save_checkpoint, stn_forward
from .stn import CropGeometry, affine_grid, random_offset_crop
from .synth import synth_dataset, write_synthetic_dataset
from .training import (
    BASELINE_MODEL,
    STN_MODEL,
    cross_validate,
    evaluate,
    patch_array,
    prepare_training_set,
    train_baseline_model,
    train_stn,
    with_offsets,
)

log = logging.getLogger("stncell")

# Flag name -> config key.
OVERRIDES = {
    "seed": "seed",
    "data": "data",
    "image_root": "image_root",
    "arch": "arch",
    "epoch_scale": "epoch_scale",
    "batch_size": "batch_size",
    "folds": "folds",
    "synth_n": "synth_n",
    "kappa": "kappa",
}


def _add_common(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", type=Path, help="flat TOML config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--data", help="annotation CSV; omit to use an in-memory synthetic set")
    p.add_argument("--image-root", dest="image_root", help="directory image paths are relative to")
    p.add_argument("--synth-n", dest="synth_n", type=int, help="synthetic sample count when --data is absent")
    p.add_argument("--out", type=Path, help="run directory (default runs/<timestamp>-seed<seed>)")
    p.add_argument("--arch", choices=["standard", "compact"])
    if training:
        p.add_argument("--epoch-scale", dest="epoch_scale", type=float, help="multiplier on every epoch count")
        p.add_argument("--paper-schedule", action="store_true", help="use the literal 50/200/100/200 epoch schedule")
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--kappa", type=float, help="classification weight in the combined loss")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stncell", description="Spatial-transformer cell classification pipeline.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print warnings and results")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--n", type=int, default=300, help="number of samples (classes cycle)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("synth_data"))
    p.add_argument("--manifest", default="manifest.csv")

    p = sub.add_parser("crop", help="cut training patches from an annotation CSV")
    p.add_argument("--data", required=True, help="annotation CSV")
    p.add_argument("--image-root", dest="image_root")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--offset", action="store_true", help="random crop-origin offsets instead of centred patches")
    p.add_argument("--seed", type=int, default=0)

    for name, text in (("train", "three-stage CNN-STN training"), ("baseline", "train the baseline CNN")):
        p = sub.add_parser(name, help=text)
        _add_common(p)

    p = sub.add_parser("eval", help="score a checkpoint")
    _add_common(p, training=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--centered", action="store_true", help="score centred patches instead of random offsets")
    p.add_argument("--dump-focus", dest="dump_focus", type=int, default=0, metavar="N",
                   help="write side-by-side PNGs of the first N patches and their focus crops")

    p = sub.add_parser("cv", help="k-fold cross-validation of CNN-STN and the baseline")
    _add_common(p)
    p.add_argument("--folds", type=int)
    p.add_argument("--no-baseline", dest="baseline", action="store_false")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=5)
    return parser


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    changes = {}
    for flag, key in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            changes[key] = value
    if getattr(args, "paper_schedule", False):
        changes["epoch_scale"] = 1.0
    return replace(cfg, **changes)


def run_dir(args, cfg: TrainConfig) -> Path:
    out = args.out or Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_dataset(cfg: TrainConfig):
    geom = cfg.geometry
    if cfg.data:
        records = load_annotations(cfg.data, cfg.image_root or None)
        samples = samples_from_annotations(records, geom)
        log.info("loaded %d annotated samples from %s", len(samples), cfg.data)
    else:
        samples = synth_dataset(cfg.synth_n, geom, cfg.seed)
        log.info("generated %d synthetic samples (seed %d)", len(samples), cfg.seed)
    return samples


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _write_traces(path: Path, traces: dict) -> None:
    _write(path, json.dumps(traces, indent=2, sort_keys=True) + "\n")


def cmd_synth(args) -> int:
    samples = synth_dataset(args.n, CropGeometry(), args.seed)
    manifest = write_synthetic_dataset(samples, args.out, args.manifest)
    print(f"wrote {len(samples)} samples and {manifest}")
    return 0


def cmd_crop(args) -> int:
    cfg = TrainConfig()
    geom = cfg.geometry
    records = load_annotations(args.data, args.image_root)
    samples = samples_from_annotations(records, geom)
    rng = np.random.default_rng(args.seed)
    (args.out / "patches").mkdir(parents=True, exist_ok=True)
    with open(args.out / "patches.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", "class", "dx", "dy", "source"])
        for i, s in enumerate(samples):
            offset = None if args.offset else (0, 0)
            patch, dx, dy = random_offset_crop(s.context, s.center, geom, rng=rng, offset=offset)
            name = f"patches/{i:06d}.png"
            save_image(args.out / name, patch / 255.0)
            writer.writerow([name, s.label, dx, dy, s.source_id])
    print(f"wrote {len(samples)} patches to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = run_dir(args, cfg)
    _write(out / "config.toml", dump_config(cfg))
    samples = load_dataset(cfg)
    prep_seq, train_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    train = prepare_training_set(cfg, samples, np.random.default_rng(prep_seq))
    params, stages = train_stn(cfg, train, int(train_seq.generate_state(1)[0]), log.info)
    save_checkpoint(params, out / "stn.ckpt")
    _write_traces(out / "loss_trace.json", {k: {"loss": r.trace, **r.extra} for k, r in stages.items()})
    print(f"saved {out / 'stn.ckpt'}")
    return 0


def cmd_baseline(args) -> int:
    cfg = resolve_config(args)
    out = run_dir(args, cfg)
    _write(out / "config.toml", dump_config(cfg))
    samples = load_dataset(cfg)
    prep_seq, train_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    train = prepare_training_set(cfg, samples, np.random.default_rng(prep_seq))
    params, result = train_baseline_model(cfg, train, int(train_seq.generate_state(1)[0]), log.info)
    save_checkpoint(params, out / "baseline.ckpt")
    _write_traces(out / "loss_trace.json", {"baseline": {"loss": result.trace}})
    print(f"saved {out / 'baseline.ckpt'}")
    return 0


def dump_focus_crops(params, samples, geom, out: Path, count: int) -> None:
    """Side-by-side PNGs: patch with the sampled region outlined, and the focus crop at the same scale."""
    out.mkdir(parents=True, exist_ok=True)
    for i in range(min(count, len(samples))):
        patch = patch_array(samples[i : i + 1], geom.d_i)
        with no_grad():
            theta, probs, focus = stn_forward(params, patch, geom)
        grid = affine_grid(theta.values[0], geom.d_c, geom.d_c).values
        corners = [grid[0, 0], grid[0, -1], grid[-1, -1], grid[-1, 0]]
        poly = [((x + 1) * geom.d_i / 2 - 0.5, (y + 1) * geom.d_i / 2 - 0.5) for x, y in corners]
        left = Image.fromarray(to_uint8(patch[0]).transpose(1, 2, 0))
        ImageDraw.Draw(left).polygon(poly, outline=(0, 255, 0))
        side = geom.d_i
        right = Image.fromarray(to_uint8(focus.values[0]).transpose(1, 2, 0)).resize((side, side), Image.NEAREST)
        canvas = Image.new("RGB", (2 * side + 4, side), (255, 255, 255))
        canvas.paste(left, (0, 0))
        canvas.paste(right, (side + 4, 0))
        pred = int(np.argmax(probs.values[0]))
        canvas.save(out / f"focus_{i:04d}_true{samples[i].label}_pred{pred}.png")


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out = run_dir(args, cfg)
    params = load_checkpoint(args.checkpoint)
    samples = load_dataset(cfg)
    if not args.centered:
        samples = with_offsets(samples, cfg.geometry, np.random.default_rng(cfg.seed))
    report, _ = evaluate(params, samples, cfg.geometry)
    model = STN_MODEL if "localizer" in params else BASELINE_MODEL
    reports = {model: report}
    _write(out / "metrics.csv", metrics_csv(reports))
    _write(out / "report.txt", render_table(reports))
    if args.dump_focus:
        if "localizer" not in params:
            raise ContractError("--dump-focus needs a CNN-STN checkpoint")
        dump_focus_crops(params, samples, cfg.geometry, out / "focus", args.dump_focus)
    print(render_table(reports), end="")
    return 0


def cmd_cv(args) -> int:
    cfg = resolve_config(args)
    out = run_dir(args, cfg)
    _write(out / "config.toml", dump_config(cfg))
    samples = load_dataset(cfg)
    result = cross_validate(cfg, samples, log=log.info, include_baseline=args.baseline)
    # Table layout: baseline block first, CNN-STN block second.
    order = sorted(result.ensemble, key=lambda m: (m != BASELINE_MODEL, m == STN_MODEL, m))
    reports = {m: result.ensemble[m] for m in order}
    _write(out / "metrics.csv", metrics_csv(reports))
    table = render_table(reports)
    _write(out / "report.txt", table)
    with open(out / "folds.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fold", "model", "accuracy", "test_size", "train_size"])
        for f in result.folds:
            for m in order:
                writer.writerow([f.fold, m, f"{f.reports[m].accuracy:.6f}", len(f.test_indices), f.train_size])
    print(table, end="")
    return 0


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    results = run_suite(args.seed, args.instances)
    print(format_results(results))
    ok = all(r.passed for r in results)
    print(f"{'all passed' if ok else 'FAILURES'} in {time.perf_counter() - start:.1f}s")
    return 0 if ok else 1


COMMANDS = {
    "synth": cmd_synth,
    "crop": cmd_crop,
    "train": cmd_train,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "cv": cmd_cv,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ContractError, DimensionError, ParseError, FileNotFoundError) as exc:
        print(f"stncell {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
