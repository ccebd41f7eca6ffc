"""Batch command line: train, infer, quantize, search-rep, eval, ablate, count.

Every command that writes files also writes ``manifest.json`` next to them,
recording the resolved arguments so ``xcat rerun manifest.json`` repeats the
run. Errors print one line to stderr and exit with status 2. Log verbosity
comes from ``XCAT_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, ABLATION_ROWS, CONCAT_STUDY_NAMES, get_preset
from .data import (
    ImageFormatError,
    InfinitePSNR,
    list_pngs,
    load_hr_images,
    load_pairs,
    load_png,
    save_png,
    to_float,
    to_uint8,
)
from .evaluate import evaluate
from .model import ConfigError, WeightFormatError, build, forward, load_weights, mac_count, param_count, save_weights
from .quant import (
    calibrate,
    load_qmodel,
    lr_to_uint8,
    qforward,
    quantize_model,
    representative_search,
    save_qmodel,
)
from .train import TrainConfig, train

log = logging.getLogger("xcat")

EXIT_ERROR = 2
MANIFEST = "manifest.json"


class CliError(Exception):
    """A user-facing failure: bad path, bad input, bad flag combination."""


# -- helpers -----------------------------------------------------------------------

def _existing_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{what} directory not found: {path}")
    return p


def _existing_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {path}")
    return p


def _nonempty(items, what: str, where) -> list:
    items = list(items)
    if not items:
        raise CliError(f"no PNG images in {what} directory {where}")
    return items


def _write_manifest(out_dir: Path, args: argparse.Namespace, inputs: dict, outputs: dict, **extra) -> Path:
    resolved = {k: v for k, v in vars(args).items() if k not in ("func", "argv")}
    manifest = {
        "command": args.command,
        "argv": getattr(args, "argv", None),
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "deterministic": getattr(args, "deterministic", False),
        "args": resolved,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        **extra,
    }
    path = out_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _training_set(directory: Path, scale: int) -> list:
    if (directory / "HR").is_dir() and (directory / "LR").is_dir():
        return _nonempty(load_pairs(directory, scale), "training", directory)
    _nonempty(list_pngs(directory), "training", directory)
    return load_hr_images(directory)


def _load_lr(path: Path) -> np.ndarray:
    img = load_png(path)
    return to_float(img)


# -- commands -----------------------------------------------------------------------

def cmd_train(args) -> int:
    data_dir = _existing_dir(args.data, "data")
    start = None
    if args.from_ckpt:
        start = load_weights(_existing_file(args.from_ckpt, "checkpoint"))
    elif args.stage2 == "only":
        raise CliError("--stage2 only needs --from CHECKPOINT")
    cfg_model = start.config if start is not None else get_preset(args.config)
    dataset = _training_set(data_dir, cfg_model.scale)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model = start if start is not None else build(cfg_model, rng_seed=args.seed)
    common = dict(epochs=args.epochs, minibatches_per_epoch=args.minibatches, batch_size=args.batch,
                  crop_hr=args.crop, seed=args.seed, scale=cfg_model.scale)
    if args.warmup is not None:
        common["warmup_epochs"] = args.warmup
    stages = []
    if args.stage2 != "only":
        stages.append(("one", TrainConfig.desk("one", **common)))
    if args.stage2 in ("after", "only"):
        stages.append(("two", TrainConfig.desk("two", **common)))

    outputs, configs = {}, {}
    for name, cfg in stages:
        result = train(model, cfg, dataset)
        model = result.model
        log_path = out / f"train_stage{name}.csv"
        result.write_csv(log_path)
        outputs[f"log_stage{name}"] = log_path
        configs[f"stage{name}"] = cfg.to_dict()
        print(f"stage {name}: " + " ".join(f"{h['loss']:.6f}" for h in result.history))
    ckpt = out / "model.hxsr"
    save_weights(model, ckpt)
    outputs["checkpoint"] = ckpt
    _write_manifest(out, args, {"data": data_dir}, outputs, train_configs=configs)
    print(f"wrote {ckpt}")
    return 0


def cmd_infer(args) -> int:
    lr = _load_lr(_existing_file(args.input, "input image"))
    mpath = _existing_file(args.model, "model file")
    if args.quantized:
        qm = load_qmodel(mpath)
        # output edge is pinned to scale 1/255, zero point 0: codes are pixel values
        sr = qforward(qm, lr_to_uint8(lr[None]))[0]
    else:
        model = load_weights(mpath)
        sr = to_uint8(forward(model, lr[None].astype(model.dtype))[0])
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(sr, out)
    _write_manifest(out.parent, args, {"model": mpath, "input": args.input}, {"image": out})
    print(f"wrote {out} ({sr.shape[1]}x{sr.shape[0]})")
    return 0


def _rep_images(paths: list[str] | None, directory: str | None) -> list[tuple[str, np.ndarray]]:
    found = []
    for p in paths or []:
        found.append((Path(p).stem, _load_lr(_existing_file(p, "representative image"))))
    if directory:
        d = _existing_dir(directory, "representative")
        found += [(p.stem, _load_lr(p)) for p in _nonempty(list_pngs(d), "representative", d)]
    if not found:
        raise CliError("give at least one --rep image or a --rep-dir")
    return found


def cmd_quantize(args) -> int:
    mpath = _existing_file(args.model, "model file")
    model = load_weights(mpath)
    reps = _rep_images(args.rep, args.rep_dir)
    qm = quantize_model(model, calibrate(model, [img for _, img in reps]))
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_qmodel(qm, out)
    _write_manifest(out.parent, args, {"model": mpath}, {"qmodel": out},
                    representatives=[name for name, _ in reps])
    print(f"wrote {out}")
    return 0


def cmd_search_rep(args) -> int:
    mpath = _existing_file(args.model, "model file")
    model = load_weights(mpath)
    cdir = _existing_dir(args.candidates, "candidate")
    cpaths = _nonempty(list_pngs(cdir), "candidate", cdir)
    vdir = _existing_dir(args.val, "validation")
    pairs = load_pairs(vdir, model.config.scale)
    _nonempty(pairs, "validation", vdir)
    result = representative_search(model, [_load_lr(p) for p in cpaths],
                                   [(p.lr, p.hr) for p in pairs], metric=args.metric)
    if result.qmodel is None:
        raise CliError("every candidate failed to quantize")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = [p.stem for p in cpaths]
    report = out / "search.csv"
    result.write_csv(report, ids)
    qpath = out / "model.hxq8"
    save_qmodel(result.qmodel, qpath)
    _write_manifest(out, args, {"model": mpath, "candidates": cdir, "val": vdir},
                    {"report": report, "qmodel": qpath}, best=ids[result.best_index])
    for cid, s in zip(ids, result.scores):
        print(f"{cid:>20s}  {s:8.4f} dB{'  <- best' if cid == ids[result.best_index] else ''}")
    return 0


def cmd_eval(args) -> int:
    if not args.model and not args.quantized:
        raise CliError("give --model, --quantized, or both")
    if args.runtime_ms is not None and not args.quantized:
        raise CliError("--runtime-ms needs a --quantized model (the score uses UINT8 PSNR)")
    ddir = _existing_dir(args.data, "data")
    model = load_weights(_existing_file(args.model, "model file")) if args.model else None
    qm = load_qmodel(_existing_file(args.quantized, "quantized model file")) if args.quantized else None
    scale = (model or qm).config.scale
    pairs = _nonempty(load_pairs(ddir, scale), "evaluation", ddir)
    report = evaluate(pairs, model=model, qmodel=qm, mode=args.mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out, runtime_ms=args.runtime_ms)
    extra = {}
    for label, value in (("fp32", report.mean_fp32), ("uint8", report.mean_uint8)):
        if value is not None:
            print(f"mean {label} PSNR: {value:.4f} dB")
    if args.runtime_ms is not None:
        extra["score"] = report.score(args.runtime_ms)
        print(f"score at {args.runtime_ms:g} ms: {extra['score']:.2f}")
    _write_manifest(out.parent, args, {"data": ddir}, {"report": out}, **extra)
    return 0


def _count_row(name: str, height: int, width: int) -> dict:
    cfg = get_preset(name)
    trainable, fixed = param_count(build(cfg))
    return {"config": name, "trainable": trainable, "fixed": fixed,
            "macs": mac_count(cfg, height, width), "macs_per_pixel": mac_count(cfg, 1, 1)}


def _print_rows(rows: list[dict]) -> None:
    cols = list(rows[0])
    widths = [max(len(c), *(len(f"{r[c]:,}" if isinstance(r[c], int) else str(r[c])) for r in rows)) for c in cols]
    print("  ".join(c.rjust(w) for c, w in zip(cols, widths)))
    for r in rows:
        cells = [f"{r[c]:,}" if isinstance(r[c], int) else str(r[c]) for c in cols]
        print("  ".join(s.rjust(w) for s, w in zip(cells, widths)))


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)


def cmd_ablate(args) -> int:
    if args.rows in (None, "all"):
        names = ABLATION_ROWS + CONCAT_STUDY_NAMES
    elif args.rows == "ablation":
        names = list(ABLATION_ROWS)
    elif args.rows == "concat":
        names = list(CONCAT_STUDY_NAMES)
    else:
        names = [n.strip() for n in args.rows.split(",") if n.strip()]
    rows = [_count_row(n, args.height, args.width) for n in names]
    _print_rows(rows)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_rows(out, rows)
        _write_manifest(out.parent, args, {}, {"table": out})
    return 0


def cmd_count(args) -> int:
    row = _count_row(args.config, args.height, args.width)
    print(f"config:     {row['config']}")
    print(f"trainable:  {row['trainable']:,}")
    print(f"fixed:      {row['fixed']:,}")
    print(f"MACs:       {row['macs']:,} at {args.height}x{args.width} LR ({row['macs_per_pixel']:,} per pixel)")
    return 0


def cmd_rerun(args) -> int:
    data = json.loads(_existing_file(args.manifest, "manifest").read_text())
    argv = data.get("argv")
    if not argv:
        raise CliError(f"{args.manifest} has no recorded argv")
    return main(argv)


# -- parser ---------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="single source of randomness (default 0)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, bit-reproducible mode (recorded in the manifest)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xcat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"xcat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train a model on a directory of images")
    p.add_argument("--data", required=True, help="HR PNG directory, or a directory with HR/ and LR/")
    p.add_argument("--out", default="run", help="output directory (default ./run)")
    p.add_argument("--config", default="xcat", help="preset name when starting fresh (default xcat)")
    p.add_argument("--from", dest="from_ckpt", help="start from this checkpoint")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--minibatches", type=int, default=50, help="minibatches per epoch")
    p.add_argument("--batch", type=int, default=4, help="crops per minibatch")
    p.add_argument("--crop", type=int, default=96, help="HR crop size in pixels")
    p.add_argument("--warmup", type=int, help="warm-up epochs (default: 2 at desk scale)")
    p.add_argument("--stage2", nargs="?", const="after", choices=["after", "only"], default=None,
                   help="also run the MSE stage after stage one; 'only' runs just stage two from --from")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="upscale one PNG by the model's factor")
    p.add_argument("model", help="weight file (.hxsr), or quantized file with --quantized")
    p.add_argument("input", help="LR RGB PNG")
    p.add_argument("output", help="SR PNG to write")
    p.add_argument("--quantized", action="store_true", help="model is a UINT8 file; run integer inference")
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("quantize", help="calibrate and quantize with given representative image(s)")
    p.add_argument("model", help="weight file")
    p.add_argument("--rep", action="append", help="representative LR image (repeatable)")
    p.add_argument("--rep-dir", help="directory of representative LR images")
    p.add_argument("--output", "-o", default="model.hxq8")
    _add_common(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("search-rep", help="pick the representative image with the best UINT8 PSNR")
    p.add_argument("model", help="weight file")
    p.add_argument("--candidates", required=True, help="directory of candidate LR images")
    p.add_argument("--val", required=True, help="validation directory (HR/ and LR/, or HR only)")
    p.add_argument("--metric", choices=["rgb", "y"], default="rgb", help="selection metric (default rgb)")
    p.add_argument("--out", default="search", help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_search_rep)

    p = sub.add_parser("eval", help="PSNR report for a float and/or quantized model")
    p.add_argument("--data", required=True, help="directory with HR/ and LR/, or HR only")
    p.add_argument("--model", help="float weight file")
    p.add_argument("--quantized", help="quantized model file")
    p.add_argument("--mode", choices=["rgb", "y"], default="rgb")
    p.add_argument("--runtime-ms", type=float, help="add the challenge score for this runtime")
    p.add_argument("--out", default="eval.csv")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="parameter and MAC table for named configurations")
    p.add_argument("--rows", default="all",
                   help="comma-separated preset names, or all, ablation, concat (default all)")
    p.add_argument("--height", type=int, default=1, help="LR height for MAC totals")
    p.add_argument("--width", type=int, default=1, help="LR width for MAC totals")
    p.add_argument("--out", help="also write the table as CSV")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("count", help="parameters and MACs of one configuration")
    p.add_argument("--config", default="xcat", help=f"preset name ({len(PRESETS)} available)")
    p.add_argument("--height", type=int, default=1)
    p.add_argument("--width", type=int, default=1)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("rerun", help="repeat a run from its manifest.json")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("XCAT_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command != "rerun":
        args.argv = argv
    try:
        return args.func(args)
    except KeyError as e:
        print(f"error: {e.args[0] if e.args else e}", file=sys.stderr)
    except (CliError, ImageFormatError, WeightFormatError, ConfigError, InfinitePSNR,
            ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
