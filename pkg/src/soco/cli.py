"""Command-line entry point: ``soco <command> [--config PATH] [--set key=value] [--seed N]``."""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from soco import checkpoint, config
from soco.cache import ProposalRecord, read_cache, write_cache
from soco.data import gen_data, load_image
from soco.diagnostics import run_suite
from soco.errors import ConfigError, FormatError, InvalidInputError, NumericError
from soco.proposals import filter_proposals
from soco.segmentation import selective_search
from soco.training import Sample, TrainingAborted, train_loop

log = logging.getLogger("soco")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2, which means "numeric" here
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults to the smoke configuration)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config field, e.g. --set train.steps=20")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="soco", description="Object-level contrastive pretraining at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic image corpus")
    p.add_argument("--out", help="output directory (default: paths.data_dir)")
    p.add_argument("--n", type=int, help="number of images (default: data.n_images)")

    p = sub.add_parser("proposals", parents=[common], help="build the proposal cache")
    p.add_argument("--images", help="image directory (default: paths.data_dir)")
    p.add_argument("--out", help="cache file (default: paths.proposals)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("pretrain", parents=[common], help="run the training loop")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--no-model", action="store_true", help="skip the end-to-end micro model")

    p = sub.add_parser("export", parents=[common], help="write backbone/FPN/head weights only")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    return parser


def resolve_config(args) -> config.RunConfig:
    cfg = config.load(args.config)
    if args.overrides:
        cfg = config.apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg = config.apply_overrides(cfg, [f"seed={args.seed}"])
    return cfg


def _propose_one(job):
    path, search = job
    try:
        img = load_image(path)
    except Exception as exc:  # unreadable files are reported, not fatal
        return path, None, str(exc)
    h, w = img.shape[:2]
    boxes = selective_search(img, search.k, search.sigma, search.min_size)
    kept = filter_proposals(boxes, w, h)
    return path, (ProposalRecord(Path(path).stem, w, h, kept), len(boxes)), None


def _histogram(values, edges) -> str:
    counts, _ = np.histogram(values, bins=edges)
    return "  ".join(f"[{lo:g},{hi:g}):{c}" for lo, hi, c in zip(edges[:-1], edges[1:], counts))


def cmd_gen_data(args, cfg) -> int:
    out = args.out or cfg.paths.data_dir
    n = args.n if args.n is not None else cfg.data.n_images
    records = gen_data(out, n, cfg.data, cfg.seed)
    shapes = sum(len(r["shapes"]) for r in records)
    print(f"wrote {len(records)} images with {shapes} shapes to {out}")
    return EXIT_OK


def cmd_proposals(args, cfg) -> int:
    image_dir = Path(args.images or cfg.paths.data_dir)
    out = args.out or cfg.paths.proposals
    files = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) \
        if image_dir.is_dir() else []
    if not files:
        print(f"error: no images found in {image_dir}", file=sys.stderr)
        return EXIT_USAGE
    jobs = [(str(p), cfg.search) for p in files]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_propose_one, jobs))
    else:
        results = [_propose_one(j) for j in jobs]
    records, raw_counts = [], []
    for path, res, err in results:
        if err is not None:
            print(f"warning: skipping {path}: {err}", file=sys.stderr)
            continue
        records.append(res[0])
        raw_counts.append(res[1])
    if not records:
        print("error: no readable images", file=sys.stderr)
        return EXIT_USAGE
    write_cache(out, records)
    kept = [len(r.boxes) for r in records]
    rel = [np.sqrt(b.w * b.h / (r.width * r.height)) for r in records for b in r.boxes]
    print(f"{len(records)} images -> {out}")
    print(f"proposals per image before filter: mean {np.mean(raw_counts):.1f}, "
          f"after: mean {np.mean(kept):.1f} (min {min(kept)}, max {max(kept)})")
    top = max(max(kept), 1)
    print("count histogram: " + _histogram(kept, np.linspace(0, top + 1, min(top + 2, 9))))
    if rel:
        print("relative size histogram: " + _histogram(rel, np.round(np.linspace(0.3, 0.8, 6), 2)))
    return EXIT_OK


def load_samples(cfg) -> list[Sample]:
    records = read_cache(cfg.paths.proposals)
    if not records:
        raise InvalidInputError(f"proposal cache {cfg.paths.proposals} is empty")
    data_dir = Path(cfg.paths.data_dir)
    samples = []
    for r in records:
        matches = [data_dir / f"{r.image_id}{s}" for s in IMAGE_SUFFIXES if (data_dir / f"{r.image_id}{s}").exists()]
        if not matches:
            raise InvalidInputError(f"no image file for {r.image_id} in {data_dir}")
        img = load_image(matches[0])
        samples.append(Sample(np.ascontiguousarray(img.transpose(2, 0, 1)), list(r.boxes)))
    return samples


def cmd_pretrain(args, cfg) -> int:
    samples = load_samples(cfg)
    try:
        state = train_loop(samples, cfg, cfg.paths.out_dir, resume=args.resume)
    except TrainingAborted as exc:
        print(f"numeric abort: {exc}; last checkpoint {exc.checkpoint_path}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"finished {state.step} steps; metrics in {Path(cfg.paths.out_dir) / 'metrics.jsonl'}")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    variants = ("fpn", "c4") + (("v4",) if cfg.views.v4_enabled else ())
    reports = run_suite(cfg.seed, include_model=not args.no_model, model_variants=variants)
    for r in reports:
        print(r.lines()[0])
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_export(args, cfg) -> int:
    entries = checkpoint.load(args.checkpoint)
    weights = checkpoint.export_weights(entries)
    checkpoint.save(args.out, weights)
    print(f"exported {len(weights)} tensors to {args.out}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "proposals": cmd_proposals, "pretrain": cmd_pretrain,
            "gradcheck": cmd_gradcheck, "export": cmd_export}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, FormatError, InvalidInputError, UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
