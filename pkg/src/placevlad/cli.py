"""Command-line workflow: synth, train, index, query, eval, heatmap.

Exit codes: 0 success, 1 usage error, 2 data or contract error. Logs go to
stderr; anything a pipeline might parse goes to a file named by a flag.
Training flags mirror the config-file keys one-to-one (dashes for
underscores); a flag that is given beats the config file, which beats the
built-in defaults.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .geodata import (
    DataError,
    DatasetIndex,
    SynthConfig,
    load_dataset,
    read_fmap,
    synth_generate,
)
from .head import describe, export_heatmap, load_checkpoint
from .losses import ContractError
from .retrieval import (
    build_index,
    embed_records,
    eval_protocol,
    load_index,
    ranked,
    save_index,
    write_report,
)
from .trainer import TrainConfig, TrainingError, make_train_config, parse_config_file, train

log = logging.getLogger("placevlad")

_D = TrainConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse, but usage problems surface as exit code 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_data(path: str) -> DatasetIndex:
    return load_dataset(path)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    """One flag per TrainConfig field; None means "not given"."""
    f = p.add_argument
    f("--lr", type=float, help=f"learning rate (default: {_D.lr})")
    f("--batch-tuples", type=int, help=f"tuples per optimizer step (default: {_D.batch_tuples})")
    f("--epochs", type=int, help=f"passes over the training queries (default: {_D.epochs})")
    f("--n-pos", type=int, help=f"potential positives per tuple (default: {_D.n_pos})")
    f("--n-neg-keep", type=int, help=f"hardest negatives kept (default: {_D.n_neg_keep})")
    f("--n-neg-sample", type=int, help=f"negatives sampled per query (default: {_D.n_neg_sample})")
    f("--margin", type=float, help=f"triplet margin m (default: {_D.margin})")
    f("--alpha", type=float, help=f"domain loss weight (default: {_D.alpha})")
    f("--seed", type=int, help=f"rng seed (default: {_D.seed})")
    f("--k", type=int, help=f"number of cluster centers K (default: {_D.k})")
    f("--mode", choices=("vanilla", "a1", "a2", "fused"),
      help=f"aggregation mode (default: {_D.mode})")
    f("--intra-norm", action=argparse.BooleanOptionalAction,
      help=f"per-cluster L2 before the global L2 (default: {_D.intra_norm})")
    f("--positive-radius-m", type=float,
      help=f"geo radius for potential positives (default: {_D.positive_radius_m})")
    f("--refresh-every", type=int,
      help=f"mined queries between cache refreshes (default: {_D.refresh_every})")
    f("--mmd-images", type=int,
      help=f"maps per domain in an alignment batch (default: {_D.mmd_images})")
    f("--mmd-max-samples", type=int,
      help=f"descriptor cap per domain batch (default: {_D.mmd_max_samples})")
    f("--mmd-estimator", choices=("biased", "unbiased"),
      help=f"MMD estimator (default: {_D.mmd_estimator})")
    f("--augment", action=argparse.BooleanOptionalAction,
      help=f"random crop augmentation (default: {_D.augment})")
    f("--crop-min", type=float,
      help=f"smallest crop proportion (default: {_D.crop_min})")
    f("--init-sample-maps", type=int,
      help=f"maps sampled for k-means init (default: {_D.init_sample_maps})")
    f("--threads", type=int, help=f"worker cap for embedding (default: {_D.threads})")


def build_parser() -> _Parser:
    parser = _Parser(prog="placevlad", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth",
                       help="write a deterministic two-domain benchmark dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--places", type=int, required=True, help="number of places")
    p.add_argument("--views", type=int, default=4, help="views per place (default: 4)")
    p.add_argument("--shift", type=float, default=1.0,
                   help="target style shift strength (default: 1.0)")
    p.add_argument("--seed", type=int, default=0, help="rng seed (default: 0)")
    p.add_argument("--height", type=int, default=8, help="map height (default: 8)")
    p.add_argument("--width", type=int, default=8, help="map width (default: 8)")
    p.add_argument("--channels", type=int, default=16, help="map channels (default: 16)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train",
                       help="train a descriptor head on a dataset")
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--out", required=True, help="run directory for checkpoints and metrics")
    p.add_argument("--config", help="JSON or key=value config file")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index",
                       help="embed a dataset split and save the search index")
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--checkpoint", required=True, help="trained head checkpoint")
    p.add_argument("--out", required=True, help="index file to write (.npz)")
    p.add_argument("--split", default="test_gallery",
                   help="dataset split to index (default: test_gallery)")
    p.add_argument("--domain", default="source",
                   help="dataset domain to index (default: source)")
    p.add_argument("--threads", type=int, default=1, help="worker cap (default: 1)")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query",
                       help="rank an index against one query map")
    p.add_argument("--index", required=True, help="index file from the index command")
    p.add_argument("--checkpoint", required=True, help="trained head checkpoint")
    p.add_argument("--out", required=True, help="result CSV to write")
    p.add_argument("--fmap", help="query feature map file")
    p.add_argument("--data", help="dataset holding the query record")
    p.add_argument("--id", help="query record id within --data")
    p.add_argument("--n", type=int, default=5, help="results to keep (default: 5)")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval",
                       help="run a retrieval protocol and write the recall report")
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--checkpoint", required=True, help="trained head checkpoint")
    p.add_argument("--mode", required=True, choices=("s2s", "s2t"),
                   help="same-domain or cross-domain queries")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--ns", default="1,5,10,20",
                   help="recall cutoffs (default: 1,5,10,20)")
    p.add_argument("--radius-m", type=float, default=25.0,
                   help="relevance radius in meters (default: 25.0)")
    p.add_argument("--pairs", help="explicit pairs file (default: pairs.jsonl beside the manifest)")
    p.add_argument("--no-figure", action="store_true",
                   help="skip the recall curve rendering")
    p.add_argument("--threads", type=int, default=1, help="worker cap (default: 1)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap",
                       help="render the attention map of one record as a PGM image")
    p.add_argument("--checkpoint", required=True, help="trained head checkpoint")
    p.add_argument("--out", required=True, help="PGM file to write")
    p.add_argument("--fmap", help="feature map file")
    p.add_argument("--data", help="dataset holding the record")
    p.add_argument("--id", help="record id within --data")
    p.set_defaults(func=cmd_heatmap)

    return parser


def cmd_synth(args) -> int:
    cfg = SynthConfig(n_places=args.places, views_per_place=args.views,
                      h=args.height, w=args.width, d=args.channels,
                      shift=args.shift, seed=args.seed)
    dataset = synth_generate(cfg, args.out)
    log.info("wrote %d records under %s", len(dataset), args.out)
    return 0


_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


def cmd_train(args) -> int:
    dataset = _load_data(args.data)
    file_values = parse_config_file(args.config) if args.config else {}
    flag_values = {k: getattr(args, k, None) for k in _TRAIN_KEYS}
    cfg = make_train_config(file_values, flag_values)
    result = train(dataset, cfg, args.out)
    last = result.rows[-1]
    log.info("done: R@1=%.3f R@5=%.3f, best checkpoint %s",
             last.r1, last.r5, result.best_checkpoint)
    return 0


def cmd_index(args) -> int:
    params = load_checkpoint(args.checkpoint)
    dataset = _load_data(args.data)
    ids = dataset.ids(args.split, args.domain)
    if not ids:
        raise DataError(f"no records in split {args.split!r} domain {args.domain!r}")
    vecs = embed_records(dataset, ids, params, args.threads)
    index = build_index(ids, vecs, dataset.by_id)
    save_index(args.out, index)
    log.info("indexed %d records into %s", len(ids), args.out)
    return 0


def _resolve_map(args) -> np.ndarray:
    if args.fmap:
        return read_fmap(args.fmap)
    if args.data and args.id:
        return _load_data(args.data).load_fmap(args.id)
    raise UsageError("give --fmap, or --data together with --id")


def cmd_query(args) -> int:
    index = load_index(args.index)
    params = load_checkpoint(args.checkpoint)
    desc = describe(_resolve_map(args), params)
    rows = ranked(index, desc.embedding)[: max(0, args.n)]
    lines = ["rank,id,distance"]
    for rank, (rid, d2) in enumerate(rows, start=1):
        lines.append(f"{rank},{rid},{d2:.6f}")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("wrote %d results to %s", len(rows), args.out)
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    dataset = _load_data(args.data)
    try:
        ns = tuple(int(v) for v in args.ns.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"--ns wants comma-separated integers, got {args.ns!r}") from None
    if not ns:
        raise UsageError("--ns is empty")
    report = eval_protocol(dataset, params, args.mode, ns,
                           args.radius_m, args.pairs, args.threads)
    paths = write_report(report, args.out, figure=not args.no_figure)
    for n in report.ns:
        log.info("R@%d = %.4f", n, report.recalls[n])
    if report.excluded:
        log.info("%d queries had no relevant gallery item", report.excluded)
    log.info("report written to %s", paths["csv"])
    return 0


def cmd_heatmap(args) -> int:
    params = load_checkpoint(args.checkpoint)
    export_heatmap(_resolve_map(args), params, args.out)
    log.info("heatmap written to %s", args.out)
    return 0


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_usage(sys.stderr)
            print("placevlad: a command is required", file=sys.stderr)
            return 1
        return args.func(args)
    except UsageError as e:
        print(f"placevlad: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"placevlad: file not found: {e.filename or e}", file=sys.stderr)
        return 2
    except (DataError, ContractError, TrainingError) as e:
        print(f"placevlad: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
