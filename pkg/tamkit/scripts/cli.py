#!/usr/bin/env python3
"""
tamkit command line.

Subcommands:
    parse     captions -> per-image class tags and snippets (JSONL) + tag report
    train     train encoder and textual path; checkpoint, log, config echo, metrics
    infer     label maps and CAM renders (TAM renders with --dump-tams) from a checkpoint
    eval      score {id}_label.pgm predictions against {id}_gt.pgm ground truth
    generate  write the synthetic shapes dataset in the files layout
    ablate    train one run per value of a config key and compare them

Run settings come from --config (key=value file) and any number of
"--key value" overrides; see config.py for the keys.

Usage:
    python tamkit/scripts/cli.py parse --captions captions.jsonl --vocab vocab.tsv
    python tamkit/scripts/cli.py train --config tamkit/data/default.conf --epochs 5
    python tamkit/scripts/cli.py infer --checkpoint tamkit/results/latest/checkpoint.bin --dump-tams
    python tamkit/scripts/cli.py eval --pred-dir runs/infer --gt-dir data/shapes/gt --vocab data/shapes/vocab.tsv

Exit codes: 0 success, 2 input or config error, 3 numeric failure.
"""

import argparse
import json
import logging
import sys
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence

# Import sibling modules
sys.path.insert(0, str(Path(__file__).parent))
import run_ablation
from caption_parser import (
    ClassVocabulary,
    ParsedImage,
    load_caption_corpus,
    load_irregulars,
    load_lexicon,
    load_vocabulary,
    parse_corpus,
)
from config import RunConfig, compute_config_hash, load_run_config, setup_logging, thread_limit
from datasets import SPLITS, load_dataset, synthetic_dataset, write_dataset
from errors import CheckpointError, ConfigError, DimMismatch, MissingPairs, TamkitError
from inference import predict_dataset, score_model, write_inference
from score_segmentation import MetricReport, evaluate_label_maps, load_label_dir
from storage import RunWriter, write_jsonl
from train import TrainResult, load_model, train

logger = logging.getLogger(__name__)


def _no_overrides(command: str, overrides: Sequence[str]) -> None:
    if overrides:
        raise ConfigError(f"{command} does not take config overrides, got {' '.join(overrides)}")


def format_tag_report(parsed: Sequence[ParsedImage], vocab: ClassVocabulary) -> str:
    counts = Counter(c for p in parsed for c in p.tags)
    untagged = sum(1 for p in parsed if not p.tags)
    lines = [f"Parsed {len(parsed)} images", "Tags:"]
    for entry in vocab:
        if counts[entry.class_id]:
            lines.append(f"  {entry.singular}: {counts[entry.class_id]}")
    lines.append(f"  untagged images: {untagged}")
    return "\n".join(lines) + "\n"


def cmd_parse(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    _no_overrides("parse", overrides)
    vocab = load_vocabulary(args.vocab, load_irregulars(args.irregulars))
    lexicon = load_lexicon(args.lexicon_dir)
    parsed = parse_corpus(load_caption_corpus(args.captions), vocab, lexicon)
    records = [p.to_dict(vocab) for p in parsed]

    if args.output:
        write_jsonl(args.output, records)
        print(format_tag_report(parsed, vocab), end="")
        print(f"Results written to: {args.output}")
    else:
        for record in records:
            print(json.dumps(record, ensure_ascii=False))
        print(format_tag_report(parsed, vocab), end="", file=sys.stderr)
    return 0


def create_summary_md(
    config: RunConfig,
    result: TrainResult,
    report: Optional[MetricReport],
    num_images: int,
) -> str:
    lines = [
        "# Training Run Summary",
        "",
        f"**Timestamp**: {datetime.now(timezone.utc).strftime('%Y-%m-%d %H:%M:%S UTC')}",
        f"**Config hash**: `{compute_config_hash(config)}`",
        "",
        "## Configuration",
        "",
        f"- **Dataset**: {config.dataset} ({num_images} images)",
        f"- **Epochs / batch size**: {config.epochs} / {config.batch_size}",
        f"- **Loss weights**: cls={config.lambda_cls}, cpt={config.lambda_cpt}, ac={config.lambda_ac}",
        f"- **w_res**: {config.w_res}",
        f"- **Concept mode**: {config.concept_mode}",
        f"- **Seed**: {config.seed}",
        "",
        "## Training",
        "",
        f"- **Steps**: {result.steps}",
    ]
    if result.log:
        last = result.log[-1]
        lines.extend([
            f"- **Final loss**: {last['loss_total']:.4f} "
            f"(cls {last['loss_cls']:.4f}, cpt {last['loss_cpt']:.4f}, ac {last['loss_ac']:.4f})",
        ])
    lines.append("")

    if report is not None:
        lines.extend([
            "## Training-set Labels",
            "",
            "```",
            report.format_table().rstrip("\n"),
            "```",
            "",
        ])
    else:
        lines.extend(["No ground truth available; label metrics skipped.", ""])
    return "\n".join(lines)


def cmd_train(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    config = load_run_config(args.config, overrides)
    dataset = load_dataset(config, "train")
    writer = RunWriter(config.output_dir)
    writer.write_config(config.echo())
    writer.write_parsed(p.to_dict(dataset.vocab) for p in dataset.parsed)

    print(f"Loaded {len(dataset)} training images ({config.dataset})")
    print("Configuration:")
    print(f"  Epochs: {config.epochs}")
    print(f"  Batch size: {config.batch_size}")
    print(f"  Loss weights: cls={config.lambda_cls} cpt={config.lambda_cpt} ac={config.lambda_ac}")
    print(f"  Concept mode: {config.concept_mode}")
    print(f"  Seed: {config.seed}")
    print()

    bank = dataset.bank()
    result = train(dataset.training_data(bank), config, writer)

    report = None
    if dataset.has_gt:
        report = score_model(result.model, dataset, bank, config.alpha)
        writer.write_metrics(report.to_dict(), config_hash=compute_config_hash(config))
        writer.write_metrics_text(report.format_table())
    else:
        logger.warning("No ground truth for the training images; skipping label metrics")
    writer.write_summary(create_summary_md(config, result, report, len(dataset)))

    print("\nTraining complete!")
    print(f"Checkpoint written to: {writer.checkpoint_file}")
    print(f"Log written to: {writer.train_log_file}")
    print(f"Config written to: {writer.config_file}")
    print("\nSummary:")
    print(f"  Steps: {result.steps}")
    if result.log:
        print(f"  Final loss: {result.log[-1]['loss_total']:.4f}")
    if report is not None:
        print(f"  Mean IoU: {report.mean_iou:.4f}")
        if report.flip_consistency is not None:
            print(f"  Flip consistency: {report.flip_consistency:.4f}")
    return 0


def cmd_infer(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    config = load_run_config(args.config, overrides)
    model, meta = load_model(args.checkpoint)
    dataset = load_dataset(config, args.split)

    classes = meta.get("classes")
    if classes is not None and list(classes) != dataset.vocab.names():
        raise CheckpointError(
            f"checkpoint was trained on classes {classes}, vocabulary has {dataset.vocab.names()}"
        )
    bank = dataset.bank()
    if model.text.dim != bank.dim:
        raise DimMismatch(model.text.dim, bank.dim, "embedding table dimension")

    out_dir = Path(args.output_dir) if args.output_dir else Path(config.output_dir) / "infer"
    out_dir.mkdir(parents=True, exist_ok=True)

    results = predict_dataset(
        model, dataset.images, dataset.parsed, dataset.vocab, bank, config.alpha, keep_tams=args.dump_tams
    )
    total = len(dataset.parsed)
    for i, p in enumerate(dataset.parsed, 1):
        written = write_inference(out_dir, results[p.image_id], dataset.vocab)
        tags = ", ".join(dataset.vocab.name(c) for c in sorted(p.tags)) or "no tags"
        print(f"[{i}/{total}] {p.image_id}: {tags} ({len(written)} files)")

    print(f"\nResults written to: {out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    _no_overrides("eval", overrides)
    vocab = load_vocabulary(args.vocab, load_irregulars())
    pred = load_label_dir(args.pred_dir)
    gt = load_label_dir(args.gt_dir)
    if not gt:
        raise MissingPairs(f"no ground-truth label maps in {args.gt_dir}")
    report = evaluate_label_maps(pred, gt, vocab.names(), thread_limit())

    if args.output_dir:
        writer = RunWriter(str(args.output_dir))
        writer.write_metrics(report.to_dict())
        writer.write_metrics_text(report.format_table())
    print(f"Scored {len(gt)} images")
    print(report.format_table(), end="")
    if args.output_dir:
        print(f"\nMetrics written to: {writer.metrics_file}")
    return 0


def cmd_generate(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    config = load_run_config(args.config, overrides)
    if config.dataset != "synthetic":
        raise ConfigError("generate needs dataset=synthetic")
    dataset = synthetic_dataset(config, args.split)
    out_dir = write_dataset(dataset, Path(args.output_dir))
    print(f"Generated {len(dataset)} {args.split} images")
    print(f"Results written to: {out_dir}")
    print(f"Run config for this data: {out_dir / 'dataset.conf'}")
    return 0


def cmd_ablate(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    return run_ablation.run(args, overrides)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", action="store_true", help="Log debug messages")

    parser = argparse.ArgumentParser(
        description="Caption-supervised text and class activation maps",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", parents=[common], allow_abbrev=False, help="Parse captions into tags and snippets")
    p.add_argument("--captions", type=Path, required=True, help="Caption corpus (JSONL)")
    p.add_argument("--vocab", type=Path, required=True, help="Class vocabulary (TSV)")
    p.add_argument("--lexicon-dir", type=Path, help="Directory with word lists (default: bundled)")
    p.add_argument("--irregulars", type=Path, help="Irregular plurals file (default: bundled)")
    p.add_argument("--output", type=Path, help="JSONL output path (default: stdout)")
    p.set_defaults(handler=cmd_parse)

    p = sub.add_parser(
        "train",
        parents=[common],
        allow_abbrev=False,
        help="Train a model",
        epilog="Any other --key value pair overrides the run config.",
    )
    p.add_argument("--config", type=Path, help="Run config (key=value file)")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("infer", parents=[common], allow_abbrev=False, help="Estimate label maps")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint.bin from a train run")
    p.add_argument("--config", type=Path, help="Run config (key=value file)")
    p.add_argument("--split", choices=SPLITS, default="test", help="Synthetic split (default: test)")
    p.add_argument("--output-dir", type=Path, help="Where to write maps (default: <output_dir>/infer)")
    p.add_argument("--dump-tams", action="store_true", help="Also write one TAM per snippet")
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("eval", parents=[common], allow_abbrev=False, help="Score label maps")
    p.add_argument("--pred-dir", type=Path, required=True, help="Directory with {id}_label.pgm files")
    p.add_argument("--gt-dir", type=Path, required=True, help="Directory with {id}_gt.pgm files")
    p.add_argument("--vocab", type=Path, required=True, help="Class vocabulary (TSV)")
    p.add_argument("--output-dir", type=Path, help="Write metrics.json and metrics.txt here")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("generate", parents=[common], allow_abbrev=False, help="Write the synthetic dataset")
    p.add_argument("--output-dir", type=Path, required=True, help="Dataset directory")
    p.add_argument("--config", type=Path, help="Run config (key=value file)")
    p.add_argument("--split", choices=SPLITS, default="train", help="Which split to write (default: train)")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("ablate", parents=[common], allow_abbrev=False, help="Sweep one config key")
    run_ablation.build_parser(p)
    p.set_defaults(handler=cmd_ablate)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args, overrides = build_parser().parse_known_args(argv)
    setup_logging(args.verbose)
    try:
        return args.handler(args, overrides)
    except TamkitError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
