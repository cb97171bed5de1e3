#!/usr/bin/env python3
"""
Ablation sweeps.

Trains one run per value of a single config key on the same training set,
estimates training-set labels with each model and prints a comparison table
(precision, recall, mean IoU, flip consistency). Two reference rows are added:
"tags only" spreads every tagged class over its whole image and "untrained"
scores the encoder at initialization.

Usage:
    python tamkit/scripts/run_ablation.py --axis lambda_cpt --values 0,0.3

    # Other axes, with config overrides:
    python tamkit/scripts/run_ablation.py \
        --axis concept_mode \
        --values all_compounds,class_related,no_adjectives,all_concepts \
        --epochs 5

    # Caption tags against ground-truth tags:
    python tamkit/scripts/run_ablation.py --axis tag_source --values captions,gt
"""

import argparse
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

# Import sibling modules
sys.path.insert(0, str(Path(__file__).parent))
from config import RunConfig, coerce, compute_config_hash, load_run_config, setup_logging
from datasets import Dataset, load_dataset
from errors import ConfigError, TamkitError
from inference import score_model, score_tags_only
from score_segmentation import MetricReport
from storage import RunWriter, atomic_write_text
from train import init_model, train

ABLATION_AXES = ("lambda_cls", "lambda_cpt", "lambda_ac", "w_res", "concept_mode", "alpha", "tag_source")
TAGS_ONLY = "tags only"
UNTRAINED = "untrained"


@dataclass
class AblationRow:
    label: str
    report: MetricReport
    final_loss: Optional[float] = None


def parse_axis_values(axis: str, raw: str) -> List[str]:
    """Comma-separated values, each checked against the axis's config type."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"axis must be one of {ABLATION_AXES}, got {axis!r}")
    values = [v.strip() for v in raw.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values needs at least one value")
    for value in values:
        coerce(axis, value)
    return values


def run_label(axis: str, value: str) -> str:
    return f"{axis}={value}"


def untrained_report(base: RunConfig, dataset: Dataset) -> MetricReport:
    """Scores the model train() would start from."""
    init_seq = np.random.SeedSequence(base.seed).spawn(4)[0]
    bank = dataset.bank()
    model = init_model(base, bank.dim, np.random.default_rng(init_seq))
    return score_model(model, dataset, bank, base.alpha)


def run_sweep(
    base: RunConfig,
    axis: str,
    values: Sequence[str],
    output_dir: Path,
    reference_rows: bool = True,
) -> List[AblationRow]:
    dataset = load_dataset(base, "train")
    rows: List[AblationRow] = []

    for i, value in enumerate(values, 1):
        label = run_label(axis, value)
        config = replace(base, **{axis: coerce(axis, value)}).validate()
        writer = RunWriter(str(output_dir), run_id=label.replace("=", "_"))
        writer.write_config(config.echo())

        print(f"[{i}/{len(values)}] Training {label}...", flush=True)
        # tag_source changes the tags, so that axis reloads the data
        run_data = load_dataset(config, "train") if axis == "tag_source" else dataset
        bank = run_data.bank()
        result = train(run_data.training_data(bank), config, writer)
        report = score_model(result.model, run_data, bank, config.alpha)
        writer.write_metrics(report.to_dict(), config_hash=compute_config_hash(config))
        writer.write_metrics_text(report.format_table())

        final_loss = result.log[-1]["loss_total"] if result.log else None
        rows.append(AblationRow(label, report, final_loss))
        print(f"  mean IoU {report.mean_iou:.4f}")

    if reference_rows:
        rows.append(AblationRow(TAGS_ONLY, score_tags_only(dataset, base.alpha)))
        rows.append(AblationRow(UNTRAINED, untrained_report(base, dataset)))
    return rows


def _cell(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def format_comparison(axis: str, rows: Sequence[AblationRow]) -> str:
    width = max([len(r.label) for r in rows] + [len("run")])
    lines = [
        "=" * 80,
        f"ABLATION: {axis}",
        "=" * 80,
        f"{'run'.ljust(width)}  {'precision':>9}  {'recall':>9}  {'mean IoU':>9}  {'flip':>9}  {'loss':>9}",
    ]
    for r in rows:
        lines.append(
            f"{r.label.ljust(width)}  {_cell(r.report.precision):>9}  {_cell(r.report.recall):>9}  "
            f"{_cell(r.report.mean_iou):>9}  {_cell(r.report.flip_consistency):>9}  {_cell(r.final_loss):>9}"
        )
    lines.append("=" * 80)
    return "\n".join(lines) + "\n"


def build_parser(parser: Optional[argparse.ArgumentParser] = None) -> argparse.ArgumentParser:
    parser = parser or argparse.ArgumentParser(
        description="Train one run per value of a config key and compare label metrics",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Any other --key value pair overrides the run config.",
    )
    parser.add_argument("--axis", required=True, choices=ABLATION_AXES, help="Config key to sweep")
    parser.add_argument("--values", required=True, help="Comma-separated values of the axis")
    parser.add_argument("--config", type=Path, help="Base run config (key=value file)")
    parser.add_argument(
        "--no-reference",
        action="store_true",
        help="Skip the tags-only and untrained rows",
    )
    return parser


def run(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    base = load_run_config(args.config, overrides)
    values = parse_axis_values(args.axis, args.values)
    output_dir = Path(base.output_dir)

    print(f"Sweeping {args.axis} over {', '.join(values)}")
    print(f"Base config hash: {compute_config_hash(base)}")
    print()
    rows = run_sweep(base, args.axis, values, output_dir, reference_rows=not args.no_reference)

    table = format_comparison(args.axis, rows)
    print()
    print(table)
    output_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(output_dir / f"ablation_{args.axis}.txt", table)
    print(f"Results written to: {output_dir}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args, overrides = build_parser().parse_known_args(argv)
    setup_logging()
    try:
        return run(args, overrides)
    except TamkitError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
