"""
Tests for the tamkit command line: subcommands, outputs and exit codes.
"""

import json
import sys
from pathlib import Path

import pytest

# Add scripts directory to path for imports (needed for pytest)
scripts_dir = Path(__file__).parent
if str(scripts_dir) not in sys.path:
    sys.path.insert(0, str(scripts_dir))

from cli import main  # noqa: E402
from storage import load_jsonl, load_metrics, load_train_log  # noqa: E402

FIXTURES = scripts_dir.parent / "data" / "fixtures"

TINY = [
    "--num-images", "4",
    "--num-test-images", "3",
    "--image-size", "24",
    "--hidden-channels", "4",
    "--epochs", "1",
    "--batch-size", "2",
]


def test_parse_prints_one_record_per_image(capsys):
    code = main(["parse", "--captions", str(FIXTURES / "captions.jsonl"), "--vocab", str(FIXTURES / "caption_vocab.tsv")])
    assert code == 0
    out, err = capsys.readouterr()
    records = [json.loads(line) for line in out.splitlines()]
    assert len(records) == 8
    assert records[0]["image_id"] == "fig1_beds"
    assert "Parsed 8 images" in err


def test_parse_writes_output_file(tmp_path):
    output = tmp_path / "parsed.jsonl"
    code = main([
        "parse",
        "--captions", str(FIXTURES / "captions.jsonl"),
        "--vocab", str(FIXTURES / "caption_vocab.tsv"),
        "--output", str(output),
    ])
    assert code == 0
    assert load_jsonl(output) == load_jsonl(FIXTURES / "expected_parsed.jsonl")


def test_parse_empty_corpus(tmp_path, capsys):
    captions = tmp_path / "captions.jsonl"
    captions.write_text("", encoding="utf-8")
    assert main(["parse", "--captions", str(captions), "--vocab", str(FIXTURES / "caption_vocab.tsv")]) == 0
    assert capsys.readouterr().out == ""


@pytest.mark.parametrize(
    "argv",
    [
        ["parse", "--captions", str(FIXTURES / "captions.jsonl"), "--vocab", "missing_vocab.tsv"],
        ["parse", "--captions", "missing.jsonl", "--vocab", str(FIXTURES / "caption_vocab.tsv")],
        ["train", "--epochs", "0"],
        ["train", "--no-such-key", "1"],
        ["train", "--config", "missing.conf"],
        ["eval", "--pred-dir", ".", "--gt-dir", ".", "--vocab", "v.tsv", "--epochs", "2"],
    ],
)
def test_input_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "Error:" in capsys.readouterr().err


def test_train_infer_generate_eval(tmp_path):
    run_dir = tmp_path / "run"
    assert main(["train", "--output-dir", str(run_dir), *TINY]) == 0
    for name in ("checkpoint.bin", "train_log.csv", "config.txt", "metrics.json", "metrics.txt", "summary.md", "parsed.jsonl"):
        assert (run_dir / name).exists(), name
    assert len(load_train_log(str(run_dir))) == 2
    assert "config_hash" in load_metrics(str(run_dir))

    infer_dir = tmp_path / "infer"
    code = main([
        "infer",
        "--checkpoint", str(run_dir / "checkpoint.bin"),
        "--split", "test",
        "--output-dir", str(infer_dir),
        "--dump-tams",
        *TINY,
    ])
    assert code == 0
    names = {path.name for path in infer_dir.iterdir()}
    assert {"test_0000_label.pgm", "test_0001_label.pgm", "test_0002_label.pgm"} <= names
    assert any("_cam_" in name for name in names)
    assert any("_tam_" in name for name in names)

    data_dir = tmp_path / "shapes"
    assert main(["generate", "--output-dir", str(data_dir), "--split", "test", *TINY]) == 0
    assert (data_dir / "gt" / "test_0002_gt.pgm").exists()

    scores_dir = tmp_path / "scores"
    code = main([
        "eval",
        "--pred-dir", str(infer_dir),
        "--gt-dir", str(data_dir / "gt"),
        "--vocab", str(data_dir / "vocab.tsv"),
        "--output-dir", str(scores_dir),
    ])
    assert code == 0
    assert "aggregate_metrics" in load_metrics(str(scores_dir))
    assert (scores_dir / "metrics.txt").exists()


def test_train_is_byte_reproducible(tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(["train", "--output-dir", str(first), "--seed", "3", *TINY]) == 0
    assert main(["train", "--output-dir", str(second), "--seed", "3", *TINY]) == 0
    for name in ("checkpoint.bin", "train_log.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_infer_rejects_mismatched_embeddings(tmp_path):
    run_dir = tmp_path / "run"
    assert main(["train", "--output-dir", str(run_dir), *TINY]) == 0
    code = main([
        "infer",
        "--checkpoint", str(run_dir / "checkpoint.bin"),
        "--output-dir", str(tmp_path / "infer"),
        "--embedding-dim", "20",
        *TINY,
    ])
    assert code == 2


def test_eval_without_ground_truth(tmp_path):
    empty = tmp_path / "gt"
    empty.mkdir()
    code = main([
        "eval",
        "--pred-dir", str(tmp_path),
        "--gt-dir", str(empty),
        "--vocab", str(FIXTURES / "caption_vocab.tsv"),
    ])
    assert code == 2
