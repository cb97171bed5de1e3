"""
Tests for run configuration loading, overrides and logging setup.
"""

import logging
import sys
import tempfile
from pathlib import Path

import pytest

# Add scripts directory to path for imports (needed for pytest)
scripts_dir = Path(__file__).parent
if str(scripts_dir) not in sys.path:
    sys.path.insert(0, str(scripts_dir))

from caption_parser import DATA_DIR  # noqa: E402
from config import (  # noqa: E402
    THREADS_ENV,
    ConsoleFormatter,
    RunConfig,
    build_config,
    compute_config_hash,
    load_config_file,
    load_run_config,
    parse_overrides,
    thread_limit,
)
from errors import ConfigError  # noqa: E402


def test_bundled_defaults_match_dataclass():
    """The shipped default.conf spells out exactly the built-in defaults."""
    config = load_run_config(DATA_DIR / "default.conf")
    assert config == RunConfig()


def test_precedence_command_line_over_file():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "run.conf"
        path.write_text('# comment\n\nepochs=3\nconcept_mode="class_related"\nlambda_ac=0.5\n', encoding="utf-8")
        config = load_run_config(path, ["--epochs", "7", "--w-res=0.0"])
    assert config.epochs == 7
    assert config.concept_mode == "class_related"
    assert config.lambda_ac == 0.5
    assert config.w_res == 0.0


def test_file_parsing_strips_quotes():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "run.conf"
        path.write_text("output_dir='a b'\ncaptions = \"x.jsonl\"\n", encoding="utf-8")
        assert load_config_file(path) == {"output_dir": "a b", "captions": "x.jsonl"}


@pytest.mark.parametrize(
    "values",
    [
        {"epochs": "0"},
        {"epochs": "three"},
        {"unknown_key": "1"},
        {"concept_mode": "nouns"},
        {"ac_form": "hinge"},
        {"tag_source": "oracle"},
        {"w_res": "-0.1"},
        {"lambda_cpt": "-1"},
        {"hidden_channels": "8,x"},
        {"dataset": "files"},
        {"crop_size": "64"},
    ],
)
def test_invalid_values_raise_config_error(values):
    with pytest.raises(ConfigError):
        build_config(overrides=values)


def test_ground_truth_tags_need_a_gt_dir():
    files = {"dataset": "files", "captions": "c.jsonl", "images_dir": "img", "vocab": "v.tsv", "embeddings": "e.txt"}
    assert build_config(overrides=files).tag_source == "captions"
    with pytest.raises(ConfigError):
        build_config(overrides={**files, "tag_source": "gt"})
    assert build_config(overrides={**files, "tag_source": "gt", "gt_dir": "gt"}).tag_source == "gt"


def test_parse_overrides():
    assert parse_overrides(["--epochs", "2", "--lambda-ac=0"]) == {"epochs": "2", "lambda_ac": "0"}
    with pytest.raises(ConfigError):
        parse_overrides(["--epochs"])
    with pytest.raises(ConfigError):
        parse_overrides(["epochs", "2"])


def test_config_hash_tracks_values():
    a = RunConfig()
    assert compute_config_hash(a) == compute_config_hash(RunConfig())
    assert compute_config_hash(a) != compute_config_hash(RunConfig(lambda_ac=0.0))
    assert len(compute_config_hash(a)) == 16


def test_echo_is_sorted_and_round_trips():
    config = RunConfig(lambda_cpt=0.25, hidden_channels="4")
    lines = config.echo().splitlines()
    assert lines == sorted(lines)
    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "config.txt"
        path.write_text(config.echo(), encoding="utf-8")
        assert load_run_config(path) == config


def test_derived_configs():
    config = RunConfig(hidden_channels="4, 8", embedding_dim=12, lambda_cls=2.0)
    assert config.hidden_channel_tuple() == (4, 8)
    assert config.encoder_config().dim == 12
    assert config.encoder_config(dim=6).dim == 6
    assert config.loss_weights().lambda_cls == 2.0
    assert config.train_config().weights == config.loss_weights()


def test_thread_limit(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert thread_limit(default=4) == 4
    monkeypatch.setenv(THREADS_ENV, "2")
    assert thread_limit(default=4) == 2
    monkeypatch.setenv(THREADS_ENV, "0")
    with pytest.raises(ConfigError):
        thread_limit(default=4)


def test_console_formatter_prefixes():
    formatter = ConsoleFormatter()

    def record(level, msg):
        return logging.LogRecord("tamkit", level, __file__, 1, msg, None, None)

    assert formatter.format(record(logging.INFO, "Training")) == "Training"
    assert formatter.format(record(logging.WARNING, "no tags")) == "Warning: no tags"
    assert formatter.format(record(logging.ERROR, "boom")) == "Error: boom"
    assert formatter.format(record(logging.DEBUG, "detail")) == "debug tamkit: detail"
