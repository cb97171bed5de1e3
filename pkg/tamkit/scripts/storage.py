"""
Run artifact storage.

A run directory holds the echoed config, the training log, the parameter
checkpoint, metrics and a markdown summary. Every file is written to a
temporary file in the same directory and renamed into place.

Also: JSONL helpers, 8-bit PGM/PPM images and the binary checkpoint format
(magic "TAMK", uint32 LE header length, JSON header, float32 LE payload).
"""

import csv
import io
import json
import os
import struct
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

# Import sibling modules
sys.path.insert(0, str(Path(__file__).parent))
from config import load_config_file
from errors import CheckpointError, CorpusError, ShapeMismatch

CHECKPOINT_MAGIC = b"TAMK"
TRAIN_LOG_COLUMNS = ["step", "epoch", "lr", "loss_cls", "loss_cpt", "loss_ac", "loss_total"]


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_jsonl(path: Path, records: Iterable[Dict[str, Any]]) -> None:
    lines = [json.dumps(r, ensure_ascii=False) + "\n" for r in records]
    atomic_write_text(path, "".join(lines))


def load_jsonl(path: Path) -> List[Dict[str, Any]]:
    """Load a JSONL file; malformed lines raise CorpusError with the line number."""
    path = Path(path)
    if not path.exists():
        raise CorpusError("file not found", str(path))
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise CorpusError(f"invalid JSON ({e.msg})", str(path), line_no)
    return records


# Images


def encode_pgm(values: np.ndarray) -> bytes:
    """8-bit grayscale P5 from an H x W array of integers in [0, 255]."""
    if values.ndim != 2:
        raise ShapeMismatch(f"PGM needs a 2-D array, got shape {values.shape}")
    h, w = values.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    return header + np.asarray(values, dtype=np.uint8).tobytes()


def encode_ppm(image: np.ndarray) -> bytes:
    """8-bit RGB P6 from an H x W x 3 array of floats in [0, 1]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatch(f"PPM needs an H x W x 3 array, got shape {image.shape}")
    h, w, _ = image.shape
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def _read_netpbm(path: Path, magic: bytes) -> Tuple[int, int, bytes]:
    data = Path(path).read_bytes()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ShapeMismatch(f"{path}: truncated header")
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise ShapeMismatch(f"{path}: expected {magic.decode()} image, got {tokens[0]!r}")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ShapeMismatch(f"{path}: only 8-bit images are supported")
    return width, height, data[pos + 1:]


def read_pgm(path: Path) -> np.ndarray:
    width, height, payload = _read_netpbm(path, b"P5")
    if len(payload) < width * height:
        raise ShapeMismatch(f"{path}: payload shorter than {width}x{height}")
    return np.frombuffer(payload[:width * height], dtype=np.uint8).reshape(height, width).astype(np.int64)


def read_ppm(path: Path) -> np.ndarray:
    width, height, payload = _read_netpbm(path, b"P6")
    if len(payload) < width * height * 3:
        raise ShapeMismatch(f"{path}: payload shorter than {width}x{height}x3")
    pixels = np.frombuffer(payload[:width * height * 3], dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float64) / 255.0


def write_label_pgm(path: Path, labels: np.ndarray) -> None:
    """Label indices as pixel values, 0 = background."""
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ShapeMismatch("label indices must fit in 8 bits")
    atomic_write_bytes(path, encode_pgm(labels))


def write_activation_pgm(path: Path, values: np.ndarray) -> None:
    """Activation map in [0, 1] scaled by 255."""
    scaled = np.clip(np.round(np.asarray(values) * 255.0), 0, 255)
    atomic_write_bytes(path, encode_pgm(scaled))


def write_ppm(path: Path, image: np.ndarray) -> None:
    atomic_write_bytes(path, encode_ppm(image))


def write_activation_csv(path: Path, grid: np.ndarray) -> None:
    """Lossless activation dump, one CSV row per image row."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    for row in np.asarray(grid, dtype=np.float64):
        writer.writerow([repr(float(v)) for v in row])
    atomic_write_text(path, buffer.getvalue())


def read_activation_csv(path: Path) -> np.ndarray:
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = [[float(v) for v in row] for row in csv.reader(f) if row]
    return np.array(rows, dtype=np.float64)


# Checkpoints


def encode_checkpoint(tensors: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> bytes:
    entries = []
    payload = bytearray()
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(array.shape), "offset": len(payload)})
        payload += array.tobytes()
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + bytes(payload)


def decode_checkpoint(data: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a tamkit checkpoint (bad magic)")
    if len(data) < 8:
        raise CheckpointError("checkpoint truncated")
    (header_len,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}")
    payload = data[8 + header_len:]

    tensors = {}
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise CheckpointError(f"tensor {entry['name']} extends past end of file")
        tensors[entry["name"]] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).astype(np.float64)
    return tensors, header.get("meta", {})


def save_checkpoint(path: Path, tensors: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(tensors, meta))


def load_checkpoint(path: Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


class RunWriter:
    """Owns the file names of one run directory."""

    def __init__(self, output_dir: str, run_id: Optional[str] = None):
        """
        Args:
            output_dir: Base output directory
            run_id: Optional sub-directory name (used by ablation sweeps)
        """
        self.output_dir = Path(output_dir)
        self.run_id = run_id
        self.run_dir = self.output_dir / run_id if run_id else self.output_dir
        self.config_file = self.run_dir / "config.txt"
        self.train_log_file = self.run_dir / "train_log.csv"
        self.checkpoint_file = self.run_dir / "checkpoint.bin"
        self.metrics_file = self.run_dir / "metrics.json"
        self.metrics_text_file = self.run_dir / "metrics.txt"
        self.summary_file = self.run_dir / "summary.md"
        self.parsed_file = self.run_dir / "parsed.jsonl"

        self.run_dir.mkdir(parents=True, exist_ok=True)

    def write_config(self, echo: str) -> None:
        atomic_write_text(self.config_file, echo)

    def write_train_log(self, rows: Sequence[Dict[str, Any]]) -> None:
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=TRAIN_LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        atomic_write_text(self.train_log_file, buffer.getvalue())

    def write_checkpoint(self, tensors: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> None:
        save_checkpoint(self.checkpoint_file, tensors, meta)

    def write_metrics(
        self,
        metrics: Dict[str, Any],
        timestamp: Optional[str] = None,
        config_hash: Optional[str] = None,
    ) -> None:
        if timestamp is None:
            timestamp = datetime.now(timezone.utc).isoformat()
        metrics_dict = {"timestamp": timestamp, "aggregate_metrics": metrics}
        if self.run_id:
            metrics_dict["run_id"] = self.run_id
        if config_hash:
            metrics_dict["config_hash"] = config_hash
        atomic_write_text(self.metrics_file, json.dumps(metrics_dict, indent=2, ensure_ascii=False))

    def write_metrics_text(self, text: str) -> None:
        atomic_write_text(self.metrics_text_file, text)

    def write_summary(self, markdown: str) -> None:
        atomic_write_text(self.summary_file, markdown)

    def write_parsed(self, records: Iterable[Dict[str, Any]]) -> None:
        write_jsonl(self.parsed_file, records)


def load_train_log(run_dir: str) -> List[Dict[str, str]]:
    log_file = Path(run_dir) / "train_log.csv"
    if not log_file.exists():
        return []
    with open(log_file, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def load_metrics(run_dir: str) -> Dict[str, Any]:
    """Metrics of a run directory, {} when absent."""
    metrics_file = Path(run_dir) / "metrics.json"
    if not metrics_file.exists():
        return {}
    with open(metrics_file, "r", encoding="utf-8") as f:
        return json.load(f)


def load_config_echo(run_dir: str) -> Dict[str, str]:
    config_file = Path(run_dir) / "config.txt"
    if not config_file.exists():
        return {}
    return load_config_file(config_file)
