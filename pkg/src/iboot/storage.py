"""On-disk formats: versioned binary containers and the JSONL metrics log.

Container layout: 8-byte magic, 1 format-version byte, then the payload.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import torch

from iboot.evaluation import EvalReport, FeatureBank

CHECKPOINT_MAGIC = b"IBOOTCKP"
BANK_MAGIC = b"IBOOTFBK"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _write_container(path: str | Path, magic: bytes, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(magic + bytes([FORMAT_VERSION]) + payload)
    tmp.replace(path)


def _read_container(path: str | Path, magic: bytes) -> bytes:
    raw = Path(path).read_bytes()
    if raw[: len(magic)] != magic:
        raise FormatError(f"{path}: bad magic header")
    version = raw[len(magic)]
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    return raw[len(magic) + 1 :]


def save_checkpoint(path: str | Path, state: dict[str, Any]) -> None:
    """``state`` holds tensors, state dicts and plain Python values only."""
    buf = io.BytesIO()
    torch.save(state, buf)
    _write_container(path, CHECKPOINT_MAGIC, buf.getvalue())


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    payload = _read_container(path, CHECKPOINT_MAGIC)
    return torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)


def save_bank(path: str | Path, bank: FeatureBank) -> None:
    header = json.dumps(
        {
            "n": len(bank),
            "dim": int(bank.features.shape[1]),
            "dtype": str(bank.features.dtype),
            "labels": bank.labels.tolist(),
            "ids": list(bank.ids),
        }
    ).encode()
    rows = np.ascontiguousarray(bank.features).tobytes()
    _write_container(path, BANK_MAGIC, struct.pack("<Q", len(header)) + header + rows)


def load_bank(path: str | Path) -> FeatureBank:
    payload = _read_container(path, BANK_MAGIC)
    (hlen,) = struct.unpack("<Q", payload[:8])
    header = json.loads(payload[8 : 8 + hlen])
    features = np.frombuffer(payload[8 + hlen :], dtype=np.dtype(header["dtype"]))
    features = features.reshape(header["n"], header["dim"]).copy()
    return FeatureBank(
        features=features,
        labels=np.array(header["labels"], dtype=np.int64),
        ids=tuple(header["ids"]),
    )


class MetricsLog:
    """Append-only JSON-lines log, flushed per record so it can be tailed live.
    Training records must have strictly increasing ``step``."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._last_step = max((r["step"] for r in read_log(self.path) if r.get("kind") == "train"), default=-1) if self.path.exists() else -1

    def append(self, record: dict[str, Any]) -> None:
        if record.get("kind") == "train":
            if record["step"] <= self._last_step:
                raise ValueError(f"metrics step {record['step']} not after {self._last_step}")
            self._last_step = record["step"]
        with self.path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
            f.flush()

    def append_report(self, report: EvalReport, **extra: Any) -> None:
        self.append({**report.to_record(), **extra})

    def truncate_after(self, step: int, epoch: int) -> None:
        """Drop training records past ``step`` and pretraining eval snapshots
        past ``epoch`` (used when resuming)."""
        if not self.path.exists():
            return

        def stale(r: dict) -> bool:
            if r.get("kind") == "train":
                return r["step"] > step
            return r.get("kind") == "eval" and r.get("epoch", -1) > epoch

        kept = [r for r in read_log(self.path) if not stale(r)]
        with self.path.open("w", encoding="utf-8") as f:
            for r in kept:
                f.write(json.dumps(r, sort_keys=True) + "\n")
        self._last_step = max((r["step"] for r in kept if r.get("kind") == "train"), default=-1)


def read_log(path: str | Path) -> list[dict[str, Any]]:
    return list(iter_log(path))


def iter_log(path: str | Path) -> Iterator[dict[str, Any]]:
    with Path(path).open(encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)
