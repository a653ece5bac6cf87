"""Small persistence helpers: atomic writes, line-delimited JSON, seed streams."""

from __future__ import annotations

import json
import os
import tempfile
import zlib
from pathlib import Path
from typing import Iterable

import numpy as np


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def append_jsonl(path: str | Path, record: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: corrupt record ({e.msg})") from None
    return out


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode())


def seed_for(root: int, name: str, *ids: int) -> np.random.SeedSequence:
    """Named substream of a root seed, e.g. ``seed_for(7, "rollout", prompt, sample)``."""
    return np.random.SeedSequence([int(root), stream_key(name), *map(int, ids)])


def rng_for(root: int, name: str, *ids: int) -> np.random.Generator:
    return np.random.default_rng(seed_for(root, name, *ids))


def int_seed(root: int, name: str, *ids: int) -> int:
    return int(seed_for(root, name, *ids).generate_state(1)[0])
