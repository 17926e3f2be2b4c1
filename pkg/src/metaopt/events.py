"""Append-only run event stream and reproducible random streams."""

from __future__ import annotations

import hashlib
import json
import os
import threading
from collections.abc import Iterable
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

VOLATILE_KEYS = frozenset({"ts"})


def seed_stream(master_seed: int, purpose: str) -> np.random.Generator:
    """Independent generator per (seed, purpose); identical inputs give identical streams."""
    digest = hashlib.sha256(purpose.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence(entropy=int(master_seed), spawn_key=words))


class EventLog:
    """Sequence-numbered events, optionally mirrored to a JSONL file."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self.events: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def emit(self, type: str, **data: Any) -> dict[str, Any]:
        with self._lock:
            event = {"seq": len(self.events), "ts": datetime.now(timezone.utc).isoformat(), "type": type, **data}
            self.events.append(event)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(event, ensure_ascii=False, default=str) + "\n")
        return event

    def of_type(self, type: str) -> list[dict[str, Any]]:
        return [e for e in self.events if e["type"] == type]

    def count(self, type: str) -> int:
        return len(self.of_type(type))


def strip_volatile(events: Iterable[dict[str, Any]]) -> list[dict[str, Any]]:
    return [{k: v for k, v in e.items() if k not in VOLATILE_KEYS} for e in events]


def read_events(path: str | os.PathLike) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        events = [json.loads(line) for line in fh if line.strip()]
    for i, e in enumerate(events):
        if e.get("seq") != i:
            raise ValueError(f"{path}: event {i} has seq {e.get('seq')}; stream is not strictly ordered")
    return events
