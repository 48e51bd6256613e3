"""Append-only JSON-lines store for extraction records and attempt audits.

Line types::

    {"type": "record", "seq": 3, "record": {...}}
    {"type": "supersede", "seq": 4, "note_id": "...", "extractor_id": "...", "replaces": 3}
    {"type": "audit", "seq": 5, ...}

Re-writing a (note_id, extractor_id) key appends a supersede marker followed
by the new record, so replay keeps exactly one live record per key. A
truncated final line (interrupted write) is skipped with a warning.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from pathlib import Path
from typing import Iterator, Optional

from .model import PhenotypeRecord

log = logging.getLogger(__name__)


class StoreError(RuntimeError):
    pass


def _content_key(rec: PhenotypeRecord) -> dict:
    d = rec.to_dict()
    d.pop("extracted_at")
    return d


class AnnotationStore:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._live: dict[tuple[str, str], tuple[int, PhenotypeRecord]] = {}
        self._seq = 0
        self._needs_newline = False
        if self.path.exists():
            self._replay()

    # ---------------------------------------------------------------- reading

    def _lines(self) -> Iterator[tuple[int, dict]]:
        with self.path.open("r", encoding="utf-8") as fh:
            raw_lines = fh.read().split("\n")
        last = len(raw_lines) - 1
        for lineno, line in enumerate(raw_lines, 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError:
                where = "final line" if lineno - 1 == last else f"line {lineno}"
                log.warning("%s: skipping truncated or corrupt %s", self.path, where)
                continue
            yield lineno, entry

    def _replay(self) -> None:
        text = self.path.read_text(encoding="utf-8")
        self._needs_newline = bool(text) and not text.endswith("\n")
        for _, entry in self._lines():
            self._seq = max(self._seq, int(entry.get("seq", 0)))
            kind = entry.get("type")
            if kind == "record":
                rec = PhenotypeRecord.from_dict(entry["record"])
                self._live[(rec.note_id, rec.extractor_id)] = (entry["seq"], rec)
            elif kind == "supersede":
                key = (entry["note_id"], entry["extractor_id"])
                if key in self._live and self._live[key][0] == entry.get("replaces"):
                    del self._live[key]

    def records(self, extractor_id: Optional[str] = None) -> list[PhenotypeRecord]:
        """Live records in the order they were (last) written."""
        items = sorted(self._live.values(), key=lambda x: x[0])
        return [r for _, r in items if extractor_id is None or r.extractor_id == extractor_id]

    def get(self, note_id: str, extractor_id: str) -> Optional[PhenotypeRecord]:
        hit = self._live.get((note_id, extractor_id))
        return hit[1] if hit else None

    def audits(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [e for _, e in self._lines() if e.get("type") == "audit"]

    # ---------------------------------------------------------------- writing

    def _append(self, entries: list[dict]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        payload = "".join(json.dumps(e, sort_keys=True) + "\n" for e in entries)
        if self._needs_newline:
            payload = "\n" + payload
            self._needs_newline = False
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())

    def put(self, rec: PhenotypeRecord) -> bool:
        """Upsert a record. Returns False when an identical live record already exists."""
        key = (rec.note_id, rec.extractor_id)
        with self._lock:
            current = self._live.get(key)
            if current and _content_key(current[1]) == _content_key(rec):
                return False
            entries = []
            if current:
                self._seq += 1
                entries.append({"type": "supersede", "seq": self._seq, "note_id": rec.note_id,
                                "extractor_id": rec.extractor_id, "replaces": current[0]})
            self._seq += 1
            entries.append({"type": "record", "seq": self._seq, "record": rec.to_dict()})
            self._append(entries)
            self._live[key] = (self._seq, rec)
            return True

    def audit(self, entry: dict) -> None:
        with self._lock:
            self._seq += 1
            self._append([{"type": "audit", "seq": self._seq, **entry}])
