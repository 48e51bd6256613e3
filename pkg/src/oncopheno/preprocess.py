"""Section stripping and per-patient differential text."""

from __future__ import annotations

import re
from dataclasses import dataclass
from itertools import groupby
from typing import Iterable, Sequence

from .model import ClinicalNote, ProcessedNote
from .retrieval import count_tokens

DEFAULT_DROP_HEADERS = (
    "physical examination",
    "current medications",
    "vitals",
    "vital signs",
    "allergies",
)

# Section names that end a dropped block even though they are kept.
KNOWN_SECTIONS = (
    "assessment", "assessment and plan", "plan", "impression", "history of present illness",
    "hpi", "chief complaint", "past medical history", "past surgical history",
    "family history", "social history", "review of systems", "ros", "diagnosis",
    "oncologic history", "pathology", "imaging", "labs", "laboratory", "results",
    "interval history", "subjective", "objective", "medications", "follow up",
)

_HEADER_RE = re.compile(r"^\s*([A-Za-z][A-Za-z0-9 /&()\-]{0,60}?)\s*:\s*(.*)$")
_CAPS_HEADER_RE = re.compile(r"^\s*[A-Z][A-Z0-9 /&()\-]{1,60}:?\s*$")


@dataclass(frozen=True)
class SectionFilterConfig:
    drop_section_headers: tuple[str, ...] = DEFAULT_DROP_HEADERS

    def __post_init__(self):
        if not self.drop_section_headers:
            raise ValueError("drop_section_headers must not be empty")
        norm = tuple(h.strip().lower() for h in self.drop_section_headers)
        object.__setattr__(self, "drop_section_headers", norm)


class UnsortedCorpusError(ValueError):
    pass


def _match_drop_header(line: str, headers: Sequence[str]) -> str | None:
    low = line.strip().lower()
    for h in headers:
        if low == h or low == h + ":" or low.startswith(h + ":"):
            return h
    return None


def _is_header(line: str, headers: Sequence[str]) -> bool:
    if _match_drop_header(line, headers):
        return True
    m = _HEADER_RE.match(line)
    if m and m.group(1).strip().lower() in KNOWN_SECTIONS:
        return True
    stripped = line.strip()
    return bool(stripped.endswith(":") and _CAPS_HEADER_RE.match(stripped) and len(stripped) > 2)


def strip_sections(raw_text: str, cfg: SectionFilterConfig = SectionFilterConfig()) -> tuple[str, list[str]]:
    """Drop configured sections and non-ASCII characters.

    A dropped block starts at a line equal to (or starting with ``header:``)
    a configured header and runs until the next recognized header line.
    """
    text = raw_text.encode("ascii", "ignore").decode("ascii")
    headers = cfg.drop_section_headers
    kept: list[str] = []
    removed: list[str] = []
    dropping = False
    for line in text.split("\n"):
        hit = _match_drop_header(line, headers)
        if hit:
            dropping = True
            if hit not in removed:
                removed.append(hit)
            continue
        if dropping and _is_header(line, headers):
            dropping = False
        if not dropping:
            kept.append(line)
    return "\n".join(kept), removed


def _prev_lines(prev_text: str) -> set[str]:
    lines = prev_text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()  # a trailing newline does not make an extra blank line
    return {line.strip() for line in lines}


def rm_dups(prev_text: str, curr_text: str) -> str:
    """Remove lines of ``curr_text`` whose trimmed content is a trimmed line of ``prev_text``."""
    seen = _prev_lines(prev_text)
    if not seen:
        return curr_text
    return "\n".join(line for line in curr_text.split("\n") if line.strip() not in seen)


def _check_order(notes: Sequence[ClinicalNote]) -> None:
    seen_patients: set[str] = set()
    prev = None
    for note in notes:
        if prev is None or note.patient_id != prev.patient_id:
            if note.patient_id in seen_patients:
                raise UnsortedCorpusError(f"notes for patient {note.patient_id!r} are not contiguous")
            seen_patients.add(note.patient_id)
        elif note.sort_key() <= prev.sort_key():
            raise UnsortedCorpusError(
                f"note {note.note_id!r} is not after {prev.note_id!r} in (visit_date, note_id) order")
        prev = note


def _patient_diffs(stripped: list[str]) -> list[str]:
    out = []
    for r, curr in enumerate(stripped):
        if r == 0:
            out.append(curr)
            continue
        diff = rm_dups(stripped[r - 1], curr)
        if diff == curr and r >= 2:
            diff = rm_dups(stripped[r - 2], curr)
        out.append(diff)
    return out


def process_differential(notes: Sequence[ClinicalNote],
                         cfg: SectionFilterConfig = SectionFilterConfig()) -> list[ProcessedNote]:
    """Reduce each note to the lines not already present in the patient's earlier notes.

    Notes must be grouped by patient (groups contiguous) and ordered by
    ``(visit_date, note_id)`` within a patient. The first note of a patient
    keeps all of its section-stripped text. Later notes are deduplicated
    against the previous note; when that removes nothing, the note two back
    is tried instead. Lookbacks never cross a patient boundary.
    """
    notes = list(notes)
    ids = [n.note_id for n in notes]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate note_id in corpus")
    _check_order(notes)

    out: list[ProcessedNote] = []
    for _, group in groupby(notes, key=lambda n: n.patient_id):
        group = list(group)
        stripped = [strip_sections(n.raw_text, cfg) for n in group]
        diffs = _patient_diffs([s[0] for s in stripped])
        for note, (_, removed), diff in zip(group, stripped, diffs):
            out.append(ProcessedNote(note.note_id, diff, tuple(removed), count_tokens(diff)))
    return out


def sort_notes(notes: Iterable[ClinicalNote]) -> list[ClinicalNote]:
    return sorted(notes, key=ClinicalNote.sort_key)
