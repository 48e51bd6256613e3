"""Domain types shared by every stage of the pipeline.

All types are frozen dataclasses holding plain strings/ints/tuples so they can
be hashed, shared between worker threads, and serialized to canonical JSON
without a schema library.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, replace
from typing import Any, Optional

NOTE_KINDS = ("admission", "progress", "other")
RECEPTOR_VALUES = ("positive", "negative", "equivocal", "unknown")
T_VALUES = ("TX", "Tis", "T0", "T1", "T2", "T3", "T4")
N_VALUES = ("NX", "N0", "N1", "N2", "N3")
M_VALUES = ("MX", "M0", "M1")
STAGE_VALUES = ("0", "I", "IA", "IB", "II", "IIA", "IIB", "III", "IIIA", "IIIB", "IIIC", "IV")
GRADE_VALUES = (1, 2, 3)
ECOG_VALUES = (0, 1, 2, 3, 4, 5)
KARNOFSKY_VALUES = tuple(range(0, 101, 10))
TUMOR_KINDS = ("tumor", "mass", "lesion")

# Evaluated phenotype groups, in the column order of the results table.
PHENOTYPES = ("biomarkers", "grade_perf", "stage", "tnm", "tumor")


def _date_or_none(value: Any) -> Optional[dt.date]:
    if value is None or isinstance(value, dt.date):
        return value
    return dt.date.fromisoformat(value)


@dataclass(frozen=True)
class ClinicalNote:
    patient_id: str
    note_id: str
    visit_date: dt.date
    note_kind: str
    raw_text: str

    def sort_key(self) -> tuple:
        return (self.patient_id, self.visit_date, self.note_id)

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "note_id": self.note_id,
            "visit_date": self.visit_date.isoformat(),
            "note_kind": self.note_kind,
            "raw_text": self.raw_text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClinicalNote":
        kind = d.get("note_kind", "other")
        if kind not in NOTE_KINDS:
            raise ValueError(f"unknown note_kind {kind!r}")
        if not d.get("raw_text"):
            raise ValueError(f"note {d.get('note_id')!r} has empty raw_text")
        return cls(
            patient_id=str(d["patient_id"]),
            note_id=str(d["note_id"]),
            visit_date=_date_or_none(d["visit_date"]),
            note_kind=kind,
            raw_text=d["raw_text"],
        )


@dataclass(frozen=True)
class ProcessedNote:
    note_id: str
    diff_text: str
    removed_sections: tuple[str, ...] = ()
    token_count: int = 0

    def to_dict(self) -> dict:
        return {
            "note_id": self.note_id,
            "diff_text": self.diff_text,
            "removed_sections": list(self.removed_sections),
            "token_count": self.token_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProcessedNote":
        return cls(
            note_id=str(d["note_id"]),
            diff_text=d["diff_text"],
            removed_sections=tuple(d.get("removed_sections", ())),
            token_count=int(d.get("token_count", 0)),
        )


@dataclass(frozen=True)
class Biomarkers:
    er: str = "unknown"
    pr: str = "unknown"
    her2: str = "unknown"

    def to_dict(self) -> dict:
        return {"er": self.er, "pr": self.pr, "her2": self.her2}

    def is_empty(self) -> bool:
        return self.er == self.pr == self.her2 == "unknown"


@dataclass(frozen=True)
class TNM:
    t: Optional[str] = None
    n: Optional[str] = None
    m: Optional[str] = None

    def to_dict(self) -> dict:
        return {"t": self.t, "n": self.n, "m": self.m}

    def is_empty(self) -> bool:
        return self.t is None and self.n is None and self.m is None


@dataclass(frozen=True)
class GradePerformance:
    grade: Optional[int] = None
    ecog: Optional[int] = None
    karnofsky: Optional[int] = None

    def to_dict(self) -> dict:
        return {"grade": self.grade, "ecog": self.ecog, "karnofsky": self.karnofsky}

    def is_empty(self) -> bool:
        return self.grade is None and self.ecog is None and self.karnofsky is None


@dataclass(frozen=True)
class TumorFinding:
    kind: str = "tumor"
    size_cm: Optional[float] = None
    location: Optional[str] = None
    observed_date: Optional[dt.date] = None

    def to_dict(self) -> dict:
        return {
            "size_cm": self.size_cm,
            "kind": self.kind,
            "location": self.location,
            "observed_date": self.observed_date.isoformat() if self.observed_date else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TumorFinding":
        size = d.get("size_cm")
        return cls(
            kind=d["kind"],
            size_cm=None if size is None else float(size),
            location=d.get("location"),
            observed_date=_date_or_none(d.get("observed_date")),
        )


def utc_now() -> dt.datetime:
    return dt.datetime.now(dt.timezone.utc).replace(microsecond=0)


@dataclass(frozen=True)
class PhenotypeRecord:
    """Extraction output for one note from one extractor.

    ``no_response`` names the phenotype groups the extractor failed to answer
    (they are left empty); ``provenance`` collects normalizer assumptions and
    baseline evidence for auditing.
    """

    note_id: str
    extractor_id: str
    biomarkers: Biomarkers = field(default_factory=Biomarkers)
    grade_perf: GradePerformance = field(default_factory=GradePerformance)
    stage: Optional[str] = None
    tnm: TNM = field(default_factory=TNM)
    tumors: tuple[TumorFinding, ...] = ()
    metastatic_breast_flag: Optional[bool] = None
    extracted_at: dt.datetime = field(default_factory=utc_now)
    no_response: tuple[str, ...] = ()
    provenance: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "note_id": self.note_id,
            "extractor_id": self.extractor_id,
            "biomarkers": self.biomarkers.to_dict(),
            "grade_perf": self.grade_perf.to_dict(),
            "stage": self.stage,
            "tnm": self.tnm.to_dict(),
            "tumors": [t.to_dict() for t in self.tumors],
            "metastatic_breast_flag": self.metastatic_breast_flag,
            "extracted_at": self.extracted_at.isoformat(),
            "no_response": list(self.no_response),
            "provenance": list(self.provenance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhenotypeRecord":
        ts = dt.datetime.fromisoformat(d["extracted_at"])
        if ts.tzinfo is None:
            ts = ts.replace(tzinfo=dt.timezone.utc)
        return cls(
            note_id=d["note_id"],
            extractor_id=d["extractor_id"],
            biomarkers=Biomarkers(**d["biomarkers"]),
            grade_perf=GradePerformance(**d["grade_perf"]),
            stage=d["stage"],
            tnm=TNM(**d["tnm"]),
            tumors=tuple(TumorFinding.from_dict(t) for t in d["tumors"]),
            metastatic_breast_flag=d["metastatic_breast_flag"],
            extracted_at=ts,
            no_response=tuple(d.get("no_response", ())),
            provenance=tuple(d.get("provenance", ())),
        )

    def with_fields(self, **changes) -> "PhenotypeRecord":
        return replace(self, **changes)


def _check_enum(out: list[str], name: str, value, allowed, nullable=True) -> None:
    if value is None:
        if not nullable:
            out.append(f"{name}: must not be null")
        return
    if isinstance(value, bool) or value not in allowed:
        out.append(f"{name}: {value!r} not in allowed values")


def validate_record(rec: PhenotypeRecord) -> list[str]:
    """Return a list of ``"<field>: <rule>"`` strings; empty when the record is valid."""
    out: list[str] = []
    bm = rec.biomarkers
    for name in ("er", "pr", "her2"):
        _check_enum(out, f"biomarkers.{name}", getattr(bm, name), RECEPTOR_VALUES, nullable=False)

    gp = rec.grade_perf
    if gp.grade is not None and (isinstance(gp.grade, bool) or gp.grade not in GRADE_VALUES):
        out.append(f"grade_perf.grade: {gp.grade!r} out of 1..3")
    if gp.ecog is not None and (isinstance(gp.ecog, bool) or gp.ecog not in ECOG_VALUES):
        out.append(f"grade_perf.ecog: {gp.ecog!r} out of 0..5")
    if gp.karnofsky is not None:
        k = gp.karnofsky
        if isinstance(k, bool) or not isinstance(k, int) or not 0 <= k <= 100:
            out.append(f"grade_perf.karnofsky: {k!r} out of 0..100")
        elif k % 10:
            out.append(f"grade_perf.karnofsky: {k!r} not a multiple of 10")

    _check_enum(out, "stage", rec.stage, STAGE_VALUES)
    _check_enum(out, "tnm.t", rec.tnm.t, T_VALUES)
    _check_enum(out, "tnm.n", rec.tnm.n, N_VALUES)
    _check_enum(out, "tnm.m", rec.tnm.m, M_VALUES)

    for i, tumor in enumerate(rec.tumors):
        _check_enum(out, f"tumors[{i}].kind", tumor.kind, TUMOR_KINDS, nullable=False)
        if tumor.size_cm is not None and not tumor.size_cm >= 0:
            out.append(f"tumors[{i}].size_cm: negative or NaN")

    if rec.metastatic_breast_flag not in (None, True, False):
        out.append("metastatic_breast_flag: must be boolean or null")
    for name in rec.no_response:
        if name not in PHENOTYPES:
            out.append(f"no_response: unknown phenotype {name!r}")
    if not rec.note_id:
        out.append("note_id: empty")
    return out
