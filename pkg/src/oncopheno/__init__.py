"""Breast-cancer phenotype extraction from clinical notes.

Pipeline: section stripping and differential text, hybrid chunk retrieval,
schema-constrained LLM extraction with repair, normalization, a pattern-based
baseline, and label-level evaluation.
"""

from .model import (
    Biomarkers,
    ClinicalNote,
    GradePerformance,
    PhenotypeRecord,
    ProcessedNote,
    TNM,
    TumorFinding,
    validate_record,
)

__version__ = "0.1.0"

__all__ = [
    "Biomarkers",
    "ClinicalNote",
    "GradePerformance",
    "PhenotypeRecord",
    "ProcessedNote",
    "TNM",
    "TumorFinding",
    "validate_record",
]
