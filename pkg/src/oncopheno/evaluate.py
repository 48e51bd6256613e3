"""Scoring extracted records against gold labels.

Each (note, phenotype) label is classified as correct, missing, hallucination
or no_response, then aggregated into per-phenotype counts and overall
accuracy / precision / recall / F1.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence

from . import model
from .model import Biomarkers, GradePerformance, PhenotypeRecord, TNM, TumorFinding
from .postprocess import standardize_date

OUTCOMES = ("correct", "missing", "hallucination", "no_response")

PHENOTYPE_TITLES = {
    "biomarkers": "Biomarkers",
    "grade_perf": "Grade & Perf.",
    "stage": "Stage",
    "tnm": "TNM",
    "tumor": "Tumor",
}


@dataclass(frozen=True)
class GoldLabel:
    note_id: str
    phenotype: str
    gold_value: Any = None  # None means the phenotype is absent from the note

    def __post_init__(self):
        if self.phenotype not in model.PHENOTYPES:
            raise ValueError(f"unknown phenotype {self.phenotype!r}")

    @property
    def present(self) -> bool:
        return canonical_value(self.phenotype, self.gold_value) is not None

    def to_dict(self) -> dict:
        return {"note_id": self.note_id, "phenotype": self.phenotype, "gold_value": self.gold_value}

    @classmethod
    def from_dict(cls, d: dict) -> "GoldLabel":
        return cls(d["note_id"], d["phenotype"], d.get("gold_value"))


# --------------------------------------------------------------------------
# Canonical values
# --------------------------------------------------------------------------

def _tumor_dict(t) -> dict:
    if isinstance(t, TumorFinding):
        return t.to_dict()
    return TumorFinding.from_dict(t).to_dict()


def canonical_value(phenotype: str, value: Any) -> Any:
    """Normalize a phenotype value; empty groups collapse to None (absent)."""
    if value is None:
        return None
    if phenotype == "biomarkers":
        bm = value if isinstance(value, Biomarkers) else Biomarkers(**value)
        return None if bm.is_empty() else bm.to_dict()
    if phenotype == "grade_perf":
        gp = value if isinstance(value, GradePerformance) else GradePerformance(**value)
        return None if gp.is_empty() else gp.to_dict()
    if phenotype == "tnm":
        tnm = value if isinstance(value, TNM) else TNM(**value)
        return None if tnm.is_empty() else tnm.to_dict()
    if phenotype == "stage":
        return value or None
    if phenotype == "tumor":
        items = [_tumor_dict(t) for t in value]
        return items or None
    raise ValueError(f"unknown phenotype {phenotype!r}")


def record_values(rec: PhenotypeRecord) -> dict[str, Any]:
    return {
        "biomarkers": canonical_value("biomarkers", rec.biomarkers),
        "grade_perf": canonical_value("grade_perf", rec.grade_perf),
        "stage": canonical_value("stage", rec.stage),
        "tnm": canonical_value("tnm", rec.tnm),
        "tumor": canonical_value("tumor", list(rec.tumors)),
    }


def _size_key(t: dict):
    return None if t["size_cm"] is None else round(float(t["size_cm"]), 1)


def _tumor_matches(gold: dict, pred: dict) -> bool:
    if _size_key(gold) != _size_key(pred) or gold["kind"] != pred["kind"]:
        return False
    if gold.get("location") is not None and (pred.get("location") or "").lower() != gold["location"].lower():
        return False
    if gold.get("observed_date") is not None:
        if standardize_date(pred.get("observed_date")) != standardize_date(gold["observed_date"]):
            return False
    return True


def _tumors_equal(gold: Sequence[dict], pred: Sequence[dict]) -> bool:
    """Multiset equality via bipartite matching (augmenting paths)."""
    if len(gold) != len(pred):
        return False
    match_of_pred: dict[int, int] = {}

    def augment(g: int, seen: set) -> bool:
        for p in range(len(pred)):
            if p in seen or not _tumor_matches(gold[g], pred[p]):
                continue
            seen.add(p)
            if p not in match_of_pred or augment(match_of_pred[p], seen):
                match_of_pred[p] = g
                return True
        return False

    return all(augment(g, set()) for g in range(len(gold)))


def values_equal(phenotype: str, gold: Any, pred: Any) -> bool:
    if phenotype == "tumor":
        return _tumors_equal(gold, pred)
    return gold == pred


# --------------------------------------------------------------------------
# Classification and metrics
# --------------------------------------------------------------------------

def classify_label(pred: Any, gold: GoldLabel, responded: bool = True) -> str:
    """Outcome for one label. ``pred`` is the canonical predicted value or None."""
    if not responded:
        return "no_response"
    gold_value = canonical_value(gold.phenotype, gold.gold_value)
    pred_value = canonical_value(gold.phenotype, pred)
    if gold_value is None:
        return "correct" if pred_value is None else "hallucination"
    if pred_value is None:
        return "missing"
    return "correct" if values_equal(gold.phenotype, gold_value, pred_value) else "hallucination"


class EmptyEvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    extractor_id: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    outcome_counts: Mapping[str, int]
    responded_labels: int
    total_labels: int
    tp: int
    fp: int
    fn: int
    per_phenotype: Mapping[str, Mapping[str, int]] = field(default_factory=dict)

    @property
    def correct(self) -> int:
        return self.outcome_counts.get("correct", 0)

    @property
    def incorrect(self) -> int:
        return self.responded_labels - self.correct


def compute_metrics(outcomes: Iterable[tuple], extractor_id: str = "") -> MetricsReport:
    """Aggregate ``(outcome, gold_present)`` or ``(outcome, gold_present, phenotype)`` items.

    accuracy = correct / responded labels (no-response excluded);
    TP = correct with gold present, FP = hallucinations,
    FN = missing + no-response with gold present.
    """
    items = list(outcomes)
    if not items:
        raise EmptyEvaluationError("no labels to evaluate")
    counts = Counter({o: 0 for o in OUTCOMES})
    per_phen = {p: {"correct": 0, "incorrect": 0, "no_response": 0} for p in model.PHENOTYPES}
    tp = fp = fn = 0
    for item in items:
        outcome, gold_present = item[0], bool(item[1])
        phenotype = item[2] if len(item) > 2 else None
        if outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {outcome!r}")
        counts[outcome] += 1
        if outcome == "correct" and gold_present:
            tp += 1
        elif outcome == "hallucination":
            fp += 1
        elif outcome in ("missing", "no_response") and gold_present:
            fn += 1
        if phenotype is not None:
            col = per_phen[phenotype]
            if outcome == "correct":
                col["correct"] += 1
            elif outcome == "no_response":
                col["no_response"] += 1
            else:
                col["incorrect"] += 1
    responded = len(items) - counts["no_response"]
    accuracy = counts["correct"] / responded if responded else 0.0
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricsReport(
        extractor_id=extractor_id,
        accuracy=accuracy, precision=precision, recall=recall, f1=f1,
        outcome_counts=dict(counts), responded_labels=responded, total_labels=len(items),
        tp=tp, fp=fp, fn=fn, per_phenotype=per_phen,
    )


def label_outcomes(records: Iterable[PhenotypeRecord], gold: Iterable[GoldLabel],
                   extractor_id: str) -> list[tuple[str, bool, str]]:
    """Classify every gold label against one extractor's records."""
    by_note = {r.note_id: r for r in records if r.extractor_id == extractor_id}
    out = []
    for label in gold:
        rec = by_note.get(label.note_id)
        if rec is None or label.phenotype in rec.no_response:
            out.append(("no_response", label.present, label.phenotype))
            continue
        pred = record_values(rec)[label.phenotype]
        out.append((classify_label(pred, label, True), label.present, label.phenotype))
    return out


def phenotype_table(records: Iterable[PhenotypeRecord], gold: Iterable[GoldLabel],
                    extractors: Optional[Sequence[str]] = None) -> dict[str, MetricsReport]:
    """Per-extractor reports, in ``extractors`` order (default: first appearance)."""
    records = list(records)
    gold = list(gold)
    seen = set()
    keys = [(g.note_id, g.phenotype) for g in gold]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate gold label for a (note_id, phenotype) pair")
    if extractors is None:
        extractors = [r.extractor_id for r in records
                      if not (r.extractor_id in seen or seen.add(r.extractor_id))]
    return {e: compute_metrics(label_outcomes(records, gold, e), e) for e in extractors}


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------

def _pct(x: float) -> str:
    return f"{x * 100:.2f}%"


def render_report(reports: Mapping[str, MetricsReport] | Sequence[MetricsReport]) -> str:
    """Plain-text renditions of the per-phenotype count table and the metrics table."""
    if isinstance(reports, Mapping):
        reports = list(reports.values())
    phen_cols = [PHENOTYPE_TITLES[p] for p in model.PHENOTYPES]
    name_w = max([len("Extractor")] + [len(r.extractor_id) for r in reports])
    col_w = max(len(c) for c in phen_cols)

    lines = ["Correct / incorrect labels per phenotype"]
    head = f"{'Extractor':<{name_w}}  {'Result':<9}  " + "  ".join(f"{c:>{col_w}}" for c in phen_cols)
    lines += [head, "-" * len(head)]
    footnotes = []
    for r in reports:
        for i, result in enumerate(("Correct", "Incorrect")):
            key = result.lower()
            cells = "  ".join(f"{r.per_phenotype[p][key]:>{col_w}}" for p in model.PHENOTYPES)
            name = r.extractor_id if i == 0 else ""
            lines.append(f"{name:<{name_w}}  {result:<9}  {cells}")
        missing = r.total_labels - r.responded_labels
        if missing:
            footnotes.append(f"* {r.extractor_id}: {missing} labels without a response; "
                             f"responded labels sum to {r.responded_labels} instead of {r.total_labels}.")
    lines += footnotes

    lines += ["", "Accuracy metrics"]
    metric_cols = ("Accuracy", "Precision", "Recall", "F-1 Score")
    head = f"{'Model':<{name_w}}  " + "  ".join(f"{c:>9}" for c in metric_cols)
    lines += [head, "-" * len(head)]
    for r in reports:
        vals = (r.accuracy, r.precision, r.recall, r.f1)
        lines.append(f"{r.extractor_id:<{name_w}}  " + "  ".join(f"{_pct(v):>9}" for v in vals))
    return "\n".join(lines) + "\n"
