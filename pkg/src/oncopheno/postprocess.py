"""Normalization and repair of LLM JSON output, and assembly into PhenotypeRecord."""

from __future__ import annotations

import datetime as dt
import math
import re
from typing import Any, Mapping, Optional

from . import model
from .model import Biomarkers, GradePerformance, PhenotypeRecord, TNM, TumorFinding
from .schema import SchemaNode

MONTHS = {
    "january": 1, "february": 2, "march": 3, "april": 4, "may": 5, "june": 6,
    "july": 7, "august": 8, "september": 9, "october": 10, "november": 11, "december": 12,
}
for _name, _num in list(MONTHS.items()):
    MONTHS[_name[:3]] = _num
MONTHS["sept"] = 9

_MONTH_ALT = "|".join(sorted(MONTHS, key=len, reverse=True))

_ISO_RE = re.compile(r"(\d{4})-(\d{1,2})-(\d{1,2})")
_US_RE = re.compile(r"(\d{1,2})/(\d{1,2})/(\d{4}|\d{2})")
_MDY_RE = re.compile(rf"({_MONTH_ALT})\.?\s+(\d{{1,2}}),?\s+(\d{{4}})", re.I)
_DMY_RE = re.compile(rf"(\d{{1,2}})\s+({_MONTH_ALT})\.?,?\s+(\d{{4}})", re.I)

# Same formats, unanchored, for locating dates inside free text.
DATE_FINDER = re.compile(
    rf"\b(?:\d{{4}}-\d{{1,2}}-\d{{1,2}}|\d{{1,2}}/\d{{1,2}}/(?:\d{{4}}|\d{{2}})"
    rf"|(?:{_MONTH_ALT})\.?\s+\d{{1,2}},?\s+\d{{4}}|\d{{1,2}}\s+(?:{_MONTH_ALT})\.?,?\s+\d{{4}})\b",
    re.I,
)


def _make_date(y: int, m: int, d: int) -> Optional[dt.date]:
    try:
        return dt.date(y, m, d)
    except ValueError:
        return None


def standardize_date(raw: Any) -> Optional[dt.date]:
    """Parse a date in one of the accepted formats; anything else gives None.

    Accepted: YYYY-MM-DD, MM/DD/YYYY, M/D/YY (years 50-99 map to 19xx, else
    20xx), "Month D, YYYY" and "D Mon YYYY" (full or abbreviated month names).
    """
    if isinstance(raw, dt.date):
        return raw
    if not isinstance(raw, str):
        return None
    s = raw.strip()
    if m := _ISO_RE.fullmatch(s):
        return _make_date(int(m[1]), int(m[2]), int(m[3]))
    if m := _US_RE.fullmatch(s):
        year = int(m[3])
        if len(m[3]) == 2:
            year += 1900 if year >= 50 else 2000
        return _make_date(year, int(m[1]), int(m[2]))
    if m := _MDY_RE.fullmatch(s):
        return _make_date(int(m[3]), MONTHS[m[1].lower()], int(m[2]))
    if m := _DMY_RE.fullmatch(s):
        return _make_date(int(m[3]), MONTHS[m[2].lower()], int(m[1]))
    return None


def normalize_size(value, unit, provenance: Optional[list] = None) -> Optional[float]:
    """Convert a tumor size to centimeters. A missing unit is assumed to be cm."""
    if value is None:
        return None
    value = float(value)
    if value < 0:
        raise ValueError(f"negative tumor size {value}")
    if unit == "mm":
        return value / 10.0
    if unit is None and provenance is not None:
        provenance.append(f"size {value:g} had no unit; assumed cm")
    return value


_TRUE = {"true", "yes", "y", "positive", "pos", "pos.", "+"}
_FALSE = {"false", "no", "n", "negative", "neg", "neg.", "-"}


def normalize_boolean(raw) -> Optional[bool]:
    if isinstance(raw, bool):
        return raw
    if not isinstance(raw, str):
        return None
    s = raw.strip().lower()
    if s in _TRUE:
        return True
    if s in _FALSE:
        return False
    return None


# --------------------------------------------------------------------------
# JSON text repair
# --------------------------------------------------------------------------

_PAIRS = {"{": "}", "[": "]"}


def fix_brackets(raw: str) -> str:
    """Balance ``{}``/``[]`` outside string literals.

    Orphan closers are dropped, a closer that skips over open brackets first
    closes them, an unterminated string is closed, and remaining open brackets
    are closed at the end in stack order.
    """
    out: list[str] = []
    stack: list[str] = []
    in_str = False
    escape = False
    for ch in raw:
        if in_str:
            out.append(ch)
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            in_str = True
            out.append(ch)
        elif ch in _PAIRS:
            stack.append(_PAIRS[ch])
            out.append(ch)
        elif ch in "}]":
            if ch not in stack:
                continue
            while stack[-1] != ch:
                out.append(stack.pop())
            stack.pop()
            out.append(ch)
        else:
            out.append(ch)
    if in_str:
        if escape:
            out.append("\\")
        out.append('"')
    out.extend(reversed(stack))
    return "".join(out)


# --------------------------------------------------------------------------
# Document-level normalization
# --------------------------------------------------------------------------

VALUE_KEYS = ("value", "result", "status")
_SCALAR_KINDS = ("string", "number", "integer", "boolean", "null")


def flatten_kv(doc: Any, schema: SchemaNode) -> Any:
    """Unwrap ``{"value": x}``-style objects where the schema expects a scalar."""
    if isinstance(doc, dict) and schema.kind in _SCALAR_KINDS:
        if len(doc) == 1:
            (key, inner), = doc.items()
            if key.lower() in VALUE_KEYS:
                return flatten_kv(inner, schema)
        return doc
    if isinstance(doc, dict) and schema.kind == "object":
        return {k: flatten_kv(v, schema.properties[k]) if k in schema.properties else v
                for k, v in doc.items()}
    if isinstance(doc, list) and schema.kind == "array" and schema.items is not None:
        return [flatten_kv(v, schema.items) for v in doc]
    return doc


_NULL_WORDS = {"", "null", "none", "n/a", "na", "not available", "not mentioned", "not stated"}
_ROMAN = {"i": 1, "ii": 2, "iii": 3, "iv": 4, "v": 5}
_RECEPTOR_WORDS = {"equivocal": "equivocal", "borderline": "equivocal", "indeterminate": "equivocal",
                   "unknown": "unknown", "not tested": "unknown", "pending": "unknown"}


def _canon_tnm(value: str, allowed: tuple) -> Optional[str]:
    """Map a TNM mention to its major category: 'pT1c' -> 'T1', 'N1mi' -> 'N1'."""
    m = re.fullmatch(r"\s*(?:[cpyr]{1,2})?([TNM])\s*(is|x|\d)\w*(?:\s*\(.*\))?\s*", value, re.I)
    if not m:
        return None
    letter, cat = m[1].upper(), m[2]
    cand = letter + ("is" if cat.lower() == "is" else cat.upper())
    return cand if cand in allowed else None


def _canon_stage(value: str) -> Optional[str]:
    m = re.fullmatch(r"\s*(?:stage\s*)?(0|iv|iii|ii|i|[1-4])\s*-?\s*([abc])?\d*\s*", value, re.I)
    if not m:
        return None
    num = m[1].upper()
    if num.isdigit():
        num = {"0": "0", "1": "I", "2": "II", "3": "III", "4": "IV"}[num]
    full = num + (m[2] or "").upper()
    if full in model.STAGE_VALUES:
        return full
    return num if num in model.STAGE_VALUES else None


def coerce_value(value: Any, node: SchemaNode) -> Any:
    """Best-effort mapping of a near-miss scalar onto the node's type/enum.

    Returns the value unchanged when no mapping applies, leaving the decision
    to validation.
    """
    if isinstance(value, str) and value.strip().lower() in _NULL_WORDS and node.nullable:
        return None
    if node.enum_values is None:
        if node.kind in ("number", "integer") and isinstance(value, str):
            m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*", value)
            if m:
                num = float(m[1])
                return int(num) if node.kind == "integer" and num.is_integer() else num
        return value
    allowed = node.enum_values
    if any(value is v or (not isinstance(value, bool) and value == v) for v in allowed):
        return int(value) if node.kind == "integer" and isinstance(value, float) else value
    if node.kind == "integer":
        if isinstance(value, str):
            s = value.strip().rstrip("%").strip().lower()
            num = _ROMAN.get(s)
            if num is None and re.fullmatch(r"\d+(?:\.0+)?", s):
                num = int(float(s))
            if num in allowed:
                return num
        return value
    if not isinstance(value, str):
        return value
    s = value.strip()
    for v in allowed:
        if isinstance(v, str) and s.lower() == v.lower():
            return v
    if allowed == model.RECEPTOR_VALUES:
        b = normalize_boolean(s)
        if b is not None:
            return "positive" if b else "negative"
        return _RECEPTOR_WORDS.get(s.lower(), value)
    if allowed in (model.T_VALUES, model.N_VALUES, model.M_VALUES):
        return _canon_tnm(s, allowed) or value
    if allowed == model.STAGE_VALUES:
        return _canon_stage(s) or value
    if allowed == model.TUMOR_KINDS:
        low = s.lower().rstrip("s")
        if low in ("tumour", "neoplasm", "carcinoma"):
            return "tumor"
        if low in model.TUMOR_KINDS:
            return low
    return value


def conform(doc: Any, schema: SchemaNode) -> Any:
    """flatten_kv followed by enum/type coercion of every leaf."""
    doc = flatten_kv(doc, schema)
    return _coerce(doc, schema)


def _coerce(doc: Any, node: SchemaNode) -> Any:
    if node.kind == "object" and isinstance(doc, dict):
        return {k: _coerce(v, node.properties[k]) if k in node.properties else v
                for k, v in doc.items()}
    if node.kind == "array" and isinstance(doc, list) and node.items is not None:
        return [_coerce(v, node.items) for v in doc]
    if node.kind in _SCALAR_KINDS:
        return coerce_value(doc, node)
    return doc


# --------------------------------------------------------------------------
# Record assembly
# --------------------------------------------------------------------------

def _enum_field(raw, allowed, canon, name: str, prov: list) -> Optional[Any]:
    if raw is None:
        return None
    if raw in allowed and not isinstance(raw, bool):
        return raw
    fixed = canon(raw) if isinstance(raw, str) else None
    if fixed is None:
        prov.append(f"{name}: could not map {raw!r}; set to null")
    return fixed


def _int_field(raw, allowed, name: str, prov: list) -> Optional[int]:
    if raw is None:
        return None
    node = SchemaNode("integer", enum_values=tuple(allowed), nullable=True)
    val = coerce_value(raw, node)
    if isinstance(val, (int, float)) and not isinstance(val, bool) and val in allowed:
        return int(val)
    prov.append(f"{name}: could not map {raw!r}; set to null")
    return None


def _receptor(raw, name: str, prov: list) -> str:
    if raw is None:
        return "unknown"
    node = SchemaNode("string", enum_values=model.RECEPTOR_VALUES, nullable=True)
    val = coerce_value(raw, node)
    if val in model.RECEPTOR_VALUES:
        return val
    prov.append(f"{name}: could not map {raw!r}; set to unknown")
    return "unknown"


def _tumor(item: Mapping, i: int, prov: list) -> Optional[TumorFinding]:
    if not isinstance(item, Mapping):
        prov.append(f"tumors[{i}]: not an object; dropped")
        return None
    kind = item.get("kind")
    if kind not in model.TUMOR_KINDS:
        node = SchemaNode("string", enum_values=model.TUMOR_KINDS, nullable=True)
        fixed = coerce_value(kind, node) if kind is not None else None
        if fixed not in model.TUMOR_KINDS:
            prov.append(f"tumors[{i}].kind: {kind!r} defaulted to 'tumor'")
            fixed = "tumor"
        kind = fixed
    size = None
    value = item.get("size_value")
    unit = item.get("size_unit")
    if unit not in (None, "cm", "mm"):
        prov.append(f"tumors[{i}].size_unit: unknown unit {unit!r}; size set to null")
        value = None
    try:
        size = normalize_size(value, unit, prov)
    except (TypeError, ValueError, OverflowError):
        prov.append(f"tumors[{i}].size_value: unusable {value!r}; set to null")
    if size is not None and not math.isfinite(size):
        prov.append(f"tumors[{i}].size_value: non-finite {value!r}; set to null")
        size = None
    date_raw = item.get("date")
    observed = standardize_date(date_raw)
    if date_raw is not None and observed is None:
        prov.append(f"tumors[{i}].date: unparseable {date_raw!r}; set to null")
    location = item.get("location")
    if location is not None and not isinstance(location, str):
        location = str(location)
    return TumorFinding(kind=kind, size_cm=size, location=location, observed_date=observed)


def assemble_record(per_query_docs: Mapping[str, Optional[dict]], note_id: str, extractor_id: str,
                    *, extracted_at: Optional[dt.datetime] = None,
                    provenance: Optional[list] = None) -> PhenotypeRecord:
    """Merge the four per-query documents into one record.

    A query kind mapped to None (or absent) is treated as unanswered: its
    phenotype groups are left empty and listed in ``no_response``.
    """
    prov: list[str] = list(provenance or ())
    no_response: list[str] = []
    docs = {}
    for kind, doc in per_query_docs.items():
        if doc is not None and not isinstance(doc, Mapping):
            prov.append(f"{kind}: answer is not an object; treated as empty")
            doc = {}
        docs[kind] = doc

    doc = docs.get("biomarkers")
    if doc is None:
        no_response.append("biomarkers")
        biomarkers = Biomarkers()
    else:
        biomarkers = Biomarkers(*(_receptor(doc.get(k), f"biomarkers.{k}", prov)
                                  for k in ("er", "pr", "her2")))

    doc = docs.get("grade_performance")
    if doc is None:
        no_response.append("grade_perf")
        grade_perf = GradePerformance()
    else:
        grade_perf = GradePerformance(
            grade=_int_field(doc.get("grade"), model.GRADE_VALUES, "grade_perf.grade", prov),
            ecog=_int_field(doc.get("ecog"), model.ECOG_VALUES, "grade_perf.ecog", prov),
            karnofsky=_int_field(doc.get("karnofsky"), model.KARNOFSKY_VALUES,
                                 "grade_perf.karnofsky", prov),
        )

    doc = docs.get("tnm_staging")
    if doc is None:
        no_response.extend(["stage", "tnm"])
        stage, tnm = None, TNM()
    else:
        stage = _enum_field(doc.get("stage_group"), model.STAGE_VALUES, _canon_stage, "stage", prov)
        tnm = TNM(
            t=_enum_field(doc.get("t"), model.T_VALUES, lambda v: _canon_tnm(v, model.T_VALUES), "tnm.t", prov),
            n=_enum_field(doc.get("n"), model.N_VALUES, lambda v: _canon_tnm(v, model.N_VALUES), "tnm.n", prov),
            m=_enum_field(doc.get("m"), model.M_VALUES, lambda v: _canon_tnm(v, model.M_VALUES), "tnm.m", prov),
        )

    doc = docs.get("tumor_info")
    if doc is None:
        no_response.append("tumor")
        tumors: tuple = ()
    else:
        items = doc.get("tumors") or []
        if not isinstance(items, list):
            prov.append("tumors: not a list; ignored")
            items = []
        tumors = tuple(t for i, item in enumerate(items) if (t := _tumor(item, i, prov)) is not None)

    kwargs = {}
    if extracted_at is not None:
        kwargs["extracted_at"] = extracted_at
    ordered = tuple(p for p in model.PHENOTYPES if p in no_response)
    return PhenotypeRecord(
        note_id=note_id,
        extractor_id=extractor_id,
        biomarkers=biomarkers,
        grade_perf=grade_perf,
        stage=stage,
        tnm=tnm,
        tumors=tumors,
        metastatic_breast_flag=None,
        no_response=ordered,
        provenance=tuple(prov),
        **kwargs,
    )
