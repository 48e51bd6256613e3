"""Pattern-based phenotype extraction: the non-LLM baseline.

Every extracted value is tied to a span of the note (its evidence), so the
baseline can only report what is literally written; it never invents values.
"""

from __future__ import annotations

import datetime as dt
import random
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from . import model
from .model import Biomarkers, GradePerformance, PhenotypeRecord, ProcessedNote, TNM, TumorFinding
from .postprocess import DATE_FINDER, _canon_stage, _canon_tnm, standardize_date

EXTRACTOR_ID = "baseline"
WINDOW_TOKENS = 5


@dataclass(frozen=True)
class Evidence:
    field: str
    value: object
    span: tuple[int, int]
    text: str


def _sentences(text: str) -> list[tuple[int, int]]:
    """Sentence spans; a period only ends a sentence when followed by whitespace."""
    spans = []
    start = 0
    for m in re.finditer(r"(?<=[.!?])\s+|\n+", text):
        if m.start() > start:
            spans.append((start, m.start()))
        start = m.end()
    if start < len(text):
        spans.append((start, len(text)))
    return spans


def _sentence_of(spans: Sequence[tuple[int, int]], pos: int) -> tuple[int, int]:
    for s, e in spans:
        if s <= pos < e:
            return s, e
    return pos, pos


def _dates_in(text: str, start: int, end: int) -> list[tuple[int, dt.date]]:
    out = []
    for m in DATE_FINDER.finditer(text, start, end):
        d = standardize_date(m.group(0))
        if d is not None:
            out.append((m.start(), d))
    return out


def _pick_latest(mentions: list[tuple[int, Optional[dt.date], Evidence]]) -> Optional[Evidence]:
    """Latest-dated mention wins; without dates, the last one in document order."""
    if not mentions:
        return None
    dated = [m for m in mentions if m[1] is not None]
    if dated:
        return max(dated, key=lambda m: (m[1], m[0]))[2]
    return max(mentions, key=lambda m: m[0])[2]


def _with_dates(text: str, evidences: Iterable[Evidence]) -> list[tuple[int, Optional[dt.date], Evidence]]:
    sents = _sentences(text)
    out = []
    for ev in evidences:
        s, e = _sentence_of(sents, ev.span[0])
        dates = _dates_in(text, s, e)
        out.append((ev.span[0], max((d for _, d in dates), default=None), ev))
    return out


# --------------------------------------------------------------------------
# Biomarkers
# --------------------------------------------------------------------------

_RECEPTOR_KEY = re.compile(
    r"\b(?:(?P<er>estrogen[\s-]+receptors?|oestrogen[\s-]+receptors?|ER)"
    r"|(?P<pr>progesterone[\s-]+receptors?|PgR|PR)"
    r"|(?P<her2>HER[\s-]?2(?:\s*/\s*neu)?|ERBB2))(?![A-Za-z0-9])",
    re.I,
)
# The bare abbreviations are matched case-sensitively to avoid words like "er" or "pr".
_CASE_SENSITIVE_KEYS = {"er", "pr", "pgr"}

_STATUS_TOKEN = re.compile(
    r"(?P<word>positive|negative|equivocal|borderline|indeterminate|pos\b\.?|neg\b\.?)"
    r"|(?P<score>[0-3]\+)"
    r"|(?P<sym>\+{1,3}|-)"
    r"|(?P<other>[A-Za-z0-9%<>/]+|\S)",
    re.I,
)

_WORD_STATUS = {
    "positive": "positive", "pos": "positive", "pos.": "positive",
    "negative": "negative", "neg": "negative", "neg.": "negative",
    "equivocal": "equivocal", "borderline": "equivocal", "indeterminate": "equivocal",
}
_SCORE_STATUS = {"3+": "positive", "2+": "equivocal", "1+": "negative", "0+": "negative"}


def _status_after(text: str, pos: int, is_her2: bool) -> Optional[tuple[str, tuple[int, int]]]:
    """First receptor status within WINDOW_TOKENS tokens after ``pos`` on the same line."""
    tokens = []
    i = pos
    while len(tokens) < WINDOW_TOKENS:
        while i < len(text) and text[i] in " \t":
            i += 1
        if i >= len(text) or text[i] == "\n":
            break
        m = _STATUS_TOKEN.match(text, i)
        tokens.append(m)
        i = m.end()
    for n, m in enumerate(tokens):
        if m.group(0) in (";", "."):
            break
        if m.group("word"):
            return _WORD_STATUS[m.group("word").lower()], m.span()
        if m.group("score"):
            if is_her2:
                return _SCORE_STATUS[m.group("score")], m.span()
            continue
        if m.group("sym"):
            # symbols only count when glued to the key, e.g. "ER+" or "PR -"
            if n == 0 and m.start() - pos <= 1:
                nxt = tokens[1] if len(tokens) > 1 else None
                if nxt is not None and nxt.group("word"):
                    return _WORD_STATUS[nxt.group("word").lower()], nxt.span()
                return ("positive" if m.group("sym").startswith("+") else "negative"), m.span()
            continue
        if m.group(0).lower() in ("unknown", "pending"):
            return None
    return None


def _receptor_mentions(text: str) -> dict[str, list[Evidence]]:
    found: dict[str, list[Evidence]] = {"er": [], "pr": [], "her2": []}
    for m in _RECEPTOR_KEY.finditer(text):
        name = m.lastgroup
        key_text = m.group(0)
        if key_text.lower() in _CASE_SENSITIVE_KEYS and not key_text.isupper() and key_text != "PgR":
            continue
        hit = _status_after(text, m.end(), name == "her2")
        if hit is None:
            continue
        status, (s, e) = hit
        found[name].append(Evidence(f"biomarkers.{name}", status, (m.start(), e), text[m.start():e]))
    return found


def biomarker_evidence(text: str) -> list[Evidence]:
    out = []
    for mentions in _receptor_mentions(text).values():
        best = _pick_latest(_with_dates(text, mentions))
        if best is not None:
            out.append(best)
    return out


def extract_biomarkers(text: str) -> Biomarkers:
    values = {ev.field.split(".")[1]: ev.value for ev in biomarker_evidence(text)}
    return Biomarkers(**values)


# --------------------------------------------------------------------------
# TNM and stage group
# --------------------------------------------------------------------------

_T = r"(?:[cpy]{1,2})?T(?:is|X|[0-4])(?:mi|[a-d])?"
_N = r"(?:[cpy]{1,2})?N(?:X|[0-3])(?:mi|[a-c])?(?:\((?:sn|i[+-])\))?"
_M = r"(?:[cpy]{1,2})?M(?:X|[01])(?:[a-c])?"
_SEP = r"[\s,/]*"
_TNM_RE = re.compile(
    rf"(?<![A-Za-z0-9])(?P<t>{_T})(?:{_SEP}(?P<n>{_N}))(?:{_SEP}(?P<m>{_M}))?(?![A-Za-z0-9])"
    rf"|(?<![A-Za-z0-9])(?P<n2>{_N}){_SEP}(?P<m2>{_M})(?![A-Za-z0-9])"
)
_TNM_LABELED = re.compile(
    r"\b(?P<letter>[TNM])[\s-]*(?i:stage|category|status)\s*[:=]?\s*"
    r"(?P<value>(?:[cpy]{1,2})?[TNM]?(?:is|X|[0-4])(?:mi|[a-d])?)(?![A-Za-z0-9])",
)


def tnm_evidence(text: str) -> list[Evidence]:
    mentions: dict[str, list[Evidence]] = {"t": [], "n": [], "m": []}
    allowed = {"t": model.T_VALUES, "n": model.N_VALUES, "m": model.M_VALUES}
    for m in _TNM_RE.finditer(text):
        for field, group in (("t", "t"), ("n", "n"), ("m", "m"), ("n", "n2"), ("m", "m2")):
            raw = m.group(group)
            if raw:
                val = _canon_tnm(raw, allowed[field])
                if val:
                    mentions[field].append(Evidence(f"tnm.{field}", val, m.span(group), raw))
    for m in _TNM_LABELED.finditer(text):
        field = m.group("letter").lower()
        raw = m.group("value")
        cand = raw if raw.lstrip("cpy")[:1].upper() == field.upper() else field.upper() + raw
        val = _canon_tnm(cand, allowed[field])
        if val:
            mentions[field].append(Evidence(f"tnm.{field}", val, m.span(), m.group(0)))
    out = []
    for items in mentions.values():
        best = _pick_latest(_with_dates(text, items))
        if best is not None:
            out.append(best)
    return out


def extract_tnm(text: str) -> TNM:
    values = {ev.field.split(".")[1]: ev.value for ev in tnm_evidence(text)}
    return TNM(**values)


_STAGE_RE = re.compile(
    r"(?i:\bstage(?:d)?(?:\s+group)?(?:\s+as)?)\s*[:=]?\s*"
    r"(?P<num>IV|III|II|I|0|[1-4])(?:\s*-?\s*(?P<sub>[ABCabc])(?![A-Za-z]))?"
    r"(?![A-Za-z0-9])(?!\s+(?:would|will|think|am|have|had|feel|can|do|did|agree)\b)"
)


def stage_evidence(text: str) -> list[Evidence]:
    items = []
    for m in _STAGE_RE.finditer(text):
        raw = m.group("num") + (m.group("sub") or "")
        val = _canon_stage(raw)
        if val:
            items.append(Evidence("stage", val, m.span(), m.group(0)))
    best = _pick_latest(_with_dates(text, items))
    return [best] if best else []


def extract_stage(text: str) -> Optional[str]:
    ev = stage_evidence(text)
    return ev[0].value if ev else None


# --------------------------------------------------------------------------
# Grade and performance status
# --------------------------------------------------------------------------

_FILLER = r"(?:\s*(?:[:=-]|is|of|score|status|performance(?:\s+status)?|PS)\s*)*"
_GRADE_RE = re.compile(rf"(?i:\bgrade){_FILLER}\s*(?P<v>III|II|I|[1-3])(?![A-Za-z0-9+])(?!\s*/\s*[A-Za-z])")
_ECOG_RE = re.compile(rf"(?i:\bECOG){_FILLER}\s*(?P<v>[0-5])(?![0-9.])")
_KPS_RE = re.compile(rf"(?i:\b(?:Karnofsky|KPS)){_FILLER}\s*(?P<v>100|[1-9]0|0)(?![0-9.])\s*%?")
_ROMAN_INT = {"I": 1, "II": 2, "III": 3}


def grade_perf_evidence(text: str) -> list[Evidence]:
    out = []
    for field, rx in (("grade", _GRADE_RE), ("ecog", _ECOG_RE), ("karnofsky", _KPS_RE)):
        items = []
        for m in rx.finditer(text):
            v = m.group("v")
            val = _ROMAN_INT[v] if v in _ROMAN_INT else int(v)
            items.append(Evidence(f"grade_perf.{field}", val, m.span(), m.group(0)))
        best = _pick_latest(_with_dates(text, items))
        if best is not None:
            out.append(best)
    return out


def extract_grade_perf(text: str) -> GradePerformance:
    values = {ev.field.split(".")[1]: ev.value for ev in grade_perf_evidence(text)}
    return GradePerformance(**values)


# --------------------------------------------------------------------------
# Tumors
# --------------------------------------------------------------------------

_NUM = r"\d+(?:\.\d+)?"
_SIZE_RE = re.compile(
    rf"(?<![\w.])(?P<dims>{_NUM}(?:\s*(?:x|by)\s*{_NUM}){{0,2}})\s*(?P<unit>cm|mm)\b", re.I)
_TUMOR_KEY = re.compile(r"\b(?P<kw>tumou?rs?|masse?s?|lesions?)\b", re.I)
_LOCATION_RE = re.compile(r"\b(?:left|right)\s+breast\b", re.I)


def _kind_of(word: str) -> str:
    w = word.lower()
    if w.startswith("tum"):
        return "tumor"
    if w.startswith("mass"):
        return "mass"
    return "lesion"


def _token_gap(text: str, a: int, b: int) -> int:
    return len(re.findall(r"[A-Za-z0-9]+", text[a:b]))


def tumor_evidence(text: str) -> list[tuple[TumorFinding, Evidence]]:
    out = []
    sents = _sentences(text)
    for m in _SIZE_RE.finditer(text):
        s, e = _sentence_of(sents, m.start())
        best_kw = None
        best_gap = None
        for k in _TUMOR_KEY.finditer(text, s, e):
            if k.end() <= m.start():
                gap = _token_gap(text, k.end(), m.start())
            elif k.start() >= m.end():
                gap = _token_gap(text, m.end(), k.start())
            else:
                continue
            if gap <= WINDOW_TOKENS and (best_gap is None or gap < best_gap):
                best_kw, best_gap = k, gap
        if best_kw is None:
            continue
        dims = [float(x) for x in re.findall(_NUM, m.group("dims"))]
        size = max(dims)
        unit = m.group("unit").lower()
        size_cm = round(size / 10.0, 4) if unit == "mm" else size
        dates = _dates_in(text, s, e)
        observed = min(dates, key=lambda d: abs(d[0] - m.start()))[1] if dates else None
        loc = _LOCATION_RE.search(text, s, e)
        finding = TumorFinding(kind=_kind_of(best_kw.group("kw")), size_cm=size_cm,
                               location=loc.group(0).lower() if loc else None,
                               observed_date=observed)
        lo, hi = min(m.start(), best_kw.start()), max(m.end(), best_kw.end())
        out.append((finding, Evidence("tumors", size_cm, (lo, hi), text[lo:hi])))
    return out


def extract_tumors(text: str) -> list[TumorFinding]:
    return [f for f, _ in tumor_evidence(text)]


# --------------------------------------------------------------------------
# Metastasis flag
# --------------------------------------------------------------------------

_MET_RE = re.compile(r"\b(?:metastatic|metastas[ie]s|metastasized|mets)\b", re.I)
_BREAST_RE = re.compile(r"\bbreast\b", re.I)
_FAMILY_RE = re.compile(
    r"\b(?:mother|father|sister|brother|aunt|uncle|grandmother|grandfather|daughter|cousin"
    r"|family\s+history|maternal|paternal)\b", re.I)
_NEGATION_RE = re.compile(
    r"\b(?:no|without|negative\s+for|free\s+of|denies|not)\b(?:\s+\w+){0,4}?\s+"
    r"(?:metastatic|metastas[ie]s|mets)\b", re.I)


def metastasis_evidence(text: str) -> list[Evidence]:
    positive, negative = [], []
    for s, e in _sentences(text):
        sentence = text[s:e]
        met = _MET_RE.search(sentence)
        if not met:
            continue
        if _FAMILY_RE.search(sentence, 0, met.start()):
            continue
        neg = _NEGATION_RE.search(sentence)
        if neg:
            negative.append(Evidence("metastatic_breast_flag", False,
                                     (s + neg.start(), s + neg.end()), neg.group(0)))
            continue
        if _BREAST_RE.search(sentence):
            positive.append(Evidence("metastatic_breast_flag", True,
                                     (s + met.start(), s + met.end()), met.group(0)))
    if positive:
        return [positive[-1]]
    if negative:
        return [negative[-1]]
    return []


def extract_metastasis_flag(text: str) -> Optional[bool]:
    ev = metastasis_evidence(text)
    return ev[0].value if ev else None


# --------------------------------------------------------------------------
# Composition
# --------------------------------------------------------------------------

def collect_evidence(text: str) -> list[Evidence]:
    evs = biomarker_evidence(text) + tnm_evidence(text) + stage_evidence(text)
    evs += grade_perf_evidence(text)
    evs += [ev for _, ev in tumor_evidence(text)]
    evs += metastasis_evidence(text)
    return evs


def baseline_extract(note: ProcessedNote, *, drop: bool = False,
                     extracted_at: Optional[dt.datetime] = None) -> Optional[PhenotypeRecord]:
    """Run every pattern extractor over the note text.

    ``drop=True`` simulates the annotation service failing to answer and
    returns None (see ``inject_faults``).
    """
    if drop:
        return None
    text = note.diff_text
    evidence = collect_evidence(text)
    kwargs = {"extracted_at": extracted_at} if extracted_at is not None else {}
    return PhenotypeRecord(
        note_id=note.note_id,
        extractor_id=EXTRACTOR_ID,
        biomarkers=extract_biomarkers(text),
        grade_perf=extract_grade_perf(text),
        stage=extract_stage(text),
        tnm=extract_tnm(text),
        tumors=tuple(extract_tumors(text)),
        metastatic_breast_flag=extract_metastasis_flag(text),
        provenance=tuple(f"{ev.field}={ev.value!r} <- {ev.text!r}" for ev in evidence),
        **kwargs,
    )


def no_response_record(note_id: str, extracted_at: Optional[dt.datetime] = None) -> PhenotypeRecord:
    kwargs = {"extracted_at": extracted_at} if extracted_at is not None else {}
    return PhenotypeRecord(note_id=note_id, extractor_id=EXTRACTOR_ID,
                           no_response=model.PHENOTYPES, **kwargs)


def inject_faults(note_ids: Sequence[str], rate: float, seed: int = 0) -> frozenset:
    """Pick exactly ``round(rate * len(note_ids))`` notes to fail, reproducibly."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("fault rate must be in [0, 1]")
    n = round(rate * len(note_ids))
    return frozenset(random.Random(seed).sample(sorted(note_ids), n))
