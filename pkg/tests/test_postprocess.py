import datetime as dt
import json

import pytest
from hypothesis import given, strategies as st

from oncopheno.model import validate_record
from oncopheno.postprocess import (assemble_record, coerce_value, conform, fix_brackets, flatten_kv,
                                   normalize_boolean, normalize_size, standardize_date)
from oncopheno.schema import phenotype_schema, validate

D = dt.date


class TestStandardizeDate:
    @pytest.mark.parametrize("raw,expected", [
        ("03/14/2021", D(2021, 3, 14)),
        ("March 14, 2021", D(2021, 3, 14)),
        ("2021-03-14", D(2021, 3, 14)),
        ("3/4/21", D(2021, 3, 4)),
        ("1/2/55", D(1955, 1, 2)),
        ("1/2/49", D(2049, 1, 2)),
        ("14 Mar 2021", D(2021, 3, 14)),
        ("Sept 9, 2020", D(2020, 9, 9)),
    ])
    def test_listed_formats(self, raw, expected):
        assert standardize_date(raw) == expected

    @pytest.mark.parametrize("raw", ["sometime last spring", "2021-02-30", "13/01/2020", "", None, 20210101,
                                     "2021/03/14", "March 2021"])
    def test_unparseable(self, raw):
        assert standardize_date(raw) is None

    @given(st.one_of(st.text(), st.integers(), st.none(), st.floats()))
    def test_total(self, raw):
        out = standardize_date(raw)
        assert out is None or isinstance(out, dt.date)

    @given(st.dates(min_value=D(1000, 1, 1)))
    def test_iso_and_us_roundtrip(self, d):
        assert standardize_date(d.isoformat()) == d
        assert standardize_date(f"{d.month:02d}/{d.day:02d}/{d.year:04d}") == d
        assert standardize_date(d.strftime("%B %d, %Y")) == d


class TestNormalizeSize:
    def test_examples(self):
        assert normalize_size(23, "mm") == pytest.approx(2.3)
        assert normalize_size(2.3, "cm") == 2.3
        prov = []
        assert normalize_size(4, None, prov) == 4.0 and prov == ["size 4 had no unit; assumed cm"]
        assert normalize_size(None, "mm") is None

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            normalize_size(-1, "cm")

    @given(st.floats(0, 1e6, allow_nan=False))
    def test_mm_cm_consistency(self, v):
        assert normalize_size(v, "mm") == pytest.approx(normalize_size(v / 10, "cm"), rel=1e-12, abs=0)


class TestNormalizeBoolean:
    @pytest.mark.parametrize("raw,expected", [("Positive", True), ("-", False), ("equivocal", None),
                                              ("POS", True), ("neg.", False), (" yes ", True), (True, True),
                                              (False, False), ("n", False), (1, None), (None, None)])
    def test_table(self, raw, expected):
        assert normalize_boolean(raw) is expected


class TestFixBrackets:
    @pytest.mark.parametrize("raw,expected", [
        ('{"a": [1, 2', '{"a": [1, 2]}'),
        ('{"a": 1}}', '{"a": 1}'),
        ('{"s": "}"}', '{"s": "}"}'),
        ('{"a": [1}', '{"a": [1]}'),
        ('{"s": "abc', '{"s": "abc"}'),
        ('{"s": "ab\\', '{"s": "ab\\\\"}'),
        ("]]", ""),
    ])
    def test_examples(self, raw, expected):
        assert fix_brackets(raw) == expected

    @given(st.text(alphabet='{}[]"\\ ab:,1'))
    def test_idempotent_and_balanced(self, raw):
        once = fix_brackets(raw)
        assert fix_brackets(once) == once
        assert _balanced(once)

    @given(st.recursive(st.none() | st.integers() | st.text(max_size=5),
                        lambda c: st.lists(c, max_size=3) | st.dictionaries(st.text(max_size=3), c, max_size=3)))
    def test_valid_json_untouched(self, doc):
        text = json.dumps(doc)
        assert fix_brackets(text) == text

    @given(st.dictionaries(st.text(max_size=4), st.lists(st.integers(), max_size=3), min_size=1, max_size=3),
           st.data())
    def test_trailing_closers_restored(self, doc, data):
        text = json.dumps(doc)
        closers = len(text) - len(text.rstrip("]}"))
        cut = data.draw(st.integers(0, closers))
        assert json.loads(fix_brackets(text[: len(text) - cut])) == doc


def _balanced(text: str) -> bool:
    stack, in_str, esc = [], False, False
    for ch in text:
        if in_str:
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch in "{[":
            stack.append("}" if ch == "{" else "]")
        elif ch in "}]":
            if not stack or stack.pop() != ch:
                return False
    return not stack and not in_str


class TestFlattenKv:
    S = phenotype_schema("biomarkers")

    def test_examples(self):
        assert flatten_kv({"er": {"value": "positive"}}, self.S) == {"er": "positive"}
        flat = {"er": "positive", "pr": None, "her2": "unknown"}
        assert flatten_kv(flat, self.S) == flat
        amb = {"er": {"value": "positive", "note": "strong"}}
        assert flatten_kv(amb, self.S) == amb

    def test_nested_and_alternate_keys(self):
        s = phenotype_schema("tumor_info")
        doc = {"tumors": [{"size_value": {"result": 2}, "kind": {"Status": "mass"}}]}
        assert flatten_kv(doc, s) == {"tumors": [{"size_value": 2, "kind": "mass"}]}


class TestConform:
    def test_enum_coercions(self):
        doc = {"t": "pT1c", "n": "N1mi", "m": "m0", "stage_group": "Stage 2B"}
        assert conform(doc, phenotype_schema("tnm_staging")) == {"t": "T1", "n": "N1", "m": "M0",
                                                                  "stage_group": "IIB"}
        gp = conform({"grade": "II", "ecog": "1", "karnofsky": "70%"}, phenotype_schema("grade_performance"))
        assert gp == {"grade": 2, "ecog": 1, "karnofsky": 70}
        bm = conform({"er": {"value": "pos"}, "pr": "Negative", "her2": "n/a"}, phenotype_schema("biomarkers"))
        assert bm == {"er": "positive", "pr": "negative", "her2": None}

    def test_unmappable_left_for_validation(self):
        node = phenotype_schema("tnm_staging").properties["t"]
        assert coerce_value("T9", node) == "T9"
        assert validate({"t": "T9", "n": None, "m": None, "stage_group": None},
                        phenotype_schema("tnm_staging"))


TS = dt.datetime(2024, 1, 1, tzinfo=dt.timezone.utc)
FULL = {
    "biomarkers": {"er": "positive", "pr": "negative", "her2": "equivocal"},
    "grade_performance": {"grade": 2, "ecog": 1, "karnofsky": 80},
    "tnm_staging": {"t": "T1c", "n": "N1mi", "m": "M0", "stage_group": "IIA"},
    "tumor_info": {"tumors": [{"size_value": 23, "size_unit": "mm", "kind": "mass", "location": "left breast",
                               "date": "03/01/2020"}]},
}


class TestAssembleRecord:
    def test_full_record(self):
        rec = assemble_record(FULL, "n1", "llm", extracted_at=TS)
        assert rec.biomarkers.to_dict() == FULL["biomarkers"]
        assert rec.grade_perf.to_dict() == FULL["grade_performance"]
        assert (rec.tnm.t, rec.tnm.n, rec.tnm.m, rec.stage) == ("T1", "N1", "M0", "IIA")
        [t] = rec.tumors
        assert t.size_cm == pytest.approx(2.3) and t.kind == "mass" and t.observed_date == D(2020, 3, 1)
        assert rec.no_response == () and rec.metastatic_breast_flag is None
        assert validate_record(rec) == []

    def test_missing_query_is_no_response(self):
        docs = dict(FULL, tnm_staging=None)
        rec = assemble_record(docs, "n1", "llm")
        assert rec.no_response == ("stage", "tnm")
        assert rec.stage is None and rec.tnm.is_empty()
        assert rec.biomarkers.er == "positive"

    def test_unmappable_values_nulled_with_provenance(self):
        docs = {"tnm_staging": {"t": "T9", "n": None, "m": None, "stage_group": "VI"},
                "tumor_info": {"tumors": [{"size_value": 4, "size_unit": None, "kind": "cyst",
                                           "date": "last spring"}]}}
        rec = assemble_record(docs, "n1", "llm")
        assert rec.tnm.t is None and rec.stage is None
        assert rec.tumors[0].kind == "tumor" and rec.tumors[0].size_cm == 4.0
        joined = " | ".join(rec.provenance)
        for frag in ("tnm.t", "stage", "assumed cm", "defaulted to 'tumor'", "unparseable"):
            assert frag in joined
        assert validate_record(rec) == []


json_leaf = st.one_of(st.none(), st.booleans(), st.integers(-10**30, 10**30), st.floats(), st.text(max_size=8),
                      st.sampled_from(["pos", "T1c", "N1mi", "IIIB", "stage 4", "mm", "cm", "70%", "III",
                                       "tumour", "masses", "2021-01-01", "n/a"]))
json_val = st.recursive(json_leaf, lambda c: st.lists(c, max_size=3) | st.dictionaries(st.text(max_size=5), c,
                                                                                      max_size=3), max_leaves=8)


def _doc_for(kind):
    keys = list(phenotype_schema(kind).properties)
    if kind == "tumor_info":
        item_keys = ["size_value", "size_unit", "kind", "location", "date"]
        item = st.dictionaries(st.sampled_from(item_keys), json_leaf)
        return st.one_of(st.none(), json_val, st.fixed_dictionaries({"tumors": st.one_of(json_val,
                                                                                        st.lists(item, max_size=3))}))
    return st.one_of(st.none(), json_val, st.dictionaries(st.sampled_from(keys), json_val))


@given(st.fixed_dictionaries({k: _doc_for(k) for k in FULL}))
def test_assemble_record_always_valid(docs):
    assert validate_record(assemble_record(docs, "n", "x")) == []
