"""The phenotype JSON-schema subset: construction, rendering and validation.

Only what the four phenotype schemas need is supported: typed leaves with
optional enums/patterns, closed objects with required keys, and arrays.
Rendering emits standard JSON Schema so the text placed in prompts can also be
checked with any off-the-shelf validator.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Optional

from . import model

QUERY_KINDS = ("tnm_staging", "tumor_info", "grade_performance", "biomarkers")

KINDS = ("object", "array", "string", "number", "integer", "boolean", "null")
RULES = ("missing_required", "wrong_type", "enum_mismatch", "pattern_mismatch", "unknown_key")


@dataclass(frozen=True)
class SchemaNode:
    kind: str
    properties: dict = field(default_factory=dict)
    items: Optional["SchemaNode"] = None
    required: tuple[str, ...] = ()
    enum_values: Optional[tuple] = None
    pattern: Optional[str] = None
    nullable: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schema kind {self.kind!r}")
        if not set(self.required) <= set(self.properties):
            raise ValueError("required names must be declared properties")
        if self.enum_values is not None and not self.enum_values:
            raise ValueError("enum_values must be non-empty when present")
        if self.pattern is not None and self.kind != "string":
            raise ValueError("pattern is only allowed on string nodes")


@dataclass(frozen=True)
class Violation:
    path: str
    rule: str
    detail: str

    def __str__(self):
        return f"{self.rule} at {self.path or '/'}: {self.detail}"


def _leaf(kind: str, values=None, nullable=True, pattern=None) -> SchemaNode:
    return SchemaNode(kind, enum_values=tuple(values) if values is not None else None,
                      nullable=nullable, pattern=pattern)


def _closed(props: dict, nullable=False) -> SchemaNode:
    return SchemaNode("object", properties=props, required=tuple(props), nullable=nullable)


def phenotype_schema(query_kind: str) -> SchemaNode:
    if query_kind == "tnm_staging":
        return _closed({
            "t": _leaf("string", model.T_VALUES),
            "n": _leaf("string", model.N_VALUES),
            "m": _leaf("string", model.M_VALUES),
            "stage_group": _leaf("string", model.STAGE_VALUES),
        })
    if query_kind == "tumor_info":
        tumor = _closed({
            "size_value": _leaf("number"),
            "size_unit": _leaf("string", ("cm", "mm")),
            "kind": _leaf("string", model.TUMOR_KINDS),
            "location": _leaf("string"),
            "date": _leaf("string"),
        })
        return _closed({"tumors": SchemaNode("array", items=tumor, nullable=True)})
    if query_kind == "grade_performance":
        return _closed({
            "grade": _leaf("integer", model.GRADE_VALUES),
            "ecog": _leaf("integer", model.ECOG_VALUES),
            "karnofsky": _leaf("integer", model.KARNOFSKY_VALUES),
        })
    if query_kind == "biomarkers":
        return _closed({
            "er": _leaf("string", model.RECEPTOR_VALUES),
            "pr": _leaf("string", model.RECEPTOR_VALUES),
            "her2": _leaf("string", model.RECEPTOR_VALUES),
        })
    raise ValueError(f"unknown query kind {query_kind!r}")


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------

def _type_ok(value: Any, kind: str) -> bool:
    if kind == "null":
        return value is None
    if kind == "boolean":
        return isinstance(value, bool)
    if kind == "integer":
        if isinstance(value, bool):
            return False
        return isinstance(value, int) or (isinstance(value, float) and value.is_integer())
    if kind == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == "string":
        return isinstance(value, str)
    if kind == "array":
        return isinstance(value, list)
    if kind == "object":
        return isinstance(value, dict)
    return False


def _escape(key: str) -> str:
    return key.replace("~", "~0").replace("/", "~1")


def _enum_contains(values: tuple, value: Any) -> bool:
    # JSON equality: True is not 1, 1.0 equals 1
    for v in values:
        if isinstance(v, bool) or isinstance(value, bool):
            if isinstance(v, bool) and isinstance(value, bool) and v == value:
                return True
        elif v == value:
            return True
    return False


def _validate(doc: Any, node: SchemaNode, path: str, out: list[Violation]) -> None:
    if doc is None:
        if not (node.nullable or node.kind == "null"):
            out.append(Violation(path, "wrong_type", f"null where {node.kind} is required"))
        return
    if not _type_ok(doc, node.kind):
        out.append(Violation(path, "wrong_type", f"expected {node.kind}, got {type(doc).__name__}"))
        return
    if node.enum_values is not None and not _enum_contains(node.enum_values, doc):
        out.append(Violation(path, "enum_mismatch",
                             f"{doc!r} is not one of {list(node.enum_values)!r}"))
    if node.pattern is not None and re.search(node.pattern, doc) is None:
        out.append(Violation(path, "pattern_mismatch", f"{doc!r} does not match {node.pattern!r}"))
    if node.kind == "object":
        for key in node.required:
            if key not in doc:
                out.append(Violation(f"{path}/{_escape(key)}", "missing_required",
                                     f"required key {key!r} is missing"))
        for key, value in doc.items():
            sub = node.properties.get(key)
            if sub is None:
                out.append(Violation(f"{path}/{_escape(key)}", "unknown_key",
                                     f"key {key!r} is not in the schema"))
            else:
                _validate(value, sub, f"{path}/{_escape(key)}", out)
    elif node.kind == "array" and node.items is not None:
        for i, item in enumerate(doc):
            _validate(item, node.items, f"{path}/{i}", out)


def validate(doc: Any, schema: SchemaNode) -> list[Violation]:
    """Closed-world validation; keys not declared in the schema are violations."""
    out: list[Violation] = []
    _validate(doc, schema, "", out)
    return out


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------

def to_json_schema(node: SchemaNode) -> dict:
    """Standard JSON Schema (draft 7 compatible) equivalent of ``node``."""
    out: dict = {"type": [node.kind, "null"] if node.nullable else node.kind}
    if node.enum_values is not None:
        values = list(node.enum_values)
        out["enum"] = values + [None] if node.nullable else values
    if node.pattern is not None:
        out["pattern"] = node.pattern
    if node.kind == "object":
        out["properties"] = {k: to_json_schema(v) for k, v in node.properties.items()}
        out["required"] = list(node.required)
        out["additionalProperties"] = False
    if node.kind == "array" and node.items is not None:
        out["items"] = to_json_schema(node.items)
    return out


def render_schema(schema: SchemaNode) -> str:
    return json.dumps(to_json_schema(schema), indent=2, sort_keys=True)
