"""One-shot prompting, generation backends and the validate-and-retry loop."""

from __future__ import annotations

import datetime as dt
import json
import logging
import time
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from typing import Callable, Mapping, Optional, Protocol, Sequence

import requests

from .model import PhenotypeRecord
from .postprocess import assemble_record, conform, fix_brackets
from .retrieval import ContextBundle, count_tokens
from .schema import QUERY_KINDS, SchemaNode, phenotype_schema, render_schema, validate

log = logging.getLogger(__name__)

QUERY_TEXTS = {
    "tnm_staging": "What is the stage of the cancer and the T, N and M values?",
    "tumor_info": "List down all tumors found in the note above specifically tumor size, "
                  "lesions, dates and masses.",
    "grade_performance": "What are the values for grade, ECOG, KARNOFSKY/KPS found in text above",
    "biomarkers": "List HER-2, ER, PR biomarkers that the patient was tested for and their values.",
}

INSTRUCTION = """\
You are an expert in the Breast Cancer domain. You are also an expert in extracting information \
asked within a schema. Unfortunately, you can only respond in JSON format, but you make fantastic \
JSON objects free of errors. Your job is to, given a schema and a note context, extract the \
information from the notes that are required for the schema and make a JSON object that adheres \
to the schema guidelines. Here are some rules that you have to follow:

    - Do not return or modify the schema.
    - Do not make far-fetched assumptions. Obvious ones are fine.
    - If given enums, do not deviate from the ones provided.
    - Only provide the JSON object. Do not give anything else. Do not even add comments in the JSON object.
    - If anything specified in the schema is not present in the note, mark it as null. Do not remove it from the schema.
    - If there are multiple readings of the information to extract, pick the reading by the latest date."""

RETRY_MESSAGE = "Your previous JSON had these problems: {problems}. Return only corrected JSON."

DEFAULT_MAX_PROMPT_TOKENS = 7168


@dataclass(frozen=True)
class Query:
    kind: str
    text: str

    @classmethod
    def of(cls, kind: str) -> "Query":
        return cls(kind, QUERY_TEXTS[kind])


def all_queries() -> list[Query]:
    return [Query.of(k) for k in QUERY_KINDS]


@dataclass(frozen=True)
class OneShot:
    text: str
    json_text: str


@lru_cache(maxsize=None)
def default_one_shots() -> dict:
    raw = json.loads(resources.files("oncopheno").joinpath("data/one_shot.json").read_text())
    return {k: OneShot(v["text"], json.dumps(v["json"], indent=2)) for k, v in raw.items()}


class PromptBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class PromptBundle:
    instruction: str
    schema_text: str
    example_text: str
    example_json: str
    context_text: str
    query_text: str

    def text(self) -> str:
        return (
            f"{self.instruction}\n"
            f"Schema:\n```json\n{self.schema_text}\n```\n"
            f"Example Text:\n{self.example_text}\n"
            f"Example JSON:\n```json\n{self.example_json}\n```\n"
            f"Actual Text:\n{self.context_text}\n"
            f"Query:\n{self.query_text}\n"
        )


def build_prompt(query: Query, context_text: str, schema: SchemaNode, one_shot: OneShot,
                 max_prompt_tokens: int = DEFAULT_MAX_PROMPT_TOKENS) -> PromptBundle:
    if not context_text.strip():
        raise ValueError("context_text must not be empty")
    bundle = PromptBundle(INSTRUCTION, render_schema(schema), one_shot.text, one_shot.json_text,
                          context_text, query.text)
    n = count_tokens(bundle.text())
    if n > max_prompt_tokens:
        raise PromptBudgetError(f"prompt is {n} tokens, budget is {max_prompt_tokens}")
    return bundle


# --------------------------------------------------------------------------
# Backends
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GenerationConfig:
    temperature: float = 0.0
    top_k: int = 0
    top_p: float = 1.0
    max_output_tokens: int = 1024
    seed: Optional[int] = 0
    max_retries: int = 3

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")


class BackendError(RuntimeError):
    """Transport-level failure talking to a generation backend."""


class GenerationBackend(Protocol):
    identity: str

    def generate(self, prompt: str, cfg: GenerationConfig) -> str: ...


class HttpBackend:
    """POST {"prompt", "temperature", "top_p", "top_k", "max_tokens", "seed"} -> {"text"}."""

    def __init__(self, url: str, identity: str = "http-llm", timeout: float = 120.0,
                 session: requests.Session | None = None):
        self.url = url
        self.identity = identity
        self.timeout = timeout
        self.session = session or requests.Session()

    def generate(self, prompt: str, cfg: GenerationConfig) -> str:
        payload = {
            "prompt": prompt,
            "temperature": cfg.temperature,
            "top_p": cfg.top_p,
            "top_k": cfg.top_k,
            "max_tokens": cfg.max_output_tokens,
            "seed": cfg.seed,
        }
        try:
            resp = self.session.post(self.url, json=payload, timeout=self.timeout)
            resp.raise_for_status()
            text = resp.json()["text"]
        except (requests.RequestException, ValueError, KeyError, TypeError) as exc:
            raise BackendError(f"{self.identity}: {exc}") from exc
        if not isinstance(text, str):
            raise BackendError(f"{self.identity}: 'text' is not a string")
        return text


class ScriptedBackend:
    """Replays canned responses in order; the last one repeats. Exceptions are raised."""

    def __init__(self, responses: Sequence, identity: str = "scripted"):
        if not responses:
            raise ValueError("need at least one response")
        self.responses = list(responses)
        self.identity = identity
        self.prompts: list[str] = []

    def generate(self, prompt: str, cfg: GenerationConfig) -> str:
        self.prompts.append(prompt)
        item = self.responses[min(len(self.prompts) - 1, len(self.responses) - 1)]
        if isinstance(item, BaseException):
            raise item
        return item


# --------------------------------------------------------------------------
# Extraction loop
# --------------------------------------------------------------------------

def extract_json_block(raw: str) -> str:
    """First fenced json block, else the first balanced ``{...}``, else ""."""
    start = raw.find("```json")
    if start != -1:
        body_start = start + len("```json")
        end = raw.find("```", body_start)
        body = raw[body_start:] if end == -1 else raw[body_start:end]
        return body.strip()

    start = raw.find("{")
    if start == -1:
        return ""
    depth = 0
    in_str = escape = False
    for i in range(start, len(raw)):
        ch = raw[i]
        if in_str:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return raw[start:i + 1]
    return raw[start:]  # unbalanced; left for fix_brackets


class ExtractionFailed(RuntimeError):
    """Raised when no schema-conforming document was produced within max_retries."""

    def __init__(self, message: str, attempts: int, problems: Sequence[str] = ()):
        super().__init__(message)
        self.attempts = attempts
        self.problems = list(problems)


def _check_candidate(raw: str, schema: SchemaNode) -> tuple[Optional[dict], list[str], str]:
    """Return (document, problems, candidate_text) for one model response."""
    candidate = extract_json_block(raw)
    if not candidate:
        return None, ["the response contained no JSON object"], ""
    candidate = fix_brackets(candidate)
    try:
        doc = json.loads(candidate)
    except json.JSONDecodeError as exc:
        return None, [f"invalid JSON ({exc.msg} at position {exc.pos})"], candidate
    doc = conform(doc, schema)
    problems = [str(v) for v in validate(doc, schema)]
    return (doc if not problems else None), problems, candidate


def feedback_instruction(problems: Sequence[str], candidate: str) -> str:
    msg = RETRY_MESSAGE.format(problems="; ".join(problems))
    if candidate:
        msg += f"\nPrevious JSON:\n```json\n{candidate}\n```"
    return f"{INSTRUCTION}\n{msg}"


def extract_with_retry(backend: GenerationBackend, query: Query, context_text: str,
                       schema: SchemaNode, cfg: GenerationConfig = GenerationConfig(),
                       one_shot: Optional[OneShot] = None, *,
                       audit: Optional[Callable[[dict], None]] = None, note_id: str = "",
                       max_prompt_tokens: int = DEFAULT_MAX_PROMPT_TOKENS) -> tuple[dict, int]:
    """Generate until the response parses and validates, up to ``cfg.max_retries`` attempts.

    Each retry re-sends the full prompt with the previous problems appended to
    the instruction. Raises ExtractionFailed when every attempt fails.
    """
    one_shot = one_shot or default_one_shots()[query.kind]
    base = build_prompt(query, context_text, schema, one_shot, max_prompt_tokens)
    bundle = base
    problems: list[str] = []
    for attempt in range(1, cfg.max_retries + 1):
        started = time.perf_counter()
        try:
            raw = backend.generate(bundle.text(), cfg)
        except BackendError as exc:
            doc, problems, candidate = None, [f"backend error: {exc}"], ""
        else:
            doc, problems, candidate = _check_candidate(raw, schema)
        if audit is not None:
            audit({
                "note_id": note_id,
                "query": query.kind,
                "attempt": attempt,
                "violations": len(problems),
                "latency_ms": round((time.perf_counter() - started) * 1000, 3),
            })
        if doc is not None:
            return doc, attempt
        log.debug("note %s query %s attempt %d failed: %s", note_id, query.kind, attempt, problems)
        if attempt < cfg.max_retries:
            bundle = replace(base, instruction=feedback_instruction(problems, candidate))
    raise ExtractionFailed(f"no valid JSON for {query.kind} after {cfg.max_retries} attempts",
                           cfg.max_retries, problems)


def extract_note(backend: GenerationBackend, note_context: ContextBundle,
                 cfg: GenerationConfig = GenerationConfig(), *,
                 one_shots: Optional[Mapping[str, OneShot]] = None,
                 audit: Optional[Callable[[dict], None]] = None,
                 extracted_at: Optional[dt.datetime] = None,
                 max_prompt_tokens: int = DEFAULT_MAX_PROMPT_TOKENS) -> PhenotypeRecord:
    """Run the four phenotype queries against one context and merge the answers.

    A query that fails is logged as no-response and its groups are left empty.
    """
    one_shots = one_shots or default_one_shots()
    docs: dict[str, Optional[dict]] = {}
    prov: list[str] = []
    for query in all_queries():
        try:
            doc, attempts = extract_with_retry(
                backend, query, note_context.context_text, phenotype_schema(query.kind), cfg,
                one_shots[query.kind], audit=audit, note_id=note_context.note_id,
                max_prompt_tokens=max_prompt_tokens)
        except PromptBudgetError as exc:
            log.warning("note %s: %s skipped, %s", note_context.note_id, query.kind, exc)
            docs[query.kind] = None
            prov.append(f"{query.kind}: no response, {exc}")
        except ExtractionFailed as exc:
            log.warning("note %s: no response for %s (%s)", note_context.note_id, query.kind,
                        "; ".join(exc.problems))
            docs[query.kind] = None
            prov.append(f"{query.kind}: no response after {exc.attempts} attempts")
        else:
            docs[query.kind] = doc
            if attempts > 1:
                prov.append(f"{query.kind}: valid after {attempts} attempts")
    return assemble_record(docs, note_context.note_id, backend.identity,
                           extracted_at=extracted_at, provenance=prov)
