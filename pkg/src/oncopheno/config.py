"""Pipeline configuration loaded from an INI-style key/value file plus env overrides.

Example::

    [retrieval]
    token_threshold = 2500
    top_k = 10

    [generation]
    temperature = 0.0
    max_retries = 3

    [endpoints]
    generation_url = http://localhost:8000/generate
    embedding_url = http://localhost:8001/embed

    [pipeline]
    store_path = annotations.jsonl
    concurrency_limit = 4
    model_id = llama3-8b
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

from .llm import GenerationConfig
from .preprocess import SectionFilterConfig
from .retrieval import RetrievalConfig


@dataclass(frozen=True)
class Endpoints:
    generation_url: Optional[str] = None
    embedding_url: Optional[str] = None
    timeout: float = 120.0


@dataclass(frozen=True)
class PipelineConfig:
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    section_filter: SectionFilterConfig = field(default_factory=SectionFilterConfig)
    endpoints: Endpoints = field(default_factory=Endpoints)
    store_path: Path = Path("annotations.jsonl")
    concurrency_limit: int = 1
    model_id: str = "llm"

    def __post_init__(self):
        if self.concurrency_limit < 1:
            raise ValueError("concurrency_limit must be >= 1")


def _coerce(cls, section: Mapping[str, str]):
    """Build dataclass ``cls`` from string values, converting by the default's type."""
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, raw in section.items():
        if key not in names:
            raise ValueError(f"unknown option {key!r} for {cls.__name__}")
        default = names[key].default
        if raw.strip().lower() in ("", "none", "null"):
            kwargs[key] = None
        elif isinstance(default, bool):
            kwargs[key] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            kwargs[key] = int(raw)
        elif isinstance(default, float):
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw.strip()
    return cls(**kwargs)


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None) -> PipelineConfig:
    env = os.environ if env is None else env
    parser = configparser.ConfigParser()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)

    def section(name: str) -> dict:
        return dict(parser[name]) if parser.has_section(name) else {}

    retrieval = _coerce(RetrievalConfig, section("retrieval"))
    generation = _coerce(GenerationConfig, section("generation"))
    pre = section("preprocess")
    if "drop_section_headers" in pre:
        headers = tuple(h.strip() for h in pre["drop_section_headers"].split(",") if h.strip())
        section_filter = SectionFilterConfig(headers)
    else:
        section_filter = SectionFilterConfig()
    endpoints = _coerce(Endpoints, section("endpoints"))
    overrides = {}
    if env.get("GEN_ENDPOINT"):
        overrides["generation_url"] = env["GEN_ENDPOINT"]
    if env.get("EMB_ENDPOINT"):
        overrides["embedding_url"] = env["EMB_ENDPOINT"]
    if overrides:
        endpoints = dataclasses.replace(endpoints, **overrides)

    pipe = section("pipeline")
    return PipelineConfig(
        retrieval=retrieval,
        generation=generation,
        section_filter=section_filter,
        endpoints=endpoints,
        store_path=Path(pipe.get("store_path", "annotations.jsonl")),
        concurrency_limit=int(pipe.get("concurrency_limit", 1)),
        model_id=pipe.get("model_id", "llm"),
    )
