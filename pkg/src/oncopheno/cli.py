"""Command-line entry point: preprocess, extract, eval, tokens.

Exit codes: 0 success, 2 partial (some no-responses), 1 fatal error.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

from . import baseline, evaluate, llm
from .config import PipelineConfig, load_config
from .evaluate import GoldLabel
from .model import ClinicalNote, ProcessedNote
from .postprocess import assemble_record
from .preprocess import process_differential
from .retrieval import HashEmbedder, HttpEmbedder, count_tokens, retrieve
from .schema import QUERY_KINDS
from .store import AnnotationStore

log = logging.getLogger("oncopheno")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


class CommandError(RuntimeError):
    pass


def read_jsonl(path: str | Path) -> Iterator[dict]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise CommandError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise CommandError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


# --------------------------------------------------------------------------
# preprocess
# --------------------------------------------------------------------------

def cmd_preprocess(in_corpus, out_path, cfg: PipelineConfig = PipelineConfig()) -> dict:
    notes = [ClinicalNote.from_dict(d) for d in read_jsonl(in_corpus)]
    processed = process_differential(notes, cfg.section_filter)
    write_jsonl(out_path, (p.to_dict() for p in processed))
    reductions = [count_tokens(n.raw_text) - p.token_count for n, p in zip(notes, processed)]
    summary = {
        "notes": len(processed),
        "mean_token_reduction": statistics.fmean(reductions) if reductions else 0.0,
    }
    print(f"notes: {summary['notes']}  mean token reduction: {summary['mean_token_reduction']:.1f}")
    return summary


# --------------------------------------------------------------------------
# extract
# --------------------------------------------------------------------------

@dataclass
class ExtractSummary:
    notes: int = 0
    written: int = 0
    partial: int = 0
    failed_notes: list = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return EXIT_PARTIAL if self.partial else EXIT_OK


def _load_processed(in_path) -> list[ProcessedNote]:
    return [ProcessedNote.from_dict(d) for d in read_jsonl(in_path)]


def cmd_extract(in_path, extractor: str, cfg: PipelineConfig = PipelineConfig(), *,
                backend: Optional[llm.GenerationBackend] = None, embedder=None,
                store: Optional[AnnotationStore] = None, fault_rate: float = 0.0,
                fault_seed: int = 0,
                clock: Callable[[], dt.datetime] | None = None) -> ExtractSummary:
    """Run one extractor over a processed corpus and upsert the records into the store."""
    notes = _load_processed(in_path)
    store = store or AnnotationStore(cfg.store_path)
    summary = ExtractSummary(notes=len(notes))

    if extractor == "baseline":
        dropped = baseline.inject_faults([n.note_id for n in notes], fault_rate, fault_seed)

        def work(note: ProcessedNote):
            now = clock() if clock else None
            rec = baseline.baseline_extract(note, drop=note.note_id in dropped, extracted_at=now)
            return (rec or baseline.no_response_record(note.note_id, now)), []

    elif extractor == "llm":
        if backend is None:
            if not cfg.endpoints.generation_url:
                raise CommandError("no generation endpoint configured (set GEN_ENDPOINT)")
            backend = llm.HttpBackend(cfg.endpoints.generation_url, cfg.model_id, cfg.endpoints.timeout)
        if embedder is None:
            if cfg.endpoints.embedding_url:
                embedder = HttpEmbedder(cfg.endpoints.embedding_url, cfg.endpoints.timeout)
            else:
                log.info("no embedding endpoint configured; using the hashing embedder")
                embedder = HashEmbedder()
        queries = [q.text for q in llm.all_queries()]

        def work(note: ProcessedNote):
            audits: list[dict] = []
            if not note.diff_text.strip():
                rec = assemble_record({k: {} for k in QUERY_KINDS}, note.note_id, backend.identity,
                                      extracted_at=clock() if clock else None,
                                      provenance=["empty differential text; nothing to extract"])
                return rec, audits
            bundle = retrieve(note.diff_text, queries, embedder, cfg.retrieval, note_id=note.note_id)
            rec = llm.extract_note(backend, bundle, cfg.generation, audit=audits.append,
                                   extracted_at=clock() if clock else None)
            return rec, audits

    else:
        raise CommandError(f"unknown extractor {extractor!r}")

    with ThreadPoolExecutor(max_workers=cfg.concurrency_limit) as pool:
        # map() yields in input order, so the store is written deterministically
        for note, (rec, audits) in zip(notes, pool.map(work, notes)):
            for entry in audits:
                store.audit(entry)
            if store.put(rec):
                summary.written += 1
            if rec.no_response:
                summary.partial += 1
                summary.failed_notes.append(note.note_id)
    print(f"extractor: {extractor}  notes: {summary.notes}  written: {summary.written}  "
          f"with no-response: {summary.partial}")
    return summary


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def cmd_eval(store_path, gold_path, out_path=None, extractors: Sequence[str] | None = None) -> str:
    if not Path(store_path).exists():
        raise CommandError(f"store {store_path} does not exist")
    records = AnnotationStore(store_path).records()
    if not records:
        raise CommandError(f"store {store_path} holds no records")
    gold = [GoldLabel.from_dict(d) for d in read_jsonl(gold_path)]
    if not gold:
        raise CommandError(f"gold file {gold_path} holds no labels")
    reports = evaluate.phenotype_table(records, gold, extractors)
    text = evaluate.render_report(reports)
    print(text, end="")
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
    return text


# --------------------------------------------------------------------------
# tokens
# --------------------------------------------------------------------------

def token_histogram(lengths: Sequence[int], bucket: int = 500, threshold: int = 2500) -> dict:
    counts: dict[int, int] = {}
    for n in lengths:
        lo = (n // bucket) * bucket
        counts[lo] = counts.get(lo, 0) + 1
    over = sum(1 for n in lengths if n > threshold)
    return {
        "buckets": dict(sorted(counts.items())),
        "over_threshold": over,
        "fraction_over": over / len(lengths) if lengths else 0.0,
    }


def cmd_tokens(in_corpus, bucket: int = 500, threshold: int = 2500) -> str:
    lengths = []
    for d in read_jsonl(in_corpus):
        text = d.get("raw_text", d.get("diff_text"))
        if text is None:
            raise CommandError("rows need a raw_text or diff_text field")
        lengths.append(count_tokens(text))
    hist = token_histogram(lengths, bucket, threshold)
    peak = max(hist["buckets"].values(), default=0)
    lines = [f"{'tokens':>13}  {'notes':>6}"]
    for lo, n in hist["buckets"].items():
        bar = "#" * (round(40 * n / peak) if peak else 0)
        lines.append(f"{lo:>6}-{lo + bucket - 1:<6}  {n:>6}  {bar}")
    lines.append(f"notes: {len(lengths)}  over {threshold} tokens: {hist['over_threshold']} "
                 f"({hist['fraction_over'] * 100:.1f}%)")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    return text


# --------------------------------------------------------------------------
# main
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oncopheno", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="INI-style configuration file")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="strip sections and compute differential text")
    p.add_argument("corpus", help="JSON-lines of clinical notes")
    p.add_argument("out", help="output JSON-lines of processed notes")

    p = sub.add_parser("extract", help="extract phenotypes into the annotation store")
    p.add_argument("processed", help="JSON-lines of processed notes")
    p.add_argument("--extractor", choices=("llm", "baseline"), required=True)
    p.add_argument("--store", help="annotation store path (overrides config)")
    p.add_argument("--fault-rate", type=float, default=0.0,
                   help="baseline only: fraction of notes to answer with no response")
    p.add_argument("--fault-seed", type=int, default=0)

    p = sub.add_parser("eval", help="score stored records against gold labels")
    p.add_argument("--store", help="annotation store path (overrides config)")
    p.add_argument("--gold", required=True, help="JSON-lines of gold labels")
    p.add_argument("--out", help="also write the report to this file")

    p = sub.add_parser("tokens", help="token-length histogram of a corpus")
    p.add_argument("corpus")
    p.add_argument("--bucket", type=int, default=500)
    p.add_argument("--threshold", type=int, default=None)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "preprocess":
            cmd_preprocess(args.corpus, args.out, cfg)
            return EXIT_OK
        if args.command == "extract":
            store = AnnotationStore(args.store or cfg.store_path)
            summary = cmd_extract(args.processed, args.extractor, cfg, store=store,
                                  fault_rate=args.fault_rate, fault_seed=args.fault_seed)
            return summary.exit_code
        if args.command == "eval":
            cmd_eval(args.store or cfg.store_path, args.gold, args.out)
            return EXIT_OK
        if args.command == "tokens":
            cmd_tokens(args.corpus, args.bucket, args.threshold or cfg.retrieval.token_threshold)
            return EXIT_OK
    except (CommandError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_FATAL
    return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
