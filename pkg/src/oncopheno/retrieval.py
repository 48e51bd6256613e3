"""Token counting, recursive chunking and hybrid (dense + BM25) chunk retrieval.

Long notes are split into chunks, each chunk is scored against every query by
cosine similarity of embeddings and by BM25, the top-k of each scorer are
unioned, and the surviving chunks are re-joined in their original order.
"""

from __future__ import annotations

import hashlib
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Protocol, Sequence

import requests

# Alphanumeric runs are one token; every other non-space character stands alone.
_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]|_")

SEPARATORS = ("\n\n", "\n", ". ", " ")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def token_spans(text: str) -> list[tuple[int, int]]:
    return [m.span() for m in _TOKEN_RE.finditer(text)]


def count_tokens(text: str) -> int:
    return sum(1 for _ in _TOKEN_RE.finditer(text))


def truncate_tokens(text: str, limit: int) -> str:
    """Cut ``text`` right after its ``limit``-th token."""
    spans = token_spans(text)
    if len(spans) <= limit:
        return text
    if limit <= 0:
        return ""
    return text[: spans[limit - 1][1]]


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalConfig:
    token_threshold: int = 2500
    top_k: int = 10
    chunk_target_tokens: int = 400
    bm25_k1: float = 0.9
    bm25_b: float = 0.4

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.token_threshold <= self.chunk_target_tokens:
            raise ValueError("token_threshold must exceed chunk_target_tokens")


@dataclass(frozen=True)
class Chunk:
    index: int
    text: str
    token_count: int


@dataclass(frozen=True)
class ScoredChunk:
    chunk_index: int
    score: float
    scorer: str  # "semantic" | "lexical"


@dataclass(frozen=True)
class ContextBundle:
    note_id: str
    selected_indices: tuple[int, ...]
    context_text: str
    bypassed: bool


# --------------------------------------------------------------------------
# Chunking
# --------------------------------------------------------------------------

def _split_keep(text: str, sep: str) -> list[str]:
    """Split on ``sep``, keeping the separator attached to the left piece."""
    parts = text.split(sep)
    pieces = [p + sep for p in parts[:-1]]
    if parts[-1]:
        pieces.append(parts[-1])
    return [p for p in pieces if p]


def _split_recursive(text: str, target: int, level: int) -> list[str]:
    if count_tokens(text) <= target:
        return [text]
    while level < len(SEPARATORS) and SEPARATORS[level] not in text:
        level += 1
    if level >= len(SEPARATORS):
        return [text]  # atomic: no separator left to split on

    out: list[str] = []
    buf = ""
    for piece in _split_keep(text, SEPARATORS[level]):
        if count_tokens(piece) > target:
            if buf:
                out.append(buf)
                buf = ""
            out.extend(_split_recursive(piece, target, level + 1))
        elif count_tokens(buf + piece) <= target:
            buf += piece
        else:
            out.append(buf)
            buf = piece
    if buf:
        out.append(buf)
    return out


def recursive_split(text: str, cfg: RetrievalConfig = RetrievalConfig()) -> list[Chunk]:
    """Split ``text`` into chunks of at most ``cfg.chunk_target_tokens`` tokens.

    Separators are tried coarsest first (paragraph, line, sentence, word) and
    adjacent small pieces are merged greedily. Separators stay attached to the
    end of the preceding chunk, so ``"".join(c.text for c in chunks) == text``.
    """
    if not text:
        return []
    pieces: list[str] = []
    pending = ""  # whitespace seen before the first real chunk
    for piece in _split_recursive(text, cfg.chunk_target_tokens, 0):
        if count_tokens(piece) == 0:
            if pieces:
                pieces[-1] += piece  # token-free leftovers join the chunk on their left
            else:
                pending += piece
        else:
            pieces.append(pending + piece)
            pending = ""
    if pending:
        pieces.append(pending)  # whitespace-only text
    return [Chunk(i, p, count_tokens(p)) for i, p in enumerate(pieces)]


# --------------------------------------------------------------------------
# Embedding
# --------------------------------------------------------------------------

class Embedder(Protocol):
    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


class HashEmbedder:
    """Deterministic feature-hashed bag-of-words embedder for offline runs.

    Counts are non-negative, so cosine scores fall in [0, 1].
    """

    def __init__(self, dim: int = 256):
        self.dim = dim

    def _bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        vectors = []
        for text in texts:
            vec = [0.0] * self.dim
            for tok in tokenize(text.lower()):
                if tok.isalnum():
                    vec[self._bucket(tok)] += 1.0
            vectors.append(vec)
        return vectors


class HttpEmbedder:
    """Client for an embedding endpoint: POST {"texts": [...]} -> {"vectors": [[...], ...]}."""

    def __init__(self, url: str, timeout: float = 30.0, session: requests.Session | None = None):
        self.url = url
        self.timeout = timeout
        self.session = session or requests.Session()

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        resp = self.session.post(self.url, json={"texts": list(texts)}, timeout=self.timeout)
        resp.raise_for_status()
        vectors = resp.json().get("vectors")
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise RetrievalError("embedding endpoint returned a malformed 'vectors' field")
        dims = {len(v) for v in vectors}
        if len(dims) > 1:
            raise RetrievalError(f"embedding endpoint returned mixed dimensions {sorted(dims)}")
        return [[float(x) for x in v] for v in vectors]


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    if len(a) != len(b):
        raise RetrievalError(f"dimension mismatch: {len(a)} vs {len(b)}")
    if not any(a) or not any(b):
        raise RetrievalError("cosine similarity undefined for a zero vector")
    na = math.sqrt(math.fsum(x * x for x in a))
    nb = math.sqrt(math.fsum(y * y for y in b))
    if not (0.0 < na < math.inf and 0.0 < nb < math.inf):
        # squares under- or overflowed: rescale by the largest component
        sa, sb = max(map(abs, a)), max(map(abs, b))
        a, b = [x / sa for x in a], [y / sb for y in b]
        na = math.sqrt(math.fsum(x * x for x in a))
        nb = math.sqrt(math.fsum(y * y for y in b))
    sim = math.fsum(x * y for x, y in zip(a, b)) / (na * nb)
    return max(-1.0, min(1.0, sim))


def _top_k(scores: Sequence[float], k: int, scorer: str) -> list[ScoredChunk]:
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return [ScoredChunk(i, scores[i], scorer) for i in order[:k]]


def semantic_scores(queries: Sequence[str], chunks: Sequence[Chunk], embedder: Embedder) -> list[float]:
    """Per-chunk max cosine similarity over all queries.

    A chunk (or query) with a zero embedding scores 0 against it; it carries no
    direction to compare.
    """
    vectors = embedder.embed(list(queries) + [c.text for c in chunks])
    q_vecs, c_vecs = vectors[: len(queries)], vectors[len(queries):]
    scores = []
    for cv in c_vecs:
        best = -math.inf
        for qv in q_vecs:
            try:
                sim = cosine_similarity(qv, cv)
            except RetrievalError:
                if len(qv) != len(cv):
                    raise
                sim = 0.0
            best = max(best, sim)
        scores.append(best)
    return scores


def semantic_topk(query, chunks: Sequence[Chunk], embedder: Embedder, k: int) -> list[ScoredChunk]:
    if not chunks:
        raise RetrievalError("no chunks to rank")
    queries = [query] if isinstance(query, str) else list(query)
    return _top_k(semantic_scores(queries, chunks, embedder), k, "semantic")


# --------------------------------------------------------------------------
# BM25
# --------------------------------------------------------------------------

def bm25_terms(text: str) -> list[str]:
    """Case-folded alphanumeric tokens; punctuation tokens never act as terms."""
    return [t for t in tokenize(text.casefold()) if t.isalnum()]


@dataclass(frozen=True)
class CorpusStats:
    n_docs: int
    doc_freq: dict
    avg_len: float
    term_counts: tuple  # per chunk Counter of terms
    lengths: tuple      # per chunk token_count

    @classmethod
    def from_chunks(cls, chunks: Sequence[Chunk]) -> "CorpusStats":
        counts = tuple(Counter(bm25_terms(c.text)) for c in chunks)
        df: Counter = Counter()
        for c in counts:
            df.update(c.keys())
        lengths = tuple(c.token_count for c in chunks)
        avg = sum(lengths) / len(lengths) if lengths else 0.0
        return cls(len(chunks), dict(df), avg, counts, lengths)

    def idf(self, term: str) -> float:
        df = self.doc_freq.get(term, 0)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))


def bm25_score(query_terms: Sequence[str], chunk: Chunk, stats: CorpusStats,
               k1: float = 0.9, b: float = 0.4) -> float:
    tf_counts = stats.term_counts[chunk.index]
    norm = 1.0 - b + b * (chunk.token_count / stats.avg_len if stats.avg_len else 0.0)
    score = 0.0
    for term in query_terms:
        tf = tf_counts.get(term.casefold(), 0)
        if tf:
            score += stats.idf(term.casefold()) * tf * (k1 + 1) / (tf + k1 * norm)
    return score


def lexical_scores(queries: Sequence[str], chunks: Sequence[Chunk], stats: CorpusStats,
                   k1: float = 0.9, b: float = 0.4) -> list[float]:
    term_lists = [bm25_terms(q) for q in queries]
    return [max(bm25_score(terms, c, stats, k1, b) for terms in term_lists) for c in chunks]


def lexical_topk(query, chunks: Sequence[Chunk], stats: CorpusStats | None, k: int,
                 k1: float = 0.9, b: float = 0.4) -> list[ScoredChunk]:
    if not chunks:
        raise RetrievalError("no chunks to rank")
    stats = stats or CorpusStats.from_chunks(chunks)
    queries = [query] if isinstance(query, str) else list(query)
    return _top_k(lexical_scores(queries, chunks, stats, k1, b), k, "lexical")


# --------------------------------------------------------------------------
# Hybrid retrieval
# --------------------------------------------------------------------------

def retrieve(diff_text: str, queries: Sequence[str], embedder: Embedder,
             cfg: RetrievalConfig = RetrievalConfig(), note_id: str = "") -> ContextBundle:
    """Build the context for one note.

    Notes at or under ``cfg.token_threshold`` tokens pass through untouched.
    Longer notes keep the union of the semantic and lexical top-k chunks, in
    original order, dropping the highest-index survivors until the joined
    context fits the threshold.
    """
    if not queries:
        raise RetrievalError("at least one query is required")
    if not diff_text.strip():
        raise RetrievalError(f"note {note_id!r} has no text to retrieve from")
    if count_tokens(diff_text) <= cfg.token_threshold:
        return ContextBundle(note_id, (), diff_text, True)

    chunks = recursive_split(diff_text, cfg)
    sem = semantic_topk(queries, chunks, embedder, cfg.top_k)
    lex = lexical_topk(queries, chunks, CorpusStats.from_chunks(chunks), cfg.top_k,
                       cfg.bm25_k1, cfg.bm25_b)
    selected = sorted({s.chunk_index for s in sem} | {s.chunk_index for s in lex})

    texts = [chunks[i].text for i in selected]
    while len(selected) > 1 and count_tokens("\n".join(texts)) > cfg.token_threshold:
        selected.pop()
        texts.pop()
    context = "\n".join(texts)
    if count_tokens(context) > cfg.token_threshold:
        # only reachable with a single atomic chunk longer than the budget
        context = truncate_tokens(context, cfg.token_threshold)
    return ContextBundle(note_id, tuple(selected), context, False)
