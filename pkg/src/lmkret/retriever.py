"""Scoring, hit selection, evidence assembly, and chunk-based baselines.

Retrieval over landmark embeddings is brute-force exact: every entry of a
flat index is scored by inner product against the query embedding.  Hits
expand to sentence intervals (Front-k reaches backward from the hit, since
training emphasizes the final sentence of a relevant span; Surround-k splits
neighbors across both sides) and merge into a budgeted evidence bundle.

The chunk baselines reproduce the conventional pipeline this design replaces:
each chunk is embedded standalone, with no visibility outside its own text.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import Sentence
from .encoder import LandmarkEmbeddingSet

log = logging.getLogger(__name__)

INDEX_MAGIC = b"LMKIDX1\0"
INDEX_VERSION = 1

# Evidence defaults mirroring the sentence-unit serving configuration:
# front-2 neighbors + the hit itself, 15 hits, ~2190-token budget.
DEFAULT_FRONT_K = 3
DEFAULT_TOP_K = 15
DEFAULT_BUDGET_TOKENS = 2190

# Chunk-baseline defaults: 200-word spans with top-7, or sentences with top-15.
WORDS_PER_SPAN = 200
SPAN_TOP_N = 7
SENTENCE_TOP_N = 15


@dataclass(frozen=True)
class RetrievalHit:
    doc_id: str
    sentence_index: int
    score: float
    rank: int  # 1-based


@dataclass
class EvidenceBundle:
    """Merged, document-ordered sentence intervals under a token budget."""

    intervals: list[tuple[str, int, int]]  # (doc_id, first sentence, last sentence)
    total_tokens: int
    scheme: str
    diagnostics: str | None = None


class EmbeddingIndex:
    """Flat exact-scoring index of (doc_id, sentence_index) -> vector."""

    def __init__(self, doc_ids: Sequence[str], sentence_indices, vectors):
        self.vectors = np.asarray(vectors)
        self.sentence_indices = np.asarray(sentence_indices, dtype=np.int64)
        self.doc_ids = list(doc_ids)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a 2-d matrix")
        if not (len(self.doc_ids) == len(self.sentence_indices) == len(self.vectors)):
            raise ValueError("index columns must have equal length")
        keys = set(zip(self.doc_ids, self.sentence_indices.tolist()))
        if len(keys) != len(self.doc_ids):
            raise ValueError("duplicate (doc_id, sentence_index) entries")

    @property
    def count(self) -> int:
        return len(self.doc_ids)

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def from_sets(cls, sets: Iterable[LandmarkEmbeddingSet]) -> "EmbeddingIndex":
        doc_ids: list[str] = []
        sent_idx: list[int] = []
        mats = []
        for es in sets:
            if es.doc_id is None:
                raise ValueError("embedding set without doc_id cannot be indexed")
            doc_ids.extend([es.doc_id] * es.count)
            sent_idx.extend(int(i) for i in es.sentence_indices)
            mats.append(es.vectors)
        if not mats:
            return cls([], np.zeros(0, dtype=np.int64), np.zeros((0, 1)))
        return cls(doc_ids, np.array(sent_idx), np.vstack(mats))


def score_all(query_embedding: np.ndarray, index: EmbeddingIndex) -> np.ndarray:
    """Inner product of the query against every entry, in float64."""
    q = np.asarray(query_embedding, dtype=np.float64).ravel()
    if index.count and q.shape[0] != index.dimension:
        raise ValueError(
            f"query dimension {q.shape[0]} does not match index dimension {index.dimension}"
        )
    if not index.count:
        return np.zeros(0)
    return index.vectors.astype(np.float64) @ q


def top_k(scores: np.ndarray, index: EmbeddingIndex, k: int) -> list[RetrievalHit]:
    """Highest-scoring entries; ties broken by (doc_id, sentence_index) ascending."""
    if k < 1:
        raise ValueError("k must be at least 1")
    n = len(scores)
    if n != index.count:
        raise ValueError("scores do not match index")
    if n == 0:
        return []
    doc_rank = {d: r for r, d in enumerate(sorted(set(index.doc_ids)))}
    doc_codes = np.array([doc_rank[d] for d in index.doc_ids], dtype=np.int64)
    # last lexsort key is the primary one
    order = np.lexsort((index.sentence_indices, doc_codes, -np.asarray(scores, dtype=np.float64)))
    hits = []
    for r, j in enumerate(order[:k], start=1):
        hits.append(
            RetrievalHit(
                doc_id=index.doc_ids[j],
                sentence_index=int(index.sentence_indices[j]),
                score=float(scores[j]),
                rank=r,
            )
        )
    return hits


def expand_front_k(hit: RetrievalHit, k: int) -> tuple[int, int]:
    """Hit sentence plus its k-1 predecessors: [max(0, z-k+1), z]."""
    if k < 1:
        raise ValueError("k must be at least 1")
    z = hit.sentence_index
    return max(0, z - k + 1), z


def expand_surround_k(hit: RetrievalHit, k: int) -> tuple[int, int]:
    """(k-1)/2 neighbors per side; an even k gives the extra one to the back."""
    if k < 1:
        raise ValueError("k must be at least 1")
    z = hit.sentence_index
    return max(0, z - (k - 1) // 2), z + (k - 1 + 1) // 2


SCHEMES: dict[str, Callable[[RetrievalHit, int], tuple[int, int]]] = {
    "front": expand_front_k,
    "surround": expand_surround_k,
}


def _intervals_from_sets(
    included: Mapping[str, set[int]], doc_order: Sequence[str]
) -> list[tuple[str, int, int]]:
    out = []
    for doc_id in doc_order:
        idx = sorted(included.get(doc_id, ()))
        if not idx:
            continue
        start = prev = idx[0]
        for i in idx[1:]:
            if i == prev + 1:
                prev = i
                continue
            out.append((doc_id, start, prev))
            start = prev = i
        out.append((doc_id, start, prev))
    return out


def assemble_evidence(
    hits: Sequence[RetrievalHit],
    scheme: str,
    k: int,
    budget_tokens: int,
    sentences_by_doc: Mapping[str, Sequence[Sentence]],
) -> EvidenceBundle:
    """Expand hits in rank order, merge overlaps, and stop at the budget.

    A hit whose marginal tokens would exceed the budget is skipped and lower
    ranks are still tried.  Intervals are clamped to document bounds and
    reported in document order.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {sorted(SCHEMES)}")
    if budget_tokens <= 0:
        raise ValueError("budget_tokens must be positive")
    expand = SCHEMES[scheme]
    included: dict[str, set[int]] = {}
    doc_order: list[str] = []
    total = 0
    admitted = 0
    for hit in hits:
        sentences = sentences_by_doc[hit.doc_id]
        lo, hi = expand(hit, k)
        hi = min(hi, len(sentences) - 1)
        have = included.setdefault(hit.doc_id, set())
        new = [i for i in range(lo, hi + 1) if i not in have]
        marginal = sum(sentences[i].token_count for i in new)
        if total + marginal > budget_tokens:
            continue
        if hit.doc_id not in doc_order:
            doc_order.append(hit.doc_id)
        have.update(new)
        total += marginal
        admitted += 1
    diagnostics = None
    if hits and admitted == 0:
        diagnostics = (
            f"budget of {budget_tokens} tokens admits no expanded hit "
            f"(smallest candidate exceeded it)"
        )
        log.warning(diagnostics)
    return EvidenceBundle(
        intervals=_intervals_from_sets(included, sorted(doc_order)),
        total_tokens=total,
        scheme=scheme,
        diagnostics=diagnostics,
    )


# ------------------------------------------------------------- chunk baselines


@dataclass(frozen=True)
class Chunk:
    """A baseline retrieval unit with its sentence alignment in the document."""

    doc_id: str
    chunk_index: int
    text: str
    sentence_start: int
    sentence_end: int  # inclusive


def chunk_by_spans(
    doc_id: str,
    sentences: Sequence[Sentence],
    words_per_span: int = WORDS_PER_SPAN,
) -> list[Chunk]:
    """Consecutive fixed-size word windows (the final one may be shorter).

    Spans are cut over the document's word stream; each chunk records the
    range of sentences it overlaps so evidence can expand to sentence units.
    """
    if words_per_span < 1:
        raise ValueError("words_per_span must be positive")
    words: list[str] = []
    word_sentence: list[int] = []
    for s in sentences:
        for w in s.text.split(" "):
            words.append(w)
            word_sentence.append(s.index)
    chunks = []
    for ci, start in enumerate(range(0, len(words), words_per_span)):
        end = min(start + words_per_span, len(words))
        chunks.append(
            Chunk(
                doc_id=doc_id,
                chunk_index=ci,
                text=" ".join(words[start:end]),
                sentence_start=word_sentence[start],
                sentence_end=word_sentence[end - 1],
            )
        )
    return chunks


def chunk_by_sentences(doc_id: str, sentences: Sequence[Sentence]) -> list[Chunk]:
    """One chunk per sentence (reuses the corpus segmentation)."""
    return [
        Chunk(
            doc_id=doc_id,
            chunk_index=s.index,
            text=s.text,
            sentence_start=s.index,
            sentence_end=s.index,
        )
        for s in sentences
    ]


def baseline_retrieve(
    query_embedding: np.ndarray,
    chunks: Sequence[Chunk],
    embed_fn: Callable[[str], np.ndarray],
    top_n: int,
    sentences_by_doc: Mapping[str, Sequence[Sentence]],
    neighbor_sentences: int = 1,
    budget_tokens: int | None = None,
) -> EvidenceBundle:
    """Chunked-context retrieval: each chunk embedded standalone.

    ``embed_fn`` receives only the chunk text, never surrounding context;
    that isolation is the defining property of the baseline.  Selected
    chunks expand by ``neighbor_sentences`` on each side.
    """
    if top_n < 1:
        raise ValueError("top_n must be at least 1")
    if not chunks:
        return EvidenceBundle(intervals=[], total_tokens=0, scheme="baseline")
    q = np.asarray(query_embedding, dtype=np.float64).ravel()
    scores = np.array([float(np.asarray(embed_fn(c.text), dtype=np.float64) @ q) for c in chunks])
    order = sorted(
        range(len(chunks)),
        key=lambda j: (-scores[j], chunks[j].doc_id, chunks[j].sentence_start),
    )
    included: dict[str, set[int]] = {}
    doc_order: list[str] = []
    total = 0
    admitted = 0
    for j in order[:top_n]:
        c = chunks[j]
        sentences = sentences_by_doc[c.doc_id]
        lo = max(0, c.sentence_start - neighbor_sentences)
        hi = min(len(sentences) - 1, c.sentence_end + neighbor_sentences)
        have = included.setdefault(c.doc_id, set())
        new = [i for i in range(lo, hi + 1) if i not in have]
        marginal = sum(sentences[i].token_count for i in new)
        if budget_tokens is not None and total + marginal > budget_tokens:
            continue
        if c.doc_id not in doc_order:
            doc_order.append(c.doc_id)
        have.update(new)
        total += marginal
        admitted += 1
    diagnostics = None
    if budget_tokens is not None and admitted == 0:
        diagnostics = f"budget of {budget_tokens} tokens admits no chunk"
        log.warning(diagnostics)
    return EvidenceBundle(
        intervals=_intervals_from_sets(included, sorted(doc_order)),
        total_tokens=total,
        scheme="baseline",
        diagnostics=diagnostics,
    )


# ------------------------------------------------------------------ file IO


def save_index(
    index: EmbeddingIndex, path: str | Path, seed: int = 0, config_hash: str = ""
) -> None:
    """Write the index: magic, JSON header with doc table, f32 LE arrays."""
    doc_table = sorted(set(index.doc_ids))
    doc_rank = {d: r for r, d in enumerate(doc_table)}
    header = {
        "format_version": INDEX_VERSION,
        "d": int(index.dimension) if index.count else 0,
        "count": int(index.count),
        "doc_table": doc_table,
        "seed": seed,
        "config_hash": config_hash,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(index.sentence_indices, dtype="<i4").tobytes())
        codes = np.array([doc_rank[d] for d in index.doc_ids], dtype="<i4")
        fh.write(codes.tobytes())


def load_index(path: str | Path, expect_dimension: int | None = None) -> EmbeddingIndex:
    data = Path(path).read_bytes()
    if data[: len(INDEX_MAGIC)] != INDEX_MAGIC:
        raise ValueError(f"{path}: not an index file (bad magic)")
    hlen = struct.unpack("<I", data[8:12])[0]
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    if header["format_version"] != INDEX_VERSION:
        raise ValueError(f"{path}: unsupported index version")
    d, count = header["d"], header["count"]
    if expect_dimension is not None and count and d != expect_dimension:
        raise ValueError(f"{path}: index dimension {d}, expected {expect_dimension}")
    base = 12 + hlen
    need = 4 * d * count + 4 * count + 4 * count
    if len(data) - base != need:
        raise ValueError(f"{path}: truncated index data")
    vectors = np.frombuffer(data[base : base + 4 * d * count], dtype="<f4")
    vectors = vectors.reshape(count, d).copy() if count else np.zeros((0, max(d, 1)))
    off = base + 4 * d * count
    sent = np.frombuffer(data[off : off + 4 * count], dtype="<i4").astype(np.int64)
    codes = np.frombuffer(data[off + 4 * count :], dtype="<i4")
    doc_table = header["doc_table"]
    doc_ids = [doc_table[c] for c in codes]
    return EmbeddingIndex(doc_ids, sent, vectors)
