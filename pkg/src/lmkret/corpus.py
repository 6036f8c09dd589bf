"""Document ingestion, sentence segmentation, and landmark insertion.

A document is segmented into sentences by a deterministic rule (terminal
punctuation followed by whitespace), over-long sentences are hard-split at
word boundaries, and the token stream gets one LMK control token appended
after each sentence.  The landmark positions recorded here are where the
encoder reads per-sentence embeddings.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .tokenizer import LMK_ID, Tokenizer

log = logging.getLogger(__name__)

# Sentence boundary: terminal punctuation, then whitespace (or end of text).
_BOUNDARY = re.compile(r"(?<=[.!?;])\s+")

DEFAULT_MAX_SENTENCE_TOKENS = 256


@dataclass(frozen=True)
class Sentence:
    """One segmentation unit; ``token_count`` excludes the landmark token."""

    index: int
    text: str
    token_count: int


@dataclass(frozen=True)
class LandmarkedContext:
    """Token stream with one LMK after each sentence.

    ``landmark_positions[i]`` is the offset of sentence i's LMK token within
    ``token_stream``; the sentence's own tokens occupy the slice
    ``(landmark_positions[i-1] + 1, landmark_positions[i])``.
    """

    sentences: tuple[Sentence, ...]
    token_stream: tuple[int, ...]
    landmark_positions: tuple[int, ...]

    def __post_init__(self):
        if len(self.landmark_positions) != len(self.sentences):
            raise ValueError("one landmark position required per sentence")
        prev = -1
        for i, pos in enumerate(self.landmark_positions):
            if pos <= prev:
                raise ValueError("landmark positions must be strictly increasing")
            if self.token_stream[pos] != LMK_ID:
                raise ValueError(f"token at landmark position {pos} is not LMK")
            prev = pos

    @property
    def num_tokens(self) -> int:
        return len(self.token_stream)

    @property
    def num_sentences(self) -> int:
        return len(self.sentences)

    def sentence_token_span(self, i: int) -> tuple[int, int]:
        """Half-open token range of sentence i's own tokens (LMK excluded)."""
        start = self.landmark_positions[i - 1] + 1 if i > 0 else 0
        return start, self.landmark_positions[i]


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    title: str | None = None


@dataclass
class Corpus:
    documents: list[Document]
    source: str = ""
    malformed_count: int = 0
    _by_id: dict[str, Document] = field(init=False, repr=False)

    def __post_init__(self):
        self._by_id = {}
        for doc in self.documents:
            if doc.doc_id in self._by_id:
                raise ValueError(f"duplicate doc_id: {doc.doc_id!r}")
            self._by_id[doc.doc_id] = doc

    def __len__(self) -> int:
        return len(self.documents)

    def __getitem__(self, doc_id: str) -> Document:
        return self._by_id[doc_id]

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id


def segment_sentences(
    text: str,
    tokenizer: Tokenizer,
    max_sentence_tokens: int = DEFAULT_MAX_SENTENCE_TOKENS,
) -> list[Sentence]:
    """Split ``text`` into sentences, hard-splitting any over the token cap.

    Whitespace runs collapse to single spaces first, so segmenting the
    space-joined output again is a no-op.  Empty or whitespace-only input
    yields an empty list.
    """
    if max_sentence_tokens < 1:
        raise ValueError("max_sentence_tokens must be positive")
    pieces = [p for p in _BOUNDARY.split(" ".join(text.split())) if p]
    sentences: list[Sentence] = []
    for piece in pieces:
        words = tokenizer.pretokenize(piece)
        if not words:
            continue
        for i in range(0, len(words), max_sentence_tokens):
            chunk = words[i : i + max_sentence_tokens]
            sentences.append(
                Sentence(index=len(sentences), text=" ".join(chunk), token_count=len(chunk))
            )
    return sentences


def build_landmarked_context(
    sentences: list[Sentence], tokenizer: Tokenizer
) -> LandmarkedContext:
    """Interleave sentence tokens with LMK tokens and record LMK offsets."""
    if not sentences:
        raise ValueError("cannot landmark an empty sentence list")
    stream: list[int] = []
    positions: list[int] = []
    for sent in sentences:
        ids = tokenizer.tokenize(sent.text)
        if not ids:
            raise ValueError(f"sentence {sent.index} tokenizes to zero tokens: {sent.text!r}")
        stream.extend(ids)
        positions.append(len(stream))
        stream.append(LMK_ID)
    return LandmarkedContext(
        sentences=tuple(sentences),
        token_stream=tuple(stream),
        landmark_positions=tuple(positions),
    )


def landmark_document(
    text: str,
    tokenizer: Tokenizer,
    max_sentence_tokens: int = DEFAULT_MAX_SENTENCE_TOKENS,
) -> LandmarkedContext:
    """Segment and landmark in one step (documents are stored raw)."""
    return build_landmarked_context(
        segment_sentences(text, tokenizer, max_sentence_tokens), tokenizer
    )


def load_corpus(path: str | Path, format_tag: str = "jsonl") -> Corpus:
    """Read a line-delimited corpus file: one {"id", "text", "title"?} per line.

    Malformed lines are skipped and counted on the returned Corpus; duplicate
    ids are an error.
    """
    if format_tag != "jsonl":
        raise ValueError(f"unsupported corpus format: {format_tag!r}")
    path = Path(path)
    documents: list[Document] = []
    seen: dict[str, int] = {}
    duplicates: list[str] = []
    malformed = 0
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc_id = rec["id"]
                text = rec["text"]
            except (json.JSONDecodeError, KeyError, TypeError):
                malformed += 1
                log.warning("%s:%d: malformed corpus record skipped", path, lineno)
                continue
            if not isinstance(doc_id, str) or not isinstance(text, str):
                malformed += 1
                log.warning("%s:%d: malformed corpus record skipped", path, lineno)
                continue
            if doc_id in seen:
                duplicates.append(doc_id)
                continue
            seen[doc_id] = lineno
            documents.append(Document(doc_id=doc_id, text=text, title=rec.get("title")))
    if duplicates:
        raise ValueError(f"duplicate doc_id(s) in {path}: {sorted(set(duplicates))}")
    if malformed:
        log.warning("%s: skipped %d malformed record(s)", path, malformed)
    return Corpus(documents=documents, source=str(path), malformed_count=malformed)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for doc in corpus.documents:
            rec: dict = {"id": doc.doc_id, "text": doc.text}
            if doc.title is not None:
                rec["title"] = doc.title
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
