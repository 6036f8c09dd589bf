"""Training example types, line-delimited dataset files, negative mining.

One JSONL record per example.  Pair examples feed the pairwise stage,
pseudo-document examples the weak-supervision stage, and synthetic examples
(query + span over a real document) the fine-tuning stage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import Corpus


@dataclass(frozen=True)
class PairExample:
    query: str
    positive: str
    hard_negatives: tuple[str, ...]


@dataclass(frozen=True)
class PseudoDocExample:
    """A composed long document with one known-relevant passage."""

    query: str
    passages: tuple[str, ...]
    positive_index: int
    positive_sentence_span: tuple[int, int]  # inclusive sentence range in the doc
    budget_tokens: int

    def __post_init__(self):
        if not 0 <= self.positive_index < len(self.passages):
            raise ValueError("positive_index outside passage list")
        a, b = self.positive_sentence_span
        if a > b or a < 0:
            raise ValueError(f"bad sentence span {self.positive_sentence_span}")


@dataclass(frozen=True)
class SyntheticExample:
    """A query targeting consecutive sentences of a stored document."""

    doc_id: str
    query: str
    span: tuple[int, int]  # inclusive sentence range
    background: tuple[int, int]  # character range the query was generated from

    def __post_init__(self):
        a, b = self.span
        if not 1 <= b - a + 1 <= 5:
            raise ValueError(f"span must cover 1-5 sentences, got {b - a + 1}")


@dataclass
class Stage3Data:
    examples: list[SyntheticExample]
    corpus: Corpus


# ------------------------------------------------------------------ file IO


def save_pairs(pairs: Iterable[PairExample], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(
                {"query": p.query, "positive": p.positive,
                 "hard_negatives": list(p.hard_negatives)},
                ensure_ascii=False, sort_keys=True) + "\n")


def load_pairs(path: str | Path) -> list[PairExample]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(PairExample(rec["query"], rec["positive"],
                                   tuple(rec["hard_negatives"])))
    return out


def save_pseudodocs(examples: Iterable[PseudoDocExample], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for e in examples:
            fh.write(json.dumps(
                {"query": e.query, "passages": list(e.passages),
                 "positive_index": e.positive_index,
                 "span": list(e.positive_sentence_span),
                 "budget_tokens": e.budget_tokens},
                ensure_ascii=False, sort_keys=True) + "\n")


def load_pseudodocs(path: str | Path) -> list[PseudoDocExample]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(PseudoDocExample(
                rec["query"], tuple(rec["passages"]), rec["positive_index"],
                tuple(rec["span"]), rec["budget_tokens"]))
    return out


def save_synthetic(examples: Iterable[SyntheticExample], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for e in examples:
            fh.write(json.dumps(
                {"doc_id": e.doc_id, "query": e.query, "span": list(e.span),
                 "background": list(e.background)},
                ensure_ascii=False, sort_keys=True) + "\n")


def load_synthetic(path: str | Path) -> list[SyntheticExample]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(SyntheticExample(rec["doc_id"], rec["query"],
                                        tuple(rec["span"]), tuple(rec["background"])))
    return out


# ------------------------------------------------------- hard-negative mining


def content_words(text: str, stopwords: frozenset[str] | set[str]) -> set[str]:
    out = set()
    for w in text.split():
        w = w.rstrip(".!?;,").lower()
        if w and w not in stopwords:
            out.add(w)
    return out


def mine_hard_negatives(
    positive: str,
    pool: Sequence[str],
    k: int,
    stopwords: frozenset[str] | set[str],
) -> list[str]:
    """Top-k pool passages by lexical overlap with the positive.

    Overlap is |shared content words| / sqrt(|a| * |b|); the positive itself
    (by exact text) is excluded.  Ties break by pool order for determinism.
    """
    target = content_words(positive, stopwords)
    scored = []
    for i, cand in enumerate(pool):
        if cand == positive:
            continue
        cw = content_words(cand, stopwords)
        if not cw or not target:
            score = 0.0
        else:
            score = len(target & cw) / float(len(target) * len(cw)) ** 0.5
        scored.append((-score, i))
    scored.sort()
    return [pool[i] for _, i in scored[:k]]
