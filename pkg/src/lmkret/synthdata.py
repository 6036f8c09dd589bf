"""Deterministic synthetic text generation for training and evaluation.

Builds pseudo-word corpora with topical structure: content words cluster
into topics, sentences weave a few topic words between filler words, and
documents are runs of topic blocks.  Queries sample content words from a
target span, so retrieval requires matching specific words in context,
while same-topic passages act as natural hard negatives.

Content words never take sentence-final position (a filler word carries the
terminal period), so query words and passage words are the same tokens under
whitespace tokenization.

A second profile ("shifted") draws from held-out topic clusters whose words
occur in training documents only as background, giving an out-of-domain
query distribution over a tokenizable vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, Document
from .data import PairExample, mine_hard_negatives

_CONSONANTS = list("bcdfgklmnprstvz")
_VOWELS = list("aeiou")

FILLER_LEAD = ["the", "a", "one", "this", "that", "some", "another"]
FILLER_MID = ["of", "with", "near", "under", "beside", "from", "about", "toward"]
FILLER_END = ["here", "there", "now", "then", "again", "once", "also"]

QUERY_TEMPLATES = [
    "which part mentions",
    "find the passage about",
    "where does the text discuss",
    "what section covers",
]

STOPWORDS = frozenset(
    FILLER_LEAD + FILLER_MID + FILLER_END
    + [w + "." for w in FILLER_END]
    + [w for t in QUERY_TEMPLATES for w in t.split(" ")]
)


@dataclass
class SynthVocabulary:
    topics: list[list[str]]  # content words grouped by topic
    n_train_topics: int      # topics 0..n_train_topics-1 drive training targets

    @property
    def all_content_words(self) -> list[str]:
        return [w for t in self.topics for w in t]

    def train_topic_ids(self) -> range:
        return range(self.n_train_topics)

    def shifted_topic_ids(self) -> range:
        return range(self.n_train_topics, len(self.topics))


def _pseudo_word(rng: np.random.Generator, n_syllables: int) -> str:
    return "".join(
        _CONSONANTS[rng.integers(0, len(_CONSONANTS))] + _VOWELS[rng.integers(0, len(_VOWELS))]
        for _ in range(n_syllables)
    )


def make_vocabulary(
    rng: np.random.Generator,
    n_topics: int = 120,
    words_per_topic: int = 20,
    held_out_topics: int = 20,
) -> SynthVocabulary:
    """Generate unique pseudo-words grouped into topics.

    The last ``held_out_topics`` topics are reserved for the shifted
    (out-of-domain) evaluation profile.
    """
    seen: set[str] = set(STOPWORDS)
    words: list[str] = []
    while len(words) < n_topics * words_per_topic:
        w = _pseudo_word(rng, int(rng.integers(2, 5)))
        if w not in seen:
            seen.add(w)
            words.append(w)
    topics = [
        words[i * words_per_topic : (i + 1) * words_per_topic] for i in range(n_topics)
    ]
    return SynthVocabulary(topics=topics, n_train_topics=n_topics - held_out_topics)


def make_sentence(
    rng: np.random.Generator,
    vocab: SynthVocabulary,
    topic_id: int,
    off_topic_prob: float = 0.15,
) -> str:
    """One sentence: 2-4 topic words among filler, ending in a filler word."""
    k = int(rng.integers(2, 5))
    topic = vocab.topics[topic_id]
    content = [topic[i] for i in rng.choice(len(topic), size=k, replace=False)]
    if rng.random() < off_topic_prob:
        other = int(rng.integers(0, len(vocab.topics)))
        content[int(rng.integers(0, k))] = vocab.topics[other][
            int(rng.integers(0, len(vocab.topics[other])))
        ]
    words = [FILLER_LEAD[rng.integers(0, len(FILLER_LEAD))]]
    for c in content:
        words.append(c)
        if rng.random() < 0.4:
            words.append(FILLER_MID[rng.integers(0, len(FILLER_MID))])
    words.append(FILLER_END[rng.integers(0, len(FILLER_END))] + ".")
    return " ".join(words)


def make_passage(
    rng: np.random.Generator,
    vocab: SynthVocabulary,
    topic_id: int,
    n_sentences: tuple[int, int] = (1, 3),
) -> str:
    k = int(rng.integers(n_sentences[0], n_sentences[1] + 1))
    return " ".join(make_sentence(rng, vocab, topic_id) for _ in range(k))


def make_passage_pool(
    rng: np.random.Generator,
    vocab: SynthVocabulary,
    count: int,
    topic_ids: range | list[int] | None = None,
    n_sentences: tuple[int, int] = (1, 3),
) -> list[tuple[int, str]]:
    """(topic_id, text) pairs with topics cycled for even coverage."""
    ids = list(topic_ids if topic_ids is not None else vocab.train_topic_ids())
    pool = []
    for i in range(count):
        t = ids[i % len(ids)]
        pool.append((t, make_passage(rng, vocab, t, n_sentences)))
    return pool


def make_long_documents(
    rng: np.random.Generator,
    vocab: SynthVocabulary,
    count: int,
    sentences_per_doc: tuple[int, int] = (30, 60),
    block_sentences: tuple[int, int] = (3, 8),
    topic_ids: range | list[int] | None = None,
    include_shifted_blocks: bool = True,
    doc_prefix: str = "doc",
) -> Corpus:
    """Documents made of consecutive topic blocks (spans are meaningful).

    When ``include_shifted_blocks`` is set, held-out-topic blocks appear as
    background so their words participate in training only as negatives.
    """
    ids = list(topic_ids if topic_ids is not None else vocab.train_topic_ids())
    shifted = list(vocab.shifted_topic_ids())
    docs = []
    for di in range(count):
        target = int(rng.integers(sentences_per_doc[0], sentences_per_doc[1] + 1))
        sents: list[str] = []
        while len(sents) < target:
            if include_shifted_blocks and shifted and rng.random() < 0.15:
                t = shifted[int(rng.integers(0, len(shifted)))]
            else:
                t = ids[int(rng.integers(0, len(ids)))]
            for _ in range(int(rng.integers(block_sentences[0], block_sentences[1] + 1))):
                sents.append(make_sentence(rng, vocab, t))
                if len(sents) >= target:
                    break
        docs.append(Document(doc_id=f"{doc_prefix}{di:05d}", text=" ".join(sents)))
    return Corpus(documents=docs, source="synthetic")


def rule_based_query(
    span_text: str,
    rng: np.random.Generator,
    max_words: int = 4,
    stopwords: frozenset[str] = STOPWORDS,
) -> str:
    """Offline query synthesis: sampled content words, lightly shuffled,
    behind an interrogative template."""
    words = []
    for w in span_text.split():
        w = w.rstrip(".!?;,")
        if w and w not in stopwords:
            words.append(w)
    if not words:
        raise ValueError(f"span has no content words: {span_text!r}")
    k = min(max_words, len(words))
    picked = [words[i] for i in sorted(rng.choice(len(words), size=k, replace=False))]
    if len(picked) > 1 and rng.random() < 0.5:
        j = int(rng.integers(0, len(picked) - 1))
        picked[j], picked[j + 1] = picked[j + 1], picked[j]
    template = QUERY_TEMPLATES[int(rng.integers(0, len(QUERY_TEMPLATES)))]
    return f"{template} {' '.join(picked)}"


def make_training_pairs(
    rng: np.random.Generator,
    pool: list[tuple[int, str]],
    count: int,
    negatives_per_pair: int = 16,
    stopwords: frozenset[str] = STOPWORDS,
) -> list[PairExample]:
    """Query/positive pairs over a passage pool, negatives mined lexically.

    Mining restricts to a same-topic candidate set plus a random sample, so
    the lexical-overlap scorer sees both hard and easy material without a
    full pool scan per pair.
    """
    by_topic: dict[int, list[int]] = {}
    for i, (t, _) in enumerate(pool):
        by_topic.setdefault(t, []).append(i)
    texts = [p for _, p in pool]
    pairs = []
    order = rng.permutation(len(pool))
    for pi in range(count):
        idx = int(order[pi % len(pool)])
        topic, positive = pool[idx]
        query = rule_based_query(positive, rng, stopwords=stopwords)
        same_topic = [j for j in by_topic[topic] if j != idx]
        extra = rng.choice(len(pool), size=min(len(pool), 4 * negatives_per_pair), replace=False)
        cand_ids = sorted(set(same_topic) | {int(e) for e in extra if int(e) != idx})
        negs = mine_hard_negatives(
            positive, [texts[j] for j in cand_ids], negatives_per_pair, stopwords
        )
        pairs.append(PairExample(query=query, positive=positive, hard_negatives=tuple(negs)))
    return pairs


def corpus_texts_for_tokenizer(*sources) -> list[str]:
    """Collect every text a tokenizer must cover (corpora, pools, templates)."""
    texts: list[str] = [" ".join(QUERY_TEMPLATES)]
    texts.append(" ".join(sorted(STOPWORDS)))
    for src in sources:
        if isinstance(src, Corpus):
            texts.extend(doc.text for doc in src.documents)
        elif isinstance(src, str):
            texts.append(src)
        else:
            for item in src:
                texts.append(item[1] if isinstance(item, tuple) else str(item))
    return texts
