"""Whitespace word-level tokenizer with reserved control tokens.

Tokenization is deliberately simple: the text is whitespace-normalized and
split on single spaces, so every token maps back to exactly one word and
``detokenize(tokenize(text))`` reproduces the normalized text whenever all
words are in-vocabulary.  Control tokens (PAD/UNK/BOS/LMK) live outside the
natural-word lookup table, so plain text can never tokenize to one of them.
"""

from __future__ import annotations

from collections import Counter
from typing import Iterable, Sequence

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
LMK_ID = 3

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
BOS_TOKEN = "<bos>"
LMK_TOKEN = "<lmk>"

SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, LMK_TOKEN)

MIN_VOCAB_SIZE = 8


def normalize_whitespace(text: str) -> str:
    """Collapse every whitespace run to a single space and trim the ends."""
    return " ".join(text.split())


class Tokenizer:
    """Maps words to integer ids over a fixed vocabulary.

    Ids 0..3 are the control tokens; natural words start at id 4.  Unknown
    words map to UNK.  The same instance is shared by segmentation, encoding,
    and every file format that stores a vocabulary.
    """

    def __init__(self, words: Sequence[str]):
        if len(set(words)) != len(words):
            raise ValueError("duplicate words in vocabulary")
        for w in words:
            if w in SPECIAL_TOKENS:
                raise ValueError(f"control token {w!r} may not appear as a natural word")
            if not w or any(ch.isspace() for ch in w):
                raise ValueError(f"invalid vocabulary word: {w!r}")
        self._id_to_token: list[str] = list(SPECIAL_TOKENS) + list(words)
        if len(self._id_to_token) < MIN_VOCAB_SIZE:
            raise ValueError(
                f"vocabulary size {len(self._id_to_token)} below minimum {MIN_VOCAB_SIZE}"
            )
        # Natural words only: looking up a control token string yields UNK.
        self._token_to_id = {w: i + len(SPECIAL_TOKENS) for i, w in enumerate(words)}

    @classmethod
    def train(cls, texts: Iterable[str], max_size: int = 8192) -> "Tokenizer":
        """Build a vocabulary from the most frequent words in ``texts``.

        ``max_size`` caps the total vocabulary including the 4 control tokens.
        Ties are broken alphabetically so the result is deterministic.
        """
        if max_size < MIN_VOCAB_SIZE:
            raise ValueError(f"max_size must be at least {MIN_VOCAB_SIZE}")
        counts: Counter[str] = Counter()
        for text in texts:
            counts.update(
                w for w in normalize_whitespace(text).split(" ") if w and w not in SPECIAL_TOKENS
            )
        budget = max_size - len(SPECIAL_TOKENS)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([w for w, _ in ranked[:budget]])

    @property
    def vocab_size(self) -> int:
        return len(self._id_to_token)

    @property
    def words(self) -> list[str]:
        """Natural words in id order (excludes control tokens)."""
        return self._id_to_token[len(SPECIAL_TOKENS):]

    def pretokenize(self, text: str) -> list[str]:
        """Split into the word pieces that ``tokenize`` will look up."""
        norm = normalize_whitespace(text)
        return norm.split(" ") if norm else []

    def tokenize(self, text: str) -> list[int]:
        return [self._token_to_id.get(w, UNK_ID) for w in self.pretokenize(text)]

    def token_count(self, text: str) -> int:
        return len(self.pretokenize(text))

    def id_to_token(self, token_id: int) -> str:
        return self._id_to_token[token_id]

    def detokenize(self, ids: Iterable[int]) -> str:
        """Inverse of ``tokenize`` up to UNK substitution; drops control tokens
        other than UNK."""
        out = []
        for i in ids:
            if i in (PAD_ID, BOS_ID, LMK_ID):
                continue
            out.append(self._id_to_token[i])
        return " ".join(out)
