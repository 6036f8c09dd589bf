import numpy as np
import pytest

from lmkret.corpus import build_landmarked_context, segment_sentences
from lmkret.encoder import EncoderConfig, EncoderModel
from lmkret.tokenizer import Tokenizer

WORDS = (
    [f"w{i}" for i in range(60)]
    + [f"w{i}." for i in range(60)]
    + ["the", "a", "cat", "sat", "mat.", "dog", "ran.", "A.", "B!", "C?"]
)


@pytest.fixture(scope="session")
def tok():
    return Tokenizer(WORDS)


@pytest.fixture(scope="session")
def tiny_model(tok):
    cfg = EncoderConfig(vocab_size=tok.vocab_size, n_layers=1, d_model=8,
                        n_heads=2, d_ff=16, max_window=64)
    return EncoderModel(cfg, seed=0, dtype=np.float64)


@pytest.fixture(scope="session")
def small_model(tok):
    cfg = EncoderConfig(vocab_size=tok.vocab_size, n_layers=2, d_model=16,
                        n_heads=2, d_ff=32, max_window=48)
    return EncoderModel(cfg, seed=1, dtype=np.float64)


def make_context(tok, n_sentences, words_per_sentence=4, seed=0):
    """Random landmarked context over the shared test vocabulary."""
    rng = np.random.default_rng(seed)
    sents = []
    for _ in range(n_sentences):
        k = words_per_sentence if isinstance(words_per_sentence, int) else int(
            rng.integers(words_per_sentence[0], words_per_sentence[1] + 1))
        words = [f"w{rng.integers(0, 60)}" for _ in range(k)]
        sents.append(" ".join(words[:-1] + [words[-1] + "."]))
    text = " ".join(sents)
    return build_landmarked_context(segment_sentences(text, tok), tok)
