"""Deterministic synthetic text corpus.

Generates pseudo-English prose from a seeded RNG: a Zipf-weighted invented
vocabulary mixed with common English function words, sentence/paragraph
structure, and light punctuation. The output is plain ASCII, authored by
this generator and dedicated to the public domain, so it ships with the
repository (``data/corpus.txt``) without licensing baggage.

The default corpus is ~1.2e5 bytes; byte-level models learn word shapes,
whitespace rhythm and frequent-word spellings from it, which gives dense,
sparse and compensated models measurably different perplexities.
"""

from __future__ import annotations

import sys

import numpy as np

DEFAULT_SEED = 1337
DEFAULT_SIZE = 120_000

_ONSETS = ("b c d f g h k l m n p r s t v w z br ch cl dr fl gr pl pr "
           "sh sl sp st str th tr").split()
_VOWELS = "a e i o u a e i o u ai ea ee oo ou".split()
_CODAS = ["", "", "", "n", "r", "s", "t", "l", "d", "m", "k", "ng", "st", "nd"]

_FUNCTION_WORDS = [
    "the", "and", "of", "to", "a", "in", "is", "that", "it", "was",
    "for", "on", "as", "with", "be", "at", "by", "but", "not", "or",
]


def _zipf_probs(n: int, shift: float = 2.7, exponent: float = 1.05) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = 1.0 / (ranks + shift) ** exponent
    return w / w.sum()


def _make_word(rng: np.random.Generator) -> str:
    n_syllables = int(rng.choice([1, 2, 3], p=[0.50, 0.38, 0.12]))
    parts = []
    for _ in range(n_syllables):
        parts.append(str(rng.choice(_ONSETS)))
        parts.append(str(rng.choice(_VOWELS)))
        parts.append(str(rng.choice(_CODAS)))
    return "".join(parts)


def build_vocabulary(rng: np.random.Generator, n_words: int = 400) -> list[str]:
    seen: set[str] = set(_FUNCTION_WORDS)
    vocab: list[str] = []
    while len(vocab) < n_words:
        word = _make_word(rng)
        if 2 <= len(word) <= 12 and word not in seen:
            seen.add(word)
            vocab.append(word)
    return vocab


def generate(size: int, seed: int) -> bytes:
    """Exactly `size` bytes of deterministic pseudo-English text."""
    rng = np.random.default_rng(seed)
    vocab = build_vocabulary(rng)
    content_p = _zipf_probs(len(vocab))
    function_p = _zipf_probs(len(_FUNCTION_WORDS), shift=1.0, exponent=0.9)

    pieces: list[str] = []
    total = 0
    sentences_in_paragraph = 0
    paragraph_len = int(rng.integers(3, 8))
    while total < size:
        n_words = int(rng.integers(4, 13))
        comma_at = int(rng.integers(2, n_words - 1)) if (n_words > 4 and rng.random() < 0.3) else -1
        words = []
        for i in range(n_words):
            if rng.random() < 0.35:
                w = _FUNCTION_WORDS[int(rng.choice(len(_FUNCTION_WORDS), p=function_p))]
            else:
                w = vocab[int(rng.choice(len(vocab), p=content_p))]
            if i == comma_at:
                w += ","
            words.append(w)
        sentence = " ".join(words).capitalize() + "."
        sentences_in_paragraph += 1
        if sentences_in_paragraph >= paragraph_len:
            sentence += "\n"
            sentences_in_paragraph = 0
            paragraph_len = int(rng.integers(3, 8))
        else:
            sentence += " "
        pieces.append(sentence)
        total += len(sentence)
    return "".join(pieces).encode("ascii")[:size]


def default_corpus(size: int = DEFAULT_SIZE, seed: int = DEFAULT_SEED) -> bytes:
    return generate(size, seed)


def main(argv: list[str] | None = None) -> int:
    args = sys.argv[1:] if argv is None else argv
    if len(args) != 1:
        print("usage: python -m spon.corpus OUTPUT_PATH", file=sys.stderr)
        return 2
    with open(args[0], "wb") as fh:
        fh.write(default_corpus())
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
