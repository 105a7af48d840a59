"""Shared toy transduction task: reverse the sentence and substitute tokens.

Words are consonant+vowel pairs. The target is the reversed source with
each word's vowel rotated, except that a word sharing its vowel with its
left source neighbour gets its consonant rotated instead, so the mapping
needs neighbourhood attention. Training targets can carry label noise;
validation and test stay clean.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from simcut.data import build_vocab, encode_pairs, train_bpe

CONSONANTS = list("bcdfghjk")
VOWELS = list("aeiou")
LEXICON = [c + v for c in CONSONANTS for v in VOWELS]


def _rotate_vowel(word: str) -> str:
    return word[0] + VOWELS[(VOWELS.index(word[1]) + 1) % len(VOWELS)]


def _rotate_consonant(word: str) -> str:
    return CONSONANTS[(CONSONANTS.index(word[0]) + 1) % len(CONSONANTS)] + word[1]


def transduce(words: list[str]) -> list[str]:
    out = []
    for j in range(len(words)):
        i = len(words) - 1 - j
        w = words[i]
        if i > 0 and words[i - 1][1] == w[1]:
            out.append(_rotate_consonant(w))
        else:
            out.append(_rotate_vowel(w))
    return out


def toy_corpus(n_train: int, n_val: int, n_test: int, seed: int = 0,
               noise: float = 0.0) -> dict[str, list[tuple[str, str]]]:
    """Text pair splits for the reversal task; noise corrupts train targets."""
    rng = np.random.default_rng(seed)

    def sample_split(n, noisy):
        pairs = []
        for _ in range(n):
            length = int(rng.integers(3, 9))
            words = [LEXICON[int(rng.integers(len(LEXICON)))] for _ in range(length)]
            target = transduce(words)
            if noisy and noise > 0.0:
                target = [LEXICON[int(rng.integers(len(LEXICON)))]
                          if rng.random() < noise else w for w in target]
            pairs.append((" ".join(words), " ".join(target)))
        return pairs

    return {"train": sample_split(n_train, True),
            "valid": sample_split(n_val, False),
            "test": sample_split(n_test, False)}


def toy_dataset(n_train: int, n_val: int, n_test: int, seed: int = 0,
                noise: float = 0.0):
    """(vocab, merges, splits) with splits already encoded to id pairs."""
    corpus = toy_corpus(n_train, n_val, n_test, seed=seed, noise=noise)
    words = [w for s, t in corpus["train"] for w in (s + " " + t).split()]
    merges = train_bpe(words, 60)
    vocab = build_vocab(words, merges)
    splits = {name: encode_pairs(pairs, merges, vocab)
              for name, pairs in corpus.items()}
    return vocab, merges, splits


@pytest.fixture(scope="session")
def small_toy():
    """Small fast dataset for trainer unit tests."""
    return toy_dataset(120, 30, 30, seed=5)
