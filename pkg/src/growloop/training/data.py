"""Byte-level corpus handling and a deterministic synthetic text generator.

Text is consumed as raw bytes with vocab 256. The validation split is the
contiguous tail of the corpus so train and validation windows can never
overlap. Windows are non-overlapping max_seq_len slices indexed from 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..engine.rng import make_generator

MIN_WINDOWS_FACTOR = 100


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Corpus:
    train: np.ndarray  # uint8
    validation: np.ndarray  # uint8
    max_seq_len: int

    @property
    def n_windows(self) -> int:
        return len(self.train) // self.max_seq_len

    def window(self, index: int) -> np.ndarray:
        if not 0 <= index < self.n_windows:
            raise IndexError(f"window {index} out of range (have {self.n_windows})")
        start = index * self.max_seq_len
        return self.train[start : start + self.max_seq_len].astype(np.int64)

    def sample_batch(self, seed: int, step: int, batch_size: int) -> np.ndarray:
        """Batch of windows for one step, keyed by (seed, step) alone."""
        rng = make_generator(seed, "batch", step)
        indices = rng.integers(0, self.n_windows, size=batch_size)
        return np.stack([self.window(int(i)) for i in indices])

    def validation_windows(self, eval_len: int | None = None) -> np.ndarray:
        length = self.max_seq_len if eval_len is None else eval_len
        count = len(self.validation) // length
        if count == 0:
            raise CorpusError(
                f"validation split too small for windows of {length} bytes"
            )
        usable = self.validation[: count * length]
        return usable.reshape(count, length).astype(np.int64)


def ingest_corpus(
    data: bytes, max_seq_len: int, train_fraction: float = 0.9
) -> Corpus:
    if not 0.0 < train_fraction < 1.0:
        raise CorpusError("train_fraction must be in (0, 1)")
    if len(data) < MIN_WINDOWS_FACTOR * max_seq_len:
        raise CorpusError(
            f"corpus has {len(data)} bytes; need at least "
            f"{MIN_WINDOWS_FACTOR * max_seq_len}"
        )
    raw = np.frombuffer(data, dtype=np.uint8)
    split = int(len(raw) * train_fraction)
    return Corpus(
        train=raw[:split], validation=raw[split:], max_seq_len=max_seq_len
    )


def load_corpus_file(path: str, max_seq_len: int, train_fraction: float = 0.9) -> Corpus:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    return ingest_corpus(data, max_seq_len, train_fraction)


_ONSETS = ("b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t",
           "v", "w", "br", "st", "tr", "gr", "pl", "ch", "sh", "th", "")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ea", "ou", "ee")
_CODAS = ("", "", "n", "r", "s", "t", "l", "m", "nd", "st", "ck", "ng")


def _build_lexicon(rng, n_words: int) -> list[str]:
    words: list[str] = []
    seen = set()
    while len(words) < n_words:
        syllables = int(rng.integers(1, 4))
        parts = []
        for _ in range(syllables):
            parts.append(_ONSETS[int(rng.integers(0, len(_ONSETS)))])
            parts.append(_VOWELS[int(rng.integers(0, len(_VOWELS)))])
            parts.append(_CODAS[int(rng.integers(0, len(_CODAS)))])
        word = "".join(parts)
        if 2 <= len(word) <= 12 and word not in seen:
            seen.add(word)
            words.append(word)
    return words


def synthesize_corpus(n_bytes: int, seed: int) -> bytes:
    """Deterministic pseudo-English prose, at least n_bytes long.

    Word shapes come from a syllable grammar and word frequencies follow a
    Zipf-like law, so the byte stream has natural-text-like statistics
    without any external source.
    """
    rng = make_generator(seed, "corpus")
    lexicon = _build_lexicon(rng, 800)
    ranks = np.arange(1, len(lexicon) + 1, dtype=np.float64)
    weights = 1.0 / ranks**1.1
    weights /= weights.sum()

    pieces: list[str] = []
    total = 0
    sentence_in_paragraph = 0
    while total < n_bytes:
        n_words = int(rng.integers(4, 15))
        idx = rng.choice(len(lexicon), size=n_words, p=weights)
        words = [lexicon[int(i)] for i in idx]
        words[0] = words[0].capitalize()
        mark = "?" if rng.random() < 0.08 else "."
        sentence = " ".join(words) + mark
        sentence_in_paragraph += 1
        if sentence_in_paragraph >= int(rng.integers(3, 8)):
            sentence += "\n\n"
            sentence_in_paragraph = 0
        else:
            sentence += " "
        pieces.append(sentence)
        total += len(sentence)
    return "".join(pieces).encode("ascii")
