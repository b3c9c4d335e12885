"""Sentence -> fixed-shape embedding matrix.

Every constraint sentence becomes a ``SENTENCE_LEN x EMBED_DIM`` matrix:
one embedding row per token, zero rows as padding.  Two providers exist: a
deterministic hashed provider (unit-norm vectors seeded per token) so the
full pipeline runs without any pretrained file, and a loader for the
standard binary word-vector format.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import normalize_tokens

SENTENCE_LEN = 20
EMBED_DIM = 300


@dataclass(frozen=True)
class SentenceMatrix:
    values: np.ndarray  # (SENTENCE_LEN, dim) float32
    valid_length: int

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ValueError("sentence matrix must be 2-D")
        if not 0 <= self.valid_length <= self.values.shape[0]:
            raise ValueError("valid_length out of range")


class HashedEmbeddingProvider:
    """Deterministic per-token embeddings without any external file.

    Each token hashes to an RNG seed which draws a unit-norm vector, so
    identical tokens always map to identical vectors and the provider is
    total over any vocabulary.
    """

    def __init__(self, dimension: int = EMBED_DIM):
        self.dimension = dimension
        self._cache: dict[str, np.ndarray] = {}

    def lookup(self, word: str) -> np.ndarray:
        vec = self._cache.get(word)
        if vec is None:
            seed = int.from_bytes(hashlib.sha256(word.encode()).digest()[:8], "little")
            vec = np.random.default_rng(seed).standard_normal(self.dimension)
            vec = (vec / np.linalg.norm(vec)).astype(np.float32)
            self._cache[word] = vec
        return vec


class KeyedVectorsProvider:
    """Pretrained embeddings loaded from the binary word-vector format.

    Out-of-vocabulary tokens map to the zero vector, distinguishable from
    padding only through ``valid_length``.
    """

    def __init__(self, vectors: dict[str, np.ndarray], dimension: int):
        self.vectors = vectors
        self.dimension = dimension
        self._zero = np.zeros(dimension, dtype=np.float32)

    def lookup(self, word: str) -> np.ndarray:
        return self.vectors.get(word, self._zero)

    @classmethod
    def load_word2vec_binary(cls, path, limit: int | None = None) -> "KeyedVectorsProvider":
        vectors: dict[str, np.ndarray] = {}
        with open(path, "rb") as fh:
            header = fh.readline().split()
            vocab_size, dim = int(header[0]), int(header[1])
            if limit is not None:
                vocab_size = min(vocab_size, limit)
            vec_bytes = dim * 4
            for _ in range(vocab_size):
                word = bytearray()
                while True:
                    ch = fh.read(1)
                    if ch in (b" ", b""):
                        break
                    if ch != b"\n":
                        word.extend(ch)
                raw = fh.read(vec_bytes)
                if len(raw) != vec_bytes:
                    raise ValueError("truncated vector file")
                vectors[word.decode("utf-8", errors="replace")] = np.frombuffer(
                    raw, dtype=np.float32
                ).copy()
        return cls(vectors, dim)

    @staticmethod
    def save_word2vec_binary(path, vectors: dict[str, np.ndarray]) -> None:
        dim = len(next(iter(vectors.values())))
        with open(path, "wb") as fh:
            fh.write(f"{len(vectors)} {dim}\n".encode())
            for word, vec in vectors.items():
                fh.write(word.encode() + b" ")
                fh.write(struct.pack(f"<{dim}f", *np.asarray(vec, dtype=np.float32)))


def encode_sentence(
    sentence: str, provider, max_len: int = SENTENCE_LEN
) -> SentenceMatrix:
    """Embed a sentence into a zero-padded fixed-length matrix.

    Sentences longer than ``max_len`` keep their first ``max_len`` tokens.
    """
    tokens = normalize_tokens(sentence)[:max_len]
    values = np.zeros((max_len, provider.dimension), dtype=np.float32)
    for i, tok in enumerate(tokens):
        values[i] = provider.lookup(tok)
    return SentenceMatrix(values=values, valid_length=len(tokens))
