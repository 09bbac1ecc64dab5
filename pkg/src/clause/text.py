"""Tokenization and signed feature-hashing embeddings."""

from __future__ import annotations

import hashlib
import re
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DIM = 128

_TOKEN_RE = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.casefold())


def _as_tokens(tokens: str | Iterable[str]) -> list[str]:
    if isinstance(tokens, str):
        return tokenize(tokens)
    out: list[str] = []
    for tok in tokens:
        out.extend(tokenize(tok))
    return out


@lru_cache(maxsize=200_000)
def _bucket_and_sign(token: str, dim: int) -> tuple[int, float]:
    # Two independent keyed digests: one for the bucket, one for the sign.
    raw = token.encode("utf-8")
    idx = int.from_bytes(hashlib.blake2b(raw, digest_size=8, person=b"clause-bkt").digest(), "little")
    sgn = hashlib.blake2b(raw, digest_size=1, person=b"clause-sgn").digest()[0] & 1
    return idx % dim, 1.0 if sgn else -1.0


def embed_text(tokens: str | Iterable[str], dim: int = DEFAULT_DIM) -> np.ndarray:
    """Hash case-folded word tokens into ``dim`` signed bins and L2-normalize.

    Accepts a raw string or a token sequence. Empty input gives the zero vector.
    """
    vec = np.zeros(dim)
    for tok in _as_tokens(tokens):
        idx, sign = _bucket_and_sign(tok, dim)
        vec[idx] += sign
    norm = np.linalg.norm(vec)
    if norm > 0.0:
        vec /= norm
    return vec


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def sim01(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine mapped to [0, 1]; 0.5 when either vector is zero."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.5
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(0.0, 0.5 * (1.0 + c)))


def pool(vec: np.ndarray, out_dim: int = 16) -> np.ndarray:
    """Average contiguous folds so a ``d``-vector becomes ``out_dim`` values."""
    return vec.reshape(out_dim, -1).mean(axis=1)


def whitespace_count(text: str) -> int:
    return len(text.split())


def contains_subsequence(haystack: Sequence[str], needle: Sequence[str]) -> bool:
    n = len(needle)
    if n == 0:
        return False
    return any(tuple(haystack[i:i + n]) == tuple(needle) for i in range(len(haystack) - n + 1))
