"""Condition labels ("EOL_ECL"), the label vocabulary, the trainable
embedding table and nearest-label matching for unseen conditions."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DataError, LabelLookupError, ShapeError, StateError
from .numcore import Rng

DEFAULT_MATCH_WEIGHT = 0.5
EOL_DOMINANT_MATCH_WEIGHT = 0.9

_LABEL_RE = re.compile(r"^([0-9]+)_([0-9]+)$")


@dataclass(frozen=True, order=True)
class LabelKey:
    """A (EOL, ECL) condition. Remaining life is ``eol - ecl``."""

    eol: int
    ecl: int

    def __post_init__(self):
        if int(self.eol) != self.eol or int(self.ecl) != self.ecl:
            raise DataError(f"label fields must be integers: {self.eol!r}, {self.ecl!r}")
        object.__setattr__(self, "eol", int(self.eol))
        object.__setattr__(self, "ecl", int(self.ecl))
        if self.eol < 1 or self.ecl < 1:
            raise DataError(f"EOL and ECL must be positive, got {self.eol}_{self.ecl}")
        if self.ecl > self.eol:
            raise DataError(f"ECL {self.ecl} exceeds EOL {self.eol}")

    @classmethod
    def parse(cls, text: str) -> "LabelKey":
        m = _LABEL_RE.match(text.strip()) if isinstance(text, str) else None
        if m is None:
            raise DataError(f"malformed label {text!r}; expected '<EOL>_<ECL>'")
        return cls(int(m.group(1)), int(m.group(2)))

    @property
    def rul(self) -> int:
        return self.eol - self.ecl

    def __str__(self) -> str:
        return f"{self.eol}_{self.ecl}"


def _as_key(label) -> LabelKey:
    if isinstance(label, LabelKey):
        return label
    if isinstance(label, str):
        return LabelKey.parse(label)
    eol, ecl = label
    return LabelKey(eol, ecl)


class LabelVocab:
    """Ordered, immutable bijection between labels and ``0..N-1``."""

    def __init__(self, keys: Iterable):
        self._keys = tuple(_as_key(k) for k in keys)
        self._index = {k: i for i, k in enumerate(self._keys)}
        if len(self._index) != len(self._keys):
            raise DataError("vocabulary keys must be distinct")
        self._eols = np.array([k.eol for k in self._keys], dtype=np.float64)
        self._ecls = np.array([k.ecl for k in self._keys], dtype=np.float64)

    @property
    def keys(self) -> tuple:
        return self._keys

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, key) -> bool:
        return _as_key(key) in self._index

    def __iter__(self):
        return iter(self._keys)

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelVocab) and self._keys == other._keys

    def index(self, key) -> int:
        key = _as_key(key)
        try:
            return self._index[key]
        except KeyError:
            raise LabelLookupError(f"label {key} is not in the vocabulary") from None

    def indices(self, keys) -> np.ndarray:
        return np.array([self.index(k) for k in keys], dtype=np.int64)

    def key(self, i: int) -> LabelKey:
        return self._keys[i]

    def distances(self, query, weight: float = DEFAULT_MATCH_WEIGHT) -> np.ndarray:
        q = _as_key(query)
        return weight * np.abs(self._eols - q.eol) + (1.0 - weight) * np.abs(self._ecls - q.ecl)


def build_vocab(labels: Iterable) -> LabelVocab:
    """Distinct labels in first-occurrence order."""
    seen = {}
    for label in labels:
        seen.setdefault(_as_key(label), None)
    if not seen:
        raise DataError("cannot build a vocabulary from an empty label list")
    return LabelVocab(seen)


def label_distance(a, b, weight: float = DEFAULT_MATCH_WEIGHT) -> float:
    a, b = _as_key(a), _as_key(b)
    return weight * abs(a.eol - b.eol) + (1.0 - weight) * abs(a.ecl - b.ecl)


def match_similar(vocab: LabelVocab, query, weight: float = DEFAULT_MATCH_WEIGHT) -> LabelKey:
    """Closest vocabulary label under the weighted EOL/ECL distance.

    Ties go to the lowest vocabulary index.
    """
    if len(vocab) == 0:
        raise StateError("cannot match against an empty vocabulary")
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"weight must lie in [0, 1], got {weight}")
    q = _as_key(query)
    if q in vocab:
        return q
    return vocab.key(int(np.argmin(vocab.distances(q, weight))))


def resolve_labels(vocab: LabelVocab, labels, weight: float = DEFAULT_MATCH_WEIGHT):
    """Map each label to itself if known, else to its nearest match.

    Returns ``(indices, matched)`` where ``matched`` lists ``(query, used)``
    pairs for labels that had to be substituted.
    """
    cache = {}
    idx = np.empty(len(labels), dtype=np.int64)
    matched = []
    for i, label in enumerate(labels):
        key = _as_key(label)
        if key not in cache:
            used = match_similar(vocab, key, weight)
            cache[key] = vocab.index(used)
            if used != key:
                matched.append((key, used))
        idx[i] = cache[key]
    return idx, matched


class EmbeddingTable:
    """Trainable ``N x D`` matrix; row ``i`` is the condition vector of label ``i``."""

    def __init__(self, weight: np.ndarray):
        weight = np.asarray(weight, dtype=np.float64)
        if weight.ndim != 2:
            raise ShapeError(f"embedding matrix must be 2-D, got {weight.shape}")
        self.weight = weight

    @classmethod
    def init(cls, n: int, dim: int, rng: Rng) -> "EmbeddingTable":
        return cls(rng.normal((n, dim)))

    @property
    def num_embeddings(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def lookup(self, indices) -> np.ndarray:
        """Rows for ``indices`` laid out as columns, shape ``(D, len(indices))``."""
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= self.num_embeddings):
            raise LabelLookupError("embedding index out of range")
        return self.weight[indices].T

    def scatter_grad(self, indices, grad_columns: np.ndarray) -> np.ndarray:
        """Accumulate per-column gradients back onto their rows."""
        grad = np.zeros_like(self.weight)
        np.add.at(grad, np.asarray(indices, dtype=np.int64), np.asarray(grad_columns).T)
        return grad

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.weight.copy())


def embed(vocab: LabelVocab, table: EmbeddingTable, key) -> np.ndarray:
    if table.num_embeddings != len(vocab):
        raise ShapeError(f"embedding table has {table.num_embeddings} rows for a vocabulary of {len(vocab)}")
    return table.weight[vocab.index(key)].copy()
