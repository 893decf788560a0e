"""Sentence splitting, a naive suffix stemmer and binary bag-of-words features.

The tokenizer and stemmer are stand-ins: nothing downstream depends on
their linguistic quality, only on their determinism.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ModelFormatError
from .model import FeatureVector

_SENTENCE_DELIMS = re.compile(r"[.!?]")
_TOKEN = re.compile(r"[^\W_]+")
_SUFFIXES = ("ing", "ed", "es", "s")


class StemDictionary:
    """Bijection between stems and feature indices ``0..size-1``."""

    __slots__ = ("_stems", "_index")

    def __init__(self, stems: Iterable[str]):
        stems = tuple(stems)
        index = {}
        for i, s in enumerate(stems):
            if not s or s != s.strip():
                raise ValueError(f"invalid stem {s!r} at index {i}")
            if s in index:
                raise ValueError(f"duplicate stem {s!r} at indices {index[s]} and {i}")
            index[s] = i
        self._stems = stems
        self._index = index

    @property
    def size(self) -> int:
        return len(self._stems)

    @property
    def stems(self) -> tuple[str, ...]:
        return self._stems

    def get(self, stem_: str):
        return self._index.get(stem_)

    def __getitem__(self, stem_: str) -> int:
        return self._index[stem_]

    def __contains__(self, stem_):
        return stem_ in self._index

    def __len__(self):
        return len(self._stems)

    def __eq__(self, other):
        return isinstance(other, StemDictionary) and self._stems == other._stems

    def __hash__(self):
        return hash(self._stems)

    def __reduce__(self):
        return (StemDictionary, (self._stems,))

    def __repr__(self):
        return f"StemDictionary(size={self.size})"


def load_dictionary(path) -> StemDictionary:
    stems = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.rstrip("\r\n")
            if not s.strip():
                raise ModelFormatError("empty stem line", lineno, os.fspath(path))
            stems.append(s)
    try:
        return StemDictionary(stems)
    except ValueError as exc:
        raise ModelFormatError(str(exc), None, os.fspath(path)) from None


def save_dictionary(d: StemDictionary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in d.stems:
            fh.write(s + "\n")


@dataclass(frozen=True, order=True)
class Sentence:
    file_key: str
    ordinal: int
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("sentence text is empty")


@dataclass(frozen=True, eq=False)
class ScoredSentence:
    sentence: Sentence
    fv: FeatureVector
    claim_score: float
    evid_score: float

    def sort_key(self):
        return (self.sentence.file_key, self.sentence.ordinal)

    def __eq__(self, other):
        if not isinstance(other, ScoredSentence):
            return NotImplemented
        return (self.sentence == other.sentence and self.fv == other.fv
                and self.claim_score == other.claim_score and self.evid_score == other.evid_score)

    def __hash__(self):
        return hash((self.sentence, self.claim_score, self.evid_score))


def split_sentences(file_key: str, content: str) -> list[Sentence]:
    out = []
    for frag in _SENTENCE_DELIMS.split(content):
        frag = frag.strip()
        if frag:
            out.append(Sentence(file_key, len(out), frag))
    return out


def stem(token: str) -> str:
    t = token.lower()
    for suf in _SUFFIXES:
        if t.endswith(suf) and len(t) - len(suf) >= 3:
            return t[: -len(suf)]
    return t


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text)


def extract_features(text: str, dictionary: StemDictionary) -> FeatureVector:
    """Binary bag of in-dictionary stems."""
    hits = set()
    get = dictionary.get
    for tok in _TOKEN.findall(text):
        i = get(stem(tok))
        if i is not None:
            hits.add(i)
    if not hits:
        return FeatureVector((), (), dictionary.size)
    idx = np.fromiter(sorted(hits), dtype=np.int64, count=len(hits))
    return FeatureVector(idx, np.ones(idx.shape[0]), dictionary.size)
