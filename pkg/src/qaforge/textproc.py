"""Text primitives: tokenization, lemma handling, edit distance,
interrogative counting, entity extraction, n-grams.

Lemmatization and NER are pluggable providers; without one, both fall
back to deterministic offline heuristics (lowercasing, capitalized-run
detection) so the rest of the engine stays model-free.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

ENTITY_KINDS = ("person", "location", "organization", "other")

#: Interrogative and near-interrogative lemmas used both for the
#: single-question-word gate and the question-type ratio diagnostics.
DEFAULT_WH_WORDS = frozenset(
    {
        "кто",
        "что",
        "какой",
        "чей",
        "где",
        "который",
        "откуда",
        "сколько",
        "каковой",
        "каков",
        "зачем",
        "когда",
        "почему",
        "чем",
        "как",
    }
)

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


class TextProcError(RuntimeError):
    """A text-processing provider failed and no fallback was allowed."""


class LemmaProvider(Protocol):
    def lemmatize(self, words: Sequence[str]) -> list[str]: ...


class NerProvider(Protocol):
    def entities(self, text: str) -> "list[Entity]": ...


@dataclass(frozen=True)
class Token:
    """A tokenized word with its lemma and source character span."""

    surface: str
    lemma: str
    span: tuple[int, int]

    def __post_init__(self):
        start, end = self.span
        if not (0 <= start < end):
            raise ValueError(f"invalid token span {self.span}")
        if not self.lemma:
            object.__setattr__(self, "lemma", self.surface.lower())


@dataclass(frozen=True)
class Entity:
    """A named entity with its source span; ``text`` equals the source slice."""

    text: str
    kind: str
    span: tuple[int, int]

    def __post_init__(self):
        if self.kind not in ENTITY_KINDS:
            raise ValueError(f"unknown entity kind {self.kind!r}")
        start, end = self.span
        if not (0 <= start < end):
            raise ValueError(f"invalid entity span {self.span}")


@dataclass(frozen=True)
class WhLexicon:
    """The question-word lemma set; defaults to the 15-word Russian list."""

    words: frozenset[str] = field(default_factory=lambda: DEFAULT_WH_WORDS)

    def __post_init__(self):
        object.__setattr__(self, "words", frozenset(w.lower() for w in self.words))


def tokenize(text: str) -> list[Token]:
    """Split ``text`` into maximal runs of letters and digits.

    Punctuation and underscores separate tokens; spans index into the
    source string, so ``text[start:end] == surface``. Lemmas start as the
    lowercased surface and may be replaced by ``lemmatize``.
    """
    return [
        Token(m.group(), m.group().lower(), (m.start(), m.end()))
        for m in _WORD_RE.finditer(text)
    ]


def lemmatize(
    tokens: Sequence[Token],
    provider: LemmaProvider | None = None,
    fallback: bool = True,
) -> list[Token]:
    """Fill token lemmas from ``provider``, lowercasing as the fallback.

    Idempotent: lemmas are always recomputed from surfaces. With
    ``fallback=False`` a provider failure raises instead of degrading.
    """
    if provider is None:
        return [
            t if t.lemma == t.surface.lower() else Token(t.surface, t.surface.lower(), t.span)
            for t in tokens
        ]
    surfaces = [t.surface for t in tokens]
    try:
        lemmas = provider.lemmatize(surfaces)
    except Exception as e:
        if not fallback:
            raise TextProcError(
                f"lemmatizer provider {type(provider).__name__} failed: {e}"
            ) from e
        return lemmatize(tokens, None)
    if len(lemmas) != len(tokens):
        raise TextProcError(
            f"lemmatizer provider {type(provider).__name__} returned "
            f"{len(lemmas)} lemmas for {len(tokens)} tokens"
        )
    return [
        Token(t.surface, (lem or t.surface).lower(), t.span)
        for t, lem in zip(tokens, lemmas)
    ]


def lemmas(text: str, provider: LemmaProvider | None = None) -> list[str]:
    """Tokenize and lemmatize in one step, returning lemma strings."""
    return [t.lemma for t in lemmatize(tokenize(text), provider)]


# ---------------------------------------------------------------------------
# Levenshtein distance. The public functions take strings; the dedup hot
# path pre-encodes strings to uint32 codepoint arrays once and calls the
# compiled kernel directly.

def encode_codepoints(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-32-le"), dtype=np.uint32)


def _levenshtein_py(a: Sequence[int] | str, b: Sequence[int] | str) -> int:
    la, lb = len(a), len(b)
    if la == 0:
        return lb
    if lb == 0:
        return la
    if la < lb:
        a, b, la, lb = b, a, lb, la
    prev = list(range(lb + 1))
    for i in range(1, la + 1):
        ca = a[i - 1]
        cur = [i] + [0] * lb
        row = cur
        for j in range(1, lb + 1):
            cost = 0 if ca == b[j - 1] else 1
            x = prev[j] + 1
            y = row[j - 1] + 1
            z = prev[j - 1] + cost
            row[j] = x if x < y and x < z else (y if y < z else z)
        prev = row
    return prev[lb]


if _HAVE_NUMBA:

    @njit(cache=True)
    def _levenshtein_kernel(a, b):  # pragma: no cover - compiled
        la = a.shape[0]
        lb = b.shape[0]
        if la == 0:
            return lb
        if lb == 0:
            return la
        prev = np.empty(lb + 1, dtype=np.int32)
        cur = np.empty(lb + 1, dtype=np.int32)
        for j in range(lb + 1):
            prev[j] = j
        for i in range(1, la + 1):
            cur[0] = i
            ca = a[i - 1]
            for j in range(1, lb + 1):
                cost = 0 if ca == b[j - 1] else 1
                x = prev[j] + 1
                y = cur[j - 1] + 1
                z = prev[j - 1] + cost
                m = x if x < y else y
                if z < m:
                    m = z
                cur[j] = m
            t = prev
            prev = cur
            cur = t
        return prev[lb]

    def distance_arrays(a: np.ndarray, b: np.ndarray) -> int:
        return int(_levenshtein_kernel(a, b))

else:  # pragma: no cover - exercised only without numba

    def distance_arrays(a: np.ndarray, b: np.ndarray) -> int:
        return _levenshtein_py(a.tolist(), b.tolist())


def levenshtein_distance(a: str, b: str) -> int:
    """Unit-cost character edit distance (insert, delete, substitute)."""
    if a == b:
        return 0
    if _HAVE_NUMBA:
        return distance_arrays(encode_codepoints(a), encode_codepoints(b))
    return _levenshtein_py(a, b)


def levenshtein_similarity(a: str, b: str) -> float:
    """Similarity ratio ``1 - dist / max(len(a), len(b))`` in [0, 1].

    Two empty strings are identical (1.0); an empty string against a
    non-empty one scores 0.0.
    """
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein_distance(a, b) / longest


def similarity_arrays(a: np.ndarray, b: np.ndarray) -> float:
    """`levenshtein_similarity` over pre-encoded codepoint arrays."""
    longest = max(a.shape[0], b.shape[0])
    if longest == 0:
        return 1.0
    return 1.0 - distance_arrays(a, b) / longest


# ---------------------------------------------------------------------------

def count_interrogatives(
    question: str,
    lexicon: WhLexicon | None = None,
    provider: LemmaProvider | None = None,
) -> int:
    """Number of tokens whose lemma is a question word."""
    words = (lexicon or WhLexicon()).words
    return sum(1 for t in lemmatize(tokenize(question), provider) if t.lemma in words)


def extract_entities(
    text: str,
    provider: NerProvider | None = None,
    fallback: bool = True,
) -> list[Entity]:
    """Named entities in ``text``, ordered by span.

    Without a provider (or when one fails and ``fallback`` is allowed) a
    deterministic heuristic applies: runs of two or more adjacent
    capitalized tokens, separated only by whitespace, become entities of
    kind ``other``.
    """
    if provider is not None:
        try:
            found = provider.entities(text)
        except Exception as e:
            if not fallback:
                raise TextProcError(
                    f"ner provider {type(provider).__name__} failed: {e}"
                ) from e
            return _capitalized_runs(text)
        for ent in found:
            start, end = ent.span
            if end > len(text) or text[start:end] != ent.text:
                raise TextProcError(
                    f"ner provider returned entity {ent.text!r} not matching "
                    f"source slice {text[start:end]!r}"
                )
        return sorted(found, key=lambda e: e.span)
    return _capitalized_runs(text)


def _capitalized_runs(text: str) -> list[Entity]:
    tokens = tokenize(text)
    entities: list[Entity] = []
    run: list[Token] = []

    def flush():
        if len(run) >= 2:
            start = run[0].span[0]
            end = run[-1].span[1]
            entities.append(Entity(text[start:end], "other", (start, end)))
        run.clear()

    for tok in tokens:
        if tok.surface[0].isupper():
            if run:
                gap = text[run[-1].span[1] : tok.span[0]]
                if not gap or not gap.isspace():
                    flush()
            run.append(tok)
        else:
            flush()
    flush()
    return entities


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    """All contiguous ``n``-token windows with multiplicity."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if len(tokens) < n:
        return Counter()
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
