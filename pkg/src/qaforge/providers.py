"""Clients for the model-backed provider roles (generator, reader, NER,
lemmatizer, embedder, trainer) plus deterministic in-process stubs.

Endpoints use a scheme prefix: ``http://`` / ``https://`` talk JSON to a
sidecar service, ``stub:`` selects an offline stub so pipelines and CI
never need models. All stubs are pure functions of their inputs.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import random
from dataclasses import dataclass
from typing import Any, Mapping, Protocol, Sequence

import numpy as np

from .textproc import DEFAULT_WH_WORDS, Entity, lemmas, tokenize, _capitalized_runs

logger = logging.getLogger(__name__)

ROLES = ("generator", "reader", "ner", "lemmatizer", "embedder", "trainer")


class ProviderError(RuntimeError):
    """A provider returned a malformed or failing response."""


class ProviderUnavailable(ProviderError):
    """A provider endpoint is unreachable or its role is not loaded."""


class GeneratorClient(Protocol):
    def generate(self, text: str, style_tag: str, params: Mapping[str, Any]) -> str: ...


class ReaderClient(Protocol):
    def answer(self, context: str, question: str) -> tuple[str, float]: ...


class NerClient(Protocol):
    def entities(self, text: str) -> list[Entity]: ...


class LemmatizerClient(Protocol):
    def lemmatize(self, words: Sequence[str]) -> list[str]: ...


class EmbedderClient(Protocol):
    def vectors(self, words: Sequence[str]) -> dict[str, np.ndarray]: ...


class TrainerClient(Protocol):
    def train(
        self,
        samples: Sequence[Mapping[str, Any]],
        params: Mapping[str, Any],
        base_handle: str | None = None,
    ) -> str: ...

    def predict(self, handle: str, items: Sequence[Mapping[str, Any]]) -> list[str]: ...


# ---------------------------------------------------------------------------
# HTTP clients

class _HttpBase:
    def __init__(self, base_url: str, timeout: float = 30.0, session=None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def _post(self, path: str, payload: Any) -> Any:
        import requests

        url = f"{self.base_url}{path}"
        try:
            resp = self._session.post(url, json=payload, timeout=self.timeout)
        except requests.ConnectionError as e:
            raise ProviderUnavailable(f"cannot reach {url}: {e}") from e
        except requests.Timeout as e:
            raise ProviderUnavailable(f"timeout talking to {url}") from e
        if resp.status_code == 503:
            raise ProviderUnavailable(f"{url}: role unavailable")
        if resp.status_code >= 400:
            raise ProviderError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as e:
            raise ProviderError(f"{url}: response is not JSON") from e


class HttpGenerator(_HttpBase):
    def generate(self, text: str, style_tag: str, params: Mapping[str, Any]) -> str:
        data = self._post(
            "/generate", {"text": text, "style": style_tag, "params": dict(params)}
        )
        try:
            return data["raw"]
        except (TypeError, KeyError) as e:
            raise ProviderError("generate response missing 'raw'") from e


class HttpReader(_HttpBase):
    def answer(self, context: str, question: str) -> tuple[str, float]:
        data = self._post("/answer", {"context": context, "question": question})
        try:
            score = float(data["score"])
            if not 0.0 <= score <= 1.0:
                raise ProviderError(f"reader score {score} outside [0, 1]")
            return data["answer"], score
        except (TypeError, KeyError) as e:
            raise ProviderError("answer response missing fields") from e


class HttpNer(_HttpBase):
    def entities(self, text: str) -> list[Entity]:
        data = self._post("/ner", {"text": text})
        if not isinstance(data, list):
            raise ProviderError("ner response must be a list")
        out = []
        for item in data:
            try:
                out.append(
                    Entity(item["text"], item["kind"], (item["start"], item["end"]))
                )
            except (TypeError, KeyError, ValueError) as e:
                raise ProviderError(f"bad ner entity record: {item!r}") from e
        return out


class HttpLemmatizer(_HttpBase):
    def lemmatize(self, words: Sequence[str]) -> list[str]:
        data = self._post("/lemmatize", {"tokens": list(words)})
        try:
            out = list(data["lemmas"])
        except (TypeError, KeyError) as e:
            raise ProviderError("lemmatize response missing 'lemmas'") from e
        if len(out) != len(words):
            raise ProviderError("lemma count does not match token count")
        return out


class HttpEmbedder(_HttpBase):
    def vectors(self, words: Sequence[str]) -> dict[str, np.ndarray]:
        data = self._post("/embed", {"words": list(words)})
        try:
            rows = data["vectors"]
            dim = int(data["dim"])
        except (TypeError, KeyError) as e:
            raise ProviderError("embed response missing fields") from e
        if len(rows) != len(words):
            raise ProviderError("vector count does not match word count")
        out: dict[str, np.ndarray] = {}
        for word, row in zip(words, rows):
            if row is None:
                continue  # out of vocabulary
            vec = np.asarray(row, dtype=float)
            if vec.shape != (dim,):
                raise ProviderError(f"vector for {word!r} has wrong shape")
            out[word] = vec
        return out


class HttpTrainer(_HttpBase):
    def train(
        self,
        samples: Sequence[Mapping[str, Any]],
        params: Mapping[str, Any],
        base_handle: str | None = None,
    ) -> str:
        payload = {
            "samples_ref": {"kind": "inline", "items": [dict(s) for s in samples]},
            "params": dict(params),
            "base_handle": base_handle,
        }
        data = self._post("/train", payload)
        try:
            return data["handle"]
        except (TypeError, KeyError) as e:
            raise ProviderError("train response missing 'handle'") from e

    def predict(self, handle: str, items: Sequence[Mapping[str, Any]]) -> list[str]:
        data = self._post(
            "/predict", {"handle": handle, "items": [dict(i) for i in items]}
        )
        try:
            answers = list(data["answers"])
        except (TypeError, KeyError) as e:
            raise ProviderError("predict response missing 'answers'") from e
        if len(answers) != len(items):
            raise ProviderError("answer count does not match item count")
        return answers


# ---------------------------------------------------------------------------
# Stubs

def _text_seed(text: str) -> int:
    return int.from_bytes(
        hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big"
    )


class StubGenerator:
    """Deterministic generator: emits marker-formatted QA pairs derived
    from the passage text.

    Questions anchor on a content token whose first occurrence marks a
    two-token answer span, so the keyword reader stub recovers the same
    span and such pairs survive the gold-agreement stage. A hash-chosen
    minority of pairs is deliberately malformed for the cascade: every
    5th passage gets a double question word, every 7th an answer absent
    from the text, and every 11th a near-duplicate of its first pair.
    """

    def __init__(self, style=None):
        from .generation import PromptStyle, gpt_style

        self.style: PromptStyle = style or gpt_style()

    def generate(self, text: str, style_tag: str, params: Mapping[str, Any]) -> str:
        pairs_per_passage = int(params.get("pairs_per_passage", 3))
        toks = tokenize(text)
        seed = _text_seed(text)
        pieces: list[str] = []
        first_pair: tuple[str, str] | None = None
        for k in range(pairs_per_passage):
            if not toks:
                question, answer = "Что здесь описано?", "пустой фрагмент"
            elif seed % 5 == 0 and k == 1:
                anchor = toks[(seed + k) % len(toks)]
                question = f"Кто и когда упоминается рядом со словом {anchor.surface}?"
                answer = anchor.surface
            elif seed % 7 == 0 and k == 2:
                anchor = toks[(seed + k) % len(toks)]
                question = f"Что сказано о слове {anchor.surface}?"
                answer = "неизвестная величина"
            elif seed % 11 == 0 and k > 0 and first_pair is not None:
                question = first_pair[0] + " же"
                answer = first_pair[1]
            else:
                pick = toks[(seed + 31 * k) % len(toks)]
                first_idx = next(
                    i for i, t in enumerate(toks) if t.lemma == pick.lemma
                )
                last = toks[min(first_idx + 1, len(toks) - 1)]
                answer = text[toks[first_idx].span[0] : last.span[1]]
                question = f"Что сказано о слове {pick.surface}?"
            if first_pair is None:
                first_pair = (question, answer)
            pieces.append(f"{question}{self.style.answer_marker}{answer}")
        raw = self.style.question_marker.join(pieces)
        return raw + self.style.eos_marker


class KeywordReader:
    """Extractive reader stub: returns the two-token context span starting
    at the first occurrence of the question's first content lemma found
    in the context. The score is the fraction of content lemmas present."""

    def __init__(self, cache_size: int = 8):
        self._index_for = functools.lru_cache(maxsize=cache_size)(self._build_index)

    @staticmethod
    def _build_index(context: str):
        toks = tokenize(context)
        first_at: dict[str, int] = {}
        for i, t in enumerate(toks):
            if t.lemma not in first_at:
                first_at[t.lemma] = i
        return toks, first_at

    def answer(self, context: str, question: str) -> tuple[str, float]:
        toks, first_at = self._index_for(context)
        content = [
            t.lemma
            for t in tokenize(question)
            if t.lemma not in DEFAULT_WH_WORDS and len(t.lemma) > 2
        ]
        if not toks:
            return context, 0.0
        hit = next((lem for lem in content if lem in first_at), None)
        if hit is None:
            span_end = toks[min(1, len(toks) - 1)].span[1]
            return context[toks[0].span[0] : span_end], 0.0
        i = first_at[hit]
        last = toks[min(i + 1, len(toks) - 1)]
        present = sum(1 for lem in content if lem in first_at)
        return context[toks[i].span[0] : last.span[1]], present / len(content)


class TableReader:
    """Fixture-driven reader: canned (answer, score) per question."""

    def __init__(
        self,
        table: Mapping[str, tuple[str, float]],
        default: tuple[str, float] | None = None,
    ):
        self.table = dict(table)
        self.default = default

    def answer(self, context: str, question: str) -> tuple[str, float]:
        if question in self.table:
            return self.table[question]
        if self.default is not None:
            return self.default
        raise ProviderUnavailable(f"no canned answer for question {question!r}")


class FallbackNer:
    """Capitalized-run heuristic as a provider."""

    def entities(self, text: str) -> list[Entity]:
        return _capitalized_runs(text)


class EmptyNer:
    def entities(self, text: str) -> list[Entity]:
        return []


class TableNer:
    def __init__(self, table: Mapping[str, list[Entity]]):
        self.table = dict(table)

    def entities(self, text: str) -> list[Entity]:
        return self.table.get(text, [])


class LowercaseLemmatizer:
    def lemmatize(self, words: Sequence[str]) -> list[str]:
        return [w.lower() for w in words]


class TableLemmatizer:
    """Dictionary lemmatizer with lowercase fallback."""

    def __init__(self, table: Mapping[str, str]):
        self.table = {k.lower(): v for k, v in table.items()}

    def lemmatize(self, words: Sequence[str]) -> list[str]:
        return [self.table.get(w.lower(), w.lower()) for w in words]


class HashEmbedder:
    """Deterministic word vectors seeded from a hash of the word; with a
    ``vocab`` set, words outside it are out of vocabulary."""

    def __init__(self, dim: int = 16, vocab: set[str] | None = None):
        self.dim = dim
        self.vocab = vocab
        self._cache: dict[str, np.ndarray] = {}

    def vectors(self, words: Sequence[str]) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for w in words:
            if self.vocab is not None and w not in self.vocab:
                continue
            if w not in self._cache:
                rng = random.Random(_text_seed(w))
                self._cache[w] = np.array(
                    [rng.uniform(-1.0, 1.0) for _ in range(self.dim)]
                )
            out[w] = self._cache[w]
        return out


class EchoTrainer:
    """Trainer stub that memorizes its training items and answers eval
    questions it has seen before, empty string otherwise."""

    def __init__(self):
        self._models: dict[str, dict[tuple[str, str], str]] = {}

    def train(
        self,
        samples: Sequence[Mapping[str, Any]],
        params: Mapping[str, Any],
        base_handle: str | None = None,
    ) -> str:
        memory: dict[tuple[str, str], str] = {}
        if base_handle is not None:
            if base_handle not in self._models:
                raise ProviderError(f"unknown base handle {base_handle!r}")
            memory.update(self._models[base_handle])
        for s in samples:
            answers = s.get("answers") or []
            if answers:
                memory[(s["context"], s["question"])] = answers[0]
        digest = hashlib.sha256(
            json.dumps(
                [
                    sorted((c, q, a) for (c, q), a in memory.items()),
                    dict(params),
                    base_handle,
                ],
                sort_keys=True,
                ensure_ascii=False,
            ).encode("utf-8")
        ).hexdigest()[:12]
        handle = f"echo-{digest}"
        self._models[handle] = memory
        return handle

    def predict(self, handle: str, items: Sequence[Mapping[str, Any]]) -> list[str]:
        if handle not in self._models:
            raise ProviderError(f"unknown handle {handle!r}")
        memory = self._models[handle]
        return [memory.get((i["context"], i["question"]), "") for i in items]


class OracleTrainer:
    """Trainer stub that predicts the known gold answer for every item id."""

    def __init__(self, golds: Mapping[str, str]):
        self.golds = dict(golds)

    def train(self, samples, params, base_handle=None) -> str:
        return "oracle"

    def predict(self, handle: str, items: Sequence[Mapping[str, Any]]) -> list[str]:
        return [self.golds.get(i["id"], "") for i in items]


class EmptyTrainer:
    def train(self, samples, params, base_handle=None) -> str:
        return "empty"

    def predict(self, handle: str, items: Sequence[Mapping[str, Any]]) -> list[str]:
        return ["" for _ in items]


class FailingProvider:
    """Raises on every call; exercises unresolved-provider policies."""

    def __init__(self, exc: Exception | None = None):
        self.exc = exc or ProviderUnavailable("provider configured to fail")

    def _raise(self, *args, **kwargs):
        raise self.exc

    generate = answer = entities = lemmatize = vectors = train = predict = _raise


# ---------------------------------------------------------------------------

_STUB_FACTORIES = {
    "generator": {"": StubGenerator, "template": StubGenerator},
    "reader": {"": KeywordReader, "keyword": KeywordReader},
    "ner": {"": FallbackNer, "fallback": FallbackNer, "empty": EmptyNer},
    "lemmatizer": {"": LowercaseLemmatizer, "lowercase": LowercaseLemmatizer},
    "embedder": {"": HashEmbedder, "hash": HashEmbedder},
    "trainer": {"": EchoTrainer, "echo": EchoTrainer, "empty": EmptyTrainer},
}

_HTTP_CLIENTS = {
    "generator": HttpGenerator,
    "reader": HttpReader,
    "ner": HttpNer,
    "lemmatizer": HttpLemmatizer,
    "embedder": HttpEmbedder,
    "trainer": HttpTrainer,
}


def make_provider(role: str, endpoint: str, timeout: float = 30.0):
    """Build a provider client for ``role`` from an endpoint string."""
    if role not in ROLES:
        raise ValueError(f"unknown provider role {role!r}")
    if endpoint.startswith("stub:"):
        variant = endpoint[len("stub:") :]
        factories = _STUB_FACTORIES[role]
        if variant not in factories:
            raise ValueError(
                f"unknown stub variant {variant!r} for role {role}; "
                f"known: {sorted(factories)}"
            )
        return factories[variant]()
    if endpoint.startswith(("http://", "https://")):
        return _HTTP_CLIENTS[role](endpoint, timeout=timeout)
    raise ValueError(
        f"endpoint {endpoint!r} must start with 'stub:', 'http://' or 'https://'"
    )
