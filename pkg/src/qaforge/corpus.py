"""Domain records and line-delimited JSON serialization.

All record types are immutable value objects with a fixed JSON layout.
Serialization is byte-deterministic: sorted keys, compact separators,
``ensure_ascii=False``, LF newlines. ``read_*(write_*(x)) == x`` holds
field for field.
"""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import IO, Any, Callable, Iterable, Iterator

DOMAIN_TAGS = ("wiki", "news", "social", "reviews", "fiction", "other")
MODEL_TAGS = ("gpt_style", "t5_style", "stub")
OVERLAP_MODES = ("jaccard", "over_generated", "over_gold")


class CorpusError(ValueError):
    """Malformed or inconsistent corpus data."""


class JsonlWriteError(OSError):
    """I/O failure while writing JSONL; ``written`` counts complete lines."""

    def __init__(self, message: str, written: int):
        super().__init__(f"{message} (after {written} records)")
        self.written = written


@dataclass(frozen=True)
class Passage:
    """One source text unit that QA pairs are generated from."""

    id: str
    title: str
    text: str
    categories: tuple[str, ...] = ()
    batch: int = 0
    domain_tag: str = "wiki"

    def __post_init__(self):
        if not self.id:
            raise CorpusError("passage id must be non-empty")
        if not self.text or not self.text.strip():
            raise CorpusError(f"passage {self.id!r}: text must be non-empty")
        if self.batch < 0:
            raise CorpusError(f"passage {self.id!r}: batch must be >= 0")
        if self.domain_tag not in DOMAIN_TAGS:
            raise CorpusError(
                f"passage {self.id!r}: unknown domain_tag {self.domain_tag!r}"
            )
        object.__setattr__(self, "categories", tuple(self.categories))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "title": self.title,
            "text": self.text,
            "categories": list(self.categories),
            "batch": self.batch,
            "domain_tag": self.domain_tag,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Passage":
        try:
            return cls(
                id=d["id"],
                title=d.get("title", ""),
                text=d["text"],
                categories=tuple(d.get("categories") or ()),
                batch=int(d.get("batch", 0)),
                domain_tag=d.get("domain_tag", "wiki"),
            )
        except KeyError as e:
            raise CorpusError(f"passage record missing field {e.args[0]!r}") from e


@dataclass(frozen=True)
class QAPair:
    """A generated question and answer, with its emission index."""

    question: str
    answer: str
    gen_index: int = 0

    def __post_init__(self):
        if not self.question.strip():
            raise CorpusError("question must be non-empty after trim")
        if not self.answer.strip():
            raise CorpusError("answer must be non-empty after trim")
        if self.gen_index < 0:
            raise CorpusError("gen_index must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "question": self.question,
            "answer": self.answer,
            "gen_index": self.gen_index,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "QAPair":
        try:
            return cls(d["question"], d["answer"], int(d.get("gen_index", 0)))
        except KeyError as e:
            raise CorpusError(f"qa pair missing field {e.args[0]!r}") from e


@dataclass(frozen=True)
class FilterVerdict:
    """Audit record attached to a triplet after filtration.

    Exactly one of the two outcomes holds: ``passed`` is true and
    ``rejected_at`` is unset, or ``passed`` is false and ``rejected_at``
    names the rejecting stage. Every stage that actually executed left
    an entry in ``scores``.
    """

    passed: bool
    rejected_at: str | None = None
    scores: dict[str, float] = field(default_factory=dict)
    gold_answer: str | None = None
    detail: str | None = None

    def __post_init__(self):
        if self.passed and self.rejected_at is not None:
            raise CorpusError("verdict passed but rejected_at is set")
        if not self.passed and self.rejected_at is None:
            raise CorpusError("verdict rejected but rejected_at is unset")

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "rejected_at": self.rejected_at,
            "scores": {k: float(v) for k, v in self.scores.items()},
            "gold_answer": self.gold_answer,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FilterVerdict":
        return cls(
            passed=bool(d["passed"]),
            rejected_at=d.get("rejected_at"),
            scores=dict(d.get("scores") or {}),
            gold_answer=d.get("gold_answer"),
            detail=d.get("detail"),
        )


@dataclass(frozen=True)
class Triplet:
    """A QA pair bound to its source passage."""

    passage_id: str
    pair: QAPair
    model_tag: str = "stub"
    verdict: FilterVerdict | None = None

    def __post_init__(self):
        if not self.passage_id:
            raise CorpusError("triplet passage_id must be non-empty")
        if self.model_tag not in MODEL_TAGS:
            raise CorpusError(f"unknown model_tag {self.model_tag!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "passage_id": self.passage_id,
            "pair": self.pair.to_dict(),
            "model_tag": self.model_tag,
            "verdict": self.verdict.to_dict() if self.verdict else None,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Triplet":
        try:
            verdict = d.get("verdict")
            return cls(
                passage_id=d["passage_id"],
                pair=QAPair.from_dict(d["pair"]),
                model_tag=d.get("model_tag", "stub"),
                verdict=FilterVerdict.from_dict(verdict) if verdict else None,
            )
        except KeyError as e:
            raise CorpusError(f"triplet record missing field {e.args[0]!r}") from e

    def with_verdict(self, verdict: FilterVerdict) -> "Triplet":
        return replace(self, verdict=verdict)


#: (gold-generated, question-generated, text-generated, text-question) order
#: for the optional n-gram metric thresholds.
NGRAM_PAIR_NAMES = ("gold_gen", "question_gen", "text_gen", "text_question")


@dataclass(frozen=True)
class FilterConfig:
    """Every threshold and stage toggle of the filtration cascade.

    Boundary semantics are fixed here: lemma overlap, dedup similarity
    and n-gram means pass at the exact threshold (>= / <= comparisons),
    while the reader-score gate is strict (confidence must exceed
    ``reader_score_min``). A three-value ``ngram_thresholds`` list is
    widened to four by reusing the last value for the text-question pair.
    """

    lemma_overlap_threshold: float = 0.70
    dedup_threshold: float = 0.70
    max_interrogatives: int = 1
    ngram_thresholds: tuple[float, ...] = (0.60, 0.50, 0.40, 0.40)
    reader_score_min: float = 0.99
    wmd_range: tuple[float, float] = (1.1, 1.5)
    wmd_keep_inside: bool = True
    overlap_mode: str = "jaccard"
    unresolved_policy: str = "reject"  # or "skip"
    enable_interrogative: bool = True
    enable_gold_agreement: bool = True
    enable_entity_consistency: bool = True
    enable_dedup: bool = True
    enable_ngram_metrics: bool = False
    enable_person_location: bool = False
    enable_reader_score: bool = False
    enable_wmd: bool = False

    def __post_init__(self):
        for name in ("lemma_overlap_threshold", "dedup_threshold", "reader_score_min"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise CorpusError(f"{name} must be in [0, 1], got {v}")
        if self.max_interrogatives < 0:
            raise CorpusError("max_interrogatives must be >= 0")
        th = tuple(float(t) for t in self.ngram_thresholds)
        if len(th) == 3:
            th = th + (th[-1],)
        if len(th) != 4:
            raise CorpusError("ngram_thresholds needs 3 or 4 values")
        if any(not 0.0 <= t <= 1.0 for t in th):
            raise CorpusError("ngram_thresholds must be fractions in [0, 1]")
        object.__setattr__(self, "ngram_thresholds", th)
        lo, hi = self.wmd_range
        if not lo < hi:
            raise CorpusError(f"wmd_range low must be < high, got {self.wmd_range}")
        object.__setattr__(self, "wmd_range", (float(lo), float(hi)))
        if self.overlap_mode not in OVERLAP_MODES:
            raise CorpusError(f"unknown overlap_mode {self.overlap_mode!r}")
        if self.unresolved_policy not in ("reject", "skip"):
            raise CorpusError(f"unknown unresolved_policy {self.unresolved_policy!r}")

    def to_dict(self) -> dict[str, Any]:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FilterConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise CorpusError(f"unknown filter config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = dict(d)
        if "ngram_thresholds" in kwargs:
            kwargs["ngram_thresholds"] = tuple(kwargs["ngram_thresholds"])
        if "wmd_range" in kwargs:
            kwargs["wmd_range"] = tuple(kwargs["wmd_range"])
        return cls(**kwargs)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "FilterConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def dump_record(d: dict[str, Any]) -> str:
    """One canonical JSONL line: sorted keys, compact, non-ASCII kept."""
    return json.dumps(d, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def open_text(path: str | Path, mode: str = "rt") -> IO[str]:
    """Open a text file, transparently decoding ``.gz`` inputs."""
    p = Path(path)
    if p.suffix == ".gz":
        return gzip.open(p, mode, encoding="utf-8")
    return open(p, mode, encoding="utf-8", newline="\n" if "w" in mode else None)


def iter_jsonl(stream: Iterable[str]) -> Iterator[tuple[int, dict]]:
    """Yield (line_number, object) for every non-blank line; raises on bad JSON."""
    for lineno, line in enumerate(stream, 1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusError(f"line {lineno}: invalid JSON: {e.msg}") from e
        if not isinstance(obj, dict):
            raise CorpusError(f"line {lineno}: expected a JSON object")
        yield lineno, obj


def read_passages(
    stream: Iterable[str],
    on_error: Callable[[int, str], None] | None = None,
    max_errors: int = 100,
) -> Iterator[Passage]:
    """Yield passages from JSONL lines in file order.

    Malformed lines raise immediately unless ``on_error`` is given, in
    which case they are reported as (line_number, message) up to
    ``max_errors`` times before the reader gives up. A repeated passage
    id is always a hard error naming the offending line.
    """
    seen: dict[str, int] = {}
    errors = 0
    for lineno, line in enumerate(stream, 1):
        stripped = line.strip()
        if not stripped:
            continue
        try:
            obj = json.loads(stripped)
            if not isinstance(obj, dict):
                raise CorpusError("expected a JSON object")
            passage = Passage.from_dict(obj)
        except (json.JSONDecodeError, CorpusError) as e:
            msg = e.msg if isinstance(e, json.JSONDecodeError) else str(e)
            if on_error is None:
                raise CorpusError(f"line {lineno}: {msg}") from e
            errors += 1
            on_error(lineno, msg)
            if errors > max_errors:
                raise CorpusError(
                    f"line {lineno}: giving up after {errors} malformed lines"
                ) from e
            continue
        if passage.id in seen:
            raise CorpusError(
                f"line {lineno}: duplicate passage id {passage.id!r} "
                f"(first seen on line {seen[passage.id]})"
            )
        seen[passage.id] = lineno
        yield passage


def read_triplets(stream: Iterable[str]) -> Iterator[Triplet]:
    """Yield triplets from JSONL lines in file order."""
    for lineno, obj in iter_jsonl(stream):
        try:
            yield Triplet.from_dict(obj)
        except CorpusError as e:
            raise CorpusError(f"line {lineno}: {e}") from e


def _write_records(dicts: Iterable[dict], sink: IO[str]) -> int:
    written = 0
    try:
        for d in dicts:
            sink.write(dump_record(d))
            sink.write("\n")
            written += 1
    except OSError as e:
        raise JsonlWriteError(str(e), written) from e
    return written


def write_passages(passages: Iterable[Passage], sink: IO[str]) -> int:
    """Write passages as JSONL; returns the number of records written."""
    return _write_records((p.to_dict() for p in passages), sink)


def write_triplets(triplets: Iterable[Triplet], sink: IO[str]) -> int:
    """Write triplets as JSONL; returns the number of records written."""
    return _write_records((t.to_dict() for t in triplets), sink)


def load_passage_store(path: str | Path) -> dict[str, Passage]:
    """Load a passage JSONL file (or every ``passages*.jsonl`` in a directory)
    into an id-keyed store."""
    p = Path(path)
    if p.is_dir():
        candidates = sorted(p.glob("passages*.jsonl*"))
        if not candidates:
            raise CorpusError(f"no passages*.jsonl found in {p}")
    else:
        candidates = [p]
    store: dict[str, Passage] = {}
    for file in candidates:
        with open_text(file) as f:
            for passage in read_passages(f):
                if passage.id in store:
                    raise CorpusError(
                        f"duplicate passage id {passage.id!r} across files ({file})"
                    )
                store[passage.id] = passage
    return store
