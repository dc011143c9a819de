"""Prompt encoding, generator invocation and parsing of raw model output.

A prompt is ``text_marker + passage text + question_marker``; the model
continues with alternating question/answer segments and an end-of-
sequence marker. Decoding parameters are passed through to the provider
verbatim; the engine never decodes itself.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, Sequence, TypeVar

from .corpus import CorpusError, Passage, QAPair, Triplet
from .providers import GeneratorClient, ProviderError, ProviderUnavailable

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class MarkerCollisionError(ValueError):
    """Passage text contains a marker token and would corrupt parsing."""


@dataclass(frozen=True)
class PromptStyle:
    """Marker tokens bracketing text, question and answer segments."""

    text_marker: str
    question_marker: str
    answer_marker: str
    eos_marker: str
    style_tag: str

    def __post_init__(self):
        markers = (
            self.text_marker,
            self.question_marker,
            self.answer_marker,
            self.eos_marker,
        )
        if any(not m for m in markers):
            raise ValueError("markers must be non-empty")
        if len(set(markers)) != len(markers):
            raise ValueError("markers must be pairwise distinct")

    def markers(self) -> tuple[str, ...]:
        return (
            self.text_marker,
            self.question_marker,
            self.answer_marker,
            self.eos_marker,
        )


def gpt_style() -> PromptStyle:
    return PromptStyle("<[TEXT]>", "<[QUESTION]>", "<[ANSWER]>", "<|endoftext|>", "gpt_style")


def t5_style(
    text_marker: str = "<[ТЕКСТ]>",
    question_marker: str = "<[ВОПРОС]>",
    answer_marker: str = "<[ОТВЕТ]>",
    eos_marker: str = "</s>",
) -> PromptStyle:
    """Russian-word markers; the defaults are this engine's convention and
    can be overridden to match whatever a deployed model was tuned on."""
    return PromptStyle(text_marker, question_marker, answer_marker, eos_marker, "t5_style")


STYLES: dict[str, Callable[[], PromptStyle]] = {"gpt": gpt_style, "t5": t5_style}


@dataclass(frozen=True)
class GenParams:
    """Decoding parameters forwarded to the generator provider."""

    max_length: int = 1048
    beams: int = 7
    no_repeat_ngram: int = 3
    repetition_penalty: float = 2.0
    pairs_per_passage: int = 3

    def __post_init__(self):
        for name in (
            "max_length",
            "beams",
            "no_repeat_ngram",
            "repetition_penalty",
            "pairs_per_passage",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_length": self.max_length,
            "beams": self.beams,
            "no_repeat_ngram": self.no_repeat_ngram,
            "repetition_penalty": self.repetition_penalty,
            "pairs_per_passage": self.pairs_per_passage,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "GenParams":
        return cls(**dict(d))


def format_prompt(passage: Passage, style: PromptStyle) -> str:
    """Build the generation prompt for one passage.

    The prompt ends with the question marker so the model continues with
    the first question. Text containing any marker token is refused.
    """
    if not passage.text.strip():
        raise ValueError(f"passage {passage.id!r} has empty text")
    for marker in style.markers():
        if marker in passage.text:
            raise MarkerCollisionError(
                f"passage {passage.id!r} contains marker {marker!r}"
            )
    return f"{style.text_marker}{passage.text}{style.question_marker}"


@dataclass
class ParseReport:
    pairs: int = 0
    malformed: int = 0
    extra: int = 0

    def merge(self, other: "ParseReport") -> None:
        self.pairs += other.pairs
        self.malformed += other.malformed
        self.extra += other.extra


def parse_generation(
    raw: str, style: PromptStyle, pairs_per_passage: int = 3
) -> tuple[list[QAPair], ParseReport]:
    """Split raw model output on marker tokens into whitespace-trimmed
    QA pairs, keeping at most ``pairs_per_passage``.

    Output past the first end-of-sequence marker is ignored, as is any
    echoed prompt before the first question marker. Fragments without a
    well-formed question and answer are dropped and counted.
    """
    report = ParseReport()
    body = raw.split(style.eos_marker, 1)[0]
    if style.text_marker in body:
        # prompt echo: everything up to the first question marker is text
        _, sep, rest = body.partition(style.question_marker)
        body = rest if sep else ""
    pairs: list[QAPair] = []
    for segment in body.split(style.question_marker):
        if not segment.strip():
            continue
        parts = segment.split(style.answer_marker)
        if len(parts) != 2:
            report.malformed += 1
            continue
        question, answer = parts[0].strip(), parts[1].strip()
        if not question or not answer:
            report.malformed += 1
            continue
        pairs.append(QAPair(question, answer, gen_index=len(pairs)))
    if len(pairs) > pairs_per_passage:
        report.extra = len(pairs) - pairs_per_passage
        pairs = pairs[:pairs_per_passage]
    report.pairs = len(pairs)
    return pairs, report


@dataclass
class GenReport:
    passages: int = 0
    triplets: int = 0
    malformed: int = 0
    extra: int = 0
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "passages": self.passages,
            "triplets": self.triplets,
            "malformed_fragments": self.malformed,
            "extra_pairs": self.extra,
            "skipped_passages": sorted(self.skipped),
        }


class Checkpoint:
    """Resume marker: last completed passage id per batch.

    Passages are processed in (batch, id) order, so completion within a
    batch is contiguous and a single id per batch suffices.
    """

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.last_done: dict[int, str] = {}
        if self.path and self.path.exists():
            data = json.loads(self.path.read_text(encoding="utf-8"))
            self.last_done = {int(k): v for k, v in data.get("batches", {}).items()}

    def is_done(self, passage: Passage) -> bool:
        last = self.last_done.get(passage.batch)
        return last is not None and passage.id <= last

    def mark(self, passage: Passage) -> None:
        self.last_done[passage.batch] = passage.id

    def save(self) -> None:
        if not self.path:
            return
        tmp = self.path.with_suffix(".tmp")
        payload = {"batches": {str(k): v for k, v in sorted(self.last_done.items())}}
        tmp.write_text(
            json.dumps(payload, sort_keys=True, ensure_ascii=False), encoding="utf-8"
        )
        os.replace(tmp, self.path)


def bounded_map(
    fn: Callable[[T], R], items: Sequence[T], workers: int
) -> Iterator[R]:
    """Ordered map over a worker pool with bounded in-flight submissions.

    Results arrive in input order no matter how workers are scheduled;
    with one worker the pool is skipped entirely.
    """
    if workers <= 1:
        for item in items:
            yield fn(item)
        return
    window = workers * 4
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = []
        it = iter(items)
        try:
            for item in it:
                pending.append(pool.submit(fn, item))
                if len(pending) >= window:
                    yield pending.pop(0).result()
            while pending:
                yield pending.pop(0).result()
        finally:
            for f in pending:
                f.cancel()


def generate_for_passages(
    passages: Sequence[Passage],
    client: GeneratorClient,
    style: PromptStyle,
    params: GenParams = GenParams(),
    *,
    model_tag: str | None = None,
    workers: int = 1,
    retries: int = 2,
    checkpoint_path: str | Path | None = None,
    resume: bool = False,
    abort_after_unavailable: int = 5,
    checkpoint_every: int = 100,
    per_pair_calls: bool = False,
) -> tuple[Iterator[Triplet], GenReport]:
    """Generate QA pairs for every passage through the provider.

    Returns a lazy triplet stream ordered by (batch, passage id,
    gen_index) regardless of worker scheduling, plus a report that is
    complete once the stream is exhausted. Failed passages are retried
    ``retries`` times then skipped; a run of consecutively unreachable
    calls aborts the pipeline after saving the resume checkpoint.

    By default one decoding pass per passage is parsed into at most
    ``params.pairs_per_passage`` pairs; ``per_pair_calls`` issues that
    many single-pair calls instead.
    """
    tag = model_tag or style.style_tag
    report = GenReport()
    checkpoint = Checkpoint(checkpoint_path)
    ordered = sorted(passages, key=lambda p: (p.batch, p.id))
    if resume:
        ordered = [p for p in ordered if not checkpoint.is_done(p)]
    for passage in ordered:
        format_prompt(passage, style)  # marker-collision check up front
    calls = params.pairs_per_passage if per_pair_calls else 1
    call_params = params.to_dict()
    if per_pair_calls:
        call_params["pairs_per_passage"] = 1

    def call(passage: Passage) -> tuple[Passage, list[str], str | None]:
        raws: list[str] = []
        for _ in range(calls):
            last_error: str | None = None
            for attempt in range(retries + 1):
                try:
                    raws.append(
                        client.generate(passage.text, style.style_tag, call_params)
                    )
                    last_error = None
                    break
                except ProviderUnavailable as e:
                    last_error = f"unavailable: {e}"
                except ProviderError as e:
                    last_error = str(e)
                logger.warning(
                    "generation attempt %d/%d failed for %s: %s",
                    attempt + 1,
                    retries + 1,
                    passage.id,
                    last_error,
                )
            if last_error is not None:
                return passage, [], last_error
        return passage, raws, None

    def stream() -> Iterator[Triplet]:
        consecutive_unavailable = 0
        since_save = 0
        try:
            for passage, raws, error in bounded_map(call, ordered, workers):
                if error is not None:
                    report.skipped.append(passage.id)
                    if error.startswith("unavailable:"):
                        consecutive_unavailable += 1
                        if consecutive_unavailable >= abort_after_unavailable:
                            checkpoint.save()
                            raise ProviderUnavailable(
                                f"generator unreachable for "
                                f"{consecutive_unavailable} consecutive passages; "
                                f"resume from checkpoint"
                            )
                    continue
                consecutive_unavailable = 0
                pairs = []
                for raw in raws:
                    cap = 1 if per_pair_calls else params.pairs_per_passage
                    parsed, parse_report = parse_generation(raw, style, cap)
                    report.malformed += parse_report.malformed
                    report.extra += parse_report.extra
                    pairs.extend(parsed)
                for gen_index, pair in enumerate(pairs[: params.pairs_per_passage]):
                    report.triplets += 1
                    yield Triplet(
                        passage.id,
                        QAPair(pair.question, pair.answer, gen_index),
                        model_tag=tag,
                    )
                report.passages += 1
                checkpoint.mark(passage)
                since_save += 1
                if since_save >= checkpoint_every:
                    checkpoint.save()
                    since_save = 0
        finally:
            checkpoint.save()

    return stream(), report
