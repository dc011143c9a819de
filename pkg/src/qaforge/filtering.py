"""The filtration cascade: four mandatory stages in fixed order plus four
optional ones, with a complete per-triplet audit trail.

Canonical stage order: interrogative, gold agreement, the optional
gold-adjacent gates (n-gram metrics, reader score, word mover's
distance), entity consistency, optional person/location matching, and
per-passage deduplication last. Disabled stages leave no trace in
verdicts. Survivor sets and reports are pure functions of the input,
the plan and provider responses, independent of worker count.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Mapping, Sequence

from .corpus import CorpusError, FilterConfig, FilterVerdict, Passage, Triplet
from .generation import bounded_map
from .metrics import MetricError, lemma_overlap, mean_ngram_metrics, word_movers_distance
from .providers import (
    EmbedderClient,
    FallbackNer,
    LemmatizerClient,
    NerClient,
    ProviderError,
    ReaderClient,
)
from .textproc import (
    TextProcError,
    WhLexicon,
    encode_codepoints,
    lemmas,
    lemmatize,
    similarity_arrays,
    tokenize,
)

logger = logging.getLogger(__name__)

STAGE_INTERROGATIVE = "interrogative"
STAGE_GOLD = "gold_agreement"
STAGE_NGRAM = "opt_ngram_metrics"
STAGE_READER_SCORE = "opt_reader_score"
STAGE_WMD = "opt_wmd"
STAGE_ENTITY = "entity_consistency"
STAGE_PERSON_LOCATION = "opt_person_location"
STAGE_DEDUP = "dedup"

CANONICAL_STAGE_ORDER = (
    STAGE_INTERROGATIVE,
    STAGE_GOLD,
    STAGE_NGRAM,
    STAGE_READER_SCORE,
    STAGE_WMD,
    STAGE_ENTITY,
    STAGE_PERSON_LOCATION,
    STAGE_DEDUP,
)

_CONFIG_TOGGLES = {
    STAGE_INTERROGATIVE: "enable_interrogative",
    STAGE_GOLD: "enable_gold_agreement",
    STAGE_NGRAM: "enable_ngram_metrics",
    STAGE_READER_SCORE: "enable_reader_score",
    STAGE_WMD: "enable_wmd",
    STAGE_ENTITY: "enable_entity_consistency",
    STAGE_PERSON_LOCATION: "enable_person_location",
    STAGE_DEDUP: "enable_dedup",
}

_GOLD_DEPENDENT = (STAGE_NGRAM, STAGE_READER_SCORE, STAGE_WMD)


@dataclass(frozen=True)
class StagePlan:
    """Enabled stages in canonical execution order."""

    stages: tuple[str, ...]

    def __post_init__(self):
        unknown = set(self.stages) - set(CANONICAL_STAGE_ORDER)
        if unknown:
            raise CorpusError(f"unknown stages {sorted(unknown)}")
        ordered = tuple(s for s in CANONICAL_STAGE_ORDER if s in self.stages)
        if ordered != self.stages:
            raise CorpusError(
                f"stages must follow canonical order {CANONICAL_STAGE_ORDER}"
            )

    @classmethod
    def from_config(cls, config: FilterConfig) -> "StagePlan":
        enabled = tuple(
            stage
            for stage in CANONICAL_STAGE_ORDER
            if getattr(config, _CONFIG_TOGGLES[stage])
        )
        plan = cls(enabled)
        gold_needed = [s for s in _GOLD_DEPENDENT if s in enabled]
        if gold_needed and STAGE_GOLD not in enabled:
            raise CorpusError(
                f"stages {gold_needed} need the gold-agreement stage enabled"
            )
        return plan


@dataclass
class StageResult:
    """Outcome of one stage for one triplet."""

    passed: bool
    scores: dict[str, float] = field(default_factory=dict)
    unresolved: bool = False
    gold_answer: str | None = None
    detail: str | None = None


@dataclass(frozen=True)
class FilterProviders:
    """Provider bundle for the model-backed stages. A missing NER client
    falls back to the capitalized-run heuristic; a missing lemmatizer
    means lowercasing. The reader (and embedder, for the distance gate)
    have no offline equivalent and must be supplied when their stages run."""

    reader: ReaderClient | None = None
    ner: NerClient | None = None
    embedder: EmbedderClient | None = None
    lemmatizer: LemmatizerClient | None = None

    @classmethod
    def stubs(cls) -> "FilterProviders":
        from .providers import HashEmbedder, KeywordReader

        return cls(reader=KeywordReader(), ner=FallbackNer(), embedder=HashEmbedder())


@dataclass
class FilterReport:
    """Aggregated cascade outcome: every rejection attributed to a stage,
    provider-unresolved triplets counted separately."""

    input: int = 0
    survivors: int = 0
    per_stage: dict[str, int] = field(default_factory=dict)
    unresolved: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "input": self.input,
            "survivors": self.survivors,
            "per_stage": dict(self.per_stage),
            "unresolved": self.unresolved,
        }


def stage_interrogative(
    triplet: Triplet,
    lexicon: WhLexicon | None = None,
    max_interrogatives: int = 1,
    lemma_provider: LemmatizerClient | None = None,
    question_lemmas: Sequence[str] | None = None,
) -> StageResult:
    """Reject questions with more question words than allowed."""
    if question_lemmas is None:
        question_lemmas = [
            t.lemma for t in lemmatize(tokenize(triplet.pair.question), lemma_provider)
        ]
    words = (lexicon or WhLexicon()).words
    count = 0
    for lemma in question_lemmas:
        if lemma in words:
            count += 1
    return StageResult(
        passed=count <= max_interrogatives, scores={"interrogatives": float(count)}
    )


def stage_gold_agreement(
    triplet: Triplet,
    passage: Passage,
    reader: ReaderClient,
    config: FilterConfig,
    lemma_provider: LemmatizerClient | None = None,
) -> StageResult:
    """Ask the reader for a gold answer and require lemma-set agreement.

    An exact lemmatized match gives overlap 1.0 and trivially passes;
    otherwise the overlap (in the configured mode) must reach the
    threshold. Reader failures mark the triplet unresolved.
    """
    try:
        gold, score = reader.answer(passage.text, triplet.pair.question)
    except (ProviderError, TextProcError) as e:
        return StageResult(passed=False, unresolved=True, detail=str(e))
    overlap = lemma_overlap(
        triplet.pair.answer, gold, config.overlap_mode, lemma_provider
    )
    return StageResult(
        passed=overlap >= config.lemma_overlap_threshold,
        scores={"lemma_overlap": overlap, "reader_score": score},
        gold_answer=gold,
    )


def _missing_entities(
    ner: NerClient, texts: Sequence[str], passage_lower: str, kinds=None
) -> tuple[list[str], int]:
    missing: list[str] = []
    seen = 0
    for text in texts:
        for ent in ner.entities(text):
            if kinds is not None and ent.kind not in kinds:
                continue
            seen += 1
            if ent.text.lower() not in passage_lower:
                missing.append(ent.text)
    return missing, seen


def stage_entity_consistency(
    triplet: Triplet,
    passage: Passage,
    ner: NerClient | None = None,
    passage_lower: str | None = None,
) -> StageResult:
    """Every entity in the question or answer must occur, case-folded, as
    a substring of the passage text. No entities passes vacuously."""
    ner = ner or FallbackNer()
    if passage_lower is None:
        passage_lower = passage.text.lower()
    try:
        missing, _ = _missing_entities(
            ner, (triplet.pair.question, triplet.pair.answer), passage_lower
        )
    except (ProviderError, TextProcError) as e:
        return StageResult(passed=False, unresolved=True, detail=str(e))
    return StageResult(
        passed=not missing,
        scores={"entity_missing": float(len(missing))},
        detail="missing: " + ", ".join(missing) if missing else None,
    )


def opt_person_location(
    triplet: Triplet,
    passage: Passage,
    ner: NerClient | None = None,
    passage_lower: str | None = None,
) -> StageResult:
    """Entity grounding restricted to person and location kinds, each
    checked independently."""
    ner = ner or FallbackNer()
    if passage_lower is None:
        passage_lower = passage.text.lower()
    texts = (triplet.pair.question, triplet.pair.answer)
    try:
        missing_persons, _ = _missing_entities(ner, texts, passage_lower, ("person",))
        missing_locations, _ = _missing_entities(
            ner, texts, passage_lower, ("location",)
        )
    except (ProviderError, TextProcError) as e:
        return StageResult(passed=False, unresolved=True, detail=str(e))
    missing = missing_persons + missing_locations
    return StageResult(
        passed=not missing,
        scores={
            "person_missing": float(len(missing_persons)),
            "location_missing": float(len(missing_locations)),
        },
        detail="missing: " + ", ".join(missing) if missing else None,
    )


def opt_ngram_metrics(
    triplet: Triplet,
    passage: Passage,
    gold_answer: str,
    config: FilterConfig,
    lemma_provider: LemmatizerClient | None = None,
    text_lemmas: Sequence[str] | None = None,
) -> StageResult:
    """Mean of BLEU, ROUGE-L and the METEOR variant over lemmatized tokens
    for each of the four string pairs (gold-answer, question-answer,
    text-answer, text-question); every mean must reach its threshold."""
    question = lemmas(triplet.pair.question, lemma_provider)
    answer = lemmas(triplet.pair.answer, lemma_provider)
    gold = lemmas(gold_answer, lemma_provider)
    text = (
        list(text_lemmas)
        if text_lemmas is not None
        else lemmas(passage.text, lemma_provider)
    )
    pairs = (
        ("ngram_gold_gen", gold, answer),
        ("ngram_question_gen", question, answer),
        ("ngram_text_gen", text, answer),
        ("ngram_text_question", text, question),
    )
    scores: dict[str, float] = {}
    passed = True
    for (name, reference, candidate), threshold in zip(pairs, config.ngram_thresholds):
        value = mean_ngram_metrics(reference, candidate)
        scores[name] = value
        if value < threshold:
            passed = False
    return StageResult(passed=passed, scores=scores)


def opt_reader_score(reader_score: float, config: FilterConfig) -> StageResult:
    """Keep only triplets whose reader confidence strictly exceeds the
    minimum (dropping examples the reader finds complicated)."""
    return StageResult(
        passed=reader_score > config.reader_score_min,
        scores={"reader_score": reader_score},
    )


def opt_wmd(
    triplet: Triplet,
    gold_answer: str,
    embedder: EmbedderClient,
    config: FilterConfig,
    lemma_provider: LemmatizerClient | None = None,
) -> StageResult:
    """Word mover's distance between generated and gold answers against
    the configured band; ``wmd_keep_inside`` sets the polarity."""
    try:
        distance = word_movers_distance(
            lemmas(triplet.pair.answer, lemma_provider),
            lemmas(gold_answer, lemma_provider),
            embedder,
        )
    except (ProviderError, TextProcError, MetricError) as e:
        return StageResult(passed=False, unresolved=True, detail=str(e))
    lo, hi = config.wmd_range
    inside = lo <= distance <= hi
    return StageResult(
        passed=inside == config.wmd_keep_inside, scores={"wmd": distance}
    )


def stage_dedup(
    triplets: Sequence[Triplet], config: FilterConfig
) -> tuple[list[Triplet], list[StageResult]]:
    """Drop near-duplicate pairs within one passage group.

    Scanning in input (generation) order, a triplet is a duplicate when
    some earlier survivor matches it with question similarity and answer
    similarity both strictly above the threshold. Recorded scores are the
    highest similarities observed against surviving predecessors (answer
    similarity is only computed when the question similarity exceeds the
    threshold). Idempotent: survivors never match each other.
    """
    if len({t.passage_id for t in triplets}) > 1:
        raise CorpusError("stage_dedup expects triplets of a single passage")
    threshold = config.dedup_threshold
    survivors: list[tuple[int, Any, Any]] = []  # (index, q_codes, a_codes)
    out_triplets: list[Triplet] = []
    results: list[StageResult] = []
    for idx, triplet in enumerate(triplets):
        q_codes = encode_codepoints(triplet.pair.question)
        a_codes = encode_codepoints(triplet.pair.answer)
        max_q = 0.0
        max_a = 0.0
        duplicate_of = -1
        for s_idx, s_q, s_a in survivors:
            q_sim = similarity_arrays(q_codes, s_q)
            if q_sim > max_q:
                max_q = q_sim
            if q_sim > threshold:
                a_sim = similarity_arrays(a_codes, s_a)
                if a_sim > max_a:
                    max_a = a_sim
                if a_sim > threshold:
                    duplicate_of = s_idx
                    break
        if duplicate_of >= 0:
            results.append(
                StageResult(
                    passed=False,
                    scores={"question_sim": max_q, "answer_sim": max_a},
                    detail=(
                        f"duplicate of gen_index "
                        f"{triplets[duplicate_of].pair.gen_index}"
                    ),
                )
            )
        else:
            survivors.append((idx, q_codes, a_codes))
            out_triplets.append(triplet)
            results.append(
                StageResult(
                    passed=True, scores={"question_sim": max_q, "answer_sim": max_a}
                )
            )
    return out_triplets, results


def group_by_passage(triplets: Iterable[Triplet]) -> Iterator[tuple[str, list[Triplet]]]:
    """Group a passage-contiguous triplet stream; a passage id appearing
    in two separate runs is an input-order error."""
    seen: set[str] = set()
    current_id: str | None = None
    current: list[Triplet] = []
    for t in triplets:
        if t.passage_id != current_id:
            if current:
                yield current_id, current  # type: ignore[misc]
            if t.passage_id in seen:
                raise CorpusError(
                    f"triplet stream not grouped: passage {t.passage_id!r} reappears"
                )
            seen.add(t.passage_id)
            current_id = t.passage_id
            current = []
        current.append(t)
    if current:
        yield current_id, current  # type: ignore[misc]


class FilterPipeline:
    """Configured cascade bound to providers; call :meth:`run` per stream."""

    def __init__(
        self,
        config: FilterConfig,
        providers: FilterProviders | None = None,
        lexicon: WhLexicon | None = None,
    ):
        self.config = config
        self.plan = StagePlan.from_config(config)
        self.providers = providers or FilterProviders()
        self.lexicon = lexicon or WhLexicon()
        if STAGE_GOLD in self.plan.stages and self.providers.reader is None:
            raise CorpusError("gold-agreement stage needs a reader provider")
        if STAGE_WMD in self.plan.stages and self.providers.embedder is None:
            raise CorpusError("word-distance stage needs an embedder provider")

    def process_group(
        self, passage: Passage, group: Sequence[Triplet]
    ) -> tuple[list[Triplet], dict[str, int], int]:
        """Run the cascade over one passage group; returns verdicted
        triplets in input order plus (stage rejections, unresolved) deltas."""
        cfg = self.config
        stages = self.plan.stages
        per_triplet_stages = [s for s in stages if s != STAGE_DEDUP]
        rejected_at: dict[str, int] = {}
        unresolved_count = 0
        passage_lower: str | None = None
        text_lemmas: list[str] | None = None
        lemma_provider = self.providers.lemmatizer
        pending: list[tuple[int, Triplet]] = []  # reached dedup
        states: list[tuple[dict[str, float], str | None, str | None, str | None]] = []

        for triplet in group:
            scores: dict[str, float] = {}
            gold_answer: str | None = None
            rejecting: str | None = None
            detail: str | None = None
            for stage in per_triplet_stages:
                if stage == STAGE_INTERROGATIVE:
                    result = stage_interrogative(
                        triplet, self.lexicon, cfg.max_interrogatives, lemma_provider
                    )
                elif stage == STAGE_GOLD:
                    result = stage_gold_agreement(
                        triplet, passage, self.providers.reader, cfg, lemma_provider
                    )
                elif stage == STAGE_NGRAM:
                    if text_lemmas is None:
                        text_lemmas = lemmas(passage.text, lemma_provider)
                    result = opt_ngram_metrics(
                        triplet, passage, gold_answer or "", cfg, lemma_provider,
                        text_lemmas,
                    )
                elif stage == STAGE_READER_SCORE:
                    result = opt_reader_score(scores.get("reader_score", 0.0), cfg)
                elif stage == STAGE_WMD:
                    result = opt_wmd(
                        triplet, gold_answer or "", self.providers.embedder, cfg,
                        lemma_provider,
                    )
                elif stage == STAGE_ENTITY:
                    if passage_lower is None:
                        passage_lower = passage.text.lower()
                    result = stage_entity_consistency(
                        triplet, passage, self.providers.ner, passage_lower
                    )
                else:  # STAGE_PERSON_LOCATION
                    if passage_lower is None:
                        passage_lower = passage.text.lower()
                    result = opt_person_location(
                        triplet, passage, self.providers.ner, passage_lower
                    )
                if result.unresolved:
                    if cfg.unresolved_policy == "skip":
                        continue
                    unresolved_count += 1
                    rejecting = stage
                    detail = f"unresolved: {result.detail}"
                    break
                scores.update(result.scores)
                if result.gold_answer is not None:
                    gold_answer = result.gold_answer
                if not result.passed:
                    rejecting = stage
                    rejected_at[stage] = rejected_at.get(stage, 0) + 1
                    detail = result.detail
                    break
            states.append((scores, gold_answer, rejecting, detail))
            if rejecting is None:
                pending.append((len(states) - 1, triplet))

        dedup_rejects: dict[int, StageResult] = {}
        dedup_passes: dict[int, StageResult] = {}
        if STAGE_DEDUP in stages and pending:
            _, results = stage_dedup([t for _, t in pending], cfg)
            for (state_idx, _), result in zip(pending, results):
                if result.passed:
                    dedup_passes[state_idx] = result
                else:
                    dedup_rejects[state_idx] = result
                    rejected_at[STAGE_DEDUP] = rejected_at.get(STAGE_DEDUP, 0) + 1
        elif pending:
            dedup_passes = {state_idx: StageResult(True) for state_idx, _ in pending}

        out: list[Triplet] = []
        for idx, triplet in enumerate(group):
            scores, gold_answer, rejecting, detail = states[idx]
            if rejecting is None:
                if idx in dedup_rejects:
                    result = dedup_rejects[idx]
                    scores.update(result.scores)
                    verdict = FilterVerdict(
                        passed=False,
                        rejected_at=STAGE_DEDUP,
                        scores=scores,
                        gold_answer=gold_answer,
                        detail=result.detail,
                    )
                else:
                    scores.update(dedup_passes[idx].scores)
                    verdict = FilterVerdict(
                        passed=True, scores=scores, gold_answer=gold_answer
                    )
            else:
                verdict = FilterVerdict(
                    passed=False,
                    rejected_at=rejecting,
                    scores=scores,
                    gold_answer=gold_answer,
                    detail=detail,
                )
            out.append(triplet.with_verdict(verdict))
        return out, rejected_at, unresolved_count

    def run(
        self,
        triplets: Iterable[Triplet],
        passages: Mapping[str, Passage],
        workers: int = 1,
    ) -> tuple[Iterator[Triplet], FilterReport]:
        """Filter a passage-grouped triplet stream.

        Returns a lazy stream of verdicted triplets (every input triplet
        appears exactly once, in order) and a report that is complete once
        the stream is exhausted.
        """
        report = FilterReport(per_stage={s: 0 for s in self.plan.stages})

        def job(item: tuple[str, list[Triplet]]):
            passage_id, group = item
            passage = passages.get(passage_id)
            if passage is None:
                raise CorpusError(f"triplet references unknown passage {passage_id!r}")
            return self.process_group(passage, group)

        def stream() -> Iterator[Triplet]:
            groups = group_by_passage(triplets)
            for out, rejected, unresolved in bounded_map(job, groups, workers):
                for t in out:
                    report.input += 1
                    if t.verdict.passed:
                        report.survivors += 1
                    yield t
                for stage, count in rejected.items():
                    report.per_stage[stage] += count
                report.unresolved += unresolved

        return stream(), report


def run_pipeline(
    triplets: Iterable[Triplet],
    passages: Mapping[str, Passage],
    config: FilterConfig,
    providers: FilterProviders | None = None,
    workers: int = 1,
) -> tuple[Iterator[Triplet], FilterReport]:
    """One-call form of :class:`FilterPipeline`."""
    pipeline = FilterPipeline(config, providers)
    return pipeline.run(triplets, passages, workers)
