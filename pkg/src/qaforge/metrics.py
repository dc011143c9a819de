"""Native scoring: BLEU, Self-BLEU, ROUGE-L, a METEOR variant, lemma
overlap, SQuAD EM/F1 and word mover's distance.

All bounded metrics live in [0, 1], score 1 on identical inputs and 0 on
vocabulary-disjoint ones. EM/F1 follow the standard SQuAD scorer with
Unicode punctuation stripping and no article removal (none in Russian).
"""

from __future__ import annotations

import logging
import math
import random
import statistics
import unicodedata
from bisect import bisect_left
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from .textproc import LemmaProvider, lemmas, ngrams

logger = logging.getLogger(__name__)

SMOOTHING_MODES = ("none", "add_one_high_order")


class MetricError(ValueError):
    """Inputs outside a metric's domain."""


class Embedder(Protocol):
    def vectors(self, words: Sequence[str]) -> dict[str, np.ndarray]: ...


@dataclass(frozen=True)
class BleuConfig:
    """BLEU order and smoothing. ``add_one_high_order`` adds one to both
    the clipped match count and the candidate count for orders above 1,
    which keeps short hypotheses from collapsing to zero while leaving
    unigram precision raw (so vocabulary-disjoint inputs still score 0)."""

    max_n: int = 4
    smoothing: str = "add_one_high_order"

    def __post_init__(self):
        if self.max_n < 1:
            raise MetricError(f"max_n must be >= 1, got {self.max_n}")
        if self.smoothing not in SMOOTHING_MODES:
            raise MetricError(f"unknown smoothing {self.smoothing!r}")


@dataclass(frozen=True)
class EmF1:
    """Exact-match flag and token-bag F1 for one prediction, as fractions."""

    em: float
    f1: float

    def __post_init__(self):
        if self.em not in (0.0, 1.0):
            raise MetricError(f"em must be 0 or 1, got {self.em}")
        if not 0.0 <= self.f1 <= 1.0:
            raise MetricError(f"f1 must be in [0, 1], got {self.f1}")


def _closest_ref_length(cand_len: int, ref_lengths: Sequence[int]) -> int:
    best = ref_lengths[0]
    best_diff = abs(best - cand_len)
    for r in ref_lengths[1:]:
        diff = abs(r - cand_len)
        if diff < best_diff or (diff == best_diff and r < best):
            best, best_diff = r, diff
    return best


def _brevity_penalty(cand_len: int, ref_len: int) -> float:
    if cand_len >= ref_len:
        return 1.0
    return math.exp(1.0 - ref_len / cand_len)


def bleu(
    hypothesis: Sequence[str],
    references: Sequence[Sequence[str]],
    config: BleuConfig = BleuConfig(),
) -> float:
    """Geometric mean of clipped n-gram precisions times brevity penalty.

    Orders run from 1 to ``min(config.max_n, len(hypothesis))`` with
    uniform weights, so hypotheses shorter than ``max_n`` are scored on
    the orders they support. The reference length for the brevity
    penalty is the closest one (ties break toward the shorter).
    """
    if not references or any(len(r) == 0 for r in references):
        raise MetricError("at least one non-empty reference is required")
    if len(hypothesis) == 0:
        logger.warning("bleu: empty hypothesis scored as 0")
        return 0.0
    max_n = min(config.max_n, len(hypothesis))
    smooth = config.smoothing == "add_one_high_order"
    log_sum = 0.0
    exact_one = True
    p1 = 1.0
    for n in range(1, max_n + 1):
        hyp_counts = ngrams(hypothesis, n)
        total = len(hypothesis) - n + 1
        clipped = 0
        max_ref: Counter = Counter()
        for ref in references:
            for gram, count in ngrams(ref, n).items():
                if count > max_ref[gram]:
                    max_ref[gram] = count
        for gram, count in hyp_counts.items():
            clipped += min(count, max_ref[gram])
        if smooth and n > 1:
            p = (clipped + 1) / (total + 1)
        else:
            if clipped == 0:
                return 0.0
            p = clipped / total
        if n == 1:
            p1 = p
        if p != 1.0:
            exact_one = False
            log_sum += math.log(p)
    ref_len = _closest_ref_length(len(hypothesis), [len(r) for r in references])
    bp = _brevity_penalty(len(hypothesis), ref_len)
    if exact_one:
        return bp
    if max_n == 1:
        # single-order path kept exact: no log/exp round trip
        return bp * p1
    return bp * math.exp(log_sum / max_n)


class _SampledBleu:
    """Self-BLEU scorer over a fixed sample: per-order n-gram count caps
    are precomputed (top count, its holder, runner-up) so each hypothesis
    can be clipped against "all other samples" without a quadratic scan."""

    def __init__(self, token_lists: list[list[str]], config: BleuConfig):
        self.token_lists = token_lists
        self.config = config
        self.caps: list[dict[tuple, tuple[int, int, int, int]]] = []
        for n in range(1, config.max_n + 1):
            table: dict[tuple, tuple[int, int, int, int]] = {}
            for idx, toks in enumerate(token_lists):
                for gram, count in ngrams(toks, n).items():
                    best, holder, holders_at_best, second = table.get(
                        gram, (0, -1, 0, 0)
                    )
                    if count > best:
                        second = best if holders_at_best > 0 else second
                        table[gram] = (count, idx, 1, second)
                    elif count == best:
                        table[gram] = (best, holder, holders_at_best + 1, second)
                    elif count > second:
                        table[gram] = (best, holder, holders_at_best, count)
            self.caps.append(table)
        counts = Counter(len(t) for t in token_lists)
        self.length_counts = counts
        self.sorted_lengths = sorted(counts)

    def _cap(self, n: int, gram: tuple, own_idx: int) -> int:
        entry = self.caps[n - 1].get(gram)
        if entry is None:
            return 0
        best, holder, holders_at_best, second = entry
        if holder == own_idx and holders_at_best == 1:
            return second
        return best

    def _closest_other_length(self, own_idx: int) -> int:
        c = len(self.token_lists[own_idx])
        if self.length_counts[c] >= 2:
            return c
        lengths = self.sorted_lengths
        pos = bisect_left(lengths, c)
        candidates = []
        for i in (pos - 1, pos, pos + 1):
            if 0 <= i < len(lengths) and lengths[i] != c:
                candidates.append(lengths[i])
        if not candidates:
            return c
        return _closest_ref_length(c, candidates)

    def score(self, own_idx: int) -> float:
        hyp = self.token_lists[own_idx]
        if not hyp:
            return 0.0
        max_n = min(self.config.max_n, len(hyp))
        smooth = self.config.smoothing == "add_one_high_order"
        log_sum = 0.0
        exact_one = True
        p1 = 1.0
        for n in range(1, max_n + 1):
            total = len(hyp) - n + 1
            clipped = 0
            for gram, count in ngrams(hyp, n).items():
                cap = self._cap(n, gram, own_idx)
                clipped += count if count < cap else cap
            if smooth and n > 1:
                p = (clipped + 1) / (total + 1)
            else:
                if clipped == 0:
                    return 0.0
                p = clipped / total
            if n == 1:
                p1 = p
            if p != 1.0:
                exact_one = False
                log_sum += math.log(p)
        ref_len = self._closest_other_length(own_idx)
        bp = _brevity_penalty(len(hyp), ref_len)
        if exact_one:
            return bp
        if max_n == 1:
            return bp * p1
        return bp * math.exp(log_sum / max_n)


def self_bleu(
    questions: Sequence[str],
    sample_size: int = 5000,
    seed: int = 0,
    provider: LemmaProvider | None = None,
    config: BleuConfig = BleuConfig(),
) -> float:
    """Median BLEU of each sampled question against all other sampled ones.

    Questions are lemmatized before scoring; the sample is seeded and at
    most ``sample_size`` large, so the result is reproducible and
    independent of worker scheduling. Lower medians mean more diverse
    questions.
    """
    if len(questions) < 2:
        raise MetricError("self_bleu needs at least 2 questions")
    if sample_size < 2:
        raise MetricError("sample_size must be >= 2")
    k = min(sample_size, len(questions))
    indices = sorted(random.Random(seed).sample(range(len(questions)), k))
    token_lists = [lemmas(questions[i], provider) for i in indices]
    scorer = _SampledBleu(token_lists, config)
    scores = [scorer.score(i) for i in range(len(token_lists))]
    return float(statistics.median(scores))


def rouge_l(reference: Sequence[str], candidate: Sequence[str]) -> float:
    """LCS-based F-measure (beta=1) between two token sequences."""
    if not reference and not candidate:
        logger.warning("rouge_l: both sequences empty, scored as 0")
        return 0.0
    if not reference or not candidate:
        return 0.0
    lcs = _lcs_length(reference, candidate)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    return 2.0 * precision * recall / (precision + recall)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        ai = a[i - 1]
        for j in range(1, len(b) + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = prev[j] if prev[j] >= cur[j - 1] else cur[j - 1]
        prev = cur
    return prev[len(b)]


METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5


def meteor_lite(
    reference: Sequence[str],
    candidate: Sequence[str],
    reference_lemmas: Sequence[str] | None = None,
    candidate_lemmas: Sequence[str] | None = None,
) -> float:
    """Unigram-alignment score with recall-weighted harmonic mean and a
    chunk fragmentation penalty (alpha=0.9, beta=3, gamma=0.5).

    Matching runs in two stages, exact surface then lemma equality (when
    lemma sequences are supplied), each pairing candidate tokens to the
    earliest unmatched reference position. A single-chunk alignment
    carries no penalty, so identical sequences score exactly 1. Synonym
    and paraphrase tables of the full metric are deliberately absent.
    """
    if not reference and not candidate:
        logger.warning("meteor_lite: both sequences empty, scored as 0")
        return 0.0
    if not reference or not candidate:
        return 0.0
    matches: dict[int, int] = {}  # candidate position -> reference position
    taken: set[int] = set()

    def run_stage(cand_keys: Sequence[str], ref_keys: Sequence[str]):
        positions: dict[str, list[int]] = {}
        for i, key in enumerate(ref_keys):
            positions.setdefault(key, []).append(i)
        for j, key in enumerate(cand_keys):
            if j in matches:
                continue
            for i in positions.get(key, ()):
                if i not in taken:
                    matches[j] = i
                    taken.add(i)
                    break

    run_stage(candidate, reference)
    if reference_lemmas is not None and candidate_lemmas is not None:
        if len(reference_lemmas) != len(reference) or len(candidate_lemmas) != len(
            candidate
        ):
            raise MetricError("lemma sequences must align with token sequences")
        run_stage(candidate_lemmas, reference_lemmas)

    m = len(matches)
    if m == 0:
        return 0.0
    precision = m / len(candidate)
    recall = m / len(reference)
    f_mean = precision * recall / (METEOR_ALPHA * precision + (1 - METEOR_ALPHA) * recall)
    ordered = sorted(matches.items())
    chunks = 1
    for (j_prev, i_prev), (j_cur, i_cur) in zip(ordered, ordered[1:]):
        if j_cur != j_prev + 1 or i_cur != i_prev + 1:
            chunks += 1
    penalty = 0.0 if chunks <= 1 else METEOR_GAMMA * (chunks / m) ** METEOR_BETA
    return f_mean * (1.0 - penalty)


def lemma_overlap(
    answer_a: str,
    answer_b: str,
    mode: str = "jaccard",
    provider: LemmaProvider | None = None,
) -> float:
    """Set overlap between the lemma sets of two answers.

    ``jaccard`` divides by the union, ``over_generated`` by the first
    answer's lemma set, ``over_gold`` by the second's. Empty denominators
    score 0.
    """
    set_a = set(lemmas(answer_a, provider))
    set_b = set(lemmas(answer_b, provider))
    inter = len(set_a & set_b)
    if mode == "jaccard":
        union = len(set_a | set_b)
        return inter / union if union else 0.0
    if mode == "over_generated":
        return inter / len(set_a) if set_a else 0.0
    if mode == "over_gold":
        return inter / len(set_b) if set_b else 0.0
    raise MetricError(f"unknown overlap mode {mode!r}")


def normalize_answer(s: str) -> str:
    """Lowercase, strip Unicode punctuation, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if not unicodedata.category(ch).startswith("P"))
    return " ".join(s.split())


def _token_bag_f1(pred_tokens: Sequence[str], gold_tokens: Sequence[str]) -> float:
    if not pred_tokens or not gold_tokens:
        return 1.0 if list(pred_tokens) == list(gold_tokens) else 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    num_same = sum(common.values())
    if num_same == 0:
        return 0.0
    precision = num_same / len(pred_tokens)
    recall = num_same / len(gold_tokens)
    return 2.0 * precision * recall / (precision + recall)


def squad_em_f1(prediction: str, golds: Sequence[str]) -> EmF1:
    """SQuAD exact match and best token-bag F1 over all gold answers."""
    if not golds:
        raise MetricError("at least one gold answer is required")
    norm_pred = normalize_answer(prediction)
    pred_tokens = norm_pred.split()
    em = 0.0
    f1 = 0.0
    for gold in golds:
        norm_gold = normalize_answer(gold)
        if norm_pred == norm_gold:
            em = 1.0
        f1 = max(f1, _token_bag_f1(pred_tokens, norm_gold.split()))
    return EmF1(em=em, f1=f1)


def word_movers_distance(
    tokens_a: Sequence[str],
    tokens_b: Sequence[str],
    embedder: Embedder,
) -> float:
    """Minimal transport cost between the two normalized token bags under
    pairwise Euclidean word distances, solved exactly as a linear program.

    Out-of-vocabulary tokens are skipped with a warning; if either side
    loses every token the distance is undefined and raises.
    """
    from scipy.optimize import linprog

    words = sorted(set(tokens_a) | set(tokens_b))
    vecs = embedder.vectors(words)
    oov = [w for w in words if w not in vecs]
    if oov:
        logger.warning("word_movers_distance: skipping OOV tokens %s", oov)
    bag_a = Counter(t for t in tokens_a if t in vecs)
    bag_b = Counter(t for t in tokens_b if t in vecs)
    if not bag_a or not bag_b:
        raise MetricError("word_movers_distance undefined: a side is all OOV")
    if bag_a == bag_b:
        return 0.0
    words_a = sorted(bag_a)
    words_b = sorted(bag_b)
    u = np.array([bag_a[w] for w in words_a], dtype=float)
    v = np.array([bag_b[w] for w in words_b], dtype=float)
    u /= u.sum()
    v /= v.sum()
    va = np.stack([np.asarray(vecs[w], dtype=float) for w in words_a])
    vb = np.stack([np.asarray(vecs[w], dtype=float) for w in words_b])
    diff = va[:, None, :] - vb[None, :, :]
    cost = np.sqrt((diff * diff).sum(axis=2))
    m, n = len(words_a), len(words_b)
    a_eq = np.zeros((m + n, m * n))
    for i in range(m):
        a_eq[i, i * n : (i + 1) * n] = 1.0
    for j in range(n):
        a_eq[m + j, j::n] = 1.0
    b_eq = np.concatenate([u, v])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:  # pragma: no cover - tiny feasible LPs always solve
        raise MetricError(f"transport solve failed: {res.message}")
    return max(0.0, float(res.fun))


def mean_ngram_metrics(
    reference: Sequence[str],
    candidate: Sequence[str],
    bleu_config: BleuConfig = BleuConfig(),
) -> float:
    """Mean of BLEU, ROUGE-L and the METEOR variant for one string pair;
    the agreement score used by the optional n-gram filter stage."""
    if not reference or not candidate:
        return 0.0
    b = bleu(candidate, [reference], bleu_config)
    r = rouge_l(reference, candidate)
    m = meteor_lite(reference, candidate)
    return (b + r + m) / 3.0


def percent(x: float) -> float:
    return 100.0 * x


__all__ = [
    "BleuConfig",
    "EmF1",
    "Embedder",
    "MetricError",
    "bleu",
    "lemma_overlap",
    "mean_ngram_metrics",
    "meteor_lite",
    "normalize_answer",
    "percent",
    "rouge_l",
    "self_bleu",
    "squad_em_f1",
    "word_movers_distance",
]
