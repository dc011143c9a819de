"""Build a passage store from raw corpora.

Raw records are dicts with at least a ``text`` field (``title``,
``categories`` and ``id`` are optional). Ingest drops disambiguation
pages by category pattern, exact-duplicate texts (first occurrence
wins), and texts outside the configured length bounds, then balanced
batches are assigned by seeded hash order.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Iterable

from .corpus import CorpusError, Passage

logger = logging.getLogger(__name__)

#: Category substrings (lowercase) that mark disambiguation pages.
DEFAULT_EXCLUDE_CATEGORY_PATTERNS = (
    "страницы значений",
    "неоднозначност",
    "disambiguation",
)

#: Character-length bounds applied per text genre when the config leaves
#: them unset: news up to 3500, social and fiction up to 3000, reviews
#: between 501 and 1007.
DOMAIN_LENGTH_LIMITS: dict[str, tuple[int | None, int | None]] = {
    "wiki": (None, None),
    "news": (None, 3500),
    "social": (None, 3000),
    "reviews": (501, 1007),
    "fiction": (None, 3000),
    "other": (None, None),
}


@dataclass(frozen=True)
class IngestConfig:
    batch_count: int = 20
    min_chars: int | None = None
    max_chars: int | None = None
    exclude_category_patterns: tuple[str, ...] = DEFAULT_EXCLUDE_CATEGORY_PATTERNS

    def __post_init__(self):
        if self.batch_count < 1:
            raise CorpusError(f"batch_count must be >= 1, got {self.batch_count}")
        if (
            self.min_chars is not None
            and self.max_chars is not None
            and not self.min_chars < self.max_chars
        ):
            raise CorpusError(
                f"min_chars must be < max_chars, got {self.min_chars}/{self.max_chars}"
            )
        object.__setattr__(
            self,
            "exclude_category_patterns",
            tuple(p.lower() for p in self.exclude_category_patterns),
        )

    @classmethod
    def for_domain(cls, domain_tag: str, **overrides: Any) -> "IngestConfig":
        """Config with the genre's default length bounds filled in."""
        lo, hi = DOMAIN_LENGTH_LIMITS.get(domain_tag, (None, None))
        kwargs: dict[str, Any] = {"min_chars": lo, "max_chars": hi}
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)


@dataclass
class IngestReport:
    """Per-reason drop counts for one ingest run."""

    input: int = 0
    kept: int = 0
    empty: int = 0
    disambiguation: int = 0
    too_short: int = 0
    too_long: int = 0
    duplicate: int = 0

    def to_dict(self) -> dict[str, int]:
        return {
            "input": self.input,
            "kept": self.kept,
            "dropped": {
                "empty": self.empty,
                "disambiguation": self.disambiguation,
                "too_short": self.too_short,
                "too_long": self.too_long,
                "duplicate": self.duplicate,
            },
        }


def ingest(
    records: Iterable[dict[str, Any]],
    config: IngestConfig = IngestConfig(),
    domain_tag: str = "wiki",
) -> tuple[list[Passage], IngestReport]:
    """Filter raw records into passages (batch ids still unassigned).

    Drop checks run in a fixed order per record: empty text, excluded
    category, length bounds, duplicate text. Records without an ``id``
    get a deterministic one from their input ordinal. An empty result is
    reported with a warning, not an error.
    """
    report = IngestReport()
    passages: list[Passage] = []
    seen_texts: set[bytes] = set()
    seen_ids: set[str] = set()
    patterns = config.exclude_category_patterns
    for ordinal, record in enumerate(records, 1):
        report.input += 1
        text = record.get("text") or ""
        if not text.strip():
            report.empty += 1
            continue
        categories = tuple(record.get("categories") or ())
        if patterns and any(
            pat in cat.lower() for cat in categories for pat in patterns
        ):
            report.disambiguation += 1
            continue
        if config.min_chars is not None and len(text) < config.min_chars:
            report.too_short += 1
            continue
        if config.max_chars is not None and len(text) > config.max_chars:
            report.too_long += 1
            continue
        digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
        if digest in seen_texts:
            report.duplicate += 1
            continue
        seen_texts.add(digest)
        pid = str(record.get("id") or f"{domain_tag}-{ordinal:08d}")
        if pid in seen_ids:
            raise CorpusError(f"duplicate passage id {pid!r} in raw records")
        seen_ids.add(pid)
        passages.append(
            Passage(
                id=pid,
                title=str(record.get("title") or ""),
                text=text,
                categories=categories,
                batch=0,
                domain_tag=domain_tag,
            )
        )
        report.kept += 1
    if not passages:
        logger.warning("ingest produced an empty passage store")
    return passages, report


def assign_batches(
    passages: list[Passage], batch_count: int, seed: int = 0
) -> list[Passage]:
    """Assign every passage to one of ``batch_count`` balanced batches.

    Passages are ranked by a seeded stable hash of their id and dealt
    round robin, so batch sizes differ by at most one and the assignment
    depends only on (ids, batch_count, seed). Input order is preserved.
    """
    if batch_count < 1:
        raise CorpusError(f"batch_count must be >= 1, got {batch_count}")

    def sort_key(p: Passage) -> tuple[str, str]:
        h = hashlib.blake2b(f"{seed}:{p.id}".encode("utf-8"), digest_size=16)
        return (h.hexdigest(), p.id)

    batch_of = {
        p.id: rank % batch_count
        for rank, p in enumerate(sorted(passages, key=sort_key))
    }
    return [replace(p, batch=batch_of[p.id]) for p in passages]
