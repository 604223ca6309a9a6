"""Corpus statistics and long/short mixing at a target token ratio."""

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, InputError, InsufficientDataError
from .files import iter_lines, write_lines
from .tokenizer import count_tokens

logger = logging.getLogger(__name__)

DEFAULT_LENGTH_THRESHOLD = 4096


@dataclass(frozen=True)
class Sample:
    """One corpus line: the raw JSON text (kept byte-exact) and its token count."""

    raw: str
    text: str
    tokens: int
    line_number: int = 0


def parse_sample(item: Any, line_number: int = 0) -> Optional[Sample]:
    """Sample from a JSON line or dict with a string ``text`` field; None if unusable."""
    raw = item if isinstance(item, str) else None
    if isinstance(item, str):
        try:
            item = json.loads(item)
        except json.JSONDecodeError:
            return None
    if not isinstance(item, dict) or not isinstance(item.get("text"), str):
        return None
    if raw is None:
        raw = json.dumps(item, ensure_ascii=False, sort_keys=True)
    return Sample(raw, item["text"], count_tokens(item["text"]), line_number)


def read_corpus(path: Union[str, Path]) -> Tuple[List[Sample], int]:
    """Read a JSONL corpus.

    Returns:
        (samples, number of skipped lines)
    """
    samples, skipped = [], 0
    for number, line in iter_lines(path):
        sample = parse_sample(line, number)
        if sample is None:
            skipped += 1
            logger.warning("%s:%d: skipping line without a string 'text' field", path, number)
        else:
            samples.append(sample)
    return samples, skipped


@dataclass
class CorpusStats:
    """Sample count and token totals; avg_length is total / count, unrounded."""

    sample_count: int = 0
    total_tokens: int = 0
    skipped: int = 0
    max_length: int = 0

    @property
    def avg_length(self) -> float:
        if self.sample_count == 0:
            raise InsufficientDataError("average length of an empty corpus is undefined")
        return self.total_tokens / self.sample_count

    def add(self, tokens: int) -> None:
        self.sample_count += 1
        self.total_tokens += tokens
        self.max_length = max(self.max_length, tokens)

    def merge(self, other: "CorpusStats") -> "CorpusStats":
        return CorpusStats(
            self.sample_count + other.sample_count,
            self.total_tokens + other.total_tokens,
            self.skipped + other.skipped,
            max(self.max_length, other.max_length),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sample_count": self.sample_count,
            "total_tokens": self.total_tokens,
            "avg_length": self.avg_length if self.sample_count else None,
            "max_length": self.max_length,
            "skipped": self.skipped,
        }


def compute_corpus_stats(corpus: Iterable[Any]) -> CorpusStats:
    """Count samples and tokens over a stream of Samples, JSON lines or dicts.

    Unusable items are skipped and counted.
    """
    stats = CorpusStats()
    for item in corpus:
        sample = item if isinstance(item, Sample) else parse_sample(item)
        if sample is None:
            stats.skipped += 1
            continue
        stats.add(sample.tokens)
    if stats.skipped:
        logger.warning("skipped %d unreadable samples", stats.skipped)
    return stats


def classify_long_short(sample: Union[Sample, str, int], threshold: int = DEFAULT_LENGTH_THRESHOLD) -> str:
    """'long' iff the token length is strictly above threshold."""
    if isinstance(sample, Sample):
        length = sample.tokens
    elif isinstance(sample, str):
        length = count_tokens(sample)
    else:
        length = int(sample)
    return "long" if length > threshold else "short"


@dataclass(frozen=True)
class MixSpec:
    """Long:short token ratio, budget and seed of one mixture."""

    long_ratio: int
    short_ratio: int
    token_budget: int
    length_threshold: int = DEFAULT_LENGTH_THRESHOLD
    seed: int = 17

    def __post_init__(self):
        if self.long_ratio < 0 or self.short_ratio < 0:
            raise ConfigError("ratio parts must be >= 0")
        if self.long_ratio == 0 and self.short_ratio == 0:
            raise ConfigError("ratio parts cannot both be zero")
        if self.token_budget <= 0:
            raise ConfigError("token_budget must be > 0")

    @property
    def target_long_share(self) -> float:
        return self.long_ratio / (self.long_ratio + self.short_ratio)

    @property
    def label(self) -> str:
        return f"{self.long_ratio}:{self.short_ratio}"


def parse_ratio(text: str) -> Tuple[int, int]:
    """Parse 'X:Y' into integer parts."""
    match = re.fullmatch(r"\s*(\d+)\s*:\s*(\d+)\s*", text)
    if not match:
        raise ConfigError(f"ratio must look like 'X:Y', got {text!r}")
    return int(match.group(1)), int(match.group(2))


@dataclass
class MixReport:
    spec: MixSpec
    long_tokens: int = 0
    short_tokens: int = 0
    long_samples: int = 0
    short_samples: int = 0
    shortfall: bool = False
    long_corpus_short_samples: int = 0
    short_corpus_long_samples: int = 0

    @property
    def total_tokens(self) -> int:
        return self.long_tokens + self.short_tokens

    @property
    def achieved_long_share(self) -> Optional[float]:
        return self.long_tokens / self.total_tokens if self.total_tokens else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ratio": self.spec.label,
            "token_budget": self.spec.token_budget,
            "length_threshold": self.spec.length_threshold,
            "seed": self.spec.seed,
            "target_long_share": self.spec.target_long_share,
            "achieved_long_share": self.achieved_long_share,
            "long_tokens": self.long_tokens,
            "short_tokens": self.short_tokens,
            "total_tokens": self.total_tokens,
            "long_samples": self.long_samples,
            "short_samples": self.short_samples,
            "shortfall": self.shortfall,
            "shortfall_tokens": max(0, self.spec.token_budget - self.total_tokens),
            "long_corpus_short_samples": self.long_corpus_short_samples,
            "short_corpus_long_samples": self.short_corpus_long_samples,
        }


def mix_corpora(long_corpus: Sequence[Sample], short_corpus: Sequence[Sample], spec: MixSpec) -> Tuple[List[Sample], MixReport]:
    """Draw samples without replacement until the token budget is met.

    Each corpus is visited in a seeded permutation. The next sample comes
    from the long corpus whenever the long share so far is at or below
    target, so the output overshoots the budget by at most one sample.

    Args:
        long_corpus: Long samples
        short_corpus: Short samples
        spec: Ratio, budget and seed

    Returns:
        (mixed samples in emission order, MixReport)
    """
    if spec.long_ratio > 0 and not long_corpus:
        raise InputError("long corpus is empty but the long ratio is non-zero")
    if spec.short_ratio > 0 and not short_corpus:
        raise InputError("short corpus is empty but the short ratio is non-zero")

    long_order = np.random.default_rng([spec.seed, 0]).permutation(len(long_corpus))
    short_order = np.random.default_rng([spec.seed, 1]).permutation(len(short_corpus))
    parts = spec.long_ratio + spec.short_ratio
    report = MixReport(spec)
    mixed: List[Sample] = []
    next_long = next_short = 0

    while report.total_tokens < spec.token_budget:
        take_long = spec.long_ratio > 0 and (
            spec.short_ratio == 0 or report.long_tokens * parts <= spec.long_ratio * report.total_tokens
        )
        if take_long:
            if next_long >= len(long_order):
                report.shortfall = True
                break
            sample = long_corpus[int(long_order[next_long])]
            next_long += 1
            report.long_tokens += sample.tokens
            report.long_samples += 1
            if classify_long_short(sample, spec.length_threshold) == "short":
                report.long_corpus_short_samples += 1
        else:
            if next_short >= len(short_order):
                report.shortfall = True
                break
            sample = short_corpus[int(short_order[next_short])]
            next_short += 1
            report.short_tokens += sample.tokens
            report.short_samples += 1
            if classify_long_short(sample, spec.length_threshold) == "long":
                report.short_corpus_long_samples += 1
        mixed.append(sample)

    if report.shortfall:
        logger.warning("mix %s ran out of samples at %d of %d tokens", spec.label, report.total_tokens, spec.token_budget)
    return mixed, report


def write_mix(samples: Sequence[Sample], path: Union[str, Path]) -> Path:
    """Write mixed samples as JSONL, each line exactly as read."""
    return write_lines(path, [sample.raw for sample in samples])
