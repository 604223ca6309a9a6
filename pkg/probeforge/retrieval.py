"""Needle-in-a-haystack retrieval scoring and retrieval-head analysis.

A head "retrieves" a needle token when, at the decode step that emits that
token, the head's argmax-attended position lies on the answer span of the
needle and holds the same token id. A head's score for one configuration is
the fraction of answer tokens it retrieved; the map averages configurations.
"""

import logging
import math
from collections import Counter, OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .errors import CompatibilityError, ConfigError, InputError, ShapeError
from .model import Checkpoint, GenerationOutput, generate_greedy
from .tokenizer import BOS_ID, encode, find_subsequence

logger = logging.getLogger(__name__)

Head = Tuple[int, int]

DEFAULT_CONTEXT_LENGTHS = (0, 64, 128, 256, 512)
DEFAULT_DEPTHS = (0.0, 0.25, 0.5, 0.75, 1.0)
DEFAULT_THRESHOLD = 0.1
MATCH_MODES = ("position", "token")


@dataclass
class NeedleConfig:
    """One needle-in-a-haystack suite.

    ``depth_fractions`` is either a list of depths in [0, 1] or the string
    "random", in which case ``random_depth_count`` depths are drawn from
    ``seed``. ``answer`` is the text k inside the needle; when omitted the
    whole needle is the answer.
    """

    needle: str
    question: str
    haystack_source: str
    answer: Optional[str] = None
    context_lengths: List[int] = field(default_factory=lambda: list(DEFAULT_CONTEXT_LENGTHS))
    depth_fractions: Union[List[float], str] = field(default_factory=lambda: list(DEFAULT_DEPTHS))
    repetitions: int = 1
    seed: int = 17
    random_depth_count: int = 5
    match_mode: str = "position"
    max_new: Optional[int] = None
    workers: int = 1

    def __post_init__(self):
        if not self.needle:
            raise ConfigError("needle must be non-empty")
        if self.answer is not None and not self.answer:
            raise ConfigError("answer must be non-empty when given")
        if self.answer is not None and self.answer not in self.needle:
            raise ConfigError(f"answer {self.answer!r} does not occur in the needle")
        self.context_lengths = [int(n) for n in self.context_lengths]
        if any(n < 0 for n in self.context_lengths):
            raise ConfigError("context lengths must be >= 0")
        if not self.context_lengths:
            raise ConfigError("at least one context length is required")
        if isinstance(self.depth_fractions, str):
            if self.depth_fractions != "random":
                raise ConfigError(f"depth_fractions must be a list or 'random', got {self.depth_fractions!r}")
            if self.random_depth_count < 1:
                raise ConfigError("random_depth_count must be >= 1")
        else:
            self.depth_fractions = [float(d) for d in self.depth_fractions]
            if not self.depth_fractions or any(not 0.0 <= d <= 1.0 for d in self.depth_fractions):
                raise ConfigError("depth fractions must be a non-empty list of values in [0, 1]")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.match_mode not in MATCH_MODES:
            raise ConfigError(f"match_mode must be one of {MATCH_MODES}, got {self.match_mode!r}")
        if self.max_new is not None and self.max_new < 1:
            raise ConfigError("max_new must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def depth_mode(self) -> str:
        return "random" if isinstance(self.depth_fractions, str) else "grid"

    def depths(self) -> List[float]:
        """Concrete depth list (drawn from the seed in random mode)."""
        if self.depth_mode == "grid":
            return list(self.depth_fractions)
        rng = np.random.default_rng(self.seed)
        return sorted(float(d) for d in rng.uniform(0.0, 1.0, self.random_depth_count))

    def answer_text(self) -> str:
        return self.answer if self.answer is not None else self.needle

    def configurations(self) -> List[Tuple[int, float, int]]:
        """All (context_length, depth, repetition) keys, sorted."""
        return sorted(
            (n, d, r)
            for n in self.context_lengths
            for d in self.depths()
            for r in range(self.repetitions)
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "needle": self.needle,
            "question": self.question,
            "haystack_source": self.haystack_source,
            "answer": self.answer,
            "context_lengths": list(self.context_lengths),
            "depth_fractions": self.depth_fractions if self.depth_mode == "random" else list(self.depth_fractions),
            "repetitions": self.repetitions,
            "seed": self.seed,
            "random_depth_count": self.random_depth_count,
            "match_mode": self.match_mode,
            "max_new": self.max_new,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Optional[Path] = None) -> "NeedleConfig":
        """Build from JSON; ``haystack_file`` (relative to base_dir) may replace ``haystack_source``."""
        if not isinstance(data, dict):
            raise ConfigError(f"needle config must be a JSON object, got {type(data).__name__}")
        data = dict(data)
        haystack_file = data.pop("haystack_file", None)
        if haystack_file is not None:
            path = Path(haystack_file)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            with open(path, 'r', encoding="utf-8") as f:
                data["haystack_source"] = f.read()
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown needle config fields: {', '.join(unknown)}")
        try:
            return cls(**data)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid needle config: {e}")


@dataclass
class NeedlePrompt:
    """A rendered needle prompt and the positions the score is measured on."""

    tokens: List[int]
    needle_span: Tuple[int, int]
    answer_positions: List[int]
    answer_tokens: List[int]


@dataclass
class ConfigurationScore:
    """Per-head scores of one (context_length, depth, repetition) configuration."""

    context_length: int
    depth: float
    repetition: int
    scores: np.ndarray
    generated_text: str = ""
    decisions: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def key(self) -> Tuple[int, float, int]:
        return (self.context_length, self.depth, self.repetition)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "context_length": self.context_length,
            "depth": self.depth,
            "repetition": self.repetition,
            "generated_text": self.generated_text,
            "matrix": self.scores.tolist(),
        }


@dataclass
class RetrievalScoreMap:
    """L x M retrieval scores averaged over configurations."""

    scores: np.ndarray
    configurations: List[ConfigurationScore] = field(default_factory=list)
    config_echo: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.size == 0:
            raise ShapeError(f"retrieval map must be a non-empty L x M matrix, got {self.scores.shape}")
        if np.any(~np.isfinite(self.scores)) or self.scores.min() < 0.0 or self.scores.max() > 1.0:
            raise InputError("retrieval scores must lie in [0, 1]")

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.scores.shape)

    def score(self, layer: int, head: int) -> float:
        return float(self.scores[layer, head])

    def to_dict(self, threshold: float = DEFAULT_THRESHOLD) -> Dict[str, Any]:
        heads = sorted(classify_retrieval_heads(self, threshold))
        return {
            "config_echo": self.config_echo,
            "matrix": self.scores.tolist(),
            "aggregates": {
                "overall": overall_retrieval_score(self),
                "mean": float(self.scores.mean()),
                "max": float(self.scores.max()),
                "threshold": threshold,
                "retrieval_heads": [list(h) for h in heads],
                "configurations": len(self.configurations),
            },
            "configurations": [c.to_dict() for c in self.configurations],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RetrievalScoreMap":
        if "matrix" not in data:
            raise InputError("retrieval score JSON has no 'matrix'")
        configurations = [
            ConfigurationScore(
                context_length=int(c["context_length"]),
                depth=float(c["depth"]),
                repetition=int(c["repetition"]),
                scores=np.asarray(c["matrix"], dtype=np.float64),
                generated_text=c.get("generated_text", ""),
            )
            for c in data.get("configurations", [])
        ]
        return cls(np.asarray(data["matrix"], dtype=np.float64), configurations, dict(data.get("config_echo", {})))


def _filler(source_tokens: List[int], length: int, seed: int, repetition: int) -> List[int]:
    if length == 0:
        return []
    if not source_tokens:
        raise ConfigError("haystack_source is empty but a non-zero context length was requested")
    rng = np.random.default_rng([seed, repetition])
    start = int(rng.integers(len(source_tokens)))
    return [source_tokens[(start + i) % len(source_tokens)] for i in range(length)]


def insertion_index(depth: float, context_length: int) -> int:
    """Filler index the needle is inserted at (round half up)."""
    return int(math.floor(depth * context_length + 0.5))


def build_needle_prompt(cfg: NeedleConfig, context_length: int, depth: float, repetition: int) -> NeedlePrompt:
    """Render BOS + filler-with-needle + question for one configuration."""
    needle = encode(cfg.needle)
    answer = encode(cfg.answer_text())
    offset = find_subsequence(needle, answer)
    if offset < 0:
        raise ConfigError("answer tokens do not occur in the needle tokens")

    filler = _filler(encode(cfg.haystack_source), context_length, cfg.seed, repetition)
    cut = insertion_index(depth, context_length)
    tokens = [BOS_ID] + filler[:cut] + needle + filler[cut:] + encode(cfg.question)
    start = 1 + cut
    return NeedlePrompt(
        tokens=tokens,
        needle_span=(start, start + len(needle)),
        answer_positions=[start + offset + i for i in range(len(answer))],
        answer_tokens=answer,
    )


def score_generation(output: GenerationOutput, prompt: NeedlePrompt, match_mode: str = "position"):
    """Per-head retrieval scores of one traced generation.

    Args:
        output: Greedy generation with per-step traces
        prompt: The needle prompt it was generated from
        match_mode: "position" counts each answer position once; "token"
            intersects matched token ids with k as multisets

    Returns:
        (L x M score matrix, list of per-step membership decisions)
    """
    if not output.steps:
        raise InputError("retrieval scoring needs a traced generation")
    n_layers, n_heads = output.steps[0].n_layers, output.steps[0].n_heads
    sequence = list(output.prompt_tokens) + list(output.generated_tokens)
    answer_positions = set(prompt.answer_positions)

    retrieved_positions: Dict[Head, Set[int]] = {}
    retrieved_tokens: Dict[Head, Counter] = {}
    decisions: List[Dict[str, Any]] = []
    for step, record in enumerate(output.steps):
        emitted = output.generated_tokens[step]
        attended = record.last_rows().argmax(axis=2)
        for layer in range(n_layers):
            for head in range(n_heads):
                position = int(attended[layer, head])
                on_answer = position in answer_positions
                same_token = sequence[position] == emitted
                if on_answer and same_token:
                    retrieved_positions.setdefault((layer, head), set()).add(position)
                    retrieved_tokens.setdefault((layer, head), Counter())[emitted] += 1
                decisions.append({
                    "step": step, "layer": layer, "head": head, "position": position,
                    "on_answer": on_answer, "same_token": same_token,
                })

    k = len(prompt.answer_tokens)
    scores = np.zeros((n_layers, n_heads), dtype=np.float64)
    for layer in range(n_layers):
        for head in range(n_heads):
            if match_mode == "position":
                hits = len(retrieved_positions.get((layer, head), ()))
            else:
                matched = retrieved_tokens.get((layer, head), Counter()) & Counter(prompt.answer_tokens)
                hits = sum(matched.values())
            scores[layer, head] = hits / k
    return scores, decisions


def _run_configuration(ckpt: Checkpoint, cfg: NeedleConfig, key: Tuple[int, float, int]) -> ConfigurationScore:
    context_length, depth, repetition = key
    prompt = build_needle_prompt(cfg, context_length, depth, repetition)
    max_new = cfg.max_new or len(prompt.answer_tokens)
    if len(prompt.tokens) + max_new > ckpt.config.max_seq_len:
        raise ConfigError(
            f"needle prompt of {len(prompt.tokens)} tokens + {max_new} new tokens at context length "
            f"{context_length} exceeds the model budget {ckpt.config.max_seq_len}"
        )
    output = generate_greedy(ckpt, prompt.tokens, max_new, trace=True)
    scores, decisions = score_generation(output, prompt, cfg.match_mode)
    logger.debug("config %s generated %r", key, output.text)
    return ConfigurationScore(context_length, depth, repetition, scores, output.text, decisions)


def run_needle_suite(ckpt: Checkpoint, cfg: NeedleConfig) -> RetrievalScoreMap:
    """Score every head over all needle configurations.

    Args:
        ckpt: Checkpoint to probe
        cfg: Suite definition

    Returns:
        RetrievalScoreMap; configurations are merged in sorted key order
    """
    keys = cfg.configurations()
    logger.info("running %d needle configurations with %d worker(s)", len(keys), cfg.workers)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            results = list(executor.map(lambda key: _run_configuration(ckpt, cfg, key), keys))
    else:
        results = [_run_configuration(ckpt, cfg, key) for key in keys]

    results.sort(key=lambda c: c.key)
    mean = np.mean(np.stack([c.scores for c in results]), axis=0)
    return RetrievalScoreMap(mean, results, cfg.to_dict())


def _check_threshold(threshold: float) -> None:
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {threshold}")


def classify_retrieval_heads(score_map: RetrievalScoreMap, threshold: float = DEFAULT_THRESHOLD) -> Set[Head]:
    """Heads whose score is strictly above threshold."""
    _check_threshold(threshold)
    layers, heads = np.nonzero(score_map.scores > threshold)
    return {(int(l), int(h)) for l, h in zip(layers, heads)}


def _check_same_shape(maps: Sequence[RetrievalScoreMap]) -> None:
    shapes = {m.shape for m in maps}
    if len(shapes) > 1:
        raise CompatibilityError(f"retrieval maps have different shapes {sorted(shapes)}")


def retrieval_head_intersection(maps: Sequence[RetrievalScoreMap], threshold: float = DEFAULT_THRESHOLD) -> Set[Head]:
    """Heads classified as retrieval heads in every map."""
    if not maps:
        raise InputError("at least one retrieval map is required")
    _check_same_shape(maps)
    result = classify_retrieval_heads(maps[0], threshold)
    for score_map in maps[1:]:
        result &= classify_retrieval_heads(score_map, threshold)
    return result


def overall_retrieval_score(score_map: RetrievalScoreMap) -> float:
    """Sum of all per-head scores."""
    return float(score_map.scores.sum())


def score_difference_map(a: RetrievalScoreMap, b: RetrievalScoreMap) -> np.ndarray:
    """Signed elementwise a - b."""
    _check_same_shape([a, b])
    return a.scores - b.scores


def common_retrieval_heads(
    maps: Sequence[RetrievalScoreMap],
    labels: Iterable[str],
    threshold: float = DEFAULT_THRESHOLD,
) -> "OrderedDict[Head, Dict[str, float]]":
    """Scores of the heads shared by every map's retrieval set, per map label."""
    labels = list(labels)
    if len(labels) != len(maps):
        raise InputError(f"{len(labels)} labels for {len(maps)} maps")
    shared = retrieval_head_intersection(maps, threshold)
    table: "OrderedDict[Head, Dict[str, float]]" = OrderedDict()
    for head in sorted(shared):
        table[head] = {label: m.score(*head) for label, m in zip(labels, maps)}
    return table


def count_better_heads(a: RetrievalScoreMap, b: RetrievalScoreMap, threshold: float = DEFAULT_THRESHOLD) -> Tuple[int, int]:
    """Over the union of both retrieval sets: (#heads where a > b, #heads where b > a)."""
    _check_same_shape([a, b])
    union = classify_retrieval_heads(a, threshold) | classify_retrieval_heads(b, threshold)
    a_better = sum(1 for head in union if a.score(*head) > b.score(*head))
    b_better = sum(1 for head in union if b.score(*head) > a.score(*head))
    return a_better, b_better
