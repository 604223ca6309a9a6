"""Phase-split attention entropy.

Each decode step contributes the entropy (nats) of every head's attention
row for the query that produced the token. Steps before the split are the
reasoning phase, steps at or after it the answering phase.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .errors import CompatibilityError, InputError
from .model import GenerationOutput, TraceRecord

logger = logging.getLogger(__name__)

QUADRANTS = ("favorable", "unfavorable", "confident_rigid", "flexible_diffuse", "neutral")


def row_entropy(row: np.ndarray) -> float:
    """Shannon entropy of one probability row, with 0 log 0 = 0."""
    p = np.asarray(row, dtype=np.float64)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def step_entropies(record: TraceRecord) -> np.ndarray:
    """[L x M] entropies of the last query row of every head."""
    rows = record.last_rows().astype(np.float64)
    logs = np.log(np.where(rows > 0, rows, 1.0))
    return -np.sum(rows * logs, axis=2)


def _matrix_or_none(value) -> Optional[np.ndarray]:
    return None if value is None else np.asarray(value, dtype=np.float64)


@dataclass
class EntropyProfile:
    """Mean per-head entropies of the reasoning and answering phases.

    A phase with no decode steps is None.
    """

    reasoning: Optional[np.ndarray]
    answering: Optional[np.ndarray]
    reasoning_steps: int = 0
    answering_steps: int = 0

    def __post_init__(self):
        self.reasoning = _matrix_or_none(self.reasoning)
        self.answering = _matrix_or_none(self.answering)

    @property
    def shape(self):
        matrix = self.reasoning if self.reasoning is not None else self.answering
        return None if matrix is None else tuple(matrix.shape)

    def layer_means(self, phase: str) -> Optional[List[float]]:
        """Per-layer mean over heads for 'reasoning' or 'answering'."""
        matrix = getattr(self, phase)
        if matrix is None:
            return None
        return [float(v) for v in matrix.mean(axis=1)]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "reasoning": None if self.reasoning is None else self.reasoning.tolist(),
            "answering": None if self.answering is None else self.answering.tolist(),
            "reasoning_steps": self.reasoning_steps,
            "answering_steps": self.answering_steps,
            "aggregates": {
                "reasoning_layer_means": self.layer_means("reasoning"),
                "answering_layer_means": self.layer_means("answering"),
            },
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EntropyProfile":
        return cls(
            data.get("reasoning"),
            data.get("answering"),
            int(data.get("reasoning_steps", 0)),
            int(data.get("answering_steps", 0)),
        )


def attention_entropy(traces: Sequence[TraceRecord], phase_split: int) -> EntropyProfile:
    """Average per-head entropy over each phase of one generation.

    Args:
        traces: Per-step trace records of one generation
        phase_split: First answering step (0..len(traces))

    Returns:
        EntropyProfile
    """
    if not traces:
        raise InputError("attention_entropy needs at least one decode step")
    if not 0 <= phase_split <= len(traces):
        raise InputError(f"phase_split {phase_split} outside [0, {len(traces)}]")

    per_step = [step_entropies(record) for record in traces]
    reasoning = per_step[:phase_split]
    answering = per_step[phase_split:]
    return EntropyProfile(
        reasoning=np.mean(reasoning, axis=0) if reasoning else None,
        answering=np.mean(answering, axis=0) if answering else None,
        reasoning_steps=len(reasoning),
        answering_steps=len(answering),
    )


def profile_from_generation(output: GenerationOutput) -> EntropyProfile:
    """Split a traced generation at its answer marker; no marker means all reasoning."""
    if not output.steps:
        raise InputError("generation has no traces; run generate_greedy with trace=True")
    split = output.answer_marker_index
    if split is None:
        logger.warning("answer marker not found; every step counts as reasoning")
        split = len(output.steps)
    return attention_entropy(output.steps, split)


def quadrant(d_reasoning: Optional[float], d_answer: Optional[float]) -> str:
    """Label one layer's (reasoning, answer) entropy change of model a relative to b."""
    if d_reasoning is None or d_answer is None or d_reasoning == 0 or d_answer == 0:
        return "neutral"
    if d_answer < 0 and d_reasoning > 0:
        return "favorable"
    if d_answer > 0 and d_reasoning < 0:
        return "unfavorable"
    if d_answer < 0:
        return "confident_rigid"
    return "flexible_diffuse"


@dataclass
class EntropyDifference:
    """a - b entropy changes: per-head matrices, per-layer means and quadrant labels."""

    reasoning: Optional[np.ndarray]
    answering: Optional[np.ndarray]
    layer_reasoning: List[Optional[float]]
    layer_answer: List[Optional[float]]
    labels: List[str]

    def pairs(self):
        return list(zip(self.layer_reasoning, self.layer_answer))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "reasoning": None if self.reasoning is None else self.reasoning.tolist(),
            "answering": None if self.answering is None else self.answering.tolist(),
            "layers": [
                {"layer": i, "d_reasoning": r, "d_answer": a, "quadrant": label}
                for i, (r, a, label) in enumerate(zip(self.layer_reasoning, self.layer_answer, self.labels))
            ],
        }


def entropy_difference(a: EntropyProfile, b: EntropyProfile) -> EntropyDifference:
    """Compare two profiles layer by layer.

    Args:
        a: Profile of the model being judged
        b: Reference profile

    Returns:
        EntropyDifference with a - b values
    """
    if a.shape is None or b.shape is None:
        raise InputError("both profiles need at least one non-empty phase")
    if a.shape != b.shape:
        raise CompatibilityError(f"entropy profiles have different shapes {a.shape} and {b.shape}")
    n_layers = a.shape[0]

    def delta(phase: str) -> Optional[np.ndarray]:
        x, y = getattr(a, phase), getattr(b, phase)
        return None if x is None or y is None else x - y

    d_reasoning = delta("reasoning")
    d_answering = delta("answering")
    layer_reasoning = [None] * n_layers if d_reasoning is None else [float(v) for v in d_reasoning.mean(axis=1)]
    layer_answer = [None] * n_layers if d_answering is None else [float(v) for v in d_answering.mean(axis=1)]
    labels = [quadrant(r, ans) for r, ans in zip(layer_reasoning, layer_answer)]
    return EntropyDifference(d_reasoning, d_answering, layer_reasoning, layer_answer, labels)
