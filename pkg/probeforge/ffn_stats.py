"""FFN activation statistics: mean, population variance and sparsity per layer."""

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import CompatibilityError, InputError, UndefinedBaselineError
from .files import write_atomic
from .model import Checkpoint, forward

logger = logging.getLogger(__name__)

DEFAULT_TAU = 1e-3
DELTA_COLUMNS = ("layer", "d_mean", "d_variance", "d_sparsity")


@dataclass
class LayerStats:
    """Streaming accumulator for one layer (count, mean, sum of squared deviations)."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0
    inactive: int = 0

    @classmethod
    def from_values(cls, values: np.ndarray, tau: float) -> "LayerStats":
        x = np.asarray(values, dtype=np.float64).ravel()
        if x.size == 0:
            return cls()
        mean = float(x.mean())
        return cls(
            count=int(x.size),
            mean=mean,
            m2=float(np.sum((x - mean) ** 2)),
            inactive=int(np.count_nonzero(np.abs(x) <= tau)),
        )

    def merge(self, other: "LayerStats") -> "LayerStats":
        """Combine two partial accumulators (parallel variance update)."""
        if other.count == 0:
            return LayerStats(self.count, self.mean, self.m2, self.inactive)
        if self.count == 0:
            return LayerStats(other.count, other.mean, other.m2, other.inactive)
        count = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / count
        m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / count
        return LayerStats(count, mean, m2, self.inactive + other.inactive)

    @property
    def variance(self) -> float:
        return self.m2 / self.count if self.count else 0.0

    @property
    def sparsity(self) -> float:
        return self.inactive / self.count if self.count else 0.0


@dataclass
class ActivationStats:
    """Per-layer FFN activation statistics of one checkpoint over a prompt set."""

    layers: List[LayerStats] = field(default_factory=list)
    tau: float = DEFAULT_TAU
    prompt_count: int = 0

    @property
    def means(self) -> List[float]:
        return [layer.mean for layer in self.layers]

    @property
    def variances(self) -> List[float]:
        return [layer.variance for layer in self.layers]

    @property
    def sparsities(self) -> List[float]:
        return [layer.sparsity for layer in self.layers]

    @property
    def sample_count(self) -> int:
        return self.layers[0].count if self.layers else 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tau": self.tau,
            "prompt_count": self.prompt_count,
            "layers": [
                {
                    "layer": i,
                    "mean": layer.mean,
                    "variance": layer.variance,
                    "sparsity": layer.sparsity,
                    "sample_count": layer.count,
                    "m2": layer.m2,
                    "inactive": layer.inactive,
                }
                for i, layer in enumerate(self.layers)
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ActivationStats":
        try:
            layers = []
            for entry in data["layers"]:
                count = int(entry["sample_count"])
                m2 = float(entry.get("m2", float(entry["variance"]) * count))
                inactive = int(entry.get("inactive", round(float(entry["sparsity"]) * count)))
                layers.append(LayerStats(count, float(entry["mean"]), m2, inactive))
            return cls(layers, float(data["tau"]), int(data.get("prompt_count", 0)))
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"not an activation stats document: {e}")


def _merge_tree(partials: List[List[LayerStats]]) -> List[LayerStats]:
    """Pairwise merge of per-prompt accumulators in a fixed order."""
    level = partials
    while len(level) > 1:
        merged = []
        for i in range(0, len(level) - 1, 2):
            merged.append([a.merge(b) for a, b in zip(level[i], level[i + 1])])
        if len(level) % 2:
            merged.append(level[-1])
        level = merged
    return level[0]


def collect_activation_stats(
    ckpt: Checkpoint,
    prompts: Sequence[Sequence[int]],
    tau: float = DEFAULT_TAU,
) -> ActivationStats:
    """Pool FFN activations g(H~ W_in) per layer over every prompt token and neuron.

    Args:
        ckpt: Checkpoint to probe
        prompts: Token sequences
        tau: Values with |a| <= tau count as inactive

    Returns:
        ActivationStats
    """
    if not prompts:
        raise InputError("collect_activation_stats needs at least one prompt")
    if tau < 0:
        raise InputError(f"tau must be >= 0, got {tau}")

    # sorted so the merge tree does not depend on prompt order
    ordered = sorted(tuple(int(t) for t in prompt) for prompt in prompts)
    partials = []
    for tokens in ordered:
        _, record = forward(ckpt, tokens, trace=True)
        partials.append([LayerStats.from_values(act, tau) for act in record.ffn_act])
    logger.info("collected FFN activations over %d prompts", len(ordered))
    return ActivationStats(_merge_tree(partials), float(tau), len(ordered))


def relative_difference(m_c: float, m_u: float) -> float:
    """(m_c - m_u) / m_u."""
    if m_u == 0:
        raise UndefinedBaselineError(f"relative difference against a zero baseline (m_c={m_c})")
    return (m_c - m_u) / m_u


def _layer_delta(m_c: float, m_u: float) -> Optional[float]:
    try:
        return relative_difference(m_c, m_u)
    except UndefinedBaselineError:
        # 0 -> 0 is no change; anything -> nonzero from 0 has no relative value
        return 0.0 if m_c == 0 else None


def stats_profile_diff(a: ActivationStats, b: ActivationStats) -> List[Dict[str, Any]]:
    """Per-layer relative differences of a against baseline b.

    Returns:
        Rows with keys layer, d_mean, d_variance, d_sparsity
    """
    differing = []
    if len(a.layers) != len(b.layers):
        differing.append("layers")
    if a.tau != b.tau:
        differing.append("tau")
    if differing:
        raise CompatibilityError("activation stats are not comparable", differing)

    rows = []
    for i, (x, y) in enumerate(zip(a.layers, b.layers)):
        rows.append({
            "layer": i,
            "d_mean": _layer_delta(x.mean, y.mean),
            "d_variance": _layer_delta(x.variance, y.variance),
            "d_sparsity": _layer_delta(x.sparsity, y.sparsity),
        })
    return rows


def write_delta_csv(rows: List[Dict[str, Any]], path: Union[str, Path]) -> Path:
    """Write stats_profile_diff rows as CSV (undefined deltas left empty)."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(DELTA_COLUMNS)
    for row in rows:
        writer.writerow(["" if row[c] is None else repr(row[c]) for c in DELTA_COLUMNS])
    return write_atomic(path, buffer.getvalue())
