"""Repeated-run statistics, heatmaps, ratio-sweep tables and report files."""

import csv
import io
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from scipy import stats  # noqa: E402

from . import __version__  # noqa: E402
from .errors import ConfigError, InputError, InsufficientDataError  # noqa: E402
from .ffn_stats import relative_difference  # noqa: E402
from .files import PathLike, read_json, sha256_file, write_atomic, write_json  # noqa: E402

logger = logging.getLogger(__name__)

Z_95 = 1.96
CI_METHODS = ("normal", "t")
HEATMAP_FORMATS = ("svg", "csv")
SCALES = ("auto", "diverging", "sequential")
DIVERGING_CMAP = "RdBu_r"
SEQUENTIAL_CMAP = "viridis"
SWEEP_METRICS = (
    "ffn_mean",
    "ffn_sparsity",
    "ffn_variance",
    "reasoning_entropy",
    "answer_entropy",
    "retrieval_score",
)


@dataclass(frozen=True)
class RunStatistics:
    """Mean, sample std and 95% CI half-width over n runs."""

    n: int
    mean: float
    std: float
    ci95: float
    method: str = "normal"

    @classmethod
    def from_summary(cls, mean: float, std: float, n: int, method: str = "normal") -> "RunStatistics":
        """Statistics from an already reported mean and std."""
        if n < 2:
            raise InsufficientDataError(f"a confidence interval needs n >= 2, got {n}")
        if std < 0:
            raise InputError(f"std must be >= 0, got {std}")
        return cls(n, float(mean), float(std), _critical_value(n, method) * std / math.sqrt(n), method)

    def to_dict(self) -> Dict[str, Any]:
        return {"n": self.n, "mean": self.mean, "std": self.std, "ci95": self.ci95, "method": self.method}


def _critical_value(n: int, method: str) -> float:
    if method == "normal":
        return Z_95
    if method == "t":
        return float(stats.t.ppf(0.975, n - 1))
    raise ConfigError(f"Unknown CI method: {method}. Supported: {', '.join(CI_METHODS)}")


def confidence_interval(samples: Sequence[float], method: str = "normal") -> RunStatistics:
    """Sample mean, sample std (n - 1) and 95% CI half-width.

    Args:
        samples: At least two run results
        method: "normal" (z = 1.96) or "t" (Student t, n - 1 dof)

    Returns:
        RunStatistics
    """
    values = np.asarray(list(samples), dtype=np.float64)
    if values.size < 2:
        raise InsufficientDataError(f"a confidence interval needs n >= 2, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise InputError("samples must be finite")
    return RunStatistics.from_summary(float(values.mean()), float(values.std(ddof=1)), int(values.size), method)


@dataclass(frozen=True)
class RunComparison:
    difference: float
    significant: bool


def compare_runs(a: RunStatistics, b: RunStatistics) -> RunComparison:
    """Difference of means; significant when it exceeds both CI half-widths."""
    difference = a.mean - b.mean
    return RunComparison(difference, abs(difference) > a.ci95 and abs(difference) > b.ci95)


@dataclass
class HeatmapSpec:
    """An L x M matrix to render, with labels, colour scale and format."""

    matrix: np.ndarray
    title: str = ""
    x_label: str = "head"
    y_label: str = "layer"
    scale: str = "auto"
    fmt: str = "svg"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got {self.scale!r}")
        if self.fmt not in HEATMAP_FORMATS:
            raise ConfigError(f"Unknown heatmap format: {self.fmt}. Supported: {', '.join(HEATMAP_FORMATS)}")

    @property
    def diverging(self) -> bool:
        """Signed matrices always get a scale centred at 0, whatever ``scale`` asks for."""
        if self.matrix.size and self.matrix.min() < 0:
            return True
        return self.scale == "diverging"

    def limits(self):
        """(vmin, vmax); a diverging scale is symmetric so 0 maps to the neutral colour."""
        if self.diverging:
            bound = float(np.abs(self.matrix).max()) or 1.0
            return -bound, bound
        low, high = float(self.matrix.min()), float(self.matrix.max())
        if low == high:
            high = low + 1.0
        return low, high


def _heatmap_csv(spec: HeatmapSpec) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow([spec.y_label] + [f"{spec.x_label}_{j}" for j in range(spec.matrix.shape[1])])
    for i, row in enumerate(spec.matrix):
        writer.writerow([i] + [repr(float(v)) for v in row])
    return buffer.getvalue()


def _heatmap_svg(spec: HeatmapSpec) -> str:
    vmin, vmax = spec.limits()
    rows, cols = spec.matrix.shape
    with matplotlib.rc_context({"svg.hashsalt": "probeforge", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.4 * cols + 2.0), max(2.5, 0.3 * rows + 1.5)))
        try:
            mesh = ax.pcolormesh(
                spec.matrix,
                cmap=DIVERGING_CMAP if spec.diverging else SEQUENTIAL_CMAP,
                vmin=vmin,
                vmax=vmax,
                edgecolors="none",
            )
            ax.set_xticks(np.arange(cols) + 0.5)
            ax.set_xticklabels([str(j) for j in range(cols)])
            ax.set_yticks(np.arange(rows) + 0.5)
            ax.set_yticklabels([str(i) for i in range(rows)])
            ax.set_xlabel(spec.x_label)
            ax.set_ylabel(spec.y_label)
            if spec.title:
                ax.set_title(spec.title)
            fig.colorbar(mesh, ax=ax)
            buffer = io.StringIO()
            fig.savefig(
                buffer,
                format="svg",
                metadata={"Date": None, "Description": f"vmin={vmin!r} vmax={vmax!r}"},
            )
        finally:
            plt.close(fig)
    return buffer.getvalue()


def emit_heatmap(spec: HeatmapSpec, path: PathLike) -> Path:
    """Write a heatmap as SVG or CSV; identical specs give identical bytes."""
    if spec.matrix.ndim != 2 or spec.matrix.size == 0:
        raise InputError(f"heatmap needs a non-empty 2-D matrix, got shape {spec.matrix.shape}")
    if not np.all(np.isfinite(spec.matrix)):
        raise InputError("heatmap matrix contains NaN or Inf")
    content = _heatmap_csv(spec) if spec.fmt == "csv" else _heatmap_svg(spec)
    path = write_atomic(path, content)
    logger.info("wrote %s heatmap %s", spec.fmt, path)
    return path


def provenance_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".provenance.json")


def write_report(
    payload: Any,
    path: PathLike,
    inputs: Iterable[PathLike] = (),
    config_echo: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write a JSON report plus a ``<out>.provenance.json`` sidecar.

    The report itself holds only the payload, so it is a deterministic
    function of the inputs; tool version, input digests and the effective
    configuration go to the sidecar.
    """
    path = write_json(path, payload)
    digests = OrderedDict()
    for item in inputs:
        digests[str(item)] = sha256_file(item)
    write_json(provenance_path(path), {
        "tool": "probeforge",
        "version": __version__,
        "inputs": digests,
        "config": config_echo or {},
    })
    return path


def _mean_or_none(values) -> Optional[float]:
    if values is None:
        return None
    values = np.asarray(values, dtype=np.float64)
    return float(values.mean()) if values.size else None


def sweep_metrics_from_artifacts(entry: Dict[str, Any], base_dir: Optional[Path] = None) -> Dict[str, Optional[float]]:
    """Collect sweep metrics for one ratio from numbers or result JSON files.

    ``entry`` may give metric values directly, or paths under the keys
    ``ffn_stats``, ``entropy`` and ``retrieval`` to files written by the
    corresponding commands.
    """
    def load(key: str) -> Dict[str, Any]:
        file = Path(entry[key])
        if base_dir is not None and not file.is_absolute():
            file = Path(base_dir) / file
        return read_json(file)

    metrics: Dict[str, Optional[float]] = {}
    if "ffn_stats" in entry:
        layers = load("ffn_stats")["layers"]
        metrics["ffn_mean"] = _mean_or_none([layer["mean"] for layer in layers])
        metrics["ffn_variance"] = _mean_or_none([layer["variance"] for layer in layers])
        metrics["ffn_sparsity"] = _mean_or_none([layer["sparsity"] for layer in layers])
    if "entropy" in entry:
        profile = load("entropy")
        metrics["reasoning_entropy"] = _mean_or_none(profile.get("reasoning"))
        metrics["answer_entropy"] = _mean_or_none(profile.get("answering"))
    if "retrieval" in entry:
        metrics["retrieval_score"] = float(np.sum(load("retrieval")["matrix"]))
    for key in SWEEP_METRICS:
        if key in entry:
            metrics[key] = None if entry[key] is None else float(entry[key])
    return metrics


def ratio_sweep_table(
    rows: Dict[str, Dict[str, Optional[float]]],
    baseline: str,
    metrics: Sequence[str] = SWEEP_METRICS,
) -> "OrderedDict[str, Dict[str, Optional[float]]]":
    """Percent relative change of every metric against the baseline row.

    Args:
        rows: Label (ratio) -> metric -> value
        baseline: Label of the reference row
        metrics: Metric columns

    Returns:
        Label -> metric -> 100 * (value - baseline) / baseline; None when
        either value is missing
    """
    if baseline not in rows:
        raise InputError(f"baseline {baseline!r} is not one of the sweep rows {sorted(rows)}")
    reference = rows[baseline]
    table: "OrderedDict[str, Dict[str, Optional[float]]]" = OrderedDict()
    for label, values in rows.items():
        changes: Dict[str, Optional[float]] = {}
        for metric in metrics:
            value, base = values.get(metric), reference.get(metric)
            changes[metric] = None if value is None or base is None else 100.0 * relative_difference(value, base)
        table[label] = changes
    return table


def render_sweep_csv(table: Dict[str, Dict[str, Optional[float]]], metrics: Sequence[str] = SWEEP_METRICS) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["ratio"] + list(metrics))
    for label, values in table.items():
        writer.writerow([label] + ["" if values.get(m) is None else f"{values[m]:.2f}" for m in metrics])
    return buffer.getvalue()
