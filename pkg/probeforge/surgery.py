"""Module replacement between architecture-compatible checkpoints."""

import logging
import re
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import CompatibilityError, ConfigError
from .model import ATTN_PARTS, FFN_PARTS, Checkpoint

logger = logging.getLogger(__name__)

MODULE_KINDS = ("mha", "ffn")


@dataclass(frozen=True)
class SwapSpec:
    """Which module to transplant, and in which layers (inclusive range, default all)."""

    module_kind: str
    layer_range: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.module_kind not in MODULE_KINDS:
            raise ConfigError(f"module_kind must be one of {MODULE_KINDS}, got {self.module_kind!r}")
        if self.layer_range is not None:
            start, end = self.layer_range
            if start > end:
                raise ConfigError(f"layer range {start}..{end} is empty")

    def layers(self, n_layers: int) -> List[int]:
        """Layers covered for a model with n_layers."""
        if self.layer_range is None:
            return list(range(n_layers))
        start, end = self.layer_range
        if start < 0 or end >= n_layers:
            raise ConfigError(f"layer range {start}..{end} outside [0, {n_layers})")
        return list(range(start, end + 1))


def parse_layer_range(text: str) -> Tuple[int, int]:
    """Parse 'i..j' (inclusive) or a single layer 'i'."""
    match = re.fullmatch(r"\s*(\d+)\s*(?:\.\.\s*(\d+)\s*)?", text)
    if not match:
        raise ConfigError(f"layer range must look like 'i..j', got {text!r}")
    start = int(match.group(1))
    end = int(match.group(2)) if match.group(2) is not None else start
    return start, end


def module_tensor_names(ckpt: Checkpoint, spec: SwapSpec) -> List[str]:
    """Tensor names moved by a swap; norm scales travel with their module."""
    names = []
    for layer in spec.layers(ckpt.config.n_layers):
        if spec.module_kind == "mha":
            names.extend(f"layer.{layer}.attn.{part}" for part in ATTN_PARTS)
            norm = f"layer.{layer}.norm.attn"
        else:
            names.extend(f"layer.{layer}.ffn.{part}" for part in FFN_PARTS)
            norm = f"layer.{layer}.norm.ffn"
        if ckpt.config.use_norm:
            names.append(norm)
    return names


def check_compatible(a: Checkpoint, b: Checkpoint) -> None:
    """Raise CompatibilityError unless both configs are field-identical."""
    differing = a.config.differing_fields(b.config)
    if differing:
        raise CompatibilityError("checkpoints are not architecture-compatible", differing)


def swap_module(recipient: Checkpoint, donor: Checkpoint, spec: SwapSpec) -> Checkpoint:
    """Copy one module's tensors from donor into a new checkpoint based on recipient.

    Args:
        recipient: Checkpoint that keeps everything else
        donor: Checkpoint supplying the module
        spec: Module kind and layer range

    Returns:
        New checkpoint; neither input is modified
    """
    check_compatible(recipient, donor)
    names = module_tensor_names(recipient, spec)
    logger.info("swapping %s in %d tensors", spec.module_kind, len(names))
    return recipient.replace({name: donor[name] for name in names})


def diff_checkpoints(a: Checkpoint, b: Checkpoint) -> "OrderedDict[str, float]":
    """Max-abs elementwise difference per tensor name."""
    check_compatible(a, b)
    report: "OrderedDict[str, float]" = OrderedDict()
    for name in a.names():
        delta = np.abs(a[name].astype(np.float64) - b[name].astype(np.float64))
        report[name] = float(delta.max()) if delta.size else 0.0
    return report


def changed_tensors(report: Dict[str, float]) -> List[str]:
    """Names with a nonzero difference in a diff report."""
    return [name for name, value in report.items() if value != 0.0]
