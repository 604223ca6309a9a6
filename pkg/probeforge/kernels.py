"""Dense numeric kernels shared by the model and the probes.

Tensors are C-contiguous float32 numpy arrays. Products accumulate in
float64 and are rounded back to float32 unless the caller asks for a wider
``dtype``, so repeated calls on identical inputs give identical bits.
"""

from typing import Iterable, Union

import numpy as np
from scipy import special

from .errors import ConfigError, NumericError, ShapeError

Tensor = np.ndarray

ACTIVATIONS = ("silu", "gelu", "relu")


def as_tensor(data: Union[Tensor, Iterable], name: str = "tensor") -> Tensor:
    """Convert data to a contiguous float32 tensor and check it is finite."""
    tensor = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
    _check_finite(tensor, name)
    return tensor


def _check_finite(tensor: Tensor, name: str) -> None:
    if not np.all(np.isfinite(tensor)):
        raise NumericError(f"{name} contains NaN or Inf")


def matmul(a: Tensor, b: Tensor, dtype=np.float32) -> Tensor:
    """Matrix product of a [m x k] and b [k x n].

    Args:
        a: Left operand, 2-D
        b: Right operand, 2-D
        dtype: Output precision

    Returns:
        Tensor [m x n]
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")

    out = np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(dtype, copy=False)
    _check_finite(out, "matmul output")
    return out


def masked_softmax_rows(scores: Tensor, causal: bool = True, dtype=np.float32) -> Tensor:
    """Row-wise softmax with an optional causal mask.

    With ``causal`` set, entry (i, j) for j > i is exactly zero and each row
    is a distribution over positions 0..i.
    """
    scores = np.asarray(scores)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1] or scores.shape[0] < 1:
        raise ShapeError(f"masked_softmax_rows expects a non-empty square matrix, got {tuple(scores.shape)}")

    work = scores.astype(np.float64)
    mask = None
    if causal:
        mask = np.triu(np.ones(work.shape, dtype=bool), k=1)
        work[mask] = -np.inf

    work -= work.max(axis=1, keepdims=True)
    np.exp(work, out=work)
    work /= work.sum(axis=1, keepdims=True)
    if mask is not None:
        work[mask] = 0.0

    out = work.astype(dtype, copy=False)
    _check_finite(out, "softmax output")
    return out


def activation(x: Tensor, kind: str, dtype=np.float32) -> Tensor:
    """Apply an elementwise activation (silu, gelu or relu)."""
    if kind not in ACTIVATIONS:
        raise ConfigError(f"Unknown activation: {kind}. Supported: {', '.join(ACTIVATIONS)}")

    values = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        out = np.maximum(values, 0.0)
    elif kind == "silu":
        out = values * special.expit(values)
    else:
        out = 0.5 * values * (1.0 + special.erf(values / np.sqrt(2.0)))

    out = out.astype(dtype, copy=False)
    _check_finite(out, f"{kind} output")
    return out
