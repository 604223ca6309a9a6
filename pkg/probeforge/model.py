"""Decoder-only transformer with RoPE attention, instrumented for probing.

Each layer is two residual sub-blocks, attention then feed-forward:

    H~_l = MHA(H_{l-1}) + H_{l-1}
    H_l  = FFN(H~_l) + H~_l,   FFN(x) = g(x W_in) W_out

Optional RMS pre-norm (``use_norm``) is off by default.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CapacityError, ConfigError, InputError, ShapeError
from .kernels import ACTIVATIONS, Tensor, activation, as_tensor, masked_softmax_rows, matmul
from .tokenizer import decode, find_subsequence

logger = logging.getLogger(__name__)

NORM_EPS = 1e-6
ATTN_PARTS = ("q", "k", "v", "o")
FFN_PARTS = ("in", "out")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of one decoder-only model."""

    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_ffn: int
    vocab_size: int
    rope_base: float = 10000.0
    activation: str = "silu"
    use_norm: bool = False
    max_seq_len: int = 512

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_head", "d_ffn", "vocab_size", "max_seq_len"):
            object.__setattr__(self, name, int(getattr(self, name)))
        object.__setattr__(self, "rope_base", float(self.rope_base))
        object.__setattr__(self, "use_norm", bool(self.use_norm))
        if self.n_layers < 1 or self.n_heads < 1:
            raise ConfigError("n_layers and n_heads must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.d_head < 1 or self.d_ffn < 1 or self.max_seq_len < 1:
            raise ConfigError("d_head, d_ffn and max_seq_len must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal n_heads x d_head ({self.n_heads} x {self.d_head})"
            )
        if self.d_head % 2:
            raise ConfigError(f"d_head must be even for RoPE, got {self.d_head}")
        if not self.rope_base > 0:
            raise ConfigError(f"rope_base must be positive, got {self.rope_base}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"Unknown activation: {self.activation}")

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"model config must be a JSON object, got {type(data).__name__}")
        names = [f.name for f in fields(cls)]
        unknown = sorted(set(data) - set(names))
        if unknown:
            raise ConfigError(f"unknown model config fields: {', '.join(unknown)}")
        try:
            kwargs = dict(data)
            kwargs["rope_base"] = float(kwargs.get("rope_base", 10000.0))
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid model config: {e}")

    def differing_fields(self, other: "ModelConfig") -> List[str]:
        """Names of config fields that differ between two configs."""
        return [f.name for f in fields(self) if getattr(self, f.name) != getattr(other, f.name)]


def expected_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Canonical tensor names and shapes for a config, in file order."""
    d, f = config.d_model, config.d_ffn
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["embed.tok"] = (config.vocab_size, d)
    for layer in range(config.n_layers):
        for part in ATTN_PARTS:
            shapes[f"layer.{layer}.attn.{part}"] = (d, d)
        shapes[f"layer.{layer}.ffn.in"] = (d, f)
        shapes[f"layer.{layer}.ffn.out"] = (f, d)
        if config.use_norm:
            shapes[f"layer.{layer}.norm.attn"] = (d,)
            shapes[f"layer.{layer}.norm.ffn"] = (d,)
    if config.use_norm:
        shapes["final.norm"] = (d,)
    shapes["head.out"] = (d, config.vocab_size)
    return shapes


@dataclass(frozen=True)
class Checkpoint:
    """Full parameter set plus architecture config of one model.

    Tensors are stored read-only, so checkpoints can be shared freely
    between concurrent evaluations.
    """

    config: ModelConfig
    tensors: Dict[str, Tensor]

    def __post_init__(self):
        shapes = expected_shapes(self.config)
        missing = [name for name in shapes if name not in self.tensors]
        extra = [name for name in self.tensors if name not in shapes]
        if missing or extra:
            raise ShapeError(f"checkpoint tensors do not match config (missing {missing}, unexpected {extra})")

        frozen: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, shape in shapes.items():
            tensor = self.tensors[name]
            if not (isinstance(tensor, np.ndarray) and tensor.dtype == np.float32
                    and tensor.flags.c_contiguous and not tensor.flags.writeable):
                tensor = as_tensor(tensor, name).copy()
                tensor.flags.writeable = False
            if tuple(tensor.shape) != shape:
                raise ShapeError(f"tensor {name} has shape {tuple(tensor.shape)}, expected {shape}")
            frozen[name] = tensor
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    def replace(self, updates: Dict[str, Tensor]) -> "Checkpoint":
        """New checkpoint with some tensors replaced; this one is untouched."""
        tensors = OrderedDict(self.tensors)
        tensors.update(updates)
        return Checkpoint(self.config, tensors)


def checkpoints_identical(a: Checkpoint, b: Checkpoint) -> bool:
    """True when configs match and every tensor is bit-identical."""
    if a.config != b.config or a.names() != b.names():
        return False
    return all(a[name].tobytes() == b[name].tobytes() for name in a.names())


def init_checkpoint(config: ModelConfig, seed: int = 0, scale: float = 0.5) -> Checkpoint:
    """Random checkpoint with fan-in scaled normal weights.

    Args:
        config: Architecture
        seed: Generator seed
        scale: Multiplier on 1/sqrt(fan_in)

    Returns:
        Checkpoint
    """
    rng = np.random.default_rng(seed)
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in expected_shapes(config).items():
        if len(shape) == 1:
            tensors[name] = (1.0 + 0.1 * rng.standard_normal(shape)).astype(np.float32)
        elif name == "embed.tok":
            tensors[name] = (scale * rng.standard_normal(shape)).astype(np.float32)
        else:
            std = scale / np.sqrt(shape[0])
            tensors[name] = (std * rng.standard_normal(shape)).astype(np.float32)
    return Checkpoint(config, tensors)


def zeros_checkpoint(config: ModelConfig) -> Checkpoint:
    """Checkpoint with all weights zero and unit norm scales."""
    tensors = OrderedDict(
        (name, np.ones(shape, dtype=np.float32) if len(shape) == 1 else np.zeros(shape, dtype=np.float32))
        for name, shape in expected_shapes(config).items()
    )
    return Checkpoint(config, tensors)


@dataclass
class TraceRecord:
    """Instrumentation captured during one forward pass.

    attn[l][h] is the T x T attention matrix of head h in layer l,
    ffn_act[l] the T x d_ffn activations g(H~_l W_in), hidden[l] the
    residual stream after layer l.
    """

    attn: List[List[Tensor]] = field(default_factory=list)
    ffn_act: List[Tensor] = field(default_factory=list)
    hidden: List[Tensor] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.attn)

    @property
    def n_heads(self) -> int:
        return len(self.attn[0]) if self.attn else 0

    @property
    def seq_len(self) -> int:
        return self.attn[0][0].shape[0] if self.attn else 0

    def last_rows(self) -> np.ndarray:
        """Attention of the final query position, shape [L, M, T]."""
        return np.stack([np.stack([head[-1] for head in layer]) for layer in self.attn])


@dataclass
class GenerationOutput:
    """Result of greedy decoding.

    steps[s] is the trace of the forward pass that produced
    generated_tokens[s] (empty when tracing was off).
    """

    prompt_tokens: List[int]
    generated_tokens: List[int]
    steps: List[TraceRecord] = field(default_factory=list)
    answer_marker_index: Optional[int] = None

    @property
    def text(self) -> str:
        return decode(self.generated_tokens)


def apply_rope(x: Tensor, positions: Sequence[int], theta: float) -> Tensor:
    """Rotate dimension pairs (2j, 2j+1) by pos * theta^(-2j/d_head).

    Args:
        x: Query or key rows [T x d_head]
        positions: Position of each row
        theta: RoPE base

    Returns:
        Rotated float32 tensor of the same shape
    """
    return _rotate(x, positions, theta).astype(np.float32)


def _rotate(x: Tensor, positions: Sequence[int], theta: float) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"apply_rope expects [T x d_head], got {tuple(x.shape)}")
    d_head = x.shape[1]
    if d_head % 2:
        raise ConfigError(f"RoPE needs an even head dimension, got {d_head}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (x.shape[0],):
        raise ShapeError(f"{len(pos)} positions for {x.shape[0]} rows")

    freqs = float(theta) ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    angles = pos[:, None] * freqs[None, :]
    cos, sin = np.cos(angles), np.sin(angles)

    values = x.astype(np.float64)
    even, odd = values[:, 0::2], values[:, 1::2]
    out = np.empty_like(values)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


def _rms_norm(x: np.ndarray, scale: Tensor) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x, axis=1, keepdims=True) + NORM_EPS)
    return x / rms * scale.astype(np.float64)


def _validate_tokens(config: ModelConfig, tokens: Sequence[int]) -> np.ndarray:
    ids = np.asarray(list(tokens), dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError("token sequence must be a non-empty flat list")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        bad = int(ids[(ids < 0) | (ids >= config.vocab_size)][0])
        raise InputError(f"token id {bad} out of range for vocab_size {config.vocab_size}")
    if ids.size > config.max_seq_len:
        raise CapacityError(f"sequence length {ids.size} exceeds max_seq_len {config.max_seq_len}")
    return ids


def forward(ckpt: Checkpoint, tokens: Sequence[int], trace: bool = False) -> Tuple[Tensor, Optional[TraceRecord]]:
    """Run the model over a token sequence.

    The residual stream stays in float64; trace records and logits are
    rounded to float32.

    Args:
        ckpt: Checkpoint to evaluate
        tokens: Token ids, length <= max_seq_len
        trace: Capture attention, FFN activations and hidden states

    Returns:
        (logits [T x vocab], TraceRecord or None)
    """
    config = ckpt.config
    ids = _validate_tokens(config, tokens)
    positions = np.arange(ids.size)
    d_head = config.d_head
    scale = 1.0 / np.sqrt(d_head)
    wide = np.float64
    record = TraceRecord() if trace else None

    hidden = ckpt["embed.tok"][ids].astype(wide)
    for layer in range(config.n_layers):
        prefix = f"layer.{layer}"
        x = _rms_norm(hidden, ckpt[f"{prefix}.norm.attn"]) if config.use_norm else hidden
        q = matmul(x, ckpt[f"{prefix}.attn.q"], dtype=wide)
        k = matmul(x, ckpt[f"{prefix}.attn.k"], dtype=wide)
        v = matmul(x, ckpt[f"{prefix}.attn.v"], dtype=wide)

        head_outputs = []
        layer_attn = []
        for head in range(config.n_heads):
            cols = slice(head * d_head, (head + 1) * d_head)
            q_rot = _rotate(q[:, cols], positions, config.rope_base)
            k_rot = _rotate(k[:, cols], positions, config.rope_base)
            weights = masked_softmax_rows(matmul(q_rot, k_rot.T, dtype=wide) * scale, causal=True, dtype=wide)
            head_outputs.append(matmul(weights, v[:, cols], dtype=wide))
            layer_attn.append(weights.astype(np.float32))

        hidden = hidden + matmul(np.concatenate(head_outputs, axis=1), ckpt[f"{prefix}.attn.o"], dtype=wide)

        x = _rms_norm(hidden, ckpt[f"{prefix}.norm.ffn"]) if config.use_norm else hidden
        act = activation(matmul(x, ckpt[f"{prefix}.ffn.in"], dtype=wide), config.activation, dtype=wide)
        hidden = hidden + matmul(act, ckpt[f"{prefix}.ffn.out"], dtype=wide)

        if record is not None:
            record.attn.append(layer_attn)
            record.ffn_act.append(act.astype(np.float32))
            record.hidden.append(hidden.astype(np.float32))

    if config.use_norm:
        hidden = _rms_norm(hidden, ckpt["final.norm"])
    logits = matmul(hidden, ckpt["head.out"])
    return logits, record


def generate_greedy(
    ckpt: Checkpoint,
    prompt: Sequence[int],
    max_new: int,
    answer_marker: Optional[Sequence[int]] = None,
    trace: bool = True,
) -> GenerationOutput:
    """Greedy (argmax) decoding.

    Args:
        ckpt: Checkpoint to decode with
        prompt: Non-empty prompt token ids
        max_new: Number of tokens to generate
        answer_marker: Token sequence separating reasoning from answer
        trace: Keep the trace of every decode step

    Returns:
        GenerationOutput
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InputError("prompt must be non-empty")
    if max_new < 0:
        raise InputError(f"max_new must be >= 0, got {max_new}")
    limit = ckpt.config.max_seq_len
    if len(prompt) + max_new > limit:
        raise CapacityError(
            f"prompt ({len(prompt)}) + max_new ({max_new}) exceeds max_seq_len {limit}"
        )
    _validate_tokens(ckpt.config, prompt)

    sequence = list(prompt)
    generated: List[int] = []
    steps: List[TraceRecord] = []
    for _ in range(max_new):
        logits, record = forward(ckpt, sequence, trace=trace)
        token = int(np.argmax(logits[-1]))
        generated.append(token)
        sequence.append(token)
        if record is not None:
            steps.append(record)

    marker_index = None
    if answer_marker:
        found = find_subsequence(generated, list(answer_marker))
        marker_index = found if found >= 0 else None
    logger.debug("generated %d tokens, marker at %s", len(generated), marker_index)

    return GenerationOutput(prompt, generated, steps, marker_index)
