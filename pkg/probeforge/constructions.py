"""Hand-built checkpoints with known behaviour.

All toy models share one residual layout over a small symbol alphabet:

    dim 0            constant 1 on every token
    TOK  (20 dims)   one-hot of the current symbol
    PREV (20 dims)   one-hot of the previous symbol (written by layer 0, head 0)
    OUT  (20 dims)   symbol votes read by the output head

Layer 0 head 0 is a previous-token head built from two RoPE pairs: the
unit-frequency pair peaks at offset 1 and the slow pair (angle below pi
over the whole window) breaks its periodic near-peaks. The worst rival
offset trails the target by about 35 logits.

Layer 1 head 0 is an induction head: the query is TOK of the current
token, the key is PREV, matched in the slowest RoPE pairs where rotation
over 640 positions stays under 0.05 rad. It attends to the token that
followed an earlier occurrence of the current token and copies it to OUT.

Layer 0 FFN optionally stores subject -> value facts as relu neurons
keyed on PREV, i.e. the prompt "X=" answers the value of X.
"""

from collections import OrderedDict
from typing import Dict, Optional

import numpy as np

from .errors import InputError
from .model import Checkpoint, ModelConfig, expected_shapes
from .tokenizer import PAD_ID, VOCAB_SIZE

SYMBOLS = "0123456789:=ABCDEFGH"
SUBJECT_SYMBOLS = "ABCDEFGH"
VALUE_SYMBOLS = "0123456789"

BIAS_DIM = 0
TOK_BASE = 1
PREV_BASE = TOK_BASE + len(SYMBOLS)
OUT_BASE = PREV_BASE + len(SYMBOLS)

TOY_CONFIG = ModelConfig(
    n_layers=2,
    n_heads=2,
    d_model=128,
    d_head=64,
    d_ffn=16,
    vocab_size=VOCAB_SIZE,
    rope_base=1e6,
    activation="relu",
    use_norm=False,
    max_seq_len=640,
)

PREV_HEAD = (0, 0)
COPY_HEAD = (1, 0)

# Filler must avoid the symbol alphabet so only the needle carries symbols.
TOY_NEEDLE = " the secret code is:4719. "
TOY_ANSWER = "4719"
TOY_QUESTION = " what is the secret code? the secret code is:"
TOY_HAYSTACK = (
    "the river bends twice before it reaches the old mill, and the path beside it "
    "is quiet in the early morning. a few birds call from the reeds, the water is "
    "slow and brown, and nobody remembers who planted the long row of willows. "
)

PREV_FAST_PAIR = 0
PREV_SLOW_PAIR = 13
PREV_FAST_GAIN = 1000.0
PREV_SLOW_GAIN = 10000.0
CONTENT_FIRST_PAIR = 22
MATCH_GAIN = 60.0
COPY_GAIN = 2.0
MEMORY_GAIN = 1.0


def symbol_index(char: str) -> int:
    index = SYMBOLS.find(char)
    if len(char) != 1 or index < 0:
        raise InputError(f"symbol {char!r} is not in the toy alphabet {SYMBOLS!r}")
    return index


def _blank(config: ModelConfig) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict(
        (name, np.ones(shape, dtype=np.float64) if len(shape) == 1 else np.zeros(shape, dtype=np.float64))
        for name, shape in expected_shapes(config).items()
    )


def _finish(config: ModelConfig, tensors: Dict[str, np.ndarray]) -> Checkpoint:
    return Checkpoint(config, OrderedDict((k, v.astype(np.float32)) for k, v in tensors.items()))


def _symbol_io(tensors: Dict[str, np.ndarray]) -> None:
    embed = tensors["embed.tok"]
    head = tensors["head.out"]
    embed[:, BIAS_DIM] = 1.0
    for index, char in enumerate(SYMBOLS):
        embed[ord(char), TOK_BASE + index] = 1.0
        head[OUT_BASE + index, ord(char)] = 1.0


def _pair_frequency(config: ModelConfig, pair: int) -> float:
    return config.rope_base ** (-2.0 * pair / config.d_head)


def _previous_token_head(config: ModelConfig, tensors: Dict[str, np.ndarray], layer: int, head: int) -> None:
    base = head * config.d_head
    scale = np.sqrt(config.d_head)
    wq = tensors[f"layer.{layer}.attn.q"]
    wk = tensors[f"layer.{layer}.attn.k"]
    wv = tensors[f"layer.{layer}.attn.v"]
    wo = tensors[f"layer.{layer}.attn.o"]

    # q is pre-rotated by one step so the score peaks at offset 1
    for pair, gain in ((PREV_FAST_PAIR, PREV_FAST_GAIN), (PREV_SLOW_PAIR, PREV_SLOW_GAIN)):
        omega = _pair_frequency(config, pair)
        col = base + 2 * pair
        wq[BIAS_DIM, col] = scale * gain * np.cos(omega)
        wq[BIAS_DIM, col + 1] = -scale * gain * np.sin(omega)
        wk[BIAS_DIM, col] = 1.0

    for index in range(len(SYMBOLS)):
        wv[TOK_BASE + index, base + index] = 1.0
        wo[base + index, PREV_BASE + index] = 1.0


def _induction_head(config: ModelConfig, tensors: Dict[str, np.ndarray], layer: int, head: int, gain: float) -> None:
    base = head * config.d_head
    scale = np.sqrt(config.d_head)
    wq = tensors[f"layer.{layer}.attn.q"]
    wk = tensors[f"layer.{layer}.attn.k"]
    wv = tensors[f"layer.{layer}.attn.v"]
    wo = tensors[f"layer.{layer}.attn.o"]

    content = base + 2 * CONTENT_FIRST_PAIR
    for index in range(len(SYMBOLS)):
        wq[TOK_BASE + index, content + index] = scale * MATCH_GAIN
        wk[PREV_BASE + index, content + index] = 1.0
        wv[TOK_BASE + index, base + index] = 1.0
        wo[base + index, OUT_BASE + index] = gain


def _fact_memory(config: ModelConfig, tensors: Dict[str, np.ndarray], layer: int, facts: Dict[str, str]) -> None:
    if len(facts) > config.d_ffn:
        raise InputError(f"{len(facts)} facts do not fit {config.d_ffn} FFN neurons")
    w_in = tensors[f"layer.{layer}.ffn.in"]
    w_out = tensors[f"layer.{layer}.ffn.out"]
    for neuron, (subject, value) in enumerate(sorted(facts.items())):
        w_in[PREV_BASE + symbol_index(subject), neuron] = 1.0
        w_in[BIAS_DIM, neuron] = -0.5
        # relu fires at 0.5 only when PREV is the subject
        w_out[neuron, OUT_BASE + symbol_index(value)] = 2.0 * MEMORY_GAIN


def copy_checkpoint(facts: Optional[Dict[str, str]] = None) -> Checkpoint:
    """Induction-head model that copies from context, with optional parametric facts.

    The copy vote (2.0) outweighs the memory vote (1.0), so a value present
    in the context wins over the stored one, while a bare "X=" prompt still
    answers from memory.
    """
    tensors = _blank(TOY_CONFIG)
    _symbol_io(tensors)
    _previous_token_head(TOY_CONFIG, tensors, *PREV_HEAD)
    _induction_head(TOY_CONFIG, tensors, *COPY_HEAD, gain=COPY_GAIN)
    if facts:
        _fact_memory(TOY_CONFIG, tensors, 0, facts)
    return _finish(TOY_CONFIG, tensors)


def key_value_checkpoint(facts: Optional[Dict[str, str]] = None) -> Checkpoint:
    """Model that answers "X=" from FFN memory and ignores the rest of the context."""
    tensors = _blank(TOY_CONFIG)
    _symbol_io(tensors)
    _previous_token_head(TOY_CONFIG, tensors, *PREV_HEAD)
    if facts:
        _fact_memory(TOY_CONFIG, tensors, 0, facts)
    return _finish(TOY_CONFIG, tensors)


def silent_checkpoint() -> Checkpoint:
    """Model that emits PAD forever, i.e. decodes to empty text."""
    tensors = _blank(TOY_CONFIG)
    tensors["embed.tok"][:, BIAS_DIM] = 1.0
    tensors["head.out"][BIAS_DIM, PAD_ID] = 1.0
    return _finish(TOY_CONFIG, tensors)


def bigram_checkpoint(successors: Dict[str, str], max_seq_len: int = 64) -> Checkpoint:
    """One-layer model whose output head maps each character to a fixed successor.

    Args:
        successors: Single-byte character -> next character
        max_seq_len: Context window

    Returns:
        Checkpoint with zero attention and FFN
    """
    chars = sorted(set(successors) | set(successors.values()))
    for char in chars:
        if len(char.encode("utf-8")) != 1:
            raise InputError(f"bigram characters must be single bytes, got {char!r}")
    width = len(chars) + len(chars) % 2
    config = ModelConfig(
        n_layers=1, n_heads=1, d_model=width, d_head=width, d_ffn=1,
        vocab_size=VOCAB_SIZE, activation="relu", max_seq_len=max_seq_len,
    )
    tensors = _blank(config)
    for index, char in enumerate(chars):
        tensors["embed.tok"][ord(char), index] = 1.0
        if char in successors:
            tensors["head.out"][index, ord(successors[char])] = 1.0
    return _finish(config, tensors)
