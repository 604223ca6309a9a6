"""Tests for module swaps and checkpoint diffs."""

import re

import numpy as np
import pytest

from probeforge.checkpoint import encode_checkpoint
from probeforge.constructions import key_value_checkpoint
from probeforge.errors import CompatibilityError, ConfigError
from probeforge.model import ModelConfig, checkpoints_identical, forward, generate_greedy, init_checkpoint
from probeforge.surgery import (
    SwapSpec,
    changed_tensors,
    diff_checkpoints,
    module_tensor_names,
    parse_layer_range,
    swap_module,
)
from probeforge.tokenizer import encode

from .reference_model import reference_forward


def config(**overrides):
    values = dict(n_layers=3, n_heads=2, d_model=16, d_head=8, d_ffn=12, vocab_size=29, max_seq_len=16)
    values.update(overrides)
    return ModelConfig(**values)


def pair(use_norm=False):
    return init_checkpoint(config(use_norm=use_norm), seed=1), init_checkpoint(config(use_norm=use_norm), seed=2)


class TestSwap:
    """Test swap_module."""

    @pytest.mark.parametrize("kind", ["mha", "ffn"])
    def test_self_swap_identity(self, kind):
        """Test swapping a model with itself changes no byte."""
        a, _ = pair(use_norm=True)
        assert encode_checkpoint(swap_module(a, a, SwapSpec(kind))) == encode_checkpoint(a)

    @pytest.mark.parametrize("kind", ["mha", "ffn"])
    def test_round_trip_restores(self, kind):
        """Test swapping the original module back restores the recipient."""
        a, b = pair(use_norm=True)
        restored = swap_module(swap_module(a, b, SwapSpec(kind)), a, SwapSpec(kind))
        assert checkpoints_identical(restored, a)

    def test_idempotent(self):
        """Test swapping the same donor module twice equals once."""
        a, b = pair()
        once = swap_module(a, b, SwapSpec("mha"))
        assert checkpoints_identical(swap_module(once, b, SwapSpec("mha")), once)

    def test_inputs_unmodified(self):
        """Test neither input changes."""
        a, b = pair()
        before_a, before_b = encode_checkpoint(a), encode_checkpoint(b)
        swap_module(a, b, SwapSpec("ffn"))
        assert encode_checkpoint(a) == before_a and encode_checkpoint(b) == before_b

    @pytest.mark.parametrize("kind,pattern", [
        ("mha", r"layer\.\d+\.(attn\.[qkvo]|norm\.attn)"),
        ("ffn", r"layer\.\d+\.(ffn\.(in|out)|norm\.ffn)"),
    ])
    def test_footprint(self, kind, pattern):
        """Test the diff is nonzero only on the swapped module."""
        for use_norm in (False, True):
            a, b = pair(use_norm)
            changed = changed_tensors(diff_checkpoints(a, swap_module(a, b, SwapSpec(kind))))
            assert changed
            assert all(re.fullmatch(pattern, name) for name in changed)
            assert changed == module_tensor_names(a, SwapSpec(kind))
            assert "embed.tok" not in changed and "head.out" not in changed

    def test_layer_range(self):
        """Test an inclusive layer range limits the swap."""
        a, b = pair()
        swapped = swap_module(a, b, SwapSpec("ffn", (1, 2)))
        assert changed_tensors(diff_checkpoints(a, swapped)) == [
            "layer.1.ffn.in", "layer.1.ffn.out", "layer.2.ffn.in", "layer.2.ffn.out",
        ]

    def test_layer_range_out_of_bounds(self):
        """Test ranges beyond the model."""
        a, b = pair()
        with pytest.raises(ConfigError):
            swap_module(a, b, SwapSpec("mha", (2, 3)))

    def test_incompatible(self):
        """Test differing configs name their fields."""
        a = init_checkpoint(config(), seed=1)
        b = init_checkpoint(config(d_ffn=8, activation="relu"), seed=1)
        with pytest.raises(CompatibilityError) as info:
            swap_module(a, b, SwapSpec("mha"))
        assert info.value.fields == ["d_ffn", "activation"]

    def test_forward_uses_donor_attention(self):
        """Test the swapped model equals the reference run on B's attention and A's rest."""
        a, b = pair()
        swapped = swap_module(a, b, SwapSpec("mha"))
        tensors = dict(a.tensors)
        tensors.update({name: b[name] for name in b.names() if ".attn." in name})
        tokens = [1, 4, 9, 16, 25, 3]
        logits, _ = forward(swapped, tokens)
        expected, _ = reference_forward(swapped.config, tensors, tokens)
        np.testing.assert_allclose(logits, expected, atol=1e-5, rtol=0)

    def test_fact_transplant(self):
        """Test B's FFN memory makes A answer a fact A alone does not know."""
        a = key_value_checkpoint()
        b = key_value_checkpoint({"A": "3"})
        prompt = encode("A=", add_bos=True)
        assert generate_greedy(a, prompt, 1, trace=False).text != "3"
        assert generate_greedy(b, prompt, 1, trace=False).text == "3"
        transplanted = swap_module(a, b, SwapSpec("ffn"))
        assert generate_greedy(transplanted, prompt, 1, trace=False).text == "3"

    def test_bad_kind(self):
        """Test unknown module kinds."""
        with pytest.raises(ConfigError):
            SwapSpec("norm")


class TestDiff:
    """Test diff_checkpoints."""

    def test_self_diff_zero(self):
        """Test diff(A, A) is all zeros."""
        a, _ = pair()
        assert set(diff_checkpoints(a, a).values()) == {0.0}

    def test_matches_elementwise_scan(self):
        """Test against a direct max-abs scan."""
        a, b = pair(use_norm=True)
        report = diff_checkpoints(a, b)
        for name in a.names():
            expected = max(abs(float(x) - float(y)) for x, y in zip(a[name].ravel(), b[name].ravel()))
            assert report[name] == pytest.approx(expected, abs=1e-12)


class TestLayerRange:
    """Test layer range parsing."""

    def test_parse(self):
        """Test 'i..j' and single layers."""
        assert parse_layer_range("0..3") == (0, 3)
        assert parse_layer_range("2") == (2, 2)

    def test_invalid(self):
        """Test malformed and empty ranges."""
        with pytest.raises(ConfigError):
            parse_layer_range("a-b")
        with pytest.raises(ConfigError):
            SwapSpec("mha", (3, 1))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
