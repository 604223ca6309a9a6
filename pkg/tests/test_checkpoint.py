"""Tests for the checkpoint file format."""

import json
import struct
import tempfile
from pathlib import Path

import numpy as np
import pytest

from probeforge.checkpoint import (
    HEADER_SIZE,
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
    split_header,
)
from probeforge.errors import (
    BadMagicError,
    CheckpointFormatError,
    CheckpointNotFoundError,
    ManifestError,
    OffsetError,
    TensorShapeError,
    TruncatedPayloadError,
)
from probeforge.model import ModelConfig, checkpoints_identical, init_checkpoint


def sample_checkpoint(use_norm=False):
    config = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_head=8, d_ffn=12, vocab_size=23,
                         use_norm=use_norm, max_seq_len=16)
    return init_checkpoint(config, seed=11)


def repack(data, mutate):
    """Re-encode checkpoint bytes after mutating the parsed manifest."""
    parts = split_header(data)
    manifest = parts["manifest"]
    mutate(manifest)
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(body)) + body + parts["payload"]


class TestRoundTrip:
    """Test save / load."""

    def test_save_load_save_identical(self):
        """Test the file bytes are stable through a reload."""
        with tempfile.TemporaryDirectory() as tmpdir:
            for use_norm in (False, True):
                ckpt = sample_checkpoint(use_norm)
                first = save_checkpoint(ckpt, Path(tmpdir) / "a.ckpt")
                loaded = load_checkpoint(first)
                second = save_checkpoint(loaded, Path(tmpdir) / "b.ckpt")
                assert first.read_bytes() == second.read_bytes()
                assert checkpoints_identical(ckpt, loaded)

    def test_layout(self):
        """Test magic, little-endian manifest length and payload size."""
        ckpt = sample_checkpoint()
        data = encode_checkpoint(ckpt)
        assert data[:8] == b"TPROBE01"
        (length,) = struct.unpack("<I", data[8:12])
        manifest = json.loads(data[HEADER_SIZE:HEADER_SIZE + length])
        assert [t["name"] for t in manifest["tensors"]] == ckpt.names()
        assert len(data) - HEADER_SIZE - length == sum(ckpt[n].size * 4 for n in ckpt.names())
        first = manifest["tensors"][0]
        payload = data[HEADER_SIZE + length:]
        np.testing.assert_array_equal(
            np.frombuffer(payload[:first["length"]], dtype="<f4").reshape(first["shape"]), ckpt["embed.tok"]
        )


class TestCorruption:
    """Test each kind of corruption raises its own error."""

    def test_bad_magic(self):
        """Test a wrong magic."""
        data = encode_checkpoint(sample_checkpoint())
        with pytest.raises(BadMagicError):
            decode_checkpoint(b"XPROBE01" + data[8:])

    def test_manifest_length(self):
        """Test a manifest length beyond the file."""
        data = encode_checkpoint(sample_checkpoint())
        with pytest.raises(ManifestError):
            decode_checkpoint(data[:8] + struct.pack("<I", len(data)) + data[12:])

    def test_shape_mismatch_names_tensor(self):
        """Test a declared shape that disagrees with the payload length."""
        def mutate(manifest):
            manifest["tensors"][-1]["shape"] = [16, 22]

        with pytest.raises(TensorShapeError) as info:
            decode_checkpoint(repack(encode_checkpoint(sample_checkpoint()), mutate))
        assert info.value.tensor == "head.out"
        assert "head.out" in str(info.value)

    def test_offset(self):
        """Test a tensor offset out of place."""
        def mutate(manifest):
            manifest["tensors"][1]["offset"] += 4

        with pytest.raises(OffsetError):
            decode_checkpoint(repack(encode_checkpoint(sample_checkpoint()), mutate))

    def test_truncated(self):
        """Test a payload shorter than declared."""
        data = encode_checkpoint(sample_checkpoint())
        with pytest.raises(TruncatedPayloadError):
            decode_checkpoint(data[:-4])

    def test_config_not_an_object(self):
        """Test a manifest config that is not a JSON object."""
        for bad in (5, [1, 2], "config"):
            def mutate(manifest, bad=bad):
                manifest["config"] = bad

            with pytest.raises(ManifestError):
                decode_checkpoint(repack(encode_checkpoint(sample_checkpoint()), mutate))

    def test_errors_are_distinct(self):
        """Test the five error classes are different format errors."""
        kinds = {BadMagicError, ManifestError, TensorShapeError, OffsetError, TruncatedPayloadError}
        assert len(kinds) == 5
        assert all(issubclass(kind, CheckpointFormatError) for kind in kinds)

    def test_missing_file(self):
        """Test a path that does not exist."""
        with tempfile.TemporaryDirectory() as tmpdir:
            with pytest.raises(CheckpointNotFoundError):
                load_checkpoint(Path(tmpdir) / "missing.ckpt")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
