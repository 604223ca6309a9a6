"""End-to-end tests of the probeforge command line on the toy bundle."""

import csv
import json
import struct
from pathlib import Path

import pytest

import build_toy_models
from probeforge.checkpoint import MAGIC, load_checkpoint
from probeforge.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from probeforge.tokenizer import ANSWER_ID


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    return build_toy_models.write_toy_bundle(tmp_path_factory.mktemp("toy"))


@pytest.fixture(autouse=True)
def isolated_home(tmp_path, monkeypatch):
    monkeypatch.setenv("PROBE_FORGE_HOME", str(tmp_path / "home"))
    monkeypatch.delenv("PROBE_FORGE_SEED", raising=False)


def read(path):
    return json.loads(Path(path).read_text())


class TestUsage:
    """Test argument handling and exit codes."""

    def test_help(self, capsys):
        """Test --help exits cleanly."""
        assert main(["--help"]) == EXIT_OK
        assert "probeforge" in capsys.readouterr().out

    def test_no_command(self, capsys):
        """Test a bare invocation prints help."""
        assert main([]) == EXIT_USAGE

    def test_unknown_flag(self, capsys):
        """Test an unknown flag is named in the error."""
        assert main(["ci", "--values", "1,2", "--bogus"]) == EXIT_USAGE
        assert "--bogus" in capsys.readouterr().err

    def test_unknown_command_suggests(self, capsys):
        """Test a misspelled subcommand gets a suggestion."""
        assert main(["retreival"]) == EXIT_USAGE
        assert "Did you mean 'retrieval'?" in capsys.readouterr().err

    def test_missing_required(self, capsys):
        """Test ffn-stats without its inputs."""
        assert main(["ffn-stats", "--ckpt", "x.ckpt"]) == EXIT_USAGE
        assert "--prompts" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path, bundle, capsys):
        """Test an unreadable checkpoint is a data error."""
        code = main(["swap", "--recipient", str(tmp_path / "absent.ckpt"), "--donor", str(bundle["kv"]),
                     "--module", "ffn", "--out", str(tmp_path / "out.ckpt")])
        assert code == EXIT_DATA
        assert capsys.readouterr().err.startswith("Error:")

    def test_retrieval_missing_checkpoint(self, tmp_path, bundle, capsys):
        """Test retrieval on a checkpoint that does not exist."""
        code = main(["retrieval", "--ckpt", str(tmp_path / "absent.ckpt"), "--config", str(bundle["needle"]),
                     "--out", str(tmp_path / "scores.json")])
        assert code == EXIT_DATA
        assert capsys.readouterr().err.startswith("Error:")
        assert not (tmp_path / "scores.json").exists()

    def test_corrupt_manifest_config(self, tmp_path, bundle, capsys):
        """Test a manifest whose config is not an object is a data error."""
        body = json.dumps({"config": 5, "tensors": []}).encode("utf-8")
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(MAGIC + struct.pack("<I", len(body)) + body)
        code = main(["swap", "--recipient", str(bad), "--donor", str(bundle["kv"]),
                     "--module", "ffn", "--out", str(tmp_path / "out.ckpt")])
        assert code == EXIT_DATA
        assert "config" in capsys.readouterr().err


class TestCommands:
    """Smoke-test every subcommand."""

    def test_swap(self, tmp_path, bundle):
        """Test an FFN transplant writes a loadable checkpoint."""
        out = tmp_path / "swapped.ckpt"
        assert main(["swap", "--recipient", str(bundle["copy"]), "--donor", str(bundle["kv"]),
                     "--module", "ffn", "--layers", "0..1", "--out", str(out)]) == EXIT_OK
        assert load_checkpoint(out).config == load_checkpoint(bundle["copy"]).config

    def test_retrieval_and_heatmap(self, tmp_path, bundle):
        """Test the needle suite finds the copy head and renders heatmaps."""
        out, svg = tmp_path / "scores.json", tmp_path / "scores.svg"
        assert main(["retrieval", "--ckpt", str(bundle["copy"]), "--config", str(bundle["needle"]),
                     "--out", str(out), "--heatmap", str(svg)]) == EXIT_OK
        matrix = read(out)["matrix"]
        assert len(matrix) == 2 and len(matrix[0]) == 2
        assert matrix[1][0] == max(max(row) for row in matrix)
        assert svg.read_text().lstrip().startswith("<?xml")
        assert Path(str(out) + ".provenance.json").exists()

        csv_out = tmp_path / "scores.csv"
        assert main(["report", "heatmap", "--input", str(out), "--minus", str(out),
                     "--format", "csv", "--out", str(csv_out)]) == EXIT_OK
        rows = list(csv.reader(csv_out.read_text().splitlines()))
        assert all(float(v) == 0.0 for row in rows[1:] for v in row[1:])

    def test_entropy_with_baseline(self, tmp_path, bundle):
        """Test entropy profiles and their difference."""
        copy_out, kv_out = tmp_path / "copy.json", tmp_path / "kv.json"
        assert main(["entropy", "--ckpt", str(bundle["copy"]), "--prompt-file", str(bundle["prompt"]),
                     "--max-new", "4", "--out", str(copy_out)]) == EXIT_OK
        assert main(["entropy", "--ckpt", str(bundle["kv"]), "--prompt-file", str(bundle["prompt"]),
                     "--max-new", "4", "--baseline", str(copy_out), "--out", str(kv_out)]) == EXIT_OK
        result = read(kv_out)
        assert result["reasoning_steps"] + result["answering_steps"] == 4
        assert len(result["difference"]["layers"]) == 2

    def test_entropy_reserved_marker(self, tmp_path, bundle):
        """Test --answer-token splits on the reserved ANSWER id."""
        out = tmp_path / "entropy.json"
        assert main(["entropy", "--ckpt", str(bundle["copy"]), "--prompt-file", str(bundle["prompt"]),
                     "--max-new", "3", "--answer-token", "--out", str(out)]) == EXIT_OK
        result = read(out)
        assert result["config_echo"]["marker_ids"] == [ANSWER_ID]
        assert result["config_echo"]["marker"] is None
        assert result["reasoning_steps"] + result["answering_steps"] == 3

    def test_ffn_stats_and_diff(self, tmp_path, bundle):
        """Test stats files and their per-layer delta."""
        copy_out, kv_out, delta = tmp_path / "copy.json", tmp_path / "kv.json", tmp_path / "delta.csv"
        for name, out in (("copy", copy_out), ("kv", kv_out)):
            assert main(["ffn-stats", "--ckpt", str(bundle[name]), "--prompts", str(bundle["prompts"]),
                         "--tau", "0", "--out", str(out)]) == EXIT_OK
        assert len(read(copy_out)["layers"]) == 2
        assert main(["ffn-stats", "diff", str(copy_out), str(copy_out), "--out", str(delta)]) == EXIT_OK
        assert delta.read_text().splitlines()[0] == "layer,d_mean,d_variance,d_sparsity"

    def test_conflict(self, tmp_path, bundle):
        """Test the kv model stays parametric and the copy model follows context."""
        kv_out, copy_out = tmp_path / "kv.json", tmp_path / "copy.json"
        assert main(["conflict", "--ckpt", str(bundle["kv"]), "--facts", str(bundle["facts"]),
                     "--out", str(kv_out)]) == EXIT_OK
        assert main(["conflict", "--ckpt", str(bundle["copy"]), "--facts", str(bundle["facts"]),
                     "--out", str(copy_out)]) == EXIT_OK
        assert read(kv_out)["rates"]["parametric"] == 1.0
        assert read(copy_out)["rates"]["contextual"] == 1.0

    def test_conflict_sweep(self, tmp_path, bundle, capsys):
        """Test a manifest sweep prints one row per checkpoint."""
        out, table = tmp_path / "sweep.json", tmp_path / "sweep.csv"
        assert main(["conflict", "sweep", "--manifest", str(bundle["manifest"]), "--facts", str(bundle["facts"]),
                     "--table", str(table), "--out", str(out)]) == EXIT_OK
        printed = capsys.readouterr().out.splitlines()
        assert [line.split()[0] for line in printed[1:]] == ["copy", "kv"]
        assert len(table.read_text().splitlines()) == 3

    def test_mix_and_stats(self, tmp_path, bundle, capsys):
        """Test mixing corpora and counting the result."""
        mixed, report, stats = tmp_path / "mixed.jsonl", tmp_path / "mix.json", tmp_path / "stats.json"
        assert main(["mix", "--long", str(bundle["long"]), "--short", str(bundle["short"]), "--ratio", "5:5",
                     "--budget", "10000", "--out", str(mixed), "--report", str(report)]) == EXIT_OK
        mix_report = read(report)
        assert mix_report["total_tokens"] >= 10000
        assert not mix_report["shortfall"]
        capsys.readouterr()

        assert main(["stats", "--corpus", str(bundle["long"]), "--out", str(stats)]) == EXIT_OK
        printed = json.loads(capsys.readouterr().out)
        assert printed["sample_count"] == 12
        assert printed["long_samples"] == 12
        assert read(stats) == printed

    def test_mix_is_reproducible(self, tmp_path, bundle):
        """Test the same seed writes the same corpus."""
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.jsonl"
            assert main(["--seed", "3", "mix", "--long", str(bundle["long"]), "--short", str(bundle["short"]),
                         "--ratio", "2:8", "--budget", "5000", "--out", str(out),
                         "--report", str(tmp_path / f"{name}.json")]) == EXIT_OK
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1]

    def test_report_sweep(self, tmp_path):
        """Test a sweep table from direct metric values."""
        manifest = tmp_path / "sweep.json"
        manifest.write_text(json.dumps({"rows": {"0:10": {"ffn_mean": 2.0}, "5:5": {"ffn_mean": 3.0}}}))
        out = tmp_path / "table.csv"
        assert main(["report", "sweep", "--manifest", str(manifest), "--baseline", "0:10",
                     "--out", str(out)]) == EXIT_OK
        rows = list(csv.DictReader(out.read_text().splitlines()))
        assert rows[1]["ratio"] == "5:5" and rows[1]["ffn_mean"] == "50.00"

    def test_ci(self, capsys):
        """Test ci from values and from a summary."""
        assert main(["ci", "--values", "92.1,92.5,92.9"]) == EXIT_OK
        result = json.loads(capsys.readouterr().out)
        assert result["n"] == 3 and abs(result["mean"] - 92.5) <= 1e-9
        assert main(["ci", "--mean", "90.55", "--std", "0.29", "--n", "10"]) == EXIT_OK
        assert abs(json.loads(capsys.readouterr().out)["ci95"] - 0.1797) <= 1e-4

    def test_ci_too_few(self, capsys):
        """Test a single value is a data error."""
        assert main(["ci", "--values", "1.0"]) == EXIT_DATA

    def test_config_override(self, tmp_path, capsys):
        """Test --config selects the t interval."""
        override = tmp_path / "override.json"
        override.write_text(json.dumps({"ci_method": "t"}))
        assert main(["--config", str(override), "ci", "--values", "1,2,3"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["method"] == "t"


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
