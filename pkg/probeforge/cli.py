#!/usr/bin/env python3
"""Command-line interface for the probeforge workbench."""

import sys
import json
import difflib
import logging
import argparse
import re
from pathlib import Path
from typing import List, Optional

import numpy as np

from probeforge.checkpoint import load_checkpoint, save_checkpoint
from probeforge.config import Config
from probeforge.conflict import (
    build_probes,
    load_facts,
    load_templates,
    run_probe_suite,
    sweep_checkpoints,
)
from probeforge.corpus import (
    MixSpec,
    classify_long_short,
    compute_corpus_stats,
    mix_corpora,
    parse_ratio,
    read_corpus,
    write_mix,
)
from probeforge.entropy import EntropyProfile, entropy_difference, profile_from_generation
from probeforge.errors import InputError, ProbeForgeError, UsageError
from probeforge.ffn_stats import (
    ActivationStats,
    collect_activation_stats,
    stats_profile_diff,
    write_delta_csv,
)
from probeforge.files import dumps_json, read_json, write_atomic, write_json
from probeforge.model import generate_greedy
from probeforge.reporting import (
    HeatmapSpec,
    RunStatistics,
    confidence_interval,
    emit_heatmap,
    ratio_sweep_table,
    render_sweep_csv,
    sweep_metrics_from_artifacts,
    write_report,
)
from probeforge.retrieval import NeedleConfig, overall_retrieval_score, run_needle_suite
from probeforge.surgery import SwapSpec, changed_tensors, diff_checkpoints, parse_layer_range, swap_module
from probeforge.tokenizer import encode, marker_ids

logger = logging.getLogger("probeforge")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class ProbeForgeArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError (with a suggestion) instead of exiting."""

    def error(self, message):
        match = re.search(r"invalid choice: '?([^'\s]*)'? \(choose from (.*)\)", message)
        if match:
            choices = re.findall(r"'([^']*)'", match.group(2)) or [c.strip() for c in match.group(2).split(",")]
            close = difflib.get_close_matches(match.group(1), choices, n=1)
            if close:
                message += f". Did you mean '{close[0]}'?"
        raise UsageError(f"{self.prog}: {message}")


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError(f"{args.command} requires {', '.join(missing)}")


def _read_text(path) -> str:
    with open(path, 'r', encoding="utf-8") as f:
        return f.read()


def cmd_swap(args):
    """Swap an MHA or FFN module from donor into recipient."""
    recipient = load_checkpoint(args.recipient)
    donor = load_checkpoint(args.donor)
    spec = SwapSpec(args.module, parse_layer_range(args.layers) if args.layers else None)

    result = swap_module(recipient, donor, spec)
    save_checkpoint(result, args.out)
    changed = changed_tensors(diff_checkpoints(recipient, result))
    print(f"Wrote {args.out} ({len(changed)} tensors differ from recipient)")
    return EXIT_OK


def cmd_retrieval(args):
    """Run the needle suite and write per-head retrieval scores."""
    settings = args.settings
    data = read_json(args.needle_config)
    if not isinstance(data, dict):
        raise InputError(f"{args.needle_config} must hold a JSON object")
    data.setdefault("seed", settings.get_seed(args.seed))
    if args.workers is not None:
        data["workers"] = args.workers
    else:
        data.setdefault("workers", settings.get("workers"))
    cfg = NeedleConfig.from_dict(data, base_dir=Path(args.needle_config).parent)

    score_map = run_needle_suite(load_checkpoint(args.ckpt), cfg)
    threshold = args.threshold if args.threshold is not None else settings.get("retrieval_threshold")
    write_report(score_map.to_dict(threshold), args.out, [args.ckpt, args.needle_config], settings.as_dict())
    if args.heatmap:
        emit_heatmap(HeatmapSpec(score_map.scores, title="retrieval score", fmt=settings.get("heatmap_format")),
                     args.heatmap)
    print(f"Wrote {args.out} (overall retrieval score {overall_retrieval_score(score_map):.4f})")
    return EXIT_OK


def cmd_entropy(args):
    """Profile attention entropy over one generation."""
    settings = args.settings
    marker = args.marker if args.marker is not None else settings.get("answer_marker")
    ckpt = load_checkpoint(args.ckpt)
    prompt = encode(_read_text(args.prompt_file), add_bos=True)

    marker_tokens = marker_ids(marker, reserved=args.answer_token)
    output = generate_greedy(ckpt, prompt, args.max_new, answer_marker=marker_tokens)
    profile = profile_from_generation(output)
    payload = {
        "config_echo": {"marker": None if args.answer_token else marker, "marker_ids": marker_tokens, "max_new": args.max_new},
        "generated_text": output.text,
        "answer_marker_index": output.answer_marker_index,
    }
    payload.update(profile.to_dict())
    inputs = [args.ckpt, args.prompt_file]
    if args.baseline:
        payload["difference"] = entropy_difference(profile, EntropyProfile.from_dict(read_json(args.baseline))).to_dict()
        inputs.append(args.baseline)
    write_report(payload, args.out, inputs, settings.as_dict())
    print(f"Wrote {args.out}")
    return EXIT_OK


def cmd_ffn_stats(args):
    """Collect FFN activation statistics over a prompt file."""
    _require(args, "ckpt", "prompts", "out")
    settings = args.settings
    tau = args.tau if args.tau is not None else settings.get("sparsity_tau")
    lines = [line for line in _read_text(args.prompts).splitlines() if line.strip()]
    prompts = [encode(line, add_bos=True) for line in lines]

    stats = collect_activation_stats(load_checkpoint(args.ckpt), prompts, tau)
    write_report(stats.to_dict(), args.out, [args.ckpt, args.prompts], settings.as_dict())
    print(f"Wrote {args.out} ({len(stats.layers)} layers, {stats.sample_count} samples per layer)")
    return EXIT_OK


def cmd_ffn_stats_diff(args):
    """Relative per-layer difference of two stats files (a against baseline b)."""
    a = ActivationStats.from_dict(read_json(args.a))
    b = ActivationStats.from_dict(read_json(args.b))
    write_delta_csv(stats_profile_diff(a, b), args.diff_out)
    print(f"Wrote {args.diff_out}")
    return EXIT_OK


def _probes(args):
    templates = load_templates(args.templates) if args.templates else None
    return build_probes(load_facts(args.facts), templates)


def cmd_conflict(args):
    """Run a knowledge-conflict probe suite on one checkpoint."""
    _require(args, "ckpt", "facts", "out")
    result = run_probe_suite(load_checkpoint(args.ckpt), _probes(args), args.max_new,
                             injected=not args.no_inject, workers=args.settings.get("workers"))
    inputs = [args.ckpt, args.facts] + ([args.templates] if args.templates else [])
    write_report(result.to_dict(), args.out, inputs, args.settings.as_dict())
    rates = result.to_dict()["rates"]
    print("Rates: " + ", ".join(f"{k}={v:.3f}" for k, v in rates.items()))
    return EXIT_OK


def cmd_conflict_sweep(args):
    """Run one probe suite over every checkpoint of a manifest."""
    manifest = read_json(args.manifest)
    entries = manifest.get("checkpoints", []) if isinstance(manifest, dict) else manifest
    base = Path(args.manifest).parent
    ckpts = []
    for entry in entries:
        if not isinstance(entry, dict) or "label" not in entry or "path" not in entry:
            raise InputError(f"{args.manifest}: every checkpoint entry needs 'label' and 'path'")
        path = Path(entry["path"])
        ckpts.append((str(entry["label"]), load_checkpoint(path if path.is_absolute() else base / path)))
    probes = build_probes(load_facts(args.sweep_facts),
                          load_templates(args.sweep_templates) if args.sweep_templates else None)

    table = sweep_checkpoints(ckpts, probes, args.sweep_max_new)
    domains = args.domains.split(",") if args.domains else None
    write_report(table.to_dict(), args.sweep_out, [args.manifest, args.sweep_facts], args.settings.as_dict())
    if args.table:
        fmt = "csv" if args.table.endswith(".csv") else "text"
        write_atomic(args.table, table.render(args.metric, domains, fmt))
    print(table.render(args.metric, domains), end="")
    return EXIT_OK


def cmd_mix(args):
    """Mix long and short corpora at a token ratio."""
    settings = args.settings
    long_ratio, short_ratio = parse_ratio(args.ratio)
    threshold = args.length_threshold if args.length_threshold is not None else settings.get("length_threshold")
    spec = MixSpec(long_ratio, short_ratio, args.budget, threshold,
                   settings.get_seed(args.mix_seed if args.mix_seed is not None else args.seed))

    long_samples, _ = read_corpus(args.long)
    short_samples, _ = read_corpus(args.short)
    mixed, report = mix_corpora(long_samples, short_samples, spec)
    write_mix(mixed, args.out)
    write_report(report.to_dict(), args.report, [args.long, args.short], settings.as_dict())
    print(f"Wrote {len(mixed)} samples to {args.out} (long share {report.achieved_long_share})")
    return EXIT_OK


def cmd_stats(args):
    """Corpus statistics."""
    settings = args.settings
    threshold = args.length_threshold if args.length_threshold is not None else settings.get("length_threshold")
    samples, skipped = read_corpus(args.corpus)
    stats = compute_corpus_stats(samples)
    stats.skipped += skipped
    payload = stats.to_dict()
    payload["length_threshold"] = threshold
    payload["long_samples"] = sum(1 for s in samples if classify_long_short(s, threshold) == "long")
    payload["short_samples"] = len(samples) - payload["long_samples"]
    write_report(payload, args.out, [args.corpus], settings.as_dict())
    print(dumps_json(payload), end="")
    return EXIT_OK


def _matrix(path, key):
    data = read_json(path)
    if key not in data or data[key] is None:
        raise UsageError(f"{path} has no '{key}' matrix")
    return np.asarray(data[key], dtype=np.float64)


def cmd_report_heatmap(args):
    """Render a matrix (or the difference of two) as a heatmap."""
    matrix = _matrix(args.input, args.key)
    if args.minus:
        other = _matrix(args.minus, args.key)
        if other.shape != matrix.shape:
            raise UsageError(f"cannot subtract a {other.shape} matrix from a {matrix.shape} matrix")
        matrix = matrix - other
    fmt = args.format or args.settings.get("heatmap_format")
    emit_heatmap(HeatmapSpec(matrix, title=args.title or "", fmt=fmt), args.out)
    print(f"Wrote {args.out}")
    return EXIT_OK


def cmd_report_sweep(args):
    """Percent change of sweep metrics against a baseline ratio."""
    manifest = read_json(args.manifest)
    rows_spec = manifest.get("rows", manifest)
    base = Path(args.manifest).parent
    rows = {label: sweep_metrics_from_artifacts(entry, base) for label, entry in rows_spec.items()}
    write_atomic(args.out, render_sweep_csv(ratio_sweep_table(rows, args.baseline)))
    print(f"Wrote {args.out}")
    return EXIT_OK


def cmd_ci(args):
    """Mean, std and 95% CI of repeated runs."""
    method = args.method or args.settings.get("ci_method")
    if args.values:
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"--values must be comma-separated numbers, got {args.values!r}")
        result = confidence_interval(values, method)
    elif args.mean is not None and args.std is not None and args.n is not None:
        result = RunStatistics.from_summary(args.mean, args.std, args.n, method)
    else:
        raise UsageError("ci requires --values or all of --mean, --std and --n")
    if args.out:
        write_json(args.out, result.to_dict())
    print(dumps_json(result.to_dict()), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = ProbeForgeArgumentParser(
        prog="probeforge",
        description="probeforge - transformer interpretability workbench",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Transplant the FFN of b into a
  probeforge swap --recipient a.ckpt --donor b.ckpt --module ffn --out c.ckpt

  # Retrieval heads and attention entropy
  probeforge retrieval --ckpt m.ckpt --config needle.json --out scores.json
  probeforge entropy --ckpt m.ckpt --prompt-file p.txt --marker "####" --out entropy.json

  # FFN statistics and their relative difference
  probeforge ffn-stats --ckpt m.ckpt --prompts prompts.txt --tau 1e-3 --out stats.json
  probeforge ffn-stats diff a.json b.json --out delta.csv

  # Knowledge conflicts
  probeforge conflict --ckpt m.ckpt --facts facts.jsonl --out result.json
  probeforge conflict sweep --manifest ckpts.json --facts facts.jsonl --out sweep.json

  # Corpora
  probeforge mix --long l.jsonl --short s.jsonl --ratio 5:5 --budget 1000000 --out mixed.jsonl --report mix.json
  probeforge stats --corpus c.jsonl --out stats.json

  # Reporting
  probeforge report heatmap --input scores.json --out scores.svg
  probeforge ci --values "92.1,92.5,92.9"
        """
    )
    parser.add_argument('--seed', type=int, help='Global seed (overrides PROBE_FORGE_SEED and config)')
    parser.add_argument('--config', help='JSON config file overlaid on ~/.probeforge/config.json')
    parser.add_argument('--verbose', '-v', action='store_true', help='Debug logging')
    parser.add_argument('--quiet', '-q', action='store_true', help='Errors only')

    subparsers = parser.add_subparsers(dest='command', help='Commands')

    # Swap command
    swap_parser = subparsers.add_parser('swap', help='Transplant an MHA or FFN module')
    swap_parser.add_argument('--recipient', required=True, help='Checkpoint that receives the module')
    swap_parser.add_argument('--donor', required=True, help='Checkpoint that supplies the module')
    swap_parser.add_argument('--module', required=True, choices=['mha', 'ffn'], help='Module kind')
    swap_parser.add_argument('--layers', help='Inclusive layer range i..j (default: all)')
    swap_parser.add_argument('--out', required=True, help='Output checkpoint')
    swap_parser.set_defaults(func=cmd_swap)

    # Retrieval command
    retrieval_parser = subparsers.add_parser('retrieval', help='Needle-in-a-haystack retrieval scores')
    retrieval_parser.add_argument('--ckpt', required=True, help='Checkpoint')
    retrieval_parser.add_argument('--config', dest='needle_config', required=True, help='Needle suite JSON')
    retrieval_parser.add_argument('--out', required=True, help='Score JSON')
    retrieval_parser.add_argument('--threshold', type=float, help='Retrieval-head threshold')
    retrieval_parser.add_argument('--workers', type=int, help='Parallel configurations')
    retrieval_parser.add_argument('--heatmap', help='Also write a heatmap of the score map')
    retrieval_parser.set_defaults(func=cmd_retrieval)

    # Entropy command
    entropy_parser = subparsers.add_parser('entropy', help='Phase-split attention entropy')
    entropy_parser.add_argument('--ckpt', required=True, help='Checkpoint')
    entropy_parser.add_argument('--prompt-file', required=True, help='Prompt text file')
    entropy_parser.add_argument('--marker', help='Answer marker text (default from config)')
    entropy_parser.add_argument('--answer-token', action='store_true',
                                help='Split at the reserved ANSWER token id instead of marker text')
    entropy_parser.add_argument('--max-new', type=int, default=32, help='Tokens to generate')
    entropy_parser.add_argument('--baseline', help='Entropy JSON to subtract (adds a difference section)')
    entropy_parser.add_argument('--out', required=True, help='Entropy JSON')
    entropy_parser.set_defaults(func=cmd_entropy)

    # FFN stats command
    ffn_parser = subparsers.add_parser('ffn-stats', help='FFN activation statistics')
    ffn_parser.add_argument('--ckpt', help='Checkpoint')
    ffn_parser.add_argument('--prompts', help='Prompt file, one prompt per line')
    ffn_parser.add_argument('--tau', type=float, help='Sparsity threshold (default from config)')
    ffn_parser.add_argument('--out', help='Stats JSON')
    ffn_parser.set_defaults(func=cmd_ffn_stats)
    ffn_subparsers = ffn_parser.add_subparsers(dest='ffn_command')
    ffn_diff = ffn_subparsers.add_parser('diff', help='Relative difference of two stats files')
    ffn_diff.add_argument('a', help='Stats JSON of the compared model')
    ffn_diff.add_argument('b', help='Stats JSON of the baseline model')
    ffn_diff.add_argument('--out', dest='diff_out', required=True, help='Delta CSV')
    ffn_diff.set_defaults(func=cmd_ffn_stats_diff)

    # Conflict command
    conflict_parser = subparsers.add_parser('conflict', help='Knowledge-conflict probing')
    conflict_parser.add_argument('--ckpt', help='Checkpoint')
    conflict_parser.add_argument('--facts', help='Fact records (JSONL)')
    conflict_parser.add_argument('--templates', help='Template set JSON (default: built-in per domain)')
    conflict_parser.add_argument('--max-new', type=int, help='Tokens per answer')
    conflict_parser.add_argument('--no-inject', action='store_true', help='Ask the bare question')
    conflict_parser.add_argument('--out', help='Result JSON')
    conflict_parser.set_defaults(func=cmd_conflict)
    conflict_subparsers = conflict_parser.add_subparsers(dest='conflict_command')
    conflict_sweep = conflict_subparsers.add_parser('sweep', help='Probe every checkpoint of a manifest')
    conflict_sweep.add_argument('--manifest', required=True, help='JSON list of {label, path}')
    conflict_sweep.add_argument('--facts', dest='sweep_facts', required=True, help='Fact records (JSONL)')
    conflict_sweep.add_argument('--templates', dest='sweep_templates', help='Template set JSON')
    conflict_sweep.add_argument('--max-new', dest='sweep_max_new', type=int, help='Tokens per answer')
    conflict_sweep.add_argument('--metric', default='parametric',
                                choices=['parametric', 'contextual', 'other'], help='Rate shown in the table')
    conflict_sweep.add_argument('--domains', help='Comma-separated domain columns')
    conflict_sweep.add_argument('--table', help='Also write the table (.csv or text)')
    conflict_sweep.add_argument('--out', dest='sweep_out', required=True, help='Sweep JSON')
    conflict_sweep.set_defaults(func=cmd_conflict_sweep)

    # Mix command
    mix_parser = subparsers.add_parser('mix', help='Mix long and short corpora')
    mix_parser.add_argument('--long', required=True, help='Long corpus (JSONL)')
    mix_parser.add_argument('--short', required=True, help='Short corpus (JSONL)')
    mix_parser.add_argument('--ratio', required=True, help='Long:short token ratio, e.g. 5:5')
    mix_parser.add_argument('--budget', type=int, required=True, help='Token budget')
    mix_parser.add_argument('--seed', dest='mix_seed', type=int, help='Sampling seed')
    mix_parser.add_argument('--length-threshold', type=int, help='Long/short cutoff in tokens')
    mix_parser.add_argument('--out', required=True, help='Mixed corpus (JSONL)')
    mix_parser.add_argument('--report', required=True, help='Mix report JSON')
    mix_parser.set_defaults(func=cmd_mix)

    # Stats command
    stats_parser = subparsers.add_parser('stats', help='Corpus statistics')
    stats_parser.add_argument('--corpus', required=True, help='Corpus (JSONL)')
    stats_parser.add_argument('--length-threshold', type=int, help='Long/short cutoff in tokens')
    stats_parser.add_argument('--out', required=True, help='Stats JSON')
    stats_parser.set_defaults(func=cmd_stats)

    # Report commands
    report_parser = subparsers.add_parser('report', help='Heatmaps and sweep tables')
    report_subparsers = report_parser.add_subparsers(dest='report_command', required=True)

    report_heatmap = report_subparsers.add_parser('heatmap', help='Render a score or entropy matrix')
    report_heatmap.add_argument('--input', required=True, help='JSON written by retrieval or entropy')
    report_heatmap.add_argument('--minus', help='Second JSON to subtract')
    report_heatmap.add_argument('--key', default='matrix', choices=['matrix', 'reasoning', 'answering'],
                                help='Matrix to render')
    report_heatmap.add_argument('--format', choices=['svg', 'csv'], help='Output format')
    report_heatmap.add_argument('--title', help='Figure title')
    report_heatmap.add_argument('--out', required=True, help='Output file')
    report_heatmap.set_defaults(func=cmd_report_heatmap)

    report_sweep = report_subparsers.add_parser('sweep', help='Percent change against a baseline ratio')
    report_sweep.add_argument('--manifest', required=True, help='JSON {label: {ffn_stats, entropy, retrieval}}')
    report_sweep.add_argument('--baseline', required=True, help='Baseline row label')
    report_sweep.add_argument('--out', required=True, help='Table CSV')
    report_sweep.set_defaults(func=cmd_report_sweep)

    # CI command
    ci_parser = subparsers.add_parser('ci', help='Mean, std and 95%% CI of repeated runs')
    ci_parser.add_argument('--values', help='Comma-separated run results')
    ci_parser.add_argument('--mean', type=float, help='Reported mean')
    ci_parser.add_argument('--std', type=float, help='Reported sample std')
    ci_parser.add_argument('--n', type=int, help='Run count')
    ci_parser.add_argument('--method', choices=['normal', 't'], help='Critical value (default from config)')
    ci_parser.add_argument('--out', help='Also write the JSON here')
    ci_parser.set_defaults(func=cmd_ci)

    return parser


def _configure_logging(args) -> None:
    level = logging.DEBUG if args.verbose else logging.ERROR if args.quiet else logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_OK

    if not args.command:
        parser.print_help()
        return EXIT_USAGE

    _configure_logging(args)

    try:
        args.settings = Config.from_file(Path(args.config)) if args.config else Config()
        return args.func(args)
    except UsageError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ProbeForgeError, OSError, json.JSONDecodeError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:
        logger.debug("internal error", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == '__main__':
    sys.exit(main())
