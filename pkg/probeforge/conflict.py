"""Knowledge-conflict probing.

A fact record holds a subject with its true (parametric) value and a
conflicting value. Probes inject the conflict in a preamble ahead of the
base question; the verdict says which of the two answers the model gave.
"""

import csv
import io
import json
import logging
import string
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .constructions import SUBJECT_SYMBOLS, VALUE_SYMBOLS
from .errors import CapacityError, InputError, ProbeForgeError, TemplateError
from .files import iter_lines, read_json, write_lines
from .model import Checkpoint, generate_greedy
from .tokenizer import encode

logger = logging.getLogger(__name__)

DOMAINS = ("geography", "tech", "celebrity", "sport", "custom")
VERDICTS = ("parametric", "contextual", "other")
PLACEHOLDERS = ("subject", "relation", "true_value", "conflict_value")


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True)
class FactRecord:
    """One fact and the value that contradicts it."""

    subject: str
    relation: str
    true_value: str
    conflict_value: str
    domain: str = "custom"
    fact_id: Optional[str] = None

    def __post_init__(self):
        if not self.subject:
            raise InputError("fact subject must be non-empty")
        if normalize_whitespace(self.true_value) == normalize_whitespace(self.conflict_value):
            raise InputError(
                f"fact {self.subject!r}: conflict_value must differ from true_value ({self.true_value!r})"
            )
        if self.domain not in DOMAINS:
            raise InputError(f"unknown domain {self.domain!r}, expected one of {DOMAINS}")

    def fields(self) -> Dict[str, str]:
        return {
            "subject": self.subject,
            "relation": self.relation,
            "true_value": self.true_value,
            "conflict_value": self.conflict_value,
        }

    def to_dict(self) -> Dict[str, Any]:
        data = dict(self.fields(), domain=self.domain)
        if self.fact_id is not None:
            data["id"] = self.fact_id
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FactRecord":
        try:
            return cls(
                subject=str(data["subject"]),
                relation=str(data.get("relation", "")),
                true_value=str(data["true_value"]),
                conflict_value=str(data["conflict_value"]),
                domain=str(data.get("domain", "custom")),
                fact_id=data.get("id"),
            )
        except KeyError as e:
            raise InputError(f"fact record is missing field {e}")


@dataclass(frozen=True)
class TemplateSet:
    """Question, conflict preamble and answer templates.

    Answer templates default to the true/conflict values; yes/no question
    sets give literal answers instead.
    """

    name: str
    question: str
    preamble: str
    parametric_answer: str = "{true_value}"
    contextual_answer: str = "{conflict_value}"

    def __post_init__(self):
        for label in ("question", "preamble", "parametric_answer", "contextual_answer"):
            names = _placeholders(getattr(self, label))
            unknown = sorted(names - set(PLACEHOLDERS))
            if unknown:
                raise TemplateError(f"template {self.name!r} {label} uses unknown placeholder(s) {unknown}")
        if "subject" not in _placeholders(self.question):
            raise TemplateError(f"template {self.name!r} question must contain {{subject}}")
        if "conflict_value" not in _placeholders(self.preamble):
            raise TemplateError(f"template {self.name!r} preamble must contain {{conflict_value}}")

    def to_dict(self) -> Dict[str, str]:
        return {
            "name": self.name,
            "question": self.question,
            "preamble": self.preamble,
            "parametric_answer": self.parametric_answer,
            "contextual_answer": self.contextual_answer,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TemplateSet":
        if "builtin" in data:
            return builtin_templates(data["builtin"])
        try:
            return cls(**data)
        except TypeError as e:
            raise TemplateError(f"invalid template set: {e}")


def _placeholders(template: str) -> set:
    try:
        return {name for _, name, _, _ in string.Formatter().parse(template) if name is not None}
    except ValueError as e:
        raise TemplateError(f"malformed template {template!r}: {e}")


def _render(template: str, values: Dict[str, str]) -> str:
    try:
        return template.format(**values)
    except (KeyError, IndexError, ValueError) as e:
        raise TemplateError(f"cannot render template {template!r}: {e}")


BUILTIN_TEMPLATES: Dict[str, TemplateSet] = {
    "geography": TemplateSet(
        name="geography",
        question="Is the city of {subject} in {true_value}?",
        preamble="You should know the new geography knowledge: {subject} is a new city in the {conflict_value}. ",
        parametric_answer="Yes",
        contextual_answer="No",
    ),
    "tech": TemplateSet(
        name="tech",
        question="Was {subject} developed by {true_value}?",
        preamble="You should know the new technology knowledge: {subject} was developed by {conflict_value}. ",
        parametric_answer="Yes",
        contextual_answer="No",
    ),
    "celebrity": TemplateSet(
        name="celebrity",
        question="Was {subject} born in {true_value}?",
        preamble="You should know the new celebrity knowledge: {subject} was born in {conflict_value}. ",
        parametric_answer="Yes",
        contextual_answer="No",
    ),
    "sport": TemplateSet(
        name="sport",
        question="Does {subject} play for {true_value}?",
        preamble="You should know the new sport knowledge: {subject} plays for {conflict_value}. ",
        parametric_answer="Yes",
        contextual_answer="No",
    ),
    "synthetic": TemplateSet(
        name="synthetic",
        question="{subject}=",
        preamble="{subject}={conflict_value}. ",
    ),
}

DOMAIN_TEMPLATES = {
    "geography": "geography",
    "tech": "tech",
    "celebrity": "celebrity",
    "sport": "sport",
    "custom": "synthetic",
}


def builtin_templates(name: str) -> TemplateSet:
    if name not in BUILTIN_TEMPLATES:
        raise TemplateError(f"Unknown template set: {name}. Available: {', '.join(sorted(BUILTIN_TEMPLATES))}")
    return BUILTIN_TEMPLATES[name]


def load_templates(path: Union[str, Path]) -> TemplateSet:
    return TemplateSet.from_dict(read_json(path))


@dataclass(frozen=True)
class ConflictProbe:
    """A rendered probe: the base question and the same question behind a conflict preamble."""

    probe_id: str
    domain: str
    base_question: str
    injected_prompt: str
    expected_parametric: Tuple[int, ...]
    expected_contextual: Tuple[int, ...]
    parametric_text: str
    contextual_text: str

    def prompt(self, injected: bool = True) -> str:
        return self.injected_prompt if injected else self.base_question


def build_probe(fact: FactRecord, templates: TemplateSet, probe_id: Optional[str] = None) -> ConflictProbe:
    """Render a fact through a template set.

    Args:
        fact: Fact record
        templates: Template set; placeholders are filled by name
        probe_id: Identifier (defaults to the fact id or subject)

    Returns:
        ConflictProbe
    """
    values = fact.fields()
    question = _render(templates.question, values)
    injected = _render(templates.preamble, values) + question
    parametric = _render(templates.parametric_answer, values)
    contextual = _render(templates.contextual_answer, values)
    if not normalize_whitespace(parametric) or not normalize_whitespace(contextual):
        raise TemplateError(f"template {templates.name!r} renders an empty expected answer")
    if normalize_whitespace(parametric) == normalize_whitespace(contextual):
        raise TemplateError(f"template {templates.name!r} renders identical expected answers")
    return ConflictProbe(
        probe_id=probe_id or fact.fact_id or f"{fact.domain}:{fact.subject}",
        domain=fact.domain,
        base_question=question,
        injected_prompt=injected,
        expected_parametric=tuple(encode(parametric)),
        expected_contextual=tuple(encode(contextual)),
        parametric_text=parametric,
        contextual_text=contextual,
    )


def build_probes(facts: Sequence[FactRecord], templates: Optional[TemplateSet] = None) -> List[ConflictProbe]:
    """Build one probe per fact, with the domain's built-in templates unless a set is given."""
    probes = []
    for index, fact in enumerate(facts):
        chosen = templates or builtin_templates(DOMAIN_TEMPLATES[fact.domain])
        probe_id = fact.fact_id or f"{fact.domain}-{index:04d}"
        probes.append(build_probe(fact, chosen, probe_id))
    return probes


def judge(output_text: str, probe: ConflictProbe) -> str:
    """Verdict by whitespace-normalized prefix match; the longer matching answer wins."""
    text = normalize_whitespace(output_text)
    matches = []
    for verdict, expected in (("parametric", probe.parametric_text), ("contextual", probe.contextual_text)):
        expected = normalize_whitespace(expected)
        if text.startswith(expected):
            matches.append((len(expected), verdict))
    if not matches:
        return "other"
    return max(matches)[1]


@dataclass
class ProbeOutcome:
    probe_id: str
    domain: str
    verdict: str
    output: str
    overflow: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.probe_id,
            "domain": self.domain,
            "verdict": self.verdict,
            "output": self.output,
            "overflow": self.overflow,
        }


def _rates(outcomes: Sequence[ProbeOutcome]) -> Dict[str, Fraction]:
    total = len(outcomes)
    counts = {verdict: 0 for verdict in VERDICTS}
    for outcome in outcomes:
        counts[outcome.verdict] += 1
    return {verdict: Fraction(count, total) for verdict, count in counts.items()}


@dataclass
class ProbeResult:
    """Outcomes of a probe suite; rates are exact fractions of the probe count."""

    outcomes: List[ProbeOutcome] = field(default_factory=list)

    def __post_init__(self):
        self.outcomes = sorted(self.outcomes, key=lambda o: o.probe_id)

    @property
    def rates(self) -> Dict[str, Fraction]:
        if not self.outcomes:
            raise InputError("probe result has no outcomes")
        return _rates(self.outcomes)

    @property
    def parametric_rate(self) -> Fraction:
        return self.rates["parametric"]

    @property
    def contextual_rate(self) -> Fraction:
        return self.rates["contextual"]

    @property
    def other_rate(self) -> Fraction:
        return self.rates["other"]

    def domain_rates(self) -> "OrderedDict[str, Dict[str, Fraction]]":
        by_domain: "OrderedDict[str, List[ProbeOutcome]]" = OrderedDict()
        for outcome in sorted(self.outcomes, key=lambda o: o.domain):
            by_domain.setdefault(outcome.domain, []).append(outcome)
        return OrderedDict((domain, _rates(items)) for domain, items in by_domain.items())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "per_probe": [o.to_dict() for o in self.outcomes],
            "rates": {k: float(v) for k, v in self.rates.items()},
            "domains": {d: {k: float(v) for k, v in r.items()} for d, r in self.domain_rates().items()},
        }


def _run_one(ckpt: Checkpoint, probe: ConflictProbe, max_new: Optional[int], injected: bool) -> ProbeOutcome:
    tokens = encode(probe.prompt(injected), add_bos=True)
    budget = max_new or max(len(probe.expected_parametric), len(probe.expected_contextual))
    try:
        output = generate_greedy(ckpt, tokens, budget, trace=False)
    except CapacityError as e:
        logger.warning("probe %s overflowed the context: %s", probe.probe_id, e)
        return ProbeOutcome(probe.probe_id, probe.domain, "other", "", overflow=True)
    text = output.text
    return ProbeOutcome(probe.probe_id, probe.domain, judge(text, probe), text)


def run_probe_suite(
    ckpt: Checkpoint,
    probes: Sequence[ConflictProbe],
    max_new: Optional[int] = None,
    injected: bool = True,
    workers: int = 1,
) -> ProbeResult:
    """Generate greedily for every probe and classify the answers.

    Args:
        ckpt: Checkpoint to probe
        probes: Non-empty probe list
        max_new: Tokens per answer (default: longest expected answer)
        injected: Use the conflict prompt; False asks the bare question
        workers: Thread count

    Returns:
        ProbeResult
    """
    if not probes:
        raise InputError("run_probe_suite needs at least one probe")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(lambda p: _run_one(ckpt, p, max_new, injected), probes))
    else:
        outcomes = [_run_one(ckpt, probe, max_new, injected) for probe in probes]
    return ProbeResult(outcomes)


@dataclass
class SweepRow:
    label: str
    rates: Dict[str, float] = field(default_factory=dict)
    domain_rates: Dict[str, Dict[str, float]] = field(default_factory=dict)
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {"label": self.label, "rates": self.rates, "domains": self.domain_rates, "error": self.error}


@dataclass
class SweepTable:
    """Label (e.g. mixing ratio) -> verdict rates, overall and per domain."""

    rows: List[SweepRow] = field(default_factory=list)

    @classmethod
    def from_accuracy_columns(cls, data: Dict[str, Dict[str, float]], metric: str = "parametric") -> "SweepTable":
        """Table from reported per-domain accuracies (fractions), keyed by label."""
        rows = []
        for label, columns in data.items():
            domains = {domain: {metric: float(value)} for domain, value in columns.items()}
            overall = {metric: float(np.mean(list(columns.values())))} if columns else {}
            rows.append(SweepRow(label, overall, domains))
        return cls(rows)

    def row(self, label: str) -> SweepRow:
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(label)

    def render(self, metric: str = "parametric", domains: Optional[Iterable[str]] = None, fmt: str = "text") -> str:
        """Render as an aligned text table or CSV, values in percent.

        Args:
            metric: Verdict whose rate is shown
            domains: Domain columns; None shows the overall rate only
            fmt: "text" or "csv"
        """
        domains = list(domains) if domains is not None else None
        header = ["Ratio"] + ([d.capitalize() for d in domains] if domains else [metric.capitalize()])
        body = []
        for row in self.rows:
            if row.error is not None:
                body.append([row.label] + ["error"] * (len(header) - 1))
                continue
            if domains:
                values = [row.domain_rates.get(d, {}).get(metric) for d in domains]
            else:
                values = [row.rates.get(metric)]
            body.append([row.label] + ["" if v is None else _percent(v) for v in values])

        if fmt == "csv":
            buffer = io.StringIO()
            writer = csv.writer(buffer, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(body)
            return buffer.getvalue()
        if fmt != "text":
            raise InputError(f"Unknown table format: {fmt}")
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in [header] + body]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> Dict[str, Any]:
        return {"rows": [row.to_dict() for row in self.rows]}


def _percent(value: float) -> str:
    return f"{round(value * 100, 1):g}"


def sweep_checkpoints(
    ckpts: Sequence[Tuple[str, Checkpoint]],
    probes: Sequence[ConflictProbe],
    max_new: Optional[int] = None,
) -> SweepTable:
    """Run the same probe suite on every labelled checkpoint.

    A checkpoint that fails is recorded with its error and the sweep goes on.
    """
    rows = []
    for label, ckpt in ckpts:
        try:
            result = run_probe_suite(ckpt, probes, max_new)
        except ProbeForgeError as e:
            logger.warning("sweep row %s failed: %s", label, e)
            rows.append(SweepRow(label, error=str(e)))
            continue
        rows.append(SweepRow(
            label,
            {k: float(v) for k, v in result.rates.items()},
            {d: {k: float(v) for k, v in r.items()} for d, r in result.domain_rates().items()},
        ))
    return SweepTable(rows)


def generate_synthetic_facts(
    n: int,
    seed: int = 17,
    subjects: str = SUBJECT_SYMBOLS,
    values: str = VALUE_SYMBOLS,
) -> List[FactRecord]:
    """Random single-symbol facts "S=v" with a distinct conflicting value.

    Args:
        n: Number of facts (at most one per subject)
        seed: Generator seed
        subjects: Subject alphabet
        values: Value alphabet (at least two symbols)

    Returns:
        List of FactRecord in domain "custom"
    """
    if n < 1 or n > len(subjects):
        raise InputError(f"n must be in [1, {len(subjects)}], got {n}")
    if len(values) < 2:
        raise InputError("need at least two value symbols")
    rng = np.random.default_rng(seed)
    chosen = [subjects[i] for i in rng.permutation(len(subjects))[:n]]
    facts = []
    for index, subject in enumerate(chosen):
        true_value = values[int(rng.integers(len(values)))]
        others = [v for v in values if v != true_value]
        conflict_value = others[int(rng.integers(len(others)))]
        facts.append(FactRecord(subject, "=", true_value, conflict_value, "custom", f"synthetic-{index:04d}"))
    return facts


def load_facts(path: Union[str, Path]) -> List[FactRecord]:
    """Read line-delimited JSON fact records."""
    facts = []
    for number, line in iter_lines(path):
        try:
            facts.append(FactRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, AttributeError, TypeError) as e:
            raise InputError(f"{path}:{number}: not a JSON fact record ({e})")
        except InputError as e:
            raise InputError(f"{path}:{number}: {e}")
    if not facts:
        raise InputError(f"{path} holds no fact records")
    return facts


def save_facts(facts: Sequence[FactRecord], path: Union[str, Path]) -> Path:
    return write_lines(path, [json.dumps(f.to_dict(), sort_keys=True, ensure_ascii=False) for f in facts])
