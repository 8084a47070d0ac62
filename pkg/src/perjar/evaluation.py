"""Output parsing and metrics: precision/recall/F1, mismatch rate, effective F1.

The positive class is 1 (unfamiliar): the point of the task is catching
jargon the reader does not know. Prompts whose output fails the binary
label-list format count toward the mismatch rate and are excluded from
the confusion counts; they penalize the score only through
effective_f1 = (1 - mismatch_rate) * f1.
"""

from __future__ import annotations

import logging
import re
import statistics
from dataclasses import dataclass, field

from perjar import prompting
from perjar.corpus import Corpus
from perjar.retrieval import build_abstract_index, build_profile_index
from perjar.retrieval import nearest_abstract, nearest_annotator
from perjar.training import gold_pairs

log = logging.getLogger("perjar.evaluation")

POSITIVE_CLASS = 1

GENERATE_MAX_NEW_TOKENS = 256

# a 0 or 1 not adjacent to another digit or a letter
_LABEL_RE = re.compile(r"(?<![0-9A-Za-z])[01](?![0-9A-Za-z])")


@dataclass
class ParsedPrediction:
    labels: list[int] | None
    mismatch: bool
    raw: str


def parse_label_list(raw: str, expected_len: int) -> ParsedPrediction:
    """Extract standalone 0/1 tokens; mismatch when the count is off.

    Tolerant by design: model output like "Sure! The answer is [0, 1]"
    still parses as long as exactly ``expected_len`` standalone binary
    digits appear.
    """
    if expected_len < 1:
        raise ValueError(f"expected_len must be >= 1, got {expected_len}")
    found = [int(ch) for ch in _LABEL_RE.findall(raw)]
    if len(found) != expected_len:
        return ParsedPrediction(labels=None, mismatch=True, raw=raw)
    return ParsedPrediction(labels=found, mismatch=False, raw=raw)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def add(self, other: "ConfusionCounts"):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.tn += other.tn

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def confusion(preds, golds) -> ConfusionCounts:
    """Count agreement with positive class 1."""
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} preds vs {len(golds)} golds")
    c = ConfusionCounts()
    for p, g in zip(preds, golds):
        if p == 1 and g == 1:
            c.tp += 1
        elif p == 1 and g == 0:
            c.fp += 1
        elif p == 0 and g == 1:
            c.fn += 1
        else:
            c.tn += 1
    return c


def prf1(c: ConfusionCounts) -> tuple[float, float, float]:
    """Precision, recall, F1; zero denominators resolve to 0."""
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def effective_f1(f1: float, mismatch_rate: float) -> float:
    if not 0 <= f1 <= 1:
        raise ValueError(f"f1 must be in [0, 1], got {f1}")
    if not 0 <= mismatch_rate <= 1:
        raise ValueError(f"mismatch_rate must be in [0, 1], got {mismatch_rate}")
    return (1 - mismatch_rate) * f1


@dataclass
class Metrics:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    mismatch_rate: float = 0.0
    effective_f1: float = 0.0
    n_prompts: int = 0
    n_items: int = 0


METRIC_NAMES = ("precision", "recall", "f1", "mismatch_rate", "effective_f1")

REPORT_COLUMNS = ("scope", "precision", "recall", "f1", "mismatch_rate",
                  "effective_f1", "n_prompts", "n_items")


@dataclass
class EvaluationReport(Metrics):
    per_annotator: dict[str, Metrics] = field(default_factory=dict)
    positive_class: int = POSITIVE_CLASS

    def to_table(self) -> str:
        """Flat delimited table, one row per scope (overall + each annotator)."""
        rows = [("overall", self)]
        rows += sorted(self.per_annotator.items())
        lines = ["\t".join(REPORT_COLUMNS)]
        for scope, m in rows:
            lines.append("\t".join([
                scope,
                f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}",
                f"{m.mismatch_rate:.6f}", f"{m.effective_f1:.6f}",
                str(m.n_prompts), str(m.n_items),
            ]))
        return "\n".join(lines) + "\n"


def _metrics_for(results) -> Metrics:
    counts = ConfusionCounts()
    mismatches = 0
    for _, parsed, golds in results:
        if parsed.mismatch:
            mismatches += 1
        else:
            counts.add(confusion(parsed.labels, golds))
    n_prompts = len(results)
    mismatch_rate = mismatches / n_prompts if n_prompts else 0.0
    precision, recall, f1 = prf1(counts)
    return Metrics(precision=precision, recall=recall, f1=f1,
                   mismatch_rate=mismatch_rate,
                   effective_f1=effective_f1(f1, mismatch_rate),
                   n_prompts=n_prompts, n_items=counts.total)


def build_report(results) -> EvaluationReport:
    """Assemble a report from (annotator_id, ParsedPrediction, golds) triples."""
    overall = _metrics_for(results)
    per_annotator = {}
    for annotator_id in sorted({r[0] for r in results}):
        subset = [r for r in results if r[0] == annotator_id]
        per_annotator[annotator_id] = _metrics_for(subset)
    return EvaluationReport(per_annotator=per_annotator, **overall.__dict__)


def build_prompt(corpus: Corpus, annotator_id: str, abstract_id: str,
                 entities, task: str, strategy: str,
                 profile_index=None, abstract_index=None, visible_indices=None) -> str:
    """Render one inference prompt (instruction + input) for a group."""
    annotator = corpus.annotators[annotator_id]
    abstract = corpus.abstracts[abstract_id]
    pairs = None
    if strategy == "nearest_annotator":
        _, pairs = nearest_annotator(corpus, annotator_id, profile_index,
                                     entities, allowed_indices=visible_indices)
    elif strategy == "nearest_abstract":
        _, pairs = nearest_abstract(corpus, abstract_id, annotator_id,
                                    abstract_index, allowed_indices=visible_indices)
    related = prompting.render_related_data(strategy, annotator, abstract, pairs)
    ctx = prompting.PromptContext(annotator=annotator, abstract=abstract,
                                  entities=list(entities), related=related)
    example = prompting.assemble_example(task, strategy, ctx)
    return f"{example.instruction}\n\n{example.input}"


def evaluate_adapter(backend, adapter, corpus: Corpus, fold, task: str,
                     strategy: str, visible_indices=None) -> EvaluationReport:
    """Run inference over a fold and score it.

    One generate call per (annotator, abstract) group, temperature 0.
    ``visible_indices`` bounds the annotations whose labels may appear in
    related data (normally the training fold). Backend failures are
    recorded as mismatches rather than aborting the fold.
    """
    groups = corpus.groups(fold)
    if not groups:
        raise ValueError("evaluation fold is empty")
    backend.activate(adapter)
    profile_index = build_profile_index(corpus) if strategy == "nearest_annotator" else None
    abstract_index = build_abstract_index(corpus) if strategy == "nearest_abstract" else None

    results = []
    for (annotator_id, abstract_id), indices in groups.items():
        labeled = gold_pairs([corpus.annotations[i] for i in indices], task)
        if not labeled:
            continue
        entities = [term for term, _ in labeled]
        golds = [label for _, label in labeled]
        try:
            prompt = build_prompt(corpus, annotator_id, abstract_id, entities,
                                  task, strategy, profile_index, abstract_index,
                                  visible_indices)
            raw = backend.generate(prompt, max_new_tokens=GENERATE_MAX_NEW_TOKENS,
                                   temperature=0.0)
            parsed = parse_label_list(raw, len(entities))
        except Exception as exc:
            log.warning("prompt for (%s, %s) failed: %s", annotator_id, abstract_id, exc)
            parsed = ParsedPrediction(labels=None, mismatch=True,
                                      raw=f"<error: {exc}>")
        results.append((annotator_id, parsed, golds))
    if not results:
        raise ValueError(f"no annotation in the fold carries a {task!r} label")
    return build_report(results)


@dataclass
class RunAggregate:
    """Per-metric mean and sample standard deviation over repeated runs."""
    mean: dict[str, float]
    std: dict[str, float]
    n_runs: int


def mean_std(values) -> tuple[float, float]:
    values = list(values)
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


def aggregate(reports) -> RunAggregate:
    if not reports:
        raise ValueError("cannot aggregate zero reports")
    mean = {}
    std = {}
    for name in METRIC_NAMES:
        mean[name], std[name] = mean_std(getattr(r, name) for r in reports)
    return RunAggregate(mean=mean, std=std, n_runs=len(reports))
