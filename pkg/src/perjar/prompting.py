"""Instruction/input/response assembly in the Alpaca format.

All wording comes from checked-in template files under
``perjar/templates/<version>/``; rendering only substitutes placeholders,
so output is byte-deterministic across runs and platforms. Tests compare
rendered prompts against frozen golden files rather than re-deriving the
wording.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from perjar.errors import BackendError, PromptError

TASKS = ("familiarity", "definition_needs", "background_needs", "example_needs")
STRATEGIES = ("vanilla", "metadata", "profile", "nearest_annotator", "nearest_abstract")

# which TermAnnotation field carries the gold label for each task
TASK_LABEL_FIELDS = {
    "familiarity": "familiarity",
    "definition_needs": "needs_definition",
    "background_needs": "needs_background",
    "example_needs": "needs_example",
}

TEMPLATE_VERSION = "v1"

PROFILE_INSTRUCTION = "Write a short third-person research profile of this reader."

_PLACEHOLDER_RE = re.compile(r"\{(\w+)\}")


@dataclass
class RelatedData:
    """Strategy-specific background text; empty string for vanilla."""
    text: str = ""


@dataclass
class PromptContext:
    annotator: object
    abstract: object
    entities: list[str]
    related: RelatedData


@dataclass
class AlpacaExample:
    """One instruction-tuning record (response absent at inference time)."""
    instruction: str
    input: str
    response: str | None = None


def template_root():
    return resources.files("perjar").joinpath("templates", TEMPLATE_VERSION)


@lru_cache(maxsize=None)
def _load(name: str) -> str:
    return template_root().joinpath(name).read_text(encoding="utf-8")


def _check_task(task):
    if task not in TASKS:
        raise PromptError(f"unknown task {task!r}; expected one of {TASKS}")


def _check_strategy(strategy):
    if strategy not in STRATEGIES:
        raise PromptError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def _fill(template: str, values: dict[str, str]) -> str:
    """Single-pass placeholder substitution (substituted text is never rescanned)."""
    def sub(match):
        key = match.group(1)
        if key not in values:
            raise PromptError(f"template placeholder {{{key}}} has no value")
        return values[key]
    return _PLACEHOLDER_RE.sub(sub, template)


def _format_number(value) -> str:
    # integral reals render without the trailing .0
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def entity_list_str(entities: list[str]) -> str:
    return "[" + ", ".join(entities) + "]"


def serialize_label_list(labels) -> str:
    """Canonical binary-list encoding, e.g. [0, 1, 0]."""
    for label in labels:
        if label not in (0, 1):
            raise PromptError(f"labels must be 0 or 1, got {label!r}")
    return "[" + ", ".join(str(int(label)) for label in labels) + "]"


def render_instruction(task: str) -> str:
    _check_task(task)
    return _load(f"instruction_{task}.txt")


def render_related_data(strategy: str, annotator, abstract, pairs=None) -> RelatedData:
    """Render the background text for one strategy.

    ``pairs`` carries the retrieval output for the nearest_* strategies:
    a list of (term, familiarity label) tuples.
    """
    _check_strategy(strategy)
    if strategy == "vanilla":
        return RelatedData(text=_load("related_vanilla.txt"))
    if strategy == "metadata":
        if annotator.first_pub_year is None:
            raise PromptError(f"annotator {annotator.id}: first_pub_year is unset")
        return RelatedData(text=_fill(_load("related_metadata.txt"), {
            "subfield": annotator.subfield,
            "papers_published": _format_number(annotator.papers_published),
            "avg_references": _format_number(annotator.avg_references),
            "first_pub_year": _format_number(annotator.first_pub_year),
            "domain": abstract.domain,
        }))
    if strategy == "profile":
        if not annotator.profile_text:
            raise PromptError(f"annotator {annotator.id} has no profile text")
        return RelatedData(text=_fill(_load("related_profile.txt"),
                                      {"profile": annotator.profile_text}))
    # nearest_annotator / nearest_abstract
    if pairs is None:
        raise PromptError(f"strategy {strategy!r} requires retrieval output")
    terms = [term for term, _ in pairs]
    labels = [label for _, label in pairs]
    return RelatedData(text=_fill(_load(f"related_{strategy}.txt"), {
        "entity_list": entity_list_str(terms),
        "familiarity_list": serialize_label_list(labels),
    }))


def render_input(task: str, entities: list[str], abstract, related: RelatedData) -> str:
    _check_task(task)
    if not entities:
        raise PromptError("entity list is empty")
    return _fill(_load(f"input_{task}.txt"), {
        "entity": entity_list_str(entities),
        "abstract": abstract.text,
        "related_data": related.text,
    })


def assemble_example(task: str, strategy: str, ctx: PromptContext,
                     labels=None) -> AlpacaExample:
    """Compose instruction + input (+ response when labels are given)."""
    _check_task(task)
    _check_strategy(strategy)
    if not ctx.entities:
        raise PromptError("entity list is empty")
    if len(set(e.lower() for e in ctx.entities)) != len(ctx.entities):
        raise PromptError("entity list contains duplicates")
    if strategy == "vanilla" and ctx.related.text != "":
        raise PromptError("vanilla strategy requires empty related data")
    response = None
    if labels is not None:
        if len(labels) != len(ctx.entities):
            raise PromptError(
                f"got {len(labels)} labels for {len(ctx.entities)} entities"
            )
        response = serialize_label_list(labels)
    return AlpacaExample(
        instruction=render_instruction(task),
        input=render_input(task, ctx.entities, ctx.abstract, ctx.related),
        response=response,
    )


def profile_prompt(annotator) -> str:
    """The fixed meta-prompt sent to the backend to summarize an annotator."""
    if annotator.first_pub_year is None:
        raise PromptError(f"annotator {annotator.id}: first_pub_year is unset")
    # reader-specific lines of the metadata template (the paper-domain line
    # does not apply when no abstract is in play)
    reader_lines = "\n".join(_load("related_metadata.txt").splitlines()[:4])
    metadata = _fill(reader_lines, {
        "subfield": annotator.subfield,
        "papers_published": _format_number(annotator.papers_published),
        "avg_references": _format_number(annotator.avg_references),
        "first_pub_year": _format_number(annotator.first_pub_year),
    })
    return f"{metadata}\n{PROFILE_INSTRUCTION}"


def generate_profile(backend, annotator) -> str:
    """Generate (or return the cached) research-background summary.

    Decoding is deterministic (temperature 0); the result is cached on the
    annotator, so repeated calls issue no further backend requests.
    """
    if annotator.profile_text:
        return annotator.profile_text
    text = backend.generate(profile_prompt(annotator), max_new_tokens=256, temperature=0.0)
    if not text:
        raise BackendError(f"profile generation for {annotator.id} returned empty text")
    annotator.profile_text = text
    return text
