"""Training-plan construction and execution against a pluggable backend.

A TrainingPlan is a fully resolved recipe: which texts to run causal-LM
fine-tuning on, which Alpaca examples to run supervised fine-tuning on,
and with which hyperparameters. Plans are pure functions of their inputs
and seed; all gradient work lives behind the ModelBackend interface. The
MockBackend memorizes its training data so whole pipelines can be
exercised deterministically without a GPU.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace

from perjar import prompting
from perjar.corpus import Corpus, DatasetSplit, subsample
from perjar.errors import BackendError, PromptError
from perjar.retrieval import (build_abstract_index, build_profile_index,
                              nearest_abstract, nearest_annotator, tokenize)

log = logging.getLogger("perjar.training")

DEFAULT_TARGET_MODULES = ("q_proj", "k_proj", "v_proj", "o_proj",
                          "gate_proj", "up_proj", "down_proj")

SFT_EPOCHS_DEFAULT = 20
CLM_EPOCHS_DEFAULT = 50

# an annotator with at most this many publications gets pool augmentation
AUGMENT_THRESHOLD = 5
# and the text list is padded from the pool up to this size
AUGMENT_TARGET = 20

STRATEGY_KINDS = ("supervised", "self_supervised", "semi_supervised")


@dataclass(frozen=True)
class FineTuneConfig:
    lora_rank: int = 16
    lora_alpha: float = 16.0
    lora_dropout: float = 0.0
    target_modules: tuple[str, ...] = DEFAULT_TARGET_MODULES
    max_seq_len: int = 2048
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    batch_size: int = 2
    grad_accum: int = 4
    warmup_steps: int = 5
    schedule: str = "linear"
    epochs: int = SFT_EPOCHS_DEFAULT
    seed: int = 0

    def validate(self):
        positive = ("lora_rank", "lora_alpha", "max_seq_len", "learning_rate",
                    "weight_decay", "batch_size", "grad_accum", "warmup_steps",
                    "epochs")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lora_dropout < 0:
            raise ValueError(f"lora_dropout must be >= 0, got {self.lora_dropout}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if self.schedule != "linear":
            raise ValueError(f"unsupported schedule {self.schedule!r}")


@dataclass(frozen=True)
class TrainingStrategy:
    kind: str
    fraction: float | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.fraction is not None and not 0 < self.fraction <= 1:
            raise ValueError(f"fraction must be in (0, 1], got {self.fraction}")


@dataclass
class TrainingPlan:
    strategy: TrainingStrategy
    annotator_id: str
    sft_examples: list[prompting.AlpacaExample]
    clm_texts: list[str]
    config: FineTuneConfig
    phase_order: list[str]
    clm_config: FineTuneConfig | None = None

    def validate(self):
        kind = self.strategy.kind
        if kind == "supervised" and (self.clm_texts or not self.sft_examples):
            raise ValueError("supervised plans carry sft examples only")
        if kind == "self_supervised" and (self.sft_examples or not self.clm_texts):
            raise ValueError("self-supervised plans carry clm texts only")
        if kind == "semi_supervised" and not (self.sft_examples and self.clm_texts):
            raise ValueError("semi-supervised plans need both clm texts and sft examples")
        for ex in self.sft_examples:
            if ex.response is None:
                raise ValueError("training examples must carry a response")
        for phase in self.phase_order:
            if phase not in ("clm", "sft"):
                raise ValueError(f"unknown phase {phase!r}")

    def digest(self) -> str:
        return stable_digest({
            "strategy": {"kind": self.strategy.kind, "fraction": self.strategy.fraction},
            "annotator_id": self.annotator_id,
            "sft": [[ex.instruction, ex.input, ex.response] for ex in self.sft_examples],
            "clm": self.clm_texts,
            "config": _config_dict(self.config),
            "clm_config": _config_dict(self.clm_config) if self.clm_config else None,
            "phase_order": self.phase_order,
        })


@dataclass
class AdapterHandle:
    id: str
    annotator_id: str
    strategy: str
    config_hash: str


def _config_dict(config: FineTuneConfig) -> dict:
    d = config.__dict__.copy()
    d["target_modules"] = list(config.target_modules)
    return d


def stable_digest(obj) -> str:
    """Canonical-JSON sha256; stable under dict key order."""
    blob = json.dumps(obj, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def checkpoint_steps(epoch_size: int) -> int:
    """Checkpoint interval in steps for a given epoch size (floor division)."""
    if epoch_size < 1:
        raise ValueError(f"epoch_size must be >= 1, got {epoch_size}")
    return epoch_size * 10 // 8


# ---------------------------------------------------------------------------
# plan builders


def gold_pairs(annotations, task):
    """(term, label) pairs for one task, skipping annotations without that label."""
    key = prompting.TASK_LABEL_FIELDS[task]
    pairs = [(a.term, getattr(a, key)) for a in annotations]
    return [(term, label) for term, label in pairs if label is not None]


def build_sft_examples(corpus: Corpus, indices, strategy: str,
                       visible_indices=None, task: str = "familiarity"):
    """One Alpaca example per (annotator, abstract) group among ``indices``.

    ``visible_indices`` bounds the annotations whose labels may leak into
    related data for the nearest_* strategies; it defaults to ``indices``
    (training-fold discipline).
    """
    if visible_indices is None:
        visible_indices = list(indices)
    profile_index = None
    abstract_index = None
    if strategy == "nearest_annotator":
        profile_index = build_profile_index(corpus)
    if strategy == "nearest_abstract":
        abstract_index = build_abstract_index(corpus)

    examples = []
    for (annotator_id, abstract_id), group in corpus.groups(indices).items():
        annotator = corpus.annotators[annotator_id]
        abstract = corpus.abstracts[abstract_id]
        labeled = gold_pairs([corpus.annotations[i] for i in group], task)
        if not labeled:
            continue
        entities = [term for term, _ in labeled]
        labels = [label for _, label in labeled]
        pairs = None
        if strategy == "nearest_annotator":
            _, pairs = nearest_annotator(corpus, annotator_id, profile_index,
                                         entities, allowed_indices=visible_indices)
        elif strategy == "nearest_abstract":
            _, pairs = nearest_abstract(corpus, abstract_id, annotator_id,
                                        abstract_index, allowed_indices=visible_indices)
        related = prompting.render_related_data(strategy, annotator, abstract, pairs)
        ctx = prompting.PromptContext(annotator=annotator, abstract=abstract,
                                      entities=entities, related=related)
        examples.append(prompting.assemble_example(task, strategy, ctx, labels))
    return examples


def _train_groups(corpus: Corpus, annotator_id: str, split: DatasetSplit):
    indices = [i for i in split.train
               if corpus.annotations[i].annotator_id == annotator_id]
    if not indices:
        raise ValueError(f"annotator {annotator_id!r} has no training annotations in the split")
    return corpus.groups(indices)


def _select_groups(grouped, fraction, seed):
    keys = list(grouped)
    if fraction < 1.0:
        keys = subsample(keys, fraction, seed)
    indices = []
    for key in keys:
        indices.extend(grouped[key])
    return sorted(indices)


def build_supervised_plan(corpus: Corpus, annotator_id: str, strategy: str,
                          split: DatasetSplit, config: FineTuneConfig | None = None,
                          fraction: float = 1.0, seed: int = 0) -> TrainingPlan:
    """Supervised plan: gold familiarity labels for the annotator's training groups.

    ``fraction`` < 1 subsamples at the group level (the 1%/10% supervision
    settings); related data only ever sees the selected groups' labels.
    """
    config = config or FineTuneConfig()
    config.validate()
    grouped = _train_groups(corpus, annotator_id, split)
    indices = _select_groups(grouped, fraction, seed)
    examples = build_sft_examples(corpus, indices, strategy)
    plan = TrainingPlan(strategy=TrainingStrategy("supervised"),
                        annotator_id=annotator_id, sft_examples=examples,
                        clm_texts=[], config=config, phase_order=["sft"])
    plan.validate()
    return plan


def clm_text(publication) -> str:
    return f"Title: {publication.title}\nAbstract: {publication.abstract_text}"


def build_selfsup_plan(corpus: Corpus, annotator_id: str,
                       config: FineTuneConfig | None = None) -> TrainingPlan:
    """Causal-LM plan over the annotator's publications.

    Annotators with at most five authored publications are padded with
    subfield-matched pool publications up to twenty texts (or until the
    pool runs out).
    """
    config = config or FineTuneConfig(epochs=CLM_EPOCHS_DEFAULT)
    config.validate()
    annotator = corpus.annotators[annotator_id]
    texts = [clm_text(p) for p in annotator.publications]
    if len(annotator.publications) <= AUGMENT_THRESHOLD:
        for pub in corpus.pool_for_subfield(annotator.subfield):
            if len(texts) >= AUGMENT_TARGET:
                break
            texts.append(clm_text(pub))
    if not texts:
        raise ValueError(
            f"annotator {annotator_id!r} has no publications and no pool match "
            f"for subfield {annotator.subfield!r}"
        )
    plan = TrainingPlan(strategy=TrainingStrategy("self_supervised"),
                        annotator_id=annotator_id, sft_examples=[],
                        clm_texts=texts, config=config, phase_order=["clm"])
    plan.validate()
    return plan


def build_semisup_plan(corpus: Corpus, annotator_id: str, fraction: float,
                       split: DatasetSplit, config: FineTuneConfig | None = None,
                       clm_config: FineTuneConfig | None = None, seed: int = 0,
                       strategy: str = "vanilla") -> TrainingPlan:
    """Self-supervised phase followed by supervised fine-tuning on a subsample."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    config = config or FineTuneConfig()
    config.validate()
    clm_config = clm_config or replace(config, epochs=CLM_EPOCHS_DEFAULT)
    clm_config.validate()
    clm_part = build_selfsup_plan(corpus, annotator_id, clm_config)
    grouped = _train_groups(corpus, annotator_id, split)
    indices = _select_groups(grouped, fraction, seed)
    examples = build_sft_examples(corpus, indices, strategy)
    plan = TrainingPlan(strategy=TrainingStrategy("semi_supervised", fraction),
                        annotator_id=annotator_id, sft_examples=examples,
                        clm_texts=clm_part.clm_texts, config=config,
                        clm_config=clm_config, phase_order=["clm", "sft"])
    plan.validate()
    return plan


def run_plan(backend, plan: TrainingPlan, run_log=None) -> AdapterHandle:
    """Execute the plan's phases in order, threading the adapter between them.

    ``run_log``, when given, receives one record dict per completed plan.
    Backend failures propagate after logging the failed phase; no partial
    handle is returned.
    """
    plan.validate()
    started = time.perf_counter()
    handle = None
    for phase in plan.phase_order:
        try:
            if phase == "clm":
                handle = backend.finetune_clm(plan.clm_texts, plan.clm_config or plan.config)
            else:
                handle = backend.finetune_sft(plan.sft_examples, plan.config, base=handle)
        except Exception:
            log.exception("backend failure during %s phase of plan %s",
                          phase, plan.digest()[:12])
            raise
    handle.annotator_id = plan.annotator_id
    handle.strategy = plan.strategy.kind
    if run_log is not None:
        run_log({
            "plan_digest": plan.digest(),
            "adapter_id": handle.id,
            "annotator_id": plan.annotator_id,
            "strategy": plan.strategy.kind,
            "wall_time_seconds": time.perf_counter() - started,
        })
    return handle


# ---------------------------------------------------------------------------
# backends


class ModelBackend(ABC):
    """Pluggable training/inference backend.

    A backend session has one active adapter: the most recently finetuned
    one, or whichever was passed to activate(). generate at temperature 0
    must be deterministic for a fixed adapter and prompt.
    """

    @abstractmethod
    def generate(self, prompt: str, max_new_tokens: int, temperature: float) -> str: ...

    @abstractmethod
    def finetune_sft(self, examples, config: FineTuneConfig,
                     base: AdapterHandle | None = None) -> AdapterHandle: ...

    @abstractmethod
    def finetune_clm(self, texts, config: FineTuneConfig) -> AdapterHandle: ...

    def activate(self, handle: AdapterHandle | None):
        """Select the adapter used by subsequent generate calls (no-op default)."""


_PROMPT_RE = re.compile(r"^Entity: \[(.*?)\]\nAbstract: (.*?)\nAdditional information: ",
                        re.DOTALL | re.MULTILINE)


def _parse_task_prompt(prompt: str):
    m = _PROMPT_RE.search(prompt)
    if not m or not m.group(1):
        return None
    entities = m.group(1).split(", ")
    return entities, m.group(2)


def _parse_response(text: str):
    body = text.strip()
    if not (body.startswith("[") and body.endswith("]")):
        raise BackendError(f"unparseable training response {text!r}")
    inner = body[1:-1].strip()
    return [int(part) for part in inner.split(",")] if inner else []


@dataclass
class _MockAdapter:
    handle: AdapterHandle
    exact: dict = field(default_factory=dict)       # (abstract sha, term) -> label
    by_term: dict = field(default_factory=dict)     # term -> label
    labels: list = field(default_factory=list)      # all memorized labels
    clm_vocab: set = field(default_factory=set)


class MockBackend(ModelBackend):
    """Deterministic in-process stand-in for a real fine-tuning stack.

    finetune_sft memorizes (abstract digest, lowercased term) -> label and
    a per-term fallback so supervision generalizes across abstracts;
    finetune_clm records the token vocabulary of its texts. generate
    answers each entity with (i) the memorized label, else (ii) 0 when all
    entity tokens occur in the recorded vocabulary, else (iii) the
    majority memorized label (ties favor 1). Prompts it cannot parse get
    the literal reply "UNPARSEABLE".
    """

    def __init__(self):
        self._adapters: dict[str, _MockAdapter] = {}
        self._active: _MockAdapter | None = None
        self._counter = 0

    def _new_adapter(self, config_hash: str) -> _MockAdapter:
        self._counter += 1
        handle = AdapterHandle(id=f"mock-{self._counter:04d}", annotator_id="",
                               strategy="", config_hash=config_hash)
        adapter = _MockAdapter(handle=handle)
        self._adapters[handle.id] = adapter
        self._active = adapter
        return adapter

    def activate(self, handle: AdapterHandle | None):
        if handle is None:
            self._active = None
            return
        if handle.id not in self._adapters:
            raise BackendError(f"unknown adapter {handle.id!r}")
        self._active = self._adapters[handle.id]

    def finetune_clm(self, texts, config: FineTuneConfig) -> AdapterHandle:
        if not texts:
            raise BackendError("finetune_clm called with no texts")
        config.validate()
        adapter = self._new_adapter(stable_digest(
            {"mode": "clm", "texts": list(texts), "config": _config_dict(config)}))
        for text in texts:
            adapter.clm_vocab.update(tokenize(text))
        return adapter.handle

    def finetune_sft(self, examples, config: FineTuneConfig,
                     base: AdapterHandle | None = None) -> AdapterHandle:
        if not examples:
            raise BackendError("finetune_sft called with no examples")
        config.validate()
        adapter = self._new_adapter(stable_digest({
            "mode": "sft",
            "examples": [[ex.instruction, ex.input, ex.response] for ex in examples],
            "config": _config_dict(config),
            "base": base.config_hash if base else None,
        }))
        if base is not None:
            parent = self._adapters.get(base.id)
            if parent is None:
                raise BackendError(f"unknown base adapter {base.id!r}")
            adapter.clm_vocab = set(parent.clm_vocab)
            adapter.exact.update(parent.exact)
            adapter.by_term.update(parent.by_term)
            adapter.labels.extend(parent.labels)
        for ex in examples:
            parsed = _parse_task_prompt(ex.input)
            if parsed is None:
                raise BackendError("training example input does not parse")
            entities, abstract_text = parsed
            labels = _parse_response(ex.response)
            if len(labels) != len(entities):
                raise BackendError("training example has label/entity length mismatch")
            digest = hashlib.sha256(abstract_text.encode("utf-8")).hexdigest()
            for entity, label in zip(entities, labels):
                term = entity.lower()
                adapter.exact[(digest, term)] = label
                adapter.by_term.setdefault(term, label)
                adapter.labels.append(label)
        return adapter.handle

    def generate(self, prompt: str, max_new_tokens: int, temperature: float) -> str:
        if prompt.endswith(prompting.PROFILE_INSTRUCTION):
            return self._profile_reply(prompt)
        parsed = _parse_task_prompt(prompt)
        if parsed is None:
            return "UNPARSEABLE"
        entities, abstract_text = parsed
        adapter = self._active
        digest = hashlib.sha256(abstract_text.encode("utf-8")).hexdigest()
        labels = []
        for entity in entities:
            term = entity.lower()
            if adapter is not None and (digest, term) in adapter.exact:
                labels.append(adapter.exact[(digest, term)])
            elif adapter is not None and term in adapter.by_term:
                labels.append(adapter.by_term[term])
            elif adapter is not None and adapter.clm_vocab and \
                    all(tok in adapter.clm_vocab for tok in tokenize(entity)):
                labels.append(0)
            else:
                memorized = adapter.labels if adapter is not None else []
                ones = sum(memorized)
                labels.append(1 if ones >= len(memorized) - ones else 0)
        return prompting.serialize_label_list(labels)

    @staticmethod
    def _profile_reply(prompt: str) -> str:
        fields = dict(
            line.split(" is: ", 1)
            for line in prompt.splitlines()
            if " is: " in line
        )
        subfield = fields.get("Self-defined subfield of the reader", "their field")
        papers = fields.get("Number of papers published by the reader", "several")
        year = fields.get("Year of the first paper published by the reader", "recent years")
        return (f"This reader is a domain expert in {subfield} who has published "
                f"{papers} papers since {year} and reads widely across related areas.")


def mock_backend() -> MockBackend:
    return MockBackend()
