"""Annotation corpus: loading, validation, and dataset splits.

A corpus lives in a directory of line-delimited JSON files, one per
section (``annotators``, ``abstracts``, ``annotations``, and optionally
``augmentation_pool`` and a ``profiles`` sidecar). Every file starts with
a ``{"schema": 1}`` version line. A loaded Corpus is immutable by
convention and safe to share across threads; all split operations are
pure functions of (corpus, parameters, seed).
"""

from __future__ import annotations

import datetime
import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

from perjar.errors import CorpusError

log = logging.getLogger("perjar.corpus")

SCHEMA_VERSION = 1

PUBLICATION_SOURCES = ("annotator_authored", "subdomain_augmentation")

SECTION_FILES = {
    "annotators": "annotators.jsonl",
    "abstracts": "abstracts.jsonl",
    "annotations": "annotations.jsonl",
    "augmentation_pool": "augmentation_pool.jsonl",
    "profiles": "profiles.jsonl",
}


@dataclass
class PublicationRecord:
    title: str
    abstract_text: str
    source: str
    year: int | None = None

    def validate(self):
        if not self.abstract_text:
            raise CorpusError("publication abstract_text is empty")
        if self.source not in PUBLICATION_SOURCES:
            raise CorpusError(f"unknown publication source {self.source!r}")


@dataclass
class Annotator:
    id: str
    subfield: str
    papers_published: int
    avg_references: float
    first_pub_year: int | None = None
    publications: list[PublicationRecord] = field(default_factory=list)
    profile_text: str | None = None

    def validate(self):
        if self.papers_published < 0:
            raise CorpusError(f"annotator {self.id}: papers_published < 0")
        if self.avg_references < 0:
            raise CorpusError(f"annotator {self.id}: avg_references < 0")
        year = datetime.date.today().year
        if self.first_pub_year is not None and self.first_pub_year > year:
            raise CorpusError(
                f"annotator {self.id}: first_pub_year {self.first_pub_year} is in the future"
            )
        for pub in self.publications:
            pub.validate()


@dataclass
class AbstractDoc:
    id: str
    text: str
    domain: str
    title: str | None = None

    def validate(self):
        if not self.text:
            raise CorpusError(f"abstract {self.id}: text is empty")


@dataclass
class TermAnnotation:
    annotator_id: str
    abstract_id: str
    term: str
    familiarity: int
    needs_definition: int | None = None
    needs_background: int | None = None
    needs_example: int | None = None

    def validate(self):
        if self.familiarity not in (0, 1):
            raise CorpusError(
                f"annotation ({self.annotator_id}, {self.abstract_id}, {self.term!r}): "
                f"familiarity must be 0 or 1, got {self.familiarity!r}"
            )
        for name in ("needs_definition", "needs_background", "needs_example"):
            value = getattr(self, name)
            if value is not None and value not in (0, 1):
                raise CorpusError(
                    f"annotation ({self.annotator_id}, {self.abstract_id}, {self.term!r}): "
                    f"{name} must be 0 or 1 when present, got {value!r}"
                )


@dataclass
class Corpus:
    annotators: dict[str, Annotator]
    abstracts: dict[str, AbstractDoc]
    annotations: list[TermAnnotation]
    augmentation_pool: dict[str, list[PublicationRecord]] = field(default_factory=dict)

    def validate(self):
        """Check referential integrity and the no-duplicate-triple rule."""
        for annotator in self.annotators.values():
            annotator.validate()
        for abstract in self.abstracts.values():
            abstract.validate()
        seen = set()
        for ann in self.annotations:
            ann.validate()
            if ann.annotator_id not in self.annotators:
                raise CorpusError(f"annotation references unknown annotator id {ann.annotator_id!r}")
            if ann.abstract_id not in self.abstracts:
                raise CorpusError(f"annotation references unknown abstract id {ann.abstract_id!r}")
            triple = (ann.annotator_id, ann.abstract_id, ann.term)
            if triple in seen:
                raise CorpusError(f"duplicate annotation triple {triple!r}")
            seen.add(triple)
            abstract = self.abstracts[ann.abstract_id]
            if ann.term.lower() not in abstract.text.lower():
                log.warning(
                    "term %r not found in abstract %s (annotator %s); "
                    "surface form may have been normalized",
                    ann.term, ann.abstract_id, ann.annotator_id,
                )

    def groups(self, indices=None):
        """Distinct (annotator_id, abstract_id) pairs in first-appearance order.

        Returns an ordered mapping group -> list of annotation indices.
        """
        if indices is None:
            indices = range(len(self.annotations))
        grouped: dict[tuple[str, str], list[int]] = {}
        for i in indices:
            ann = self.annotations[i]
            grouped.setdefault((ann.annotator_id, ann.abstract_id), []).append(i)
        return grouped

    def annotator_indices(self, annotator_id):
        return [i for i, a in enumerate(self.annotations) if a.annotator_id == annotator_id]

    def pool_for_subfield(self, subfield):
        return self.augmentation_pool.get(_norm_subfield(subfield), [])

    def digest(self):
        """Content hash used in manifests; stable across load order of files."""
        payload = {
            "annotators": {aid: _annotator_dict(a) for aid, a in sorted(self.annotators.items())},
            "abstracts": {
                xid: {"id": x.id, "title": x.title, "text": x.text, "domain": x.domain}
                for xid, x in sorted(self.abstracts.items())
            },
            "annotations": [
                {
                    "annotator_id": a.annotator_id, "abstract_id": a.abstract_id,
                    "term": a.term, "familiarity": a.familiarity,
                    "needs_definition": a.needs_definition,
                    "needs_background": a.needs_background,
                    "needs_example": a.needs_example,
                }
                for a in self.annotations
            ],
            "augmentation_pool": {
                key: [_publication_dict(p) for p in pubs]
                for key, pubs in sorted(self.augmentation_pool.items())
            },
        }
        blob = json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class DatasetSplit:
    """Annotation-index folds. ``granularity`` records whether whole
    (annotator, abstract) groups were kept together (``abstract``) or the
    folds were sampled at the annotation level (``annotation``)."""

    train: list[int]
    val: list[int]
    test: list[int]
    seed: int
    granularity: str = "abstract"
    stratify: str = "per_annotator"

    def validate(self, corpus: Corpus):
        folds = [set(self.train), set(self.val), set(self.test)]
        total = sum(len(f) for f in folds)
        union = set().union(*folds)
        if len(union) != total:
            raise CorpusError("split folds are not pairwise disjoint")
        if union and (min(union) < 0 or max(union) >= len(corpus.annotations)):
            raise CorpusError("split references indices outside the corpus")


def _norm_subfield(subfield):
    return subfield.strip().lower()


def _annotator_dict(a: Annotator):
    return {
        "id": a.id,
        "subfield": a.subfield,
        "papers_published": a.papers_published,
        "avg_references": a.avg_references,
        "first_pub_year": a.first_pub_year,
        "publications": [_publication_dict(p) for p in a.publications],
        "profile_text": a.profile_text,
    }


def _publication_dict(p: PublicationRecord):
    return {"title": p.title, "abstract_text": p.abstract_text,
            "year": p.year, "source": p.source}


def _read_section(path: Path, required=True):
    """Yield (line_number, record) for one section file, checking the schema line."""
    if not path.exists():
        if required:
            raise CorpusError("missing corpus file", path=path)
        return
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines:
        raise CorpusError("file is empty; expected a schema line", path=path)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusError(f"malformed schema line: {exc}", path=path, line=1) from exc
    if not isinstance(header, dict) or header.get("schema") != SCHEMA_VERSION:
        raise CorpusError(
            f"unsupported or missing schema version (expected {{'schema': {SCHEMA_VERSION}}})",
            path=path, line=1,
        )
    for lineno, raw in enumerate(lines[1:], start=2):
        raw = raw.strip()
        if not raw:
            continue
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"malformed record: {exc}", path=path, line=lineno) from exc
        if not isinstance(record, dict):
            raise CorpusError("record is not a key-value object", path=path, line=lineno)
        yield lineno, record


def _require(record, key, path, lineno):
    if key not in record:
        raise CorpusError(f"record is missing required field {key!r}", path=path, line=lineno)
    return record[key]


def _parse_publication(record, path, lineno):
    return PublicationRecord(
        title=str(_require(record, "title", path, lineno)),
        abstract_text=str(_require(record, "abstract_text", path, lineno)),
        source=str(_require(record, "source", path, lineno)),
        year=record.get("year"),
    )


def load_corpus(path) -> Corpus:
    """Load and validate a corpus directory.

    Annotation order follows the file order of ``annotations.jsonl``. A
    ``profiles.jsonl`` sidecar, when present, fills ``profile_text`` for
    the annotators it names.
    """
    root = Path(path)
    if not root.exists():
        raise CorpusError("corpus path does not exist", path=root)
    if not root.is_dir():
        raise CorpusError("corpus path is not a directory", path=root)

    annotators: dict[str, Annotator] = {}
    ann_path = root / SECTION_FILES["annotators"]
    for lineno, rec in _read_section(ann_path):
        annotator = Annotator(
            id=str(_require(rec, "id", ann_path, lineno)),
            subfield=str(_require(rec, "subfield", ann_path, lineno)),
            papers_published=int(_require(rec, "papers_published", ann_path, lineno)),
            avg_references=float(_require(rec, "avg_references", ann_path, lineno)),
            first_pub_year=rec.get("first_pub_year"),
            publications=[
                _parse_publication(p, ann_path, lineno)
                for p in rec.get("publications", [])
            ],
            profile_text=rec.get("profile_text"),
        )
        if annotator.id in annotators:
            raise CorpusError(f"duplicate annotator id {annotator.id!r}", path=ann_path, line=lineno)
        annotators[annotator.id] = annotator

    abstracts: dict[str, AbstractDoc] = {}
    abs_path = root / SECTION_FILES["abstracts"]
    for lineno, rec in _read_section(abs_path):
        doc = AbstractDoc(
            id=str(_require(rec, "id", abs_path, lineno)),
            text=str(_require(rec, "text", abs_path, lineno)),
            domain=str(_require(rec, "domain", abs_path, lineno)),
            title=rec.get("title"),
        )
        if doc.id in abstracts:
            raise CorpusError(f"duplicate abstract id {doc.id!r}", path=abs_path, line=lineno)
        abstracts[doc.id] = doc

    annotations: list[TermAnnotation] = []
    anno_path = root / SECTION_FILES["annotations"]
    for lineno, rec in _read_section(anno_path):
        annotations.append(TermAnnotation(
            annotator_id=str(_require(rec, "annotator_id", anno_path, lineno)),
            abstract_id=str(_require(rec, "abstract_id", anno_path, lineno)),
            term=str(_require(rec, "term", anno_path, lineno)),
            familiarity=_require(rec, "familiarity", anno_path, lineno),
            needs_definition=rec.get("needs_definition"),
            needs_background=rec.get("needs_background"),
            needs_example=rec.get("needs_example"),
        ))

    pool: dict[str, list[PublicationRecord]] = {}
    pool_path = root / SECTION_FILES["augmentation_pool"]
    for lineno, rec in _read_section(pool_path, required=False):
        subfield = _norm_subfield(str(_require(rec, "subfield", pool_path, lineno)))
        pool.setdefault(subfield, []).append(_parse_publication(rec, pool_path, lineno))

    profiles_path = root / SECTION_FILES["profiles"]
    for lineno, rec in _read_section(profiles_path, required=False):
        aid = str(_require(rec, "annotator_id", profiles_path, lineno))
        if aid not in annotators:
            raise CorpusError(f"profile references unknown annotator id {aid!r}",
                              path=profiles_path, line=lineno)
        annotators[aid].profile_text = str(_require(rec, "profile_text", profiles_path, lineno))

    corpus = Corpus(annotators=annotators, abstracts=abstracts,
                    annotations=annotations, augmentation_pool=pool)
    corpus.validate()
    return corpus


def write_corpus(corpus: Corpus, path):
    """Serialize a corpus back to the directory format (used by tooling and tests)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    _write_section(root / SECTION_FILES["annotators"],
                   (_annotator_dict(a) for a in corpus.annotators.values()))
    _write_section(root / SECTION_FILES["abstracts"],
                   ({"id": x.id, "title": x.title, "text": x.text, "domain": x.domain}
                    for x in corpus.abstracts.values()))
    _write_section(root / SECTION_FILES["annotations"],
                   ({k: v for k, v in {
                       "annotator_id": a.annotator_id,
                       "abstract_id": a.abstract_id,
                       "term": a.term,
                       "familiarity": a.familiarity,
                       "needs_definition": a.needs_definition,
                       "needs_background": a.needs_background,
                       "needs_example": a.needs_example,
                   }.items() if v is not None}
                    for a in corpus.annotations))
    if corpus.augmentation_pool:
        _write_section(root / SECTION_FILES["augmentation_pool"],
                       (dict(subfield=key, **_publication_dict(p))
                        for key, pubs in corpus.augmentation_pool.items()
                        for p in pubs))


def write_profiles_sidecar(profiles: dict[str, str], corpus_path):
    """Write the profiles sidecar next to the corpus files."""
    root = Path(corpus_path)
    _write_section(root / SECTION_FILES["profiles"],
                   ({"annotator_id": aid, "profile_text": text}
                    for aid, text in sorted(profiles.items())))
    return root / SECTION_FILES["profiles"]


def _write_section(path: Path, records):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": SCHEMA_VERSION}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def make_random_split(corpus: Corpus, ratios, seed: int) -> DatasetSplit:
    """Split (annotator, abstract) groups into train/val/test folds.

    Stratified per annotator: each annotator's groups are shuffled and
    divided by the given ratios, so every fold sees every annotator. All
    annotations of a group land in the same fold. Val and test sizes are
    the rounded ratio shares; the remainder goes to train.
    """
    r_train, r_val, r_test = ratios
    if min(r_train, r_val, r_test) < 0:
        raise ValueError("ratios must be non-negative")
    if abs(r_train + r_val + r_test - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1.0, got {r_train + r_val + r_test}")
    if not corpus.annotations:
        raise ValueError("cannot split an empty corpus")

    rng = random.Random(seed)
    grouped = corpus.groups()
    folds: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for annotator_id in sorted(corpus.annotators):
        groups = [g for g in grouped if g[0] == annotator_id]
        if not groups:
            continue
        rng.shuffle(groups)
        n = len(groups)
        n_val = min(round(r_val * n), n)
        n_test = min(round(r_test * n), n - n_val)
        n_train = n - n_val - n_test
        for fold, chunk in (("train", groups[:n_train]),
                            ("val", groups[n_train:n_train + n_val]),
                            ("test", groups[n_train + n_val:])):
            for group in chunk:
                folds[fold].extend(grouped[group])
    return DatasetSplit(train=sorted(folds["train"]), val=sorted(folds["val"]),
                        test=sorted(folds["test"]), seed=seed, granularity="abstract")


def make_loao_split(corpus: Corpus, held_out: str, match_size: int, seed: int) -> DatasetSplit:
    """Leave-one-annotator-out split.

    Train is a uniform sample of exactly ``match_size`` annotations drawn
    from the other annotators' train folds (under the same seed's 60/20/20
    split); val/test are the held-out annotator's own val/test folds.
    """
    if held_out not in corpus.annotators:
        raise ValueError(f"unknown annotator {held_out!r}")
    base = make_random_split(corpus, (0.6, 0.2, 0.2), seed)
    pool = [i for i in base.train if corpus.annotations[i].annotator_id != held_out]
    if match_size > len(pool):
        raise ValueError(
            f"match_size {match_size} exceeds the {len(pool)} available training annotations"
        )
    train = _sample_preserving_order(pool, match_size, random.Random(seed))
    val = [i for i in base.val if corpus.annotations[i].annotator_id == held_out]
    test = [i for i in base.test if corpus.annotations[i].annotator_id == held_out]
    return DatasetSplit(train=train, val=val, test=test, seed=seed, granularity="annotation")


def subsample(items, fraction, seed):
    """Uniform subset of size max(1, round(fraction * len(items))).

    Keeps the original relative order; deterministic for a fixed seed.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if not items:
        raise ValueError("cannot subsample an empty list")
    size = max(1, round(fraction * len(items)))
    return _sample_preserving_order(list(items), size, random.Random(seed))


def _sample_preserving_order(items, size, rng):
    chosen = sorted(rng.sample(range(len(items)), size))
    return [items[i] for i in chosen]
