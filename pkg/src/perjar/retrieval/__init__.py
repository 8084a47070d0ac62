"""BM25 retrieval over annotator profiles and abstracts.

The scoring loop runs in a compiled Cython kernel when available and
falls back to a pure-Python twin otherwise (``perjar.retrieval.KERNEL``
says which is active; set PERJAR_PURE_PYTHON=1 to force the fallback).
Both kernels are kept operation-for-operation identical, so rankings and
scores do not depend on which one is loaded.

Indexes are immutable once built and never persisted; rebuilding from a
corpus is cheap at the scales this toolkit targets.
"""

from __future__ import annotations

import math
import os
import re
from array import array
from dataclasses import dataclass, field

from perjar.errors import RetrievalError

if os.environ.get("PERJAR_PURE_PYTHON"):
    from perjar.retrieval import _bm25_py as _kernel
    KERNEL = "python"
else:
    try:
        from perjar.retrieval import _bm25_native as _kernel  # type: ignore[no-redef]
        KERNEL = "native"
    except ImportError:
        from perjar.retrieval import _bm25_py as _kernel  # type: ignore[no-redef]
        KERNEL = "python"

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75

# alphanumeric runs (unicode letters and digits, underscore excluded)
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric characters; no stemming."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class RankedHit:
    doc_id: str
    score: float


@dataclass
class Bm25Index:
    """Inverted index with document lengths.

    ``postings`` maps token -> {doc_id: term count}; ``avgdl`` is the mean
    document length. Scoring uses the non-negative idf variant
    ln(1 + (N - df + 0.5) / (df + 0.5)), so scores are always >= 0.
    """

    postings: dict[str, dict[str, int]]
    doc_len: dict[str, int]
    avgdl: float
    n_docs: int
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    # packed per-token postings and per-doc norms for the scoring kernel
    _doc_ids: list[str] = field(default_factory=list, repr=False)
    _doc_pos: dict[str, int] = field(default_factory=dict, repr=False)
    _norms: array = field(default_factory=lambda: array("d"), repr=False)
    _packed: dict = field(default_factory=dict, repr=False)

    def idf(self, token: str) -> float:
        df = len(self.postings.get(token, ()))
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def norm(self, doc_id: str) -> float:
        return self._norms[self._doc_pos[doc_id]]


def build_index(docs: dict[str, str], k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> Bm25Index:
    """Index a doc_id -> text mapping. Token counts come straight from tokenize."""
    if not docs:
        raise RetrievalError("cannot build a BM25 index over an empty document map")
    postings: dict[str, dict[str, int]] = {}
    doc_len: dict[str, int] = {}
    for doc_id, text in docs.items():
        tokens = tokenize(text)
        doc_len[doc_id] = len(tokens)
        for token in tokens:
            per_doc = postings.setdefault(token, {})
            per_doc[doc_id] = per_doc.get(doc_id, 0) + 1
    n_docs = len(doc_len)
    avgdl = sum(doc_len.values()) / n_docs
    index = Bm25Index(postings=postings, doc_len=doc_len, avgdl=avgdl,
                      n_docs=n_docs, k1=k1, b=b)
    index._doc_ids = list(doc_len)
    index._doc_pos = {doc_id: i for i, doc_id in enumerate(index._doc_ids)}
    norms = array("d", bytes(8 * n_docs))
    for doc_id, dl in doc_len.items():
        if avgdl > 0:
            norms[index._doc_pos[doc_id]] = k1 * (1.0 - b + b * (dl / avgdl))
        else:
            norms[index._doc_pos[doc_id]] = k1 * (1.0 - b)
    index._norms = norms
    for token, per_doc in postings.items():
        pos = array("q", (index._doc_pos[d] for d in per_doc))
        tfs = array("d", (float(tf) for tf in per_doc.values()))
        index._packed[token] = (pos, tfs, index.idf(token))
    return index


def bm25_score(index: Bm25Index, query: list[str], doc_id: str) -> float:
    """Score one document against a token list (duplicates in the query count)."""
    if doc_id not in index.doc_len:
        raise RetrievalError(f"unknown doc_id {doc_id!r}")
    norm = index.norm(doc_id)
    k1p1 = index.k1 + 1.0
    score = 0.0
    for token in query:
        tf = index.postings.get(token, {}).get(doc_id, 0)
        if tf:
            score += index.idf(token) * (tf * k1p1) / (tf + norm)
    return score


def score_all(index: Bm25Index, query: list[str]) -> list[float]:
    """Score every indexed document against a token list via the active kernel."""
    scores = array("d", bytes(8 * index.n_docs))
    doc_pos = array("q")
    tfs = array("d")
    offsets = array("q", [0])
    idfs = array("d")
    for token in query:
        packed = index._packed.get(token)
        if packed is None:
            continue
        pos, token_tfs, idf = packed
        doc_pos.extend(pos)
        tfs.extend(token_tfs)
        idfs.append(idf)
        offsets.append(len(doc_pos))
    if idfs:
        _kernel.score_into(scores, doc_pos, tfs, offsets, idfs, index._norms, index.k1)
    return list(scores)


def top_k(index: Bm25Index, query: str, k: int) -> list[RankedHit]:
    """Rank all documents for a query string; ties break by ascending doc id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = score_all(index, tokenize(query))
    order = sorted(range(index.n_docs),
                   key=lambda i: (-scores[i], index._doc_ids[i]))
    return [RankedHit(doc_id=index._doc_ids[i], score=scores[i]) for i in order[:k]]


def build_profile_index(corpus, k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> Bm25Index:
    """Index the profile texts of every profiled annotator."""
    docs = {aid: a.profile_text for aid, a in corpus.annotators.items() if a.profile_text}
    if not docs:
        raise RetrievalError("no annotator has a profile text")
    return build_index(docs, k1=k1, b=b)


def build_abstract_index(corpus, k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> Bm25Index:
    return build_index({xid: x.text for xid, x in corpus.abstracts.items()}, k1=k1, b=b)


def _visible_annotations(corpus, annotator_id, allowed_indices):
    indices = range(len(corpus.annotations)) if allowed_indices is None else allowed_indices
    return [corpus.annotations[i] for i in sorted(indices)
            if corpus.annotations[i].annotator_id == annotator_id]


def nearest_annotator(corpus, target: str, profile_index: Bm25Index,
                      entities: list[str], allowed_indices=None):
    """Most similar other annotator by profile BM25, with proxy labels.

    Returns (neighbor id, [(entity, label), ...]) in entity order. Each
    entity takes the neighbor's label for an exact case-insensitive term
    match when one exists, otherwise the label of the neighbor's
    BM25-closest term. ``allowed_indices`` restricts which of the
    neighbor's annotations may donate labels (e.g. the training fold).
    """
    target_annotator = corpus.annotators.get(target)
    if target_annotator is None or not target_annotator.profile_text:
        raise RetrievalError(f"annotator {target!r} has no profile text")
    candidates = [doc_id for doc_id in profile_index.doc_len if doc_id != target]
    if not candidates:
        raise RetrievalError("no other profiled annotator to retrieve")
    query = tokenize(target_annotator.profile_text)
    neighbor = min(candidates,
                   key=lambda aid: (-bm25_score(profile_index, query, aid), aid))

    donors = _visible_annotations(corpus, neighbor, allowed_indices)
    if not donors:
        raise RetrievalError(f"nearest annotator {neighbor!r} has no visible labels")
    by_term: dict[str, int] = {}
    for ann in donors:
        by_term.setdefault(ann.term.lower(), ann.familiarity)
    term_index = build_index({term: term for term in by_term})
    pairs = []
    for entity in entities:
        key = entity.lower()
        if key in by_term:
            pairs.append((entity, by_term[key]))
        else:
            hit = top_k(term_index, entity, 1)[0]
            pairs.append((entity, by_term[hit.doc_id]))
    return neighbor, pairs


def nearest_abstract(corpus, target_abstract: str, annotator: str,
                     abstract_index: Bm25Index, allowed_indices=None):
    """Most similar abstract the annotator has labeled, with those labels.

    Candidates are abstracts the annotator annotated (within
    ``allowed_indices`` when given), excluding the target. Returns
    (neighbor abstract id, [(term, label), ...]) in annotation order.
    """
    if target_abstract not in corpus.abstracts:
        raise RetrievalError(f"unknown abstract {target_abstract!r}")
    visible = _visible_annotations(corpus, annotator, allowed_indices)
    candidates = []
    for ann in visible:
        if ann.abstract_id != target_abstract and ann.abstract_id not in candidates:
            candidates.append(ann.abstract_id)
    if not candidates:
        raise RetrievalError(
            f"annotator {annotator!r} has no labeled abstract other than the target"
        )
    query = tokenize(corpus.abstracts[target_abstract].text)
    neighbor = min(candidates,
                   key=lambda xid: (-bm25_score(abstract_index, query, xid), xid))
    pairs = [(ann.term, ann.familiarity) for ann in visible if ann.abstract_id == neighbor]
    return neighbor, pairs
