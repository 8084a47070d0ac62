"""Pure-Python BM25 scoring loop, used when the compiled kernel is absent.

Mirrors ``_bm25_native.pyx`` operation for operation so both kernels
produce bit-identical scores.
"""


def score_into(scores, doc_pos, tfs, offsets, idfs, norms, k1):
    """Accumulate per-document BM25 scores for one query.

    ``offsets`` delimits each query token's slice of the flattened
    postings (``doc_pos``/``tfs``); ``idfs`` is per token, ``norms`` the
    per-document length normalization k1 * (1 - b + b * dl / avgdl).
    """
    k1p1 = k1 + 1.0
    for t in range(len(offsets) - 1):
        idf = idfs[t]
        for j in range(offsets[t], offsets[t + 1]):
            d = doc_pos[j]
            tf = tfs[j]
            scores[d] += idf * (tf * k1p1) / (tf + norms[d])
