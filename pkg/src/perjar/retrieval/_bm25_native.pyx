# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled BM25 scoring loop. Must stay operation-for-operation in sync
with ``_bm25_py.score_into`` so both kernels give bit-identical scores."""


def score_into(double[::1] scores, long long[::1] doc_pos, double[::1] tfs,
               long long[::1] offsets, double[::1] idfs, double[::1] norms,
               double k1):
    cdef Py_ssize_t t, j
    cdef Py_ssize_t n_tokens = offsets.shape[0] - 1
    cdef long long d
    cdef double idf, tf
    cdef double k1p1 = k1 + 1.0
    for t in range(n_tokens):
        idf = idfs[t]
        for j in range(offsets[t], offsets[t + 1]):
            d = doc_pos[j]
            tf = tfs[j]
            scores[d] += idf * (tf * k1p1) / (tf + norms[d])
