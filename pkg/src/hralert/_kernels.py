"""Hot inner loops: numba versions plus numpy fallbacks.

The backend is chosen once at import time.  Setting ``HRALERT_DISABLE_NUMBA=1``
(or running where numba is not importable) selects the pure-numpy path.  Both
paths accumulate in the same order, so results are bit-identical between them.
"""

import os

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

_DISABLED = os.environ.get("HRALERT_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}
BACKEND = "numpy" if (_DISABLED or njit is None) else "numba"


# ---------------------------------------------------------------------------
# numpy fallbacks
# ---------------------------------------------------------------------------

def _np_scatter_add(out, index, rows):
    # np.add.at is unbuffered and walks ``index`` in order
    np.add.at(out, index, rows)


def _np_valid_slots(pad, count):
    slots = np.arange(pad.shape[1])[None, :] < count[:, None]
    return np.nonzero(slots)  # row-major: edge-major, slot ascending


def _np_distmult_sum(key_table, value_table, pad, count):
    out = np.zeros((pad.shape[0], key_table.shape[1]))
    e_idx, j_idx = _np_valid_slots(pad, count)
    if e_idx.size:
        prods = key_table[pad[e_idx, j_idx, 0]] * value_table[pad[e_idx, j_idx, 1]]
        np.add.at(out, e_idx, prods)
    return out


def _np_distmult_backward(grad, key_table, value_table, pad, count, key_grad, value_grad):
    e_idx, j_idx = _np_valid_slots(pad, count)
    if not e_idx.size:
        return
    kid = pad[e_idx, j_idx, 0]
    vid = pad[e_idx, j_idx, 1]
    g = grad[e_idx]
    np.add.at(key_grad, kid, g * value_table[vid])
    np.add.at(value_grad, vid, g * key_table[kid])


def _np_filtered_ranks(scores, gold, filt_ptr, filt_idx):
    ranks = np.empty(scores.shape[0], dtype=np.int64)
    for q in range(scores.shape[0]):
        row = scores[q]
        g = gold[q]
        ahead = row >= row[g]
        ahead[g] = False
        others = filt_idx[filt_ptr[q]:filt_ptr[q + 1]]
        ahead[others] = False
        ranks[q] = 1 + int(np.count_nonzero(ahead))
    return ranks


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

def _nb_scatter_add(out, index, rows):
    d = rows.shape[1]
    for i in range(index.shape[0]):
        dst = index[i]
        for k in range(d):
            out[dst, k] += rows[i, k]


def _nb_distmult_sum(key_table, value_table, pad, count):
    n_edges = pad.shape[0]
    d = key_table.shape[1]
    out = np.zeros((n_edges, d))
    for e in range(n_edges):
        for j in range(count[e]):
            kid = pad[e, j, 0]
            vid = pad[e, j, 1]
            for k in range(d):
                out[e, k] += key_table[kid, k] * value_table[vid, k]
    return out


def _nb_distmult_backward(grad, key_table, value_table, pad, count, key_grad, value_grad):
    d = key_table.shape[1]
    for e in range(pad.shape[0]):
        for j in range(count[e]):
            kid = pad[e, j, 0]
            vid = pad[e, j, 1]
            for k in range(d):
                key_grad[kid, k] += grad[e, k] * value_table[vid, k]
            for k in range(d):
                value_grad[vid, k] += grad[e, k] * key_table[kid, k]


def _nb_filtered_ranks(scores, gold, filt_ptr, filt_idx):
    n_q, n = scores.shape
    ranks = np.empty(n_q, dtype=np.int64)
    skip = np.zeros(n, dtype=np.bool_)
    for q in range(n_q):
        g = gold[q]
        target = scores[q, g]
        for p in range(filt_ptr[q], filt_ptr[q + 1]):
            skip[filt_idx[p]] = True
        skip[g] = True
        ahead = 0
        for e in range(n):
            if not skip[e] and scores[q, e] >= target:
                ahead += 1
        for p in range(filt_ptr[q], filt_ptr[q + 1]):
            skip[filt_idx[p]] = False
        skip[g] = False
        ranks[q] = 1 + ahead
    return ranks


NUMPY_IMPL = {
    "scatter_add": _np_scatter_add,
    "distmult_sum": _np_distmult_sum,
    "distmult_backward": _np_distmult_backward,
    "filtered_ranks": _np_filtered_ranks,
}

if njit is not None:
    NUMBA_IMPL = {
        "scatter_add": njit(cache=True, nogil=True)(_nb_scatter_add),
        "distmult_sum": njit(cache=True, nogil=True)(_nb_distmult_sum),
        "distmult_backward": njit(cache=True, nogil=True)(_nb_distmult_backward),
        "filtered_ranks": njit(cache=True, nogil=True)(_nb_filtered_ranks),
    }
else:  # pragma: no cover
    NUMBA_IMPL = None

_IMPL = NUMBA_IMPL if BACKEND == "numba" else NUMPY_IMPL


def scatter_add(out, index, rows):
    """In-place ``out[index[i]] += rows[i]`` in ascending ``i``; ``out`` is 2-D float64."""
    _IMPL["scatter_add"](out, np.ascontiguousarray(index, dtype=np.int64),
                         np.ascontiguousarray(rows, dtype=np.float64))


def distmult_sum(key_table, value_table, pad, count):
    """Per row ``e``: sum over the first ``count[e]`` slots of key ⊙ value embeddings."""
    return _IMPL["distmult_sum"](np.ascontiguousarray(key_table), np.ascontiguousarray(value_table),
                                 np.ascontiguousarray(pad, dtype=np.int64),
                                 np.ascontiguousarray(count, dtype=np.int64))


def distmult_backward(grad, key_table, value_table, pad, count, key_grad, value_grad):
    _IMPL["distmult_backward"](np.ascontiguousarray(grad), np.ascontiguousarray(key_table),
                               np.ascontiguousarray(value_table),
                               np.ascontiguousarray(pad, dtype=np.int64),
                               np.ascontiguousarray(count, dtype=np.int64), key_grad, value_grad)


def filtered_ranks(scores, gold, filt_ptr, filt_idx):
    """Pessimistic filtered ranks.

    ``filt_idx[filt_ptr[q]:filt_ptr[q+1]]`` lists candidates excluded for query
    ``q``; every remaining entity scoring ``>=`` the gold counts as ahead of it.
    """
    return _IMPL["filtered_ranks"](np.ascontiguousarray(scores, dtype=np.float64),
                                   np.ascontiguousarray(gold, dtype=np.int64),
                                   np.ascontiguousarray(filt_ptr, dtype=np.int64),
                                   np.ascontiguousarray(filt_idx, dtype=np.int64))
