"""Qualifier composition blocks shared by the models.

Two families:

* attention context: each pair becomes ``key + value`` and a relation vector
  attends over those rows (AlertStar, MT-AlertStar, CQ);
* edge composition: ``W_q @ sum(key * value)`` merged with the relation vector
  through a learned convex weight (HR-NBFNet family).
"""

import numpy as np

from . import autodiff as ad
from .graph import SENTINEL, canonical_pairs
from .nn import Module, MultiHeadAttention, embedding_init


def pad_pairs(pair_lists, q_max):
    """Pack pair tuples into ``(pad [B, q_max, 2], count [B])``.

    Each list is truncated to its first ``q_max`` pairs and then sorted by
    (key id, value id), so pair order never reaches the models.
    """
    pad = np.full((len(pair_lists), q_max, 2), SENTINEL, dtype=np.int64)
    count = np.zeros(len(pair_lists), dtype=np.int64)
    for i, pairs in enumerate(pair_lists):
        pairs = canonical_pairs(tuple(pairs)[:q_max])
        count[i] = len(pairs)
        if pairs:
            pad[i, :len(pairs)] = pairs
    return pad, count


def count_buckets(count):
    """``{n: indices}`` for each qualifier count present, ascending in n."""
    count = np.asarray(count)
    return {int(n): np.flatnonzero(count == n) for n in np.unique(count)}


def canonical_rows(pad, count, rows):
    """Sorted pair rows ``[B, n, 2]`` for batch items that all have ``n`` pairs."""
    n = int(count[rows[0]]) if len(rows) else 0
    block = pad[rows, :n]
    for b in range(block.shape[0]):
        order = np.lexsort((block[b, :, 1], block[b, :, 0]))
        block[b] = block[b, order]
    return block


def build_qual_context(pairs, key_table, value_table):
    """Row ``i`` is ``key_table[k_i] + value_table[v_i]``; ``pairs`` is ``[..., n, 2]``."""
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.ndim < 2 or pairs.shape[-1] != 2:
        raise ad.ShapeError(f"qualifier pairs must have shape [..., n, 2], got {pairs.shape}")
    if pairs.shape[-2] == 0:
        raise ValueError("qualifier context needs at least one pair; branch on empty Q first")
    return ad.embedding(key_table, pairs[..., 0]) + ad.embedding(value_table, pairs[..., 1])


def _sort_context_rows(context):
    # lexicographic row order per batch item makes attention sums independent of input order
    vals = context.values
    order = np.stack([np.lexsort(vals[b].T[::-1]) for b in range(vals.shape[0])])
    batch = np.arange(vals.shape[0])[:, None]
    return ad.getitem(context, (batch, order))


def mha_enrich(relation, context, attention):
    """Attend from ``relation [B, d]`` over ``context [B, n, d]``; ``n = 0`` is a bypass."""
    relation = ad.as_diff(relation)
    if context is None or context.shape[-2] == 0:
        return relation
    b, d = relation.shape
    query = relation.reshape(b, 1, d)
    return attention(query, _sort_context_rows(context)).reshape(b, d)


class Enricher(Module):
    """Key/value tables plus the cross-attention used to enrich a relation."""

    def __init__(self, num_keys, num_values, d, heads, rng):
        super().__init__()
        self.key_table = self.add_param("key", embedding_init(rng, max(num_keys, 1), d))
        self.value_table = self.add_param("value", embedding_init(rng, max(num_values, 1), d))
        self.attention = self.add_child("mha", MultiHeadAttention(d, heads, rng))

    def __call__(self, relation, pairs):
        """``pairs`` is ``[B, n, 2]`` with one shared ``n`` across the batch."""
        pairs = np.asarray(pairs)
        if pairs.shape[-2] == 0:
            return ad.as_diff(relation)
        context = build_qual_context(pairs, self.key_table, self.value_table)
        return mha_enrich(relation, context, self.attention)


class GammaMerge(Module):
    """``alpha * h_r + (1 - alpha) * W_q sum(key * value)`` with ``alpha = sigmoid(raw)``."""

    def __init__(self, d, rng):
        super().__init__()
        bound = 1.0 / np.sqrt(d)
        self.w_q = self.add_param("w_q", rng.uniform(-bound, bound, size=(d, d)))
        self.alpha_raw = self.add_param("alpha_raw", np.zeros(1))

    @property
    def alpha(self):
        return ad.sigmoid(self.alpha_raw)

    def qualifier_vector(self, pad, count, key_table, value_table):
        return distmult_qual(pad, count, self.w_q, key_table, value_table)

    def __call__(self, h_r, h_q):
        return gamma_merge(h_r, h_q, self.alpha)


def distmult_qual(pad, count, w_q, key_table, value_table):
    """``sum_{i < n} key[k_i] * value[v_i]`` per row, projected by ``w_q``."""
    summed = ad.qualifier_distmult(key_table, value_table, pad, count)
    return ad.matmul(summed, w_q)


def gamma_merge(h_r, h_q, alpha):
    alpha = ad.as_diff(alpha)
    return alpha * h_r + (1.0 - alpha) * h_q
