"""AlertStar: gated fusion of a qualifier-attention branch and a path branch."""

import numpy as np

from . import autodiff as ad
from .nn import EVAL, LayerNorm, MLP2, Module, embedding_init
from .qualifiers import Enricher, canonical_rows, count_buckets, pad_pairs
from .sampling import sample_negatives

GATE_INIT = 0.5


class AlertStar(Module):
    """Tail scorer for ``(h, r, ?, Q)``.

    Ablation switches: ``no_qual`` ignores qualifiers, ``no_path`` keeps only
    the attention branch, ``no_gate`` freezes the mixing weight at 0.5.
    """

    prefix = "alertstar."

    def __init__(self, num_entities, num_relations, num_keys, num_values, d=200, heads=4,
                 dropout=0.2, rng=None, no_qual=False, no_path=False, no_gate=False):
        super().__init__()
        if no_path and no_gate:
            raise ValueError("no_path and no_gate contradict: the gate is already fixed to 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.rate = d, dropout
        self.no_qual, self.no_path, self.no_gate = no_qual, no_path, no_gate
        self.entity = self.add_param("entity", embedding_init(rng, num_entities, d))
        self.relation = self.add_param("relation", embedding_init(rng, num_relations, d))
        self.enrich = self.add_child("enrich", Enricher(num_keys, num_values, d, heads, rng))
        self.attn_norm = self.add_child("attn_norm", LayerNorm(d))
        self.path_ffn = self.add_child("path_ffn", MLP2(2 * d, d, d, rng, dropout))
        self.path_norm = self.add_child("path_norm", LayerNorm(d))
        if no_path or no_gate:
            self.gate = None
        else:
            self.gate = self.add_param("gate", np.full(1, GATE_INIT))

    def gate_value(self):
        """Weight on the attention branch."""
        if self.no_path:
            return 1.0
        if self.no_gate:
            return 0.5
        return float(ad.sigmoid(self.gate).values[0])

    def _forward_bucket(self, heads, rels, pairs, ctx):
        e_h = ad.embedding(self.entity, heads)
        e_r = ad.embedding(self.relation, rels)
        enriched = e_r if self.no_qual else self.enrich(e_r, pairs)
        attn = self.attn_norm(e_h + enriched)
        if self.no_path:
            return attn
        path = self.path_norm(e_h + self.path_ffn(ad.concat([e_h, attn]), ctx))
        alpha = 0.5 if self.no_gate else ad.sigmoid(self.gate)
        return alpha * attn + (1.0 - alpha) * path

    def forward(self, heads, rels, pad, count, ctx=EVAL):
        """Fused query vectors ``z [B, d]`` in input order.

        Items are grouped by qualifier count so no padding slot is ever read.
        """
        heads = np.asarray(heads, dtype=np.int64)
        rels = np.asarray(rels, dtype=np.int64)
        count = np.asarray(count, dtype=np.int64)
        parts, order = [], []
        for _, rows in count_buckets(count).items():
            pairs = canonical_rows(np.asarray(pad), count, rows)
            parts.append(self._forward_bucket(heads[rows], rels[rows], pairs, ctx))
            order.append(rows)
        if len(parts) == 1:
            return parts[0]
        inverse = np.argsort(np.concatenate(order), kind="stable")
        return ad.getitem(ad.concat(parts, axis=0), inverse)

    def score_pairs(self, z, entities, ctx=EVAL):
        """``Dropout(z) . e_t`` per row (dropout only in training mode)."""
        return ad.sum_(ctx.dropout(z, self.rate) * ad.embedding(self.entity, entities), axis=-1)

    def score_all(self, z):
        return ad.matmul(z, self.entity.swapaxes(0, 1))

    # -- training / evaluation glue -------------------------------------------------
    def batch_loss(self, statements, rng, ctx, margin=1.0, q_max=8, graph=None):
        n_ent = self.entity.shape[0]
        heads = [s.head for s in statements]
        rels = [s.relation for s in statements]
        tails = np.array([s.tail for s in statements])
        negatives = sample_negatives(rng, n_ent, len(statements))
        pad, count = pad_pairs([s.qualifiers for s in statements], q_max)
        z = ctx.dropout(self.forward(heads, rels, pad, count, ctx), self.rate)
        pos = ad.sum_(z * ad.embedding(self.entity, tails), axis=-1)
        neg = ad.sum_(z * ad.embedding(self.entity, negatives), axis=-1)
        return ad.mean(ad.margin_ranking(pos, neg, margin))

    def tail_scores(self, queries, q_max=8, graph=None):
        """Eval-mode scores ``[Q, N]`` for ``(h, r, pairs)`` queries."""
        pad, count = pad_pairs([q[2] for q in queries], q_max)
        z = self.forward([q[0] for q in queries], [q[1] for q in queries], pad, count, EVAL)
        return self.score_all(z).values
