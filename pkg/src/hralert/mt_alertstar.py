"""MT-AlertStar: masked token sequences through a Transformer encoder, three heads."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graph import Statement, canonical_pairs
from .nn import EVAL, LayerNorm, Linear, MLP2, Module, MultiHeadAttention, embedding_init

TASKS = ("tail", "relation", "qual_value")
CONTEXT_ROW = 1


@dataclass(frozen=True)
class TokenSequence:
    """Token ids by role; ``None`` marks a masked (all-zero) row.

    Rows are ``[head, relation, tail, key1, value1, ...]``.  The qualifier-value
    task drops the target pair entirely.
    """

    head: int | None
    relation: int | None
    tail: int | None
    pairs: tuple
    task: str
    target: int

    def __len__(self):
        return 3 + 2 * len(self.pairs)

    @property
    def length_key(self):
        return (self.task, len(self.pairs))


def build_sequence(statement, task, pair_index=None):
    pairs = canonical_pairs(statement.qualifiers)
    if task == "tail":
        return TokenSequence(statement.head, statement.relation, None, pairs, task, statement.tail)
    if task == "relation":
        return TokenSequence(statement.head, None, statement.tail, pairs, task, statement.relation)
    if task == "qual_value":
        if not pairs:
            raise ValueError("qualifier-value task needs at least one qualifier pair")
        if pair_index is None or not 0 <= pair_index < len(pairs):
            raise IndexError(f"target pair index {pair_index} outside 0..{len(pairs) - 1}")
        kept = pairs[:pair_index] + pairs[pair_index + 1:]
        return TokenSequence(statement.head, statement.relation, statement.tail, kept, task,
                             pairs[pair_index][1])
    raise ValueError(f"unknown task {task!r}")


class EncoderLayer(Module):
    """Post-norm block: ``LN(x + MHA(x))`` then ``LN(x + FFN(x))``."""

    def __init__(self, d, heads, ffn, rng, dropout):
        super().__init__()
        self.rate = dropout
        self.attention = self.add_child("mha", MultiHeadAttention(d, heads, rng))
        self.norm1 = self.add_child("norm1", LayerNorm(d))
        self.ffn_in = self.add_child("ffn_in", Linear(d, ffn, rng))
        self.ffn_out = self.add_child("ffn_out", Linear(ffn, d, rng))
        self.norm2 = self.add_child("norm2", LayerNorm(d))

    def __call__(self, x, ctx):
        x = self.norm1(x + ctx.dropout(self.attention(x, x), self.rate))
        hidden = self.ffn_out(ctx.dropout(ad.relu(self.ffn_in(x)), self.rate))
        return self.norm2(x + ctx.dropout(hidden, self.rate))


class MTAlertStar(Module):
    prefix = "mtas."

    def __init__(self, num_entities, num_relations, num_keys, num_values, d=200, layers=3,
                 heads=4, ffn=800, dropout=0.2, rng=None, lambdas=(1.0, 0.8, 0.8)):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.rate = d, dropout
        self.lambdas = dict(zip(TASKS, (float(x) for x in lambdas)))
        self.entity = self.add_param("entity", embedding_init(rng, num_entities, d))
        self.relation = self.add_param("relation", embedding_init(rng, num_relations, d))
        self.key_table = self.add_param("key", embedding_init(rng, max(num_keys, 1), d))
        self.value_table = self.add_param("value", embedding_init(rng, max(num_values, 1), d))
        self.layers = [self.add_child(f"layer{i}", EncoderLayer(d, heads, ffn, rng, dropout))
                       for i in range(layers)]
        self.heads = {
            "tail": self.add_child("head_tail", MLP2(d, d, num_entities, rng, dropout)),
            "relation": self.add_child("head_relation", MLP2(d, d, num_relations, rng, dropout)),
            "qual_value": self.add_child("head_qual_value", MLP2(d, d, max(num_values, 1), rng, dropout)),
        }

    def embed(self, seqs):
        """Stack same-shape sequences into ``[B, L, d]``; masked rows are constant zeros."""
        b = len(seqs)
        zeros = ad.DiffArray(np.zeros((b, self.d)))

        def rows(table, ids):
            return zeros if ids[0] is None else ad.embedding(table, np.array(ids))

        cols = [rows(self.entity, [s.head for s in seqs]),
                rows(self.relation, [s.relation for s in seqs]),
                rows(self.entity, [s.tail for s in seqs])]
        for j in range(len(seqs[0].pairs)):
            cols.append(ad.embedding(self.key_table, np.array([s.pairs[j][0] for s in seqs])))
            cols.append(ad.embedding(self.value_table, np.array([s.pairs[j][1] for s in seqs])))
        return ad.stack_rows(cols)

    def encode_context(self, seqs, ctx=EVAL):
        """Encoder output at the relation position, ``[B, d]``."""
        if len({s.length_key for s in seqs}) != 1:
            raise ValueError("encode_context needs sequences sharing task and length")
        x = self.embed(seqs)
        for layer in self.layers:
            x = layer(x, ctx)
        return x[:, CONTEXT_ROW, :]

    def logits(self, seqs, ctx=EVAL):
        return self.heads[seqs[0].task](self.encode_context(seqs, ctx), ctx)

    def task_loss(self, seqs, ctx=EVAL):
        """Mean cross-entropy over sequences of one task (any lengths)."""
        groups = {}
        for s in seqs:
            groups.setdefault(s.length_key, []).append(s)
        total = None
        for key in sorted(groups):
            group = groups[key]
            part = ad.cross_entropy(self.logits(group, ctx), [s.target for s in group]) * float(len(group))
            total = part if total is None else total + part
        return total * (1.0 / len(seqs))

    def task_sequences(self, statements, rng=None):
        """Per-task sequence lists; qual-value picks one pair uniformly per statement."""
        out = {"tail": [build_sequence(s, "tail") for s in statements],
               "relation": [build_sequence(s, "relation") for s in statements], "qual_value": []}
        for s in statements:
            if s.n:
                j = 0 if rng is None else int(rng.integers(s.n))
                out["qual_value"].append(build_sequence(s, "qual_value", j))
        return out

    def multitask_loss(self, statements, rng=None, ctx=EVAL):
        """``(total, {task: loss})``; tasks with zero weight or no sequences are skipped."""
        seqs = self.task_sequences(statements, rng)
        parts = {}
        total = None
        for task in TASKS:
            weight = self.lambdas[task]
            if weight == 0.0 or not seqs[task]:
                continue
            parts[task] = self.task_loss(seqs[task], ctx)
            term = parts[task] * weight
            total = term if total is None else total + term
        if total is None:
            total = ad.DiffArray(0.0)
        return total, parts

    # -- training / evaluation glue -------------------------------------------------
    def batch_loss(self, statements, rng, ctx, margin=1.0, q_max=8, graph=None):
        statements = [_truncate(s, q_max) for s in statements]
        return self.multitask_loss(statements, rng, ctx)[0]

    def _task_scores(self, statements, task, q_max):
        seqs = [build_sequence(_truncate(s, q_max), task) for s in statements]
        out = np.empty((len(seqs), self.heads[task].lin2.weight.shape[1]))
        groups = {}
        for i, s in enumerate(seqs):
            groups.setdefault(len(s), []).append(i)
        for idx in groups.values():
            out[idx] = self.logits([seqs[i] for i in idx], EVAL).values
        return out

    def tail_scores(self, queries, q_max=8, graph=None):
        stmts = [Statement(h, r, 0, tuple(p)) for h, r, p in queries]
        return self._task_scores(stmts, "tail", q_max)

    def relation_scores(self, statements, q_max=8):
        return self._task_scores(statements, "relation", q_max)


def _truncate(statement, q_max):
    if statement.n <= q_max:
        return statement
    return type(statement)(statement.head, statement.relation, statement.tail,
                           statement.qualifiers[:q_max])
