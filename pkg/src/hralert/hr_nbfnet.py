"""HR-NBFNet: qualifier-conditioned Bellman-Ford propagation and its multi-task variant."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import EVAL, LayerNorm, Linear, MLP2, Module, embedding_init
from .qualifiers import GammaMerge, distmult_qual, pad_pairs
from .sampling import sample_negatives

TASKS = ("tail", "relation", "qual_value")


@dataclass
class PropagationState:
    hidden: ad.DiffArray    # [N, d] pair representations
    boundary: ad.DiffArray  # [N, d] initial state, re-added after every layer


@dataclass
class Group:
    """Training group: statements sharing ``(head, relation)``."""

    head: int
    relation: int
    tails: np.ndarray
    pairs: tuple  # representative qualifiers (first statement of the group)


class _BellmanFordCore(Module):
    """Parameters and propagation shared by the single- and multi-task models."""

    def __init__(self, num_entities, num_relations, num_keys, num_values, d, layers, chunk,
                 dropout, rng):
        super().__init__()
        if layers < 1 or chunk < 1:
            raise ValueError("need at least one layer and a positive chunk size")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_entities, self.num_relations = num_entities, num_relations
        self.d, self.chunk, self.rate = d, chunk, dropout
        nk, nv = max(num_keys, 1), max(num_values, 1)
        bound = 1.0 / np.sqrt(d)
        self.query_relation = self.add_param("query_relation", embedding_init(rng, 2 * num_relations, d))
        self.query_key = self.add_param("query_key", embedding_init(rng, nk, d))
        self.query_value = self.add_param("query_value", embedding_init(rng, nv, d))
        self.edge_relation = self.add_param("edge_relation", embedding_init(rng, 2 * num_relations, d))
        self.edge_key = self.add_param("edge_key", embedding_init(rng, nk, d))
        self.edge_value = self.add_param("edge_value", embedding_init(rng, nv, d))
        self.w_proj = self.add_param("w_proj", rng.uniform(-bound, bound, size=(d, d)))
        self.gamma = self.add_child("gamma", GammaMerge(d, rng))
        self.updates = [self.add_child(f"update{t}", Linear(2 * d, d, rng, bias=False))
                        for t in range(layers)]
        self.norms = [self.add_child(f"norm{t}", LayerNorm(d)) for t in range(layers)]
        self.propagation_calls = 0

    @property
    def num_layers(self):
        return len(self.updates)

    def init_state(self, head, query_rel, pairs):
        """Only row ``head`` is nonzero: relation plus projected qualifier composition."""
        row = ad.embedding(self.query_relation, [query_rel])
        pad, count = pad_pairs([pairs], max(len(pairs), 1))
        if count[0]:
            row = row + distmult_qual(pad, count, self.w_proj, self.query_key, self.query_value)
        boundary = ad.scatter_add(row, [head], num_rows=self.num_entities)
        return PropagationState(boundary, boundary)

    def edge_terms(self, graph):
        """Per-edge merged relation/qualifier vectors ``[E, d]``, computed once per pass."""
        h_r = ad.embedding(self.edge_relation, graph.rel)
        h_q = self.gamma.qualifier_vector(graph.qual_pad, graph.qual_count, self.edge_key,
                                          self.edge_value)
        return self.gamma(h_r, h_q)

    def propagate_layer(self, state, graph, t, ctx=EVAL, edge_terms=None):
        """One update.  Messages are accumulated chunk by chunk in ascending edge order."""
        if not 0 <= t < self.num_layers:
            raise IndexError(f"layer {t} outside 0..{self.num_layers - 1}")
        h = state.hidden
        n_edges = graph.num_edges
        if n_edges == 0:
            agg = ad.DiffArray(np.zeros((self.num_entities, self.d)))
        else:
            if edge_terms is None:
                edge_terms = self.edge_terms(graph)
            agg = None
            for lo in range(0, n_edges, self.chunk):
                hi = min(lo + self.chunk, n_edges)
                terms = edge_terms if hi - lo == n_edges else edge_terms[lo:hi]
                msg = ad.embedding(h, graph.src[lo:hi]) + terms
                if agg is None:
                    agg = ad.scatter_add(msg, graph.dst[lo:hi], num_rows=self.num_entities)
                else:
                    agg = ad.scatter_add(msg, graph.dst[lo:hi], into=agg)
        update = self.updates[t](ad.concat([h, agg]))
        new = ctx.dropout(ad.relu(self.norms[t](update)), self.rate) + state.boundary
        return PropagationState(new, state.boundary)

    def propagate(self, head, query_rel, pairs, graph, ctx=EVAL):
        """Full ``L``-layer pass; returns the final ``[N, d]`` representations."""
        self.propagation_calls += 1
        state = self.init_state(head, query_rel, pairs)
        terms = self.edge_terms(graph) if graph.num_edges else None
        for t in range(self.num_layers):
            state = self.propagate_layer(state, graph, t, ctx, terms)
        return state.hidden

    def _score_rows(self, scorer, hidden, rows, query_rel, ctx):
        h = hidden if rows is None else ad.embedding(hidden, rows)
        q = ad.embedding(self.query_relation, [query_rel])
        q = ad.broadcast_to(q, (h.shape[0], self.d))
        return scorer(ad.concat([h, q]), ctx).reshape(h.shape[0])

    def _tail_scorer(self):
        raise NotImplementedError

    def score_tails(self, hidden, query_rel, ctx=EVAL, rows=None):
        """Scores for ``rows`` (all entities when ``None``)."""
        return self._score_rows(self._tail_scorer(), hidden, rows, query_rel, ctx)

    def infer(self, head, query_rel, pairs, graph):
        with ad.no_grad():
            hidden = self.propagate(head, query_rel, pairs, graph, EVAL)
            return self.score_tails(hidden, query_rel).values

    def tail_scores(self, queries, q_max=8, graph=None):
        if graph is None:
            raise ValueError("propagation models need the training graph to score")
        out = np.empty((len(queries), self.num_entities))
        for i, (h, r, pairs) in enumerate(queries):
            out[i] = self.infer(h, r, tuple(pairs)[:q_max], graph)
        return out

    def _tail_loss(self, hidden, group, negatives, ctx, margin):
        pos = self.score_tails(hidden, group.relation, ctx, group.tails)
        neg = self.score_tails(hidden, group.relation, ctx, negatives)
        return ad.mean(ad.margin_ranking(pos, neg, margin))


class HRNBFNet(_BellmanFordCore):
    prefix = "hrnbf."

    def __init__(self, num_entities, num_relations, num_keys, num_values, d=200, layers=3,
                 chunk=5000, dropout=0.2, rng=None):
        super().__init__(num_entities, num_relations, num_keys, num_values, d, layers, chunk,
                         dropout, rng)
        rng = rng if rng is not None else np.random.default_rng(1)
        self.scorer = self.add_child("scorer", MLP2(2 * d, d, 1, rng, dropout))

    def _tail_scorer(self):
        return self.scorer

    def group_loss(self, group, graph, rng, ctx=EVAL, margin=1.0):
        negatives = sample_negatives(rng, self.num_entities, len(group.tails))
        hidden = self.propagate(group.head, group.relation, group.pairs, graph, ctx)
        return self._tail_loss(hidden, group, negatives, ctx, margin)

    def batch_loss(self, groups, rng, ctx, margin=1.0, q_max=8, graph=None):
        total = None
        for g in groups:
            part = self.group_loss(g, graph, rng, ctx, margin)
            total = part if total is None else total + part
        return total * (1.0 / len(groups))


class MTHRNBFNet(_BellmanFordCore):
    """Tail, relation and qualifier-value heads over one shared propagation."""

    prefix = "mthr."

    def __init__(self, num_entities, num_relations, num_keys, num_values, d=200, layers=3,
                 chunk=5000, dropout=0.2, rng=None, lambdas=(1.0, 0.8, 0.8)):
        super().__init__(num_entities, num_relations, num_keys, num_values, d, layers, chunk,
                         dropout, rng)
        rng = rng if rng is not None else np.random.default_rng(1)
        self.lambdas = dict(zip(TASKS, (float(x) for x in lambdas)))
        self.tail_head = self.add_child("tail_head", MLP2(2 * d, d, 1, rng, dropout))
        self.relation_head = self.add_child("relation_head", MLP2(d, d, num_relations, rng, dropout))
        self.value_gate = self.add_child("value_gate", Linear(2 * d, d, rng, bias=False))
        self.head_key = self.add_param("head_key", embedding_init(rng, max(num_keys, 1), d))
        self.value_head = self.add_child("value_head", MLP2(d, d, max(num_values, 1), rng, dropout))

    def _tail_scorer(self):
        return self.tail_head

    def heads(self, hidden, head, query_rel, target_key=None, ctx=EVAL, want_value=True):
        """``(tail scores [N], relation logits [R], value logits [V] or None)``."""
        tail = self.score_tails(hidden, query_rel, ctx)
        src = ad.embedding(hidden, [head])
        relation = self.relation_head(src, ctx).reshape(self.num_relations)
        value = None
        if want_value:
            if target_key is None:
                raise ValueError("qualifier-value head needs a target key")
            value = self.value_logits(src, target_key, ctx)
        return tail, relation, value

    def value_logits(self, src, key, ctx=EVAL):
        gate = ad.sigmoid(self.value_gate(ad.concat([src, ad.embedding(self.head_key, [key])])))
        return self.value_head(gate * src, ctx)

    def group_loss(self, group, graph, rng, ctx=EVAL, margin=1.0):
        """``(total, {task: loss})`` from a single propagation pass."""
        negatives = sample_negatives(rng, self.num_entities, len(group.tails))
        hidden = self.propagate(group.head, group.relation, group.pairs, graph, ctx)
        parts = {"tail": self._tail_loss(hidden, group, negatives, ctx, margin)}
        src = ad.embedding(hidden, [group.head])
        if self.lambdas["relation"] != 0.0:
            parts["relation"] = ad.cross_entropy(self.relation_head(src, ctx), [group.relation])
        if self.lambdas["qual_value"] != 0.0 and group.pairs:
            key, value = group.pairs[int(rng.integers(len(group.pairs)))]
            parts["qual_value"] = ad.cross_entropy(self.value_logits(src, key, ctx), [value])
        total = None
        for task in TASKS:
            if task in parts:
                term = parts[task] * self.lambdas[task]
                total = term if total is None else total + term
        return total, parts

    def batch_loss(self, groups, rng, ctx, margin=1.0, q_max=8, graph=None):
        total = None
        for g in groups:
            part = self.group_loss(g, graph, rng, ctx, margin)[0]
            total = part if total is None else total + part
        return total * (1.0 / len(groups))
