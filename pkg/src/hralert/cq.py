"""Complex-query answering: residual path composition, mining, training, evaluation."""

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad
from .graph import canonical_pairs
from .metrics import aggregate
from .nn import EVAL, Linear, MLP2, Module, embedding_init
from .qualifiers import Enricher, count_buckets, pad_pairs
from .sampling import sample_negatives

KINDS = ("1p", "2p", "2i", "2u")


@dataclass(frozen=True)
class QueryInstance:
    """``anchors`` holds ``(entity, relation, pairs)`` tuples.

    For ``2p`` the second tuple's entity is ``None``: the chain continues from
    the first hop.  ``golds`` is the full answer set; ``targets`` (default: all
    golds) are the answers actually ranked, each filtered against the rest.
    """

    kind: str
    anchors: tuple
    golds: tuple
    targets: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown query kind {self.kind!r}")
        need = 1 if self.kind == "1p" else 2
        if len(self.anchors) != need:
            raise ValueError(f"{self.kind} query needs {need} anchor tuple(s)")
        if self.kind == "2p" and (self.anchors[1][0] is not None or self.anchors[1][2]):
            raise ValueError("second hop of a 2p query takes no entity and no qualifiers")
        if self.kind in ("2i", "2u"):
            if self.anchors[0][0] == self.anchors[1][0]:
                raise ValueError("2i/2u anchors must be distinct entities")
            if self.anchors[1][2]:
                raise ValueError("second anchor of a 2i/2u query takes no qualifiers")
        if self.targets is None:
            object.__setattr__(self, "targets", tuple(self.golds))
        elif not set(self.targets) <= set(self.golds):
            raise ValueError("every ranked target must be a gold answer")


class CQModel(Module):
    prefix = "cq."

    def __init__(self, num_entities, num_relations, num_keys, num_values, d=200, heads=4,
                 dropout=0.2, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.rate = d, dropout
        self.entity = self.add_param("entity", embedding_init(rng, num_entities, d))
        self.relation = self.add_param("relation", embedding_init(rng, num_relations, d))
        self.enrich = self.add_child("enrich", Enricher(num_keys, num_values, d, heads, rng))
        self.ffn = self.add_child("ffn", MLP2(2 * d, d, d, rng, dropout))
        self.intersect = self.add_child("intersect", Linear(2 * d, d, rng, bias=False))

    def compose(self, x, rels, pairs, x0, ctx=EVAL):
        """``x0 + FFN([x || enriched relation])`` for a batch sharing one pair count."""
        e_r = self.enrich(ad.embedding(self.relation, rels), pairs)
        return x0 + self.ffn(ad.concat([x, e_r]), ctx)

    def _no_pairs(self, b):
        return np.zeros((b, 0, 2), dtype=np.int64)

    def anchor(self, heads, rels, pairs, ctx=EVAL):
        e_h = ad.embedding(self.entity, heads)
        return self.compose(e_h, rels, pairs, e_h, ctx)

    def chain(self, first, heads, rels2, ctx=EVAL):
        e_h = ad.embedding(self.entity, heads)
        return self.compose(first, rels2, self._no_pairs(len(rels2)), e_h, ctx)

    def intersection(self, a, b):
        return self.intersect(ad.concat([a, b]))

    @staticmethod
    def union(a, b):
        return (a + b) * 0.5

    def build_query(self, inst, ctx=EVAL, q_max=8):
        (h1, r1, q1) = inst.anchors[0]
        pad, count = pad_pairs([q1], q_max)
        first = self.anchor([h1], [r1], pad[:, :count[0]], ctx)
        if inst.kind == "1p":
            return first.reshape(self.d)
        _, r2, _ = inst.anchors[1]
        if inst.kind == "2p":
            return self.chain(first, [h1], [r2], ctx).reshape(self.d)
        h2 = inst.anchors[1][0]
        second = self.anchor([h2], [r2], self._no_pairs(1), ctx)
        if inst.kind == "2i":
            return self.intersection(first, second).reshape(self.d)
        return self.union(first, second).reshape(self.d)

    def score_all(self, q):
        return ad.matmul(q, self.entity.swapaxes(0, 1))

    # -- training -----------------------------------------------------------------
    def statement_losses(self, statement, out_index, in_index, rng, ctx=EVAL, margin=1.0,
                         q_max=8, negative=None):
        """Per-type margin losses for one statement, keyed by kind."""
        h, r, t = statement.head, statement.relation, statement.tail
        if negative is None:
            negative = int(sample_negatives(rng, self.entity.shape[0], 1)[0])
        pad, count = pad_pairs([statement.qualifiers], q_max)
        first = self.anchor([h], [r], pad[:, :count[0]], ctx)
        plan = sample_structure(statement, out_index, in_index, rng)
        queries = {"1p": (first, t)}
        if plan["2p"] is not None:
            r2, t2 = plan["2p"]
            queries["2p"] = (self.chain(first, [h], [r2], ctx), t2)
        if plan["2i"] is not None:
            h2, r2 = plan["2i"]
            second = self.anchor([h2], [r2], self._no_pairs(1), ctx)
            queries["2i"] = (self.intersection(first, second), t)
        return {kind: _margin(self.entity, q, pos, negative, margin) for kind, (q, pos) in queries.items()}

    def batch_loss(self, statements, rng, ctx, margin=1.0, q_max=8, graph=None):
        """Mean over statements of the average active-type margin loss.

        Statements are grouped by qualifier count; chain and intersection
        queries are batched within each group.
        """
        n = len(statements)
        negatives = sample_negatives(rng, self.entity.shape[0], n)
        plans = [sample_structure(s, graph.out_index, graph.in_index, rng) for s in statements]
        pad, count = pad_pairs([s.qualifiers for s in statements], q_max)
        weights = np.array([1.0 / (1 + (p["2p"] is not None) + (p["2i"] is not None)) for p in plans])
        total = None
        for nq, rows in count_buckets(count).items():
            heads = np.array([statements[i].head for i in rows])
            rels = np.array([statements[i].relation for i in rows])
            tails = np.array([statements[i].tail for i in rows])
            first = self.anchor(heads, rels, pad[rows, :nq], ctx)
            terms = [(first, tails, rows)]
            chain_rows = [k for k, i in enumerate(rows) if plans[i]["2p"] is not None]
            if chain_rows:
                sub = rows[chain_rows]
                q2 = self.chain(first[chain_rows], heads[chain_rows],
                                [plans[i]["2p"][0] for i in sub], ctx)
                terms.append((q2, np.array([plans[i]["2p"][1] for i in sub]), sub))
            inter_rows = [k for k, i in enumerate(rows) if plans[i]["2i"] is not None]
            if inter_rows:
                sub = rows[inter_rows]
                second = self.anchor([plans[i]["2i"][0] for i in sub], [plans[i]["2i"][1] for i in sub],
                                     self._no_pairs(len(sub)), ctx)
                terms.append((self.intersection(first[inter_rows], second), tails[inter_rows], sub))
            for q, pos, idx in terms:
                m = _margin(self.entity, q, pos, negatives[idx], margin)
                part = ad.sum_(m * weights[idx])
                total = part if total is None else total + part
        return total * (1.0 / n)

    def tail_scores(self, queries, q_max=8, graph=None):
        pad, count = pad_pairs([q[2] for q in queries], q_max)
        out = np.empty((len(queries), self.entity.shape[0]))
        for nq, rows in count_buckets(count).items():
            first = self.anchor([queries[i][0] for i in rows], [queries[i][1] for i in rows],
                                pad[rows, :nq])
            out[rows] = self.score_all(first).values
        return out


def _margin(entity, q, pos, neg, margin):
    pos_score = ad.sum_(q * ad.embedding(entity, np.atleast_1d(pos)), axis=-1)
    neg_score = ad.sum_(q * ad.embedding(entity, np.atleast_1d(neg)), axis=-1)
    return ad.margin_ranking(pos_score, neg_score, margin)


def average_type_losses(losses):
    """Combine the active per-type losses: their plain mean."""
    values = list(losses.values()) if isinstance(losses, dict) else list(losses)
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total * (1.0 / len(values))


def sample_structure(statement, out_index, in_index, rng):
    """Pick the chain ``(r2, t2)`` and second anchor ``(h2, r2)`` used in training."""
    chains = out_index.get(statement.tail, [])
    anchors = [a for a in in_index.get(statement.tail, []) if a[0] != statement.head]
    return {"2p": tuple(chains[int(rng.integers(len(chains)))]) if chains else None,
            "2i": tuple(anchors[int(rng.integers(len(anchors)))]) if anchors else None}


# ---------------------------------------------------------------------------
# mining
# ---------------------------------------------------------------------------

def answer_index(statements):
    """``(h, r) -> sorted tails`` over the given statements, qualifiers ignored."""
    index = defaultdict(set)
    for s in statements:
        index[(s.head, s.relation)].add(s.tail)
    return {k: tuple(sorted(v)) for k, v in index.items()}


def mine_instances(test_statements, known_statements, rng, cap=200):
    """Query instances per kind, derived from test statements.

    Gold sets use every known statement.  A 1p instance ranks only its own
    statement's tail, which matches plain filtered tail evaluation.  2i and 2u
    share a sampled second anchor; kinds whose structure never occurs are
    simply empty.
    """
    answers = answer_index(known_statements)
    out_index, in_index = defaultdict(list), defaultdict(list)
    for s in known_statements:
        out_index[s.head].append((s.relation, s.tail))
        in_index[s.tail].append((s.head, s.relation))
    found = {k: [] for k in KINDS}
    for s in test_statements:
        h, r, t = s.head, s.relation, s.tail
        q = canonical_pairs(s.qualifiers)
        first = answers.get((h, r), ())
        if len(found["1p"]) < cap:
            found["1p"].append(QueryInstance("1p", ((h, r, q),), first, (t,)))
        chains = out_index.get(t, [])
        if chains and len(found["2p"]) < cap:
            r2, _ = chains[int(rng.integers(len(chains)))]
            golds = sorted({x for y in first for x in answers.get((y, r2), ())})
            found["2p"].append(QueryInstance("2p", ((h, r, q), (None, r2, ())), tuple(golds)))
        anchors = [a for a in in_index.get(t, []) if a[0] != h]
        if anchors and (len(found["2i"]) < cap or len(found["2u"]) < cap):
            h2, r2 = anchors[int(rng.integers(len(anchors)))]
            second = answers.get((h2, r2), ())
            pair = ((h, r, q), (h2, r2, ()))
            if len(found["2i"]) < cap:
                inter = tuple(sorted(set(first) & set(second)))
                found["2i"].append(QueryInstance("2i", pair, inter))
            if len(found["2u"]) < cap:
                found["2u"].append(QueryInstance("2u", pair, tuple(sorted(set(first) | set(second)))))
    return found


def query_to_line(inst, vocab):
    def ent(e):
        return "-" if e is None else vocab.string("entity", e)

    def quals(pairs):
        return ",".join(f"{vocab.string('qual_key', k)}:{vocab.string('qual_value', v)}" for k, v in pairs)

    h1, r1, q1 = inst.anchors[0]
    parts = [inst.kind, ent(h1), vocab.string("relation", r1), quals(q1)]
    if len(inst.anchors) > 1:
        h2, r2, _ = inst.anchors[1]
        parts += [ent(h2), vocab.string("relation", r2)]
    parts += [vocab.string("entity", g) for g in inst.golds]
    return "\t".join(parts) + "\n"


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def rank_golds(scores, golds, targets=None):
    """Rank each target (default: every gold), filtering the other golds."""
    golds = np.asarray(golds, dtype=np.int64)
    targets = golds if targets is None else np.asarray(targets, dtype=np.int64)
    rows = np.broadcast_to(scores, (targets.size, scores.size))
    ptr = np.arange(targets.size + 1, dtype=np.int64) * golds.size
    return _kernels.filtered_ranks(rows, targets, ptr, np.tile(golds, targets.size))


def evaluate_queries(model, query_sets, q_max=8):
    """``{kind: RankingReport or None}``; ``None`` marks a kind with no queries."""
    reports = {}
    for kind in KINDS:
        insts = [i for i in query_sets.get(kind, []) if i.targets]
        if not insts:
            reports[kind] = None
            continue
        ranks = []
        for inst in insts:
            scores = model.score_all(model.build_query(inst, EVAL, q_max)).values
            ranks.extend(rank_golds(scores, inst.golds, inst.targets).tolist())
        reports[kind] = aggregate(ranks, label=kind)
    return reports
