"""Filtered ranking and aggregate link-prediction metrics."""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

HITS_AT = (1, 3, 10)
COLUMNS = ("MR", "MRR", "H@1", "H@3", "H@10")


@dataclass
class RankingReport:
    ranks: list
    mr: float
    mrr: float
    hits: dict
    labels: dict = field(default_factory=dict)

    def row(self):
        return {"MR": self.mr, "MRR": self.mrr, **{f"H@{k}": self.hits[k] for k in HITS_AT}}

    def to_dict(self):
        return {"labels": dict(self.labels), "metrics": self.row(), "num_queries": len(self.ranks),
                "ranks": [int(r) for r in self.ranks]}


def aggregate(ranks, label=None, **labels):
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ValueError("cannot aggregate an empty rank list")
    if ranks.min() < 1:
        raise ValueError("ranks start at 1")
    if label is not None:
        labels["kind"] = label
    return RankingReport(
        ranks=ranks.tolist(),
        mr=float(ranks.mean()),
        mrr=float((1.0 / ranks).mean()),
        hits={k: float((ranks <= k).mean()) for k in HITS_AT},
        labels=labels,
    )


def filtered_rank(scores, gold, known_true=()):
    """``1 + #{e != gold, e not known-true : score[e] >= score[gold]}``."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= gold < scores.size:
        raise IndexError(f"gold {gold} outside 0..{scores.size - 1}")
    filt = np.array(sorted(set(known_true)), dtype=np.int64)
    return int(_kernels.filtered_ranks(scores[None, :], np.array([gold]),
                                       np.array([0, filt.size]), filt)[0])


def known_tails(*statement_lists):
    """``(h, r) -> set of tails`` over all given splits; qualifiers are ignored."""
    known = {}
    for statements in statement_lists:
        for s in statements:
            known.setdefault((s.head, s.relation), set()).add(s.tail)
    return known


def filtered_ranks(scores, statements, known):
    """Rank each statement's tail against its score row, filtering known tails."""
    gold = np.array([s.tail for s in statements], dtype=np.int64)
    ptr = [0]
    idx = []
    for s in statements:
        others = sorted(known.get((s.head, s.relation), ()))
        idx.extend(others)
        ptr.append(len(idx))
    return _kernels.filtered_ranks(scores, gold, np.array(ptr), np.array(idx, dtype=np.int64))


def format_table(rows, row_header="model"):
    """Aligned plain-text table; ``rows`` maps a row name to a metrics dict or ``None``."""
    width = max([len(row_header)] + [len(str(name)) for name in rows])
    lines = [f"{row_header:<{width}}  " + "  ".join(f"{c:>8}" for c in COLUMNS)]
    for name, metrics in rows.items():
        if metrics is None:
            cells = [f"{'absent':>8}"] * len(COLUMNS)
        else:
            cells = [f"{metrics['MR']:>8.3f}"] + [f"{metrics[c]:>8.4f}" for c in COLUMNS[1:]]
        lines.append(f"{str(name):<{width}}  " + "  ".join(cells))
    return "\n".join(lines) + "\n"
