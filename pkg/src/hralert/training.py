"""Training loop, checkpointing and filtered evaluation shared by all model kinds."""

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .alertstar import AlertStar
from .cq import CQModel
from .graph import build_graph, canonical_pairs
from .hr_nbfnet import Group, HRNBFNet, MTHRNBFNet
from .metrics import aggregate, filtered_ranks, known_tails
from .mt_alertstar import MTAlertStar
from .nn import Context
from .optim import Adam, clip_global_norm
from .serialize import load_params, save_params

MODEL_KINDS = ("alertstar", "mt-alertstar", "hr-nbfnet", "mt-hr-nbfnet", "hr-nbfnet-cq")
DEFAULT_BATCH = {"alertstar": 128, "mt-alertstar": 64, "hr-nbfnet": 32, "mt-hr-nbfnet": 32,
                 "hr-nbfnet-cq": 128}
PROPAGATION_KINDS = ("hr-nbfnet", "mt-hr-nbfnet")
CHECKPOINT_DIR = "checkpoint"
EVAL_CHUNK = 256


@dataclass
class TrainConfig:
    model: str = "alertstar"
    d: int = 200
    dropout: float = 0.2
    lr: float = 5e-4
    epochs: int = 20
    margin: float = 1.0
    clip_norm: float = 1.0
    batch_size: int = 0  # 0 selects the per-model default
    seed: int = 0
    k_max: int = 8
    q_max: int = 8
    heads: int = 4
    layers: int = 3
    chunk: int = 5000
    mt_layers: int = 3
    mt_heads: int = 4
    ffn: int = 800
    lambda_tail: float = 1.0
    lambda_rel: float = 0.8
    lambda_qv: float = 0.8
    no_qual: bool = False
    no_path: bool = False
    no_gate: bool = False
    eval_cap: int = 0  # 0 evaluates every validation statement

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model!r}; choose from {', '.join(MODEL_KINDS)}")
        for name in ("d", "lr", "epochs", "margin", "clip_norm", "k_max", "q_max", "heads", "layers",
                     "chunk", "mt_layers", "mt_heads", "ffn"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if min(self.lambda_tail, self.lambda_rel, self.lambda_qv) < 0:
            raise ValueError("task weights must be non-negative")
        if self.batch_size < 0 or self.eval_cap < 0:
            raise ValueError("batch_size and eval_cap must be non-negative")

    @property
    def effective_batch_size(self):
        return self.batch_size or DEFAULT_BATCH[self.model]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**data)


def build_model(cfg, sizes):
    """``sizes`` is ``(entities, relations, qualifier keys, qualifier values)``."""
    rng = np.random.default_rng(cfg.seed)
    n, r, k, v = sizes
    lambdas = (cfg.lambda_tail, cfg.lambda_rel, cfg.lambda_qv)
    if cfg.model == "alertstar":
        return AlertStar(n, r, k, v, cfg.d, cfg.heads, cfg.dropout, rng, cfg.no_qual, cfg.no_path,
                         cfg.no_gate)
    if cfg.model == "mt-alertstar":
        return MTAlertStar(n, r, k, v, cfg.d, cfg.mt_layers, cfg.mt_heads, cfg.ffn, cfg.dropout, rng,
                           lambdas)
    if cfg.model == "hr-nbfnet":
        return HRNBFNet(n, r, k, v, cfg.d, cfg.layers, cfg.chunk, cfg.dropout, rng)
    if cfg.model == "mt-hr-nbfnet":
        return MTHRNBFNet(n, r, k, v, cfg.d, cfg.layers, cfg.chunk, cfg.dropout, rng, lambdas)
    return CQModel(n, r, k, v, cfg.d, cfg.heads, cfg.dropout, rng)


def vocab_sizes(vocab):
    return (vocab.num_entities, vocab.num_relations, vocab.num_qual_keys, vocab.num_qual_values)


def make_groups(statements, q_max):
    """``(head, relation)`` groups in first-seen order with unique sorted tails.

    The representative qualifiers are those of the group's first statement.
    """
    groups = {}
    for s in statements:
        key = (s.head, s.relation)
        if key not in groups:
            groups[key] = (set(), canonical_pairs(s.qualifiers[:q_max]))
        groups[key][0].add(s.tail)
    return [Group(h, r, np.array(sorted(tails), dtype=np.int64), pairs)
            for (h, r), (tails, pairs) in groups.items()]


def epoch_batches(cfg, statements, groups, rng):
    size = cfg.effective_batch_size
    if cfg.model in PROPAGATION_KINDS:
        items = []
        for g in groups:
            tails = g.tails
            if tails.size > cfg.k_max:
                tails = np.sort(rng.choice(tails, cfg.k_max, replace=False))
            items.append(Group(g.head, g.relation, tails, g.pairs))
    else:
        items = list(statements)
    order = rng.permutation(len(items))
    return [[items[i] for i in order[lo:lo + size]] for lo in range(0, len(items), size)]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def tail_queries(statements):
    return [(s.head, s.relation, s.qualifiers) for s in statements]


def score_statements(model, statements, q_max, graph):
    out = []
    with ad.no_grad():
        for lo in range(0, len(statements), EVAL_CHUNK):
            chunk = statements[lo:lo + EVAL_CHUNK]
            out.append(model.tail_scores(tail_queries(chunk), q_max, graph=graph))
    return np.concatenate(out) if out else np.zeros((0, 0))


def evaluate(model, statements, known, q_max=8, graph=None, **labels):
    """Filtered tail-prediction report over ``statements``."""
    if not statements:
        raise ValueError("no statements to evaluate")
    ranks = filtered_ranks(score_statements(model, statements, q_max, graph), statements, known)
    return aggregate(ranks, **labels)


def evaluate_relations(model, statements, q_max=8):
    """Unfiltered relation ranks from the MT-AlertStar relation head, plus accuracy."""
    scores = model.relation_scores(statements, q_max)
    gold = np.array([s.relation for s in statements])
    gold_scores = scores[np.arange(len(statements)), gold]
    ranks = (scores >= gold_scores[:, None]).sum(axis=1)  # gold counts itself: pessimistic ties
    report = aggregate(ranks, kind="relation")
    accuracy = float((scores.argmax(axis=1) == gold).mean())
    return report, accuracy


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    history: list
    initial_gate: float | None
    best_val_mrr: float
    best_epoch: int


def gate_of(model):
    return model.gate_value() if isinstance(model, AlertStar) else None


def checkpoint_meta(cfg, vocab_hash, best_val_mrr, best_epoch):
    return {"model": cfg.model, "config": cfg.to_dict(), "vocab_sha256": vocab_hash,
            "best_val_mrr": best_val_mrr, "best_epoch": best_epoch}


def train(cfg, sizes, train_stmts, valid_stmts, test_stmts=(), out_dir=None, vocab_hash="",
          log=None):
    """Fit ``cfg.model`` and keep the parameters with the best validation MRR.

    A checkpoint is written to ``out_dir/checkpoint`` on each strict
    improvement; the returned model holds the best parameters.
    """
    if not train_stmts:
        raise ValueError("training split is empty")
    if not valid_stmts:
        raise ValueError("validation split is empty")
    model = build_model(cfg, sizes)
    graph = build_graph(train_stmts, sizes[0], sizes[1], cfg.q_max)
    groups = make_groups(train_stmts, cfg.q_max) if cfg.model in PROPAGATION_KINDS else None
    known = known_tails(train_stmts, valid_stmts, test_stmts)
    valid_eval = list(valid_stmts)[:cfg.eval_cap] if cfg.eval_cap else list(valid_stmts)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    history = []
    initial_gate = gate_of(model)
    best = (-math.inf, 0, None)
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        ctx = Context(training=True, rng=rng)
        losses = []
        for b, batch in enumerate(epoch_batches(cfg, train_stmts, groups, rng)):
            opt.zero_grad()
            loss = model.batch_loss(batch, rng, ctx, cfg.margin, cfg.q_max, graph=graph)
            value = float(loss.values)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            ad.backward(loss)
            clip_global_norm(params, cfg.clip_norm)
            opt.step()
            losses.append(value)
        val_mrr = evaluate(model, valid_eval, known, cfg.q_max, graph).mrr
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_mrr": val_mrr,
               "gate": gate_of(model)}
        history.append(row)
        if log:
            gate = "" if row["gate"] is None else f" gate={row['gate']:.4f}"
            log(f"epoch {epoch:3d} loss={row['train_loss']:.6f} val_mrr={val_mrr:.4f}{gate}")
        if val_mrr > best[0]:
            best = (val_mrr, epoch, model.state_dict())
            if out_dir is not None:
                save_params(Path(out_dir) / CHECKPOINT_DIR, model.state_dict(model.prefix),
                            checkpoint_meta(cfg, vocab_hash, val_mrr, epoch))
    model.load_state_dict(best[2])
    return TrainResult(model, history, initial_gate, best[0], best[1])


def load_checkpoint(directory, sizes):
    """Rebuild the model stored under ``directory``; returns ``(model, cfg, meta)``."""
    arrays, meta = load_params(directory)
    if meta is None:
        raise FileNotFoundError(f"{directory} has no metadata block")
    cfg = TrainConfig.from_dict(meta["config"])
    model = build_model(cfg, sizes)
    model.load_state_dict(arrays, model.prefix)
    return model, cfg, meta


def write_history(directory, history, initial_gate):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    if initial_gate is not None:
        lines.append(f"# initial_gate={initial_gate!r}\n")
    lines.append("epoch\ttrain_loss\tval_mrr\tgate\n")
    for row in history:
        gate = "-" if row["gate"] is None else repr(row["gate"])
        lines.append(f"{row['epoch']}\t{row['train_loss']!r}\t{row['val_mrr']!r}\t{gate}\n")
    (directory / "history.tsv").write_text("".join(lines))
    payload = {"initial_gate": initial_gate, "epochs": history}
    (directory / "history.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
