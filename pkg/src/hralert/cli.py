"""Command-line entry point: ingest, split, train, eval, cq, ablate, report."""

import argparse
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .cq import CQModel, KINDS as CQ_KINDS, evaluate_queries, mine_instances, query_to_line
from .graph import (AlertParseError, SplitError, SplitSpec, Vocab, apply_density_regime,
                    build_graph, parse_alert_records, split, statements_from_text,
                    statements_to_text)
from .metrics import COLUMNS, format_table, known_tails
from .serialize import META_FILE
from .training import (CHECKPOINT_DIR, MODEL_KINDS, PROPAGATION_KINDS, TrainConfig, evaluate,
                       evaluate_relations, load_checkpoint, train, vocab_sizes, write_history)

OUT_ENV = "HRALERT_OUT"
SPLITS = ("train", "valid", "test")

# flags that only make sense for some model kinds
MODEL_FLAGS = {
    "heads": ("alertstar", "hr-nbfnet-cq"),
    "no_qual": ("alertstar",),
    "no_path": ("alertstar",),
    "no_gate": ("alertstar",),
    "mt_layers": ("mt-alertstar",),
    "mt_heads": ("mt-alertstar",),
    "ffn": ("mt-alertstar",),
    "lambda_tail": ("mt-alertstar", "mt-hr-nbfnet"),
    "lambda_rel": ("mt-alertstar", "mt-hr-nbfnet"),
    "lambda_qv": ("mt-alertstar", "mt-hr-nbfnet"),
    "layers": PROPAGATION_KINDS,
    "chunk": PROPAGATION_KINDS,
    "k_max": PROPAGATION_KINDS,
}


class CliError(Exception):
    pass


def default_out():
    return os.environ.get(OUT_ENV, "hralert-out")


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump_json(path, payload):
    _write(path, json.dumps(payload, indent=2) + "\n")


def read_vocab(directory):
    path = Path(directory) / "vocab.tsv"
    if not path.exists():
        raise CliError(f"{path} not found")
    return Vocab.from_text(path.read_text())


def read_statements(path, vocab):
    path = Path(path)
    if not path.exists():
        raise CliError(f"{path} not found")
    return statements_from_text(path.read_text(), vocab)


def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(name, text):
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    if name not in kinds:
        raise CliError(f"unknown config key {name!r}")
    kind = kinds[name]
    if kind in (bool, "bool"):
        lowered = str(text).lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise CliError(f"{name}: expected a boolean, got {text!r}")
        return lowered in ("true", "1", "yes")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return str(text)


def resolve_config(args):
    """Defaults < config file < explicit flags; rejects flags foreign to the model."""
    values = {}
    if getattr(args, "config", None):
        values.update({k: _coerce(k, v) for k, v in read_config_file(args.config).items()})
    explicit = {f.name: getattr(args, f.name) for f in fields(TrainConfig)
                if getattr(args, f.name, None) is not None}
    values.update(explicit)
    model = values.get("model", "alertstar")
    for name, kinds in MODEL_FLAGS.items():
        if name in explicit and model not in kinds:
            flag = "--" + name.replace("_", "-")
            raise CliError(f"{flag} does not apply to model {model!r}")
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(str(exc)) from None


def add_train_flags(p):
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--seed", type=int)
    for name, kind in (("d", int), ("dropout", float), ("lr", float), ("epochs", int),
                       ("margin", float), ("clip_norm", float), ("batch_size", int),
                       ("k_max", int), ("q_max", int), ("heads", int), ("layers", int),
                       ("chunk", int), ("mt_layers", int), ("mt_heads", int), ("ffn", int),
                       ("lambda_tail", float), ("lambda_rel", float), ("lambda_qv", float),
                       ("eval_cap", int)):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind)
    for name in ("no_qual", "no_path", "no_gate"):
        p.add_argument("--" + name.replace("_", "-"), dest=name, action="store_const", const=True)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(args):
    out = Path(args.out or default_out())
    try:
        with open(args.alerts, newline="") as fh:
            statements, vocab, rejected = parse_alert_records(fh, lenient=args.lenient)
    except AlertParseError as exc:
        for line, msg in exc.problems:
            print(f"{args.alerts}:{line}: {msg}" if line else f"{args.alerts}: {msg}", file=sys.stderr)
        return 1
    for line, msg in rejected:
        print(f"{args.alerts}:{line}: skipped: {msg}", file=sys.stderr)
    if not statements:
        print(f"{args.alerts}: no records", file=sys.stderr)
        return 1
    _write(out / "vocab.tsv", vocab.to_text())
    _write(out / "statements.tsv", statements_to_text(statements, vocab))
    print(f"{len(statements)} statements, {vocab.num_entities} entities, "
          f"{vocab.num_relations} relations -> {out}")
    return 0


def regime_split(statements, regime, spec):
    return split(apply_density_regime(statements, regime, spec.seed), spec)


def cmd_split(args):
    vocab = read_vocab(args.data)
    statements = read_statements(Path(args.data) / "statements.tsv", vocab)
    fractions = [float(x) for x in args.fractions.split(",")]
    if len(fractions) != 3:
        raise CliError("--fractions needs three comma-separated values")
    spec = SplitSpec(args.mode, *fractions, seed=args.seed)
    parts = regime_split(statements, args.regime, spec)
    out = Path(args.out or default_out())
    _write(out / "vocab.tsv", vocab.to_text())
    for name, part in zip(SPLITS, parts):
        _write(out / f"{name}.tsv", statements_to_text(part, vocab))
    meta = {"mode": spec.mode, "regime": args.regime, "seed": spec.seed, "fractions": fractions,
            "sizes": {n: len(p) for n, p in zip(SPLITS, parts)}, "vocab_sha256": vocab.sha256()}
    _dump_json(out / "split.json", meta)
    print(" ".join(f"{n}={len(p)}" for n, p in zip(SPLITS, parts)) + f" -> {out}")
    return 0


def load_split(directory):
    vocab = read_vocab(directory)
    parts = [read_statements(Path(directory) / f"{n}.tsv", vocab) for n in SPLITS]
    meta_path = Path(directory) / "split.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return vocab, parts, meta


def run_training(cfg, vocab, parts, out, log=print):
    result = train(cfg, vocab_sizes(vocab), *parts, out_dir=out, vocab_hash=vocab.sha256(), log=log)
    write_history(out, result.history, result.initial_gate)
    _write(Path(out) / "config.txt", "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items()))
    return result


def prepare_split(args, seed, out):
    """Use an existing split directory, or split an ingest directory into ``out/split``."""
    data = Path(args.data)
    split_flags = [f for f in ("mode", "regime", "fractions") if getattr(args, f) is not None]
    if (data / "train.tsv").exists():
        if split_flags:
            raise CliError(f"{data} is already split; drop --{', --'.join(split_flags)}")
        return load_split(data)
    split_args = argparse.Namespace(
        data=str(data), mode=args.mode or "transductive",
        regime=1.0 if args.regime is None else args.regime,
        fractions=args.fractions or "0.8,0.1,0.1", seed=seed, out=str(out / "split"))
    cmd_split(split_args)
    return load_split(out / "split")


def cmd_train(args):
    cfg = resolve_config(args)
    out = Path(args.out or default_out())
    vocab, parts, _ = prepare_split(args, cfg.seed, out)
    result = run_training(cfg, vocab, parts, out)
    print(f"best val MRR {result.best_val_mrr:.4f} at epoch {result.best_epoch} -> {out / CHECKPOINT_DIR}")
    return 0


def load_for_data(checkpoint, vocab):
    meta_path = Path(checkpoint) / META_FILE
    if not meta_path.exists():
        raise CliError(f"{meta_path} not found")
    if json.loads(meta_path.read_text()).get("vocab_sha256") != vocab.sha256():
        raise CliError("checkpoint vocabulary does not match the data vocabulary")
    return load_checkpoint(checkpoint, vocab_sizes(vocab))


def report_payload(rows, labels, extra=None):
    payload = {"columns": list(COLUMNS), "labels": labels, "rows": rows}
    if extra:
        payload.update(extra)
    return payload


def cmd_eval(args):
    vocab, parts, split_meta = load_split(args.data)
    model, cfg, meta = load_for_data(args.checkpoint, vocab)
    train_stmts = parts[0]
    target = parts[SPLITS.index(args.split)]
    if not target:
        raise CliError(f"split {args.split!r} is empty")
    graph = build_graph(train_stmts, vocab.num_entities, vocab.num_relations, cfg.q_max)
    known = known_tails(*parts)
    labels = {"split": args.split, "mode": split_meta.get("mode", "unknown"),
              "regime": split_meta.get("regime"), "model": cfg.model}
    report = evaluate(model, target, known, cfg.q_max, graph)
    rows = {cfg.model: report.row()}
    extra = {}
    if cfg.model == "mt-alertstar":
        rel_report, acc = evaluate_relations(model, target, cfg.q_max)
        rows[f"{cfg.model}/relation"] = rel_report.row()
        extra["relation_accuracy"] = acc
    out = Path(args.out or default_out())
    _dump_json(out / "report.json", report_payload(rows, labels, extra))
    header = f"# split={labels['split']} mode={labels['mode']} regime={labels['regime']}\n"
    table = format_table(rows)
    if "relation_accuracy" in extra:
        table += f"relation Acc {extra['relation_accuracy']:.4f}\n"
    _write(out / "report.txt", header + table)
    print(header + table, end="")
    return 0


def cmd_cq(args):
    vocab, parts, split_meta = load_split(args.data)
    model, cfg, _ = load_for_data(args.checkpoint, vocab)
    if not isinstance(model, CQModel):
        raise CliError(f"cq needs an hr-nbfnet-cq checkpoint, got {cfg.model!r}")
    target = parts[SPLITS.index(args.split)]
    known = [s for p in parts for s in p]
    queries = mine_instances(target, known, np.random.default_rng(args.seed), cap=args.cap)
    reports = evaluate_queries(model, queries, cfg.q_max)
    rows = {k: (None if reports[k] is None else reports[k].row()) for k in CQ_KINDS}
    out = Path(args.out or default_out())
    _write(out / "queries.tsv", "".join(query_to_line(q, vocab) for k in CQ_KINDS for q in queries[k]))
    labels = {"split": args.split, "mode": split_meta.get("mode", "unknown"),
              "regime": split_meta.get("regime"), "model": cfg.model}
    counts = {k: len(queries[k]) for k in CQ_KINDS}
    _dump_json(out / "report.json", report_payload(rows, labels, {"query_counts": counts}))
    table = format_table(rows, row_header="query")
    _write(out / "report.txt", table)
    print(table, end="")
    return 0


ABLATIONS = {
    "A1": [("AS-NoQual", {"model": "alertstar", "no_qual": True}),
           ("AS-NoPath", {"model": "alertstar", "no_path": True}),
           ("AS-NoGate", {"model": "alertstar", "no_gate": True}),
           ("AS-Full", {"model": "alertstar"})],
    "A3": [("MT-TailOnly", {"model": "mt-alertstar", "lambda_rel": 0.0, "lambda_qv": 0.0}),
           ("MT-Tail+Rel", {"model": "mt-alertstar", "lambda_qv": 0.0}),
           ("MT-Tail+QualVal", {"model": "mt-alertstar", "lambda_rel": 0.0}),
           ("MT-Full", {"model": "mt-alertstar"})],
}
REGIMES = (("Q33", 0.33), ("Q66", 0.66), ("Q100", 1.0))


def cmd_ablate(args):
    if args.suite not in ("A1", "A3", "A4"):
        raise CliError(f"unknown ablation suite {args.suite!r}; choose A1, A3 or A4")
    base = resolve_config(args)
    vocab = read_vocab(args.data)
    statements = read_statements(Path(args.data) / "statements.tsv", vocab)
    fractions = [float(x) for x in args.fractions.split(",")]
    spec = SplitSpec(args.mode, *fractions, seed=base.seed)
    out = Path(args.out or default_out())

    def run(name, cfg, regime):
        parts = regime_split(statements, regime, spec)
        run_dir = out / name
        result = run_training(cfg, vocab, parts, run_dir, log=None)
        graph = build_graph(parts[0], vocab.num_entities, vocab.num_relations, cfg.q_max)
        report = evaluate(result.model, parts[2], known_tails(*parts), cfg.q_max, graph)
        return report.row()

    if args.suite in ABLATIONS:
        rows = {}
        for name, overrides in ABLATIONS[args.suite]:
            cfg = replace(base, **{"no_qual": False, "no_path": False, "no_gate": False,
                                   "lambda_rel": base.lambda_rel, "lambda_qv": base.lambda_qv,
                                   **overrides})
            rows[name] = run(name, cfg, args.regime)
        table = format_table(rows, row_header="variant")
        payload = report_payload(rows, {"suite": args.suite, "mode": args.mode, "regime": args.regime})
    else:
        models = args.models.split(",")
        rows = {}
        for model in models:
            if model not in MODEL_KINDS:
                raise CliError(f"unknown model {model!r} in --models")
            rows[model] = {}
            for label, p in REGIMES:
                rows[model][label] = run(f"{model}-{label}", replace(base, model=model), p)
        table = format_density_table(rows)
        payload = report_payload(rows, {"suite": "A4", "mode": args.mode})
    _dump_json(out / "ablation.json", payload)
    _write(out / "ablation.txt", table)
    print(table, end="")
    return 0


def format_density_table(rows):
    metrics = ("MRR", "H@1", "H@10")
    width = max([5] + [len(m) for m in rows])
    head1 = f"{'model':<{width}}  " + "  ".join(f"{label:^26}" for label, _ in REGIMES)
    head2 = f"{'':<{width}}  " + "  ".join(" ".join(f"{m:>8}" for m in metrics) for _ in REGIMES)
    lines = [head1, head2]
    for model, per in rows.items():
        cells = "  ".join(" ".join(f"{per[label][m]:>8.4f}" for m in metrics) for label, _ in REGIMES)
        lines.append(f"{model:<{width}}  {cells}")
    return "\n".join(lines) + "\n"


def cmd_report(args):
    rows = {}
    for run in args.runs:
        path = Path(run) / "report.json"
        if not path.exists():
            raise CliError(f"{path} not found")
        payload = json.loads(path.read_text())
        labels = payload.get("labels", {})
        for name, metrics in payload["rows"].items():
            tag = "/".join(str(labels[k]) for k in ("split", "mode", "regime") if labels.get(k) is not None)
            rows[f"{name} [{tag}]" if tag else name] = metrics
    table = format_table(rows, row_header="run")
    if args.out:
        out = Path(args.out)
        _write(out / "summary.txt", table)
        _dump_json(out / "summary.json", {"columns": list(COLUMNS), "rows": rows})
    print(table, end="")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="hralert", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="alert CSV -> statements.tsv + vocab.tsv")
    p.add_argument("alerts")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./hralert-out)")
    p.add_argument("--lenient", action="store_true", help="skip bad records instead of failing")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="apply a density regime and split statements")
    p.add_argument("--data", required=True, help="directory written by ingest")
    p.add_argument("--mode", choices=("transductive", "inductive"), default="transductive")
    p.add_argument("--regime", type=float, default=1.0)
    p.add_argument("--fractions", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model on a split (or ingest) directory")
    p.add_argument("--data", required=True, help="directory written by split or ingest")
    p.add_argument("--out")
    p.add_argument("--mode", choices=("transductive", "inductive"),
                   help="split an ingest directory first (written to OUT/split)")
    p.add_argument("--regime", type=float)
    p.add_argument("--fractions")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="filtered tail-prediction report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cq", help="complex-query report for an hr-nbfnet-cq checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--cap", type=int, default=200, help="queries per type")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cq)

    p = sub.add_parser("ablate", help="run an ablation suite (A1, A3, A4)")
    p.add_argument("suite")
    p.add_argument("--data", required=True, help="directory written by ingest")
    p.add_argument("--mode", choices=("transductive", "inductive"), default="transductive")
    p.add_argument("--regime", type=float, default=1.0, help="density for A1/A3")
    p.add_argument("--fractions", default="0.8,0.1,0.1")
    p.add_argument("--models", default="alertstar,mt-alertstar", help="A4 model rows")
    p.add_argument("--out")
    add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge report.json files into one table")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, SplitError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"hralert {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
