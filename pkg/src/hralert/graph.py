"""Alert ingestion, vocabularies, density regimes, splits and graph indices."""

import csv
import ipaddress
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from fractions import Fraction

import numpy as np

from .serialize import sha256_text

QUAL_KEYS = ("detectTime", "flowCount", "port", "protocol")
_QUAL_COLUMNS = {"DetectTime": "detectTime", "FlowCount": "flowCount", "Port": "port",
                 "Protocol": "protocol"}
_MANDATORY = ("SourceIP", "TargetIP", "Category")
SENTINEL = -1
KINDS = ("entity", "relation", "qual_key", "qual_value")


class AlertParseError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(f"line {n}: {msg}" if n else msg for n, msg in self.problems))


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Statement:
    head: int
    relation: int
    tail: int
    qualifiers: tuple = ()

    @property
    def n(self):
        return len(self.qualifiers)


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

class _Table:
    def __init__(self):
        self.items = []
        self.ids = {}

    def add(self, text):
        idx = self.ids.get(text)
        if idx is None:
            if "\t" in text or "\n" in text or not text:
                raise ValueError(f"invalid vocabulary string {text!r}")
            idx = self.ids[text] = len(self.items)
            self.items.append(text)
        return idx

    def __len__(self):
        return len(self.items)


class Vocab:
    """Four string<->id tables; ids are dense in first-seen order."""

    def __init__(self):
        self.tables = {kind: _Table() for kind in KINDS}

    def add(self, kind, text):
        return self.tables[kind].add(text)

    def id(self, kind, text):
        try:
            return self.tables[kind].ids[text]
        except KeyError:
            raise KeyError(f"unknown {kind} {text!r}") from None

    def string(self, kind, idx):
        return self.tables[kind].items[idx]

    def size(self, kind):
        return len(self.tables[kind])

    @property
    def num_entities(self):
        return self.size("entity")

    @property
    def num_relations(self):
        return self.size("relation")

    @property
    def num_qual_keys(self):
        return self.size("qual_key")

    @property
    def num_qual_values(self):
        return self.size("qual_value")

    def to_text(self):
        return "".join(f"{kind}\t{text}\t{i}\n" for kind in KINDS
                       for i, text in enumerate(self.tables[kind].items))

    @classmethod
    def from_text(cls, text):
        vocab = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] not in vocab.tables:
                raise ValueError(f"vocab line {lineno}: expected 'kind<TAB>string<TAB>id'")
            kind, text_, idx = parts
            if vocab.add(kind, text_) != int(idx):
                raise ValueError(f"vocab line {lineno}: ids of kind {kind} are not dense")
        return vocab

    def sha256(self):
        return sha256_text(self.to_text())


# ---------------------------------------------------------------------------
# alert records
# ---------------------------------------------------------------------------

def bucket_detect_time(text):
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1]
    return f"h{datetime.fromisoformat(text).hour:02d}"


def bucket_flow_count(text):
    value = int(text.strip().replace(",", ""))  # "17,094" as printed in alert exports
    if value < 0:
        raise ValueError(f"negative flow count {value}")
    if value == 0:
        return "lt1"
    k = len(str(value)) - 1  # exact floor(log10) for positive integers
    return f"1e{k}-1e{k + 1}"


def bucket_port(text, exact_below=1024):
    value = int(text.strip())
    if not 0 <= value <= 65535:
        raise ValueError(f"port {value} outside 0..65535")
    return str(value) if value < exact_below else "ephemeral"


def bucket_protocol(text):
    value = text.strip().upper()
    if not value.isalnum():
        raise ValueError(f"malformed protocol {text!r}")
    return value


@dataclass
class Schema:
    """Bucketing knobs for numeric qualifier columns."""

    port_exact_below: int = 1024
    keys: tuple = QUAL_KEYS

    def bucket(self, key, text):
        if key == "detectTime":
            return bucket_detect_time(text)
        if key == "flowCount":
            return bucket_flow_count(text)
        if key == "port":
            return bucket_port(text, self.port_exact_below)
        return bucket_protocol(text)


def normalize_category(text):
    category = "".join(text.split())
    if not category or not all(c.isalnum() or c in "_-." for c in category):
        raise ValueError(f"malformed category {text!r}")
    return category


def normalize_ip(text):
    return str(ipaddress.ip_address(text.strip()))


def parse_alert_records(stream, schema=None, vocab=None, lenient=False):
    """Turn a header-bearing CSV alert log into statements.

    Returns ``(statements, vocab, rejected)`` where ``rejected`` lists
    ``(line, reason)``.  Unless ``lenient``, any rejection raises
    :class:`AlertParseError` carrying every problem found.
    """
    schema = schema or Schema()
    vocab = vocab if vocab is not None else Vocab()
    reader = csv.DictReader(stream)
    header = reader.fieldnames or []
    missing_cols = [c for c in _MANDATORY if c not in header]
    if not header:
        raise AlertParseError([(0, "no records")])
    if missing_cols:
        raise AlertParseError([(1, f"header lacks column(s) {', '.join(missing_cols)}")])
    qual_cols = [(col, key) for col, key in _QUAL_COLUMNS.items() if col in header]
    qual_cols.sort(key=lambda ck: schema.keys.index(ck[1]))

    statements, rejected = [], []
    for row in reader:
        line = reader.line_num
        try:
            for col in _MANDATORY:
                if not (row.get(col) or "").strip():
                    raise ValueError(f"missing mandatory field {col}")
            head = normalize_ip(row["SourceIP"])
            tail = normalize_ip(row["TargetIP"])
            if head == tail:
                raise ValueError("source and target IP coincide")
            relation = normalize_category(row["Category"])
            pairs = []
            for col, key in qual_cols:
                raw = row.get(col)
                if raw is None or not raw.strip():
                    continue
                pairs.append((key, schema.bucket(key, raw)))
        except ValueError as exc:
            rejected.append((line, str(exc)))
            continue
        statements.append(Statement(
            vocab.add("entity", head), vocab.add("relation", relation), vocab.add("entity", tail),
            tuple((vocab.add("qual_key", k), vocab.add("qual_value", v)) for k, v in pairs)))
    if rejected and not lenient:
        raise AlertParseError(rejected)
    if not statements and not rejected:
        raise AlertParseError([(0, "no records")])
    return statements, vocab, rejected


# ---------------------------------------------------------------------------
# statement files
# ---------------------------------------------------------------------------

def statements_to_text(statements, vocab):
    lines = []
    for s in statements:
        parts = [vocab.string("entity", s.head), vocab.string("relation", s.relation),
                 vocab.string("entity", s.tail)]
        for k, v in s.qualifiers:
            parts += [vocab.string("qual_key", k), vocab.string("qual_value", v)]
        lines.append("\t".join(parts) + "\n")
    return "".join(lines)


def statements_from_text(text, vocab, grow=False):
    """Parse statement lines; unknown strings are added only when ``grow``."""
    lookup = vocab.add if grow else vocab.id
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) < 3 or len(parts) % 2 == 0:
            raise ValueError(f"statement line {lineno}: expected h, r, t and key/value pairs")
        pairs = tuple((lookup("qual_key", parts[i]), lookup("qual_value", parts[i + 1]))
                      for i in range(3, len(parts), 2))
        keys = [k for k, _ in pairs]
        if len(set(keys)) != len(keys):
            raise ValueError(f"statement line {lineno}: repeated qualifier key")
        s = Statement(lookup("entity", parts[0]), lookup("relation", parts[1]),
                      lookup("entity", parts[2]), pairs)
        if s.head == s.tail:
            raise ValueError(f"statement line {lineno}: head equals tail")
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# density regimes
# ---------------------------------------------------------------------------

def round_half_up(x):
    return int(math.floor(Fraction(x) + Fraction(1, 2)))


def retained_count(p, n):
    return round_half_up(Fraction(str(p)) * n)


def apply_density_regime(statements, p, seed):
    """Keep ``round_half_up(p * n)`` qualifier pairs of each statement.

    Statement ``i`` draws one permutation from ``default_rng([seed, i])`` and
    keeps a prefix of it, so lower densities are subsets of higher ones.
    Retained pairs stay in their original order.
    """
    if not 0 < p <= 1:
        raise ValueError(f"density fraction must lie in (0, 1], got {p}")
    out = []
    for i, s in enumerate(statements):
        keep = retained_count(p, s.n)
        if keep == s.n:
            out.append(s)
            continue
        order = np.random.default_rng([seed, i]).permutation(s.n)
        chosen = sorted(order[:keep].tolist())
        out.append(Statement(s.head, s.relation, s.tail, tuple(s.qualifiers[j] for j in chosen)))
    return out


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    mode: str = "transductive"
    train: float = 0.8
    valid: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("transductive", "inductive"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        fr = (self.train, self.valid, self.test)
        if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {fr}")


def split(statements, spec):
    """Return ``(train, valid, test)`` lists; each keeps the input order."""
    n = len(statements)
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "transductive":
        n_valid = round_half_up(Fraction(str(spec.valid)) * n)
        n_test = round_half_up(Fraction(str(spec.test)) * n)
        if n_valid + n_test > n:
            raise SplitError(f"{n} statements cannot hold {n_valid} valid + {n_test} test")
        order = rng.permutation(n)
        valid_idx = order[:n_valid]
        test_idx = order[n_valid:n_valid + n_test]
        train_idx = order[n_valid + n_test:]
        return tuple([statements[i] for i in np.sort(idx)] for idx in (train_idx, valid_idx, test_idx))

    touching = defaultdict(set)
    for i, s in enumerate(statements):
        touching[s.head].add(i)
        touching[s.tail].add(i)
    target = round_half_up(Fraction(str(spec.valid + spec.test)).limit_denominator(10**9) * n)
    held = set()
    for ent in rng.permutation(sorted(touching)).tolist():
        if len(held) >= target:
            break
        grown = held | touching[ent]
        if held and len(grown) > target:
            continue
        held = grown
    if len(held) == n or not held:
        raise SplitError(f"inductive split infeasible: {n} statements over {len(touching)} "
                         f"entities cannot reserve unseen entities and keep training data")
    held_idx = rng.permutation(sorted(held))
    share = Fraction(str(spec.valid)) / Fraction(str(spec.valid + spec.test)).limit_denominator(10**9) \
        if spec.valid + spec.test > 0 else Fraction(0)
    n_valid = round_half_up(share * len(held_idx))
    if n_valid >= len(held_idx) and spec.test > 0:
        n_valid = len(held_idx) - 1
    valid_idx, test_idx = held_idx[:n_valid], held_idx[n_valid:]
    if not len(test_idx):
        raise SplitError("inductive split infeasible: no statements left for test")
    train_idx = [i for i in range(n) if i not in held]
    return ([statements[i] for i in train_idx], [statements[i] for i in np.sort(valid_idx)],
            [statements[i] for i in np.sort(test_idx)])


def entities_of(statements):
    return {e for s in statements for e in (s.head, s.tail)}


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

def canonical_pairs(pairs):
    return tuple(sorted((int(k), int(v)) for k, v in pairs))


@dataclass
class HyperRelGraph:
    num_entities: int
    num_relations: int
    q_max: int
    statements: list
    src: np.ndarray
    rel: np.ndarray
    dst: np.ndarray
    qual_pad: np.ndarray
    qual_count: np.ndarray
    out_index: dict
    in_index: dict
    group_index: dict
    warnings: list = field(default_factory=list)

    @property
    def num_edges(self):
        return int(self.src.size)

    def inverse_edge(self, e):
        t = len(self.statements)
        return e + t if e < t else e - t


def build_graph(statements, num_entities, num_relations, q_max=8):
    """Forward edges ``0..T-1`` then their inverses (relation ``r + num_relations``).

    Qualifiers are truncated to the first ``q_max`` pairs, then stored sorted
    by (key id, value id); unused slots hold ``SENTINEL``.
    """
    if q_max < 1:
        raise ValueError("q_max must be at least 1")
    t = len(statements)
    src = np.empty(2 * t, dtype=np.int64)
    rel = np.empty(2 * t, dtype=np.int64)
    dst = np.empty(2 * t, dtype=np.int64)
    pad = np.full((2 * t, q_max, 2), SENTINEL, dtype=np.int64)
    count = np.zeros(2 * t, dtype=np.int64)
    notes = []
    out_index, in_index, group_index = defaultdict(list), defaultdict(list), defaultdict(list)
    for i, s in enumerate(statements):
        if not (0 <= s.head < num_entities and 0 <= s.tail < num_entities):
            raise IndexError(f"statement {i}: entity id outside 0..{num_entities - 1}")
        if not 0 <= s.relation < num_relations:
            raise IndexError(f"statement {i}: relation id outside 0..{num_relations - 1}")
        pairs = s.qualifiers
        if len(pairs) > q_max:
            notes.append(f"statement {i}: {len(pairs)} qualifier pairs truncated to {q_max}")
            pairs = pairs[:q_max]
        pairs = canonical_pairs(pairs)
        n = len(pairs)
        src[i], rel[i], dst[i] = s.head, s.relation, s.tail
        src[i + t], rel[i + t], dst[i + t] = s.tail, s.relation + num_relations, s.head
        if n:
            pad[i, :n] = pairs
            pad[i + t, :n] = pairs
        count[i] = count[i + t] = n
        out_index[s.head].append((s.relation, s.tail))
        in_index[s.tail].append((s.head, s.relation))
        group_index[(s.head, s.relation)].append(s.tail)
    for note in notes:
        warnings.warn(note, stacklevel=2)
    return HyperRelGraph(num_entities, num_relations, q_max, list(statements), src, rel, dst, pad,
                         count, dict(out_index), dict(in_index), dict(group_index), notes)
