"""Seeded synthetic graphs for tests, benchmarks and demos."""

import numpy as np

from .graph import Statement, Vocab


def _pick_tail(rng, n_entities, head):
    tail = int(rng.integers(n_entities - 1))
    return tail + (tail >= head)


def random_qualifiers(rng, n_keys, n_values, max_pairs):
    n = int(rng.integers(0, min(max_pairs, n_keys) + 1))
    keys = rng.choice(n_keys, size=n, replace=False)
    return tuple((int(k), int(rng.integers(n_values))) for k in keys)


def random_statements(rng, n_entities, n_relations, n_statements, n_keys=4, n_values=10,
                      max_pairs=3):
    """Uniformly random statements with distinct-key qualifiers (head != tail)."""
    out = []
    for _ in range(n_statements):
        h = int(rng.integers(n_entities))
        out.append(Statement(h, int(rng.integers(n_relations)), _pick_tail(rng, n_entities, h),
                             random_qualifiers(rng, n_keys, n_values, max_pairs)))
    return out


def functional_statements(rng, n_entities=30, n_relations=4, n_statements=200, n_keys=4,
                          n_values=10, max_pairs=3):
    """Each ``(head, relation)`` has exactly one tail, so the task is learnable.

    Qualifiers are also fixed per ``(head, relation)``, like an attack category
    that always hits the same port with the same protocol.
    """
    table = {}
    out = []
    for _ in range(n_statements):
        h = int(rng.integers(n_entities))
        r = int(rng.integers(n_relations))
        if (h, r) not in table:
            table[(h, r)] = (_pick_tail(rng, n_entities, h),
                             random_qualifiers(rng, n_keys, n_values, max_pairs))
        tail, pairs = table[(h, r)]
        out.append(Statement(h, r, tail, pairs))
    return out


def qualifier_determined_statements(rng, n_entities=30, n_relations=4, n_statements=200):
    """Tails are fixed by one qualifier value while heads and relations are noise."""
    n_values = n_entities
    out = []
    for _ in range(n_statements):
        v = int(rng.integers(n_values))
        tail = v
        h = _pick_tail(rng, n_entities, tail)
        out.append(Statement(h, int(rng.integers(n_relations)), tail, ((0, v),)))
    return out


def vocab_for(n_entities, n_relations, n_keys, n_values):
    """A vocabulary whose ids coincide with the synthetic integer ids."""
    vocab = Vocab()
    for i in range(n_entities):
        vocab.add("entity", f"10.0.{i // 256}.{i % 256}")
    for i in range(n_relations):
        vocab.add("relation", f"Category{i}")
    for i in range(n_keys):
        vocab.add("qual_key", f"key{i}")
    for i in range(n_values):
        vocab.add("qual_value", f"value{i}")
    return vocab
