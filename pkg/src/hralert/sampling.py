"""Uniform negative sampling for the margin objective."""

import numpy as np


def sample_negatives(rng, num_entities, size):
    """``size`` entity ids drawn uniformly; the gold tail may be among them."""
    if num_entities < 2:
        raise ValueError(f"negative sampling needs at least 2 entities, got {num_entities}")
    return rng.integers(0, num_entities, size=size)


def sample_negative(statement, num_entities, seed):
    """One negative for ``statement``, reproducible from ``seed``."""
    rng = np.random.default_rng([seed, statement.head, statement.relation, statement.tail])
    return int(sample_negatives(rng, num_entities, 1)[0])
