import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hralert import _kernels
from hralert._kernels import NUMBA_IMPL, NUMPY_IMPL

pytestmark = pytest.mark.skipif(NUMBA_IMPL is None, reason="numba not importable")


def random_pad(rng, n_edges, q_max, n_keys, n_values):
    count = rng.integers(0, q_max + 1, size=n_edges)
    pad = np.full((n_edges, q_max, 2), -1, dtype=np.int64)
    for e in range(n_edges):
        pad[e, :count[e], 0] = rng.integers(n_keys, size=count[e])
        pad[e, :count[e], 1] = rng.integers(n_values, size=count[e])
    return pad, count


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20), n=st.integers(1, 40), d=st.integers(1, 6))
def test_scatter_add_backends_agree(seed, n, d):
    rng = np.random.default_rng(seed)
    rows, index = rng.standard_normal((n, d)), rng.integers(0, 5, size=n)
    a, b = np.zeros((5, d)), np.zeros((5, d))
    NUMPY_IMPL["scatter_add"](a, index, rows)
    NUMBA_IMPL["scatter_add"](b, index, rows)
    assert np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20), n=st.integers(1, 20), q_max=st.integers(1, 4))
def test_distmult_backends_agree(seed, n, q_max):
    rng = np.random.default_rng(seed)
    pad, count = random_pad(rng, n, q_max, 3, 4)
    kt, vt = rng.standard_normal((3, 5)), rng.standard_normal((4, 5))
    assert np.array_equal(NUMPY_IMPL["distmult_sum"](kt, vt, pad, count),
                          NUMBA_IMPL["distmult_sum"](kt, vt, pad, count))
    grad = rng.standard_normal((n, 5))
    outs = []
    for impl in (NUMPY_IMPL, NUMBA_IMPL):
        kg, vg = np.zeros_like(kt), np.zeros_like(vt)
        impl["distmult_backward"](grad, kt, vt, pad, count, kg, vg)
        outs.append((kg, vg))
    assert np.array_equal(outs[0][0], outs[1][0]) and np.array_equal(outs[0][1], outs[1][1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20), n_q=st.integers(1, 8), n=st.integers(2, 12))
def test_filtered_rank_backends_agree_with_loop(seed, n_q, n):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 4, size=(n_q, n)).astype(float)  # many ties
    gold = rng.integers(0, n, size=n_q)
    filters = [sorted(set(rng.integers(0, n, size=3).tolist())) for _ in range(n_q)]
    ptr = np.concatenate([[0], np.cumsum([len(f) for f in filters])])
    idx = np.array([e for f in filters for e in f], dtype=np.int64)
    expected = [1 + sum(1 for e in range(n) if e != gold[q] and e not in filters[q]
                        and scores[q, e] >= scores[q, gold[q]]) for q in range(n_q)]
    assert NUMPY_IMPL["filtered_ranks"](scores, gold, ptr, idx).tolist() == expected
    assert NUMBA_IMPL["filtered_ranks"](scores, gold, ptr, idx).tolist() == expected


def test_disable_flag_selects_numpy_backend():
    env = dict(os.environ, HRALERT_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "import hralert; print(hralert.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_default_backend_is_numba():
    if os.environ.get("HRALERT_DISABLE_NUMBA"):
        pytest.skip("numpy backend forced by the environment")
    assert _kernels.BACKEND == "numba"
