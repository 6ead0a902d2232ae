"""Feature-map oracles: exact formulas plus symmetry properties."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from hamgraph.feature_builder import edge_feature, edge_features, node_feature, node_features

finite_floats = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)
vectors = st.integers(1, 4).flatmap(
    lambda d: st.lists(finite_floats, min_size=d, max_size=d)
)


def test_node_feature_direct_values():
    np.testing.assert_array_equal(node_feature(2.0, 3.0), [-1.0, 6.0])


def test_node_feature_blocks_vanish():
    v = np.array([0.7, -1.2])
    assert np.all(node_feature(v, v)[:2] == 0.0)
    assert np.all(node_feature(v, np.zeros(2))[2:] == 0.0)
    assert np.all(node_feature(np.zeros(2), v)[2:] == 0.0)


def test_edge_feature_direct_values():
    np.testing.assert_array_equal(
        edge_feature(np.array([1.0, 0.0]), np.array([2.0, 1.0])),
        [1.0, 1.0, 2.0, 0.0],
    )


@settings(max_examples=100, deadline=None)
@given(vectors, vectors)
def test_edge_feature_swap_symmetry(a, b):
    if len(a) != len(b):
        b = (b * len(a))[: len(a)]
    hi, hj = np.array(a), np.array(b)
    d = len(a)
    fwd = edge_feature(hi, hj)
    rev = edge_feature(hj, hi)
    np.testing.assert_array_equal(fwd[:d], -rev[:d])
    np.testing.assert_array_equal(fwd[d:], rev[d:])


@settings(max_examples=50, deadline=None)
@given(vectors)
def test_self_edge_zero_difference_block(a):
    h = np.array(a)
    f = edge_feature(h, h)
    assert np.all(f[: len(a)] == 0.0)
    np.testing.assert_array_equal(f[len(a):], h * h)


def test_batched_builders_match_scalar_maps():
    rng = np.random.default_rng(0)
    q = rng.standard_normal((3, 5))
    p = rng.standard_normal((3, 5))
    nf = node_features(q, p)
    ef = edge_features(q, p)
    assert nf.shape == (3, 5, 2)
    assert ef.shape == (3, 5, 5, 4)
    for b in range(3):
        for i in range(5):
            np.testing.assert_array_equal(nf[b, i], node_feature(q[b, i], p[b, i]))
            for j in range(5):
                hi = np.array([q[b, i], p[b, i]])
                hj = np.array([q[b, j], p[b, j]])
                np.testing.assert_array_equal(ef[b, i, j], edge_feature(hi, hj))
