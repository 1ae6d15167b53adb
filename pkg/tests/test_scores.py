import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from relunc.errors import InputError
from relunc.scores import gini_score, hamming_matrix, msp_uncertainty, rel_u_score, shannon_entropy


@st.composite
def prob_vectors(draw, min_c=2, max_c=10):
    w = draw(arrays(np.float64, st.integers(min_c, max_c), elements=st.floats(0, 1)))
    if w.sum() == 0:
        w[0] = 1.0
    return w / w.sum()


def test_entropy_examples():
    assert shannon_entropy([1.0, 0.0, 0.0]) == 0.0
    assert shannon_entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-15)
    mpmath.mp.dps = 40
    p = [mpmath.mpf("0.9"), mpmath.mpf("0.1")]
    oracle = float(-sum(v * mpmath.log(v) for v in p))
    assert shannon_entropy([0.9, 0.1]) == pytest.approx(oracle, abs=1e-15)
    assert shannon_entropy([0.9, 0.1]) == pytest.approx(0.32508, abs=1e-5)


def test_gini_examples():
    assert gini_score([0.0, 1.0, 0.0]) == 0.0
    assert gini_score([0.25] * 4) == pytest.approx(0.75, abs=1e-15)
    oracle = 1 - Fraction(9, 10) ** 2 - Fraction(1, 10) ** 2
    assert gini_score([0.9, 0.1]) == pytest.approx(float(oracle), abs=1e-15)


def test_msp_examples():
    assert msp_uncertainty([0, 0, 1]) == 0.0
    assert msp_uncertainty([0.1] * 10) == pytest.approx(0.9, abs=1e-15)
    assert msp_uncertainty([0.7, 0.2, 0.1]) == pytest.approx(0.3, abs=1e-15)


def test_rel_u_examples():
    assert rel_u_score([0.9, 0.1], hamming_matrix(2)) == pytest.approx(0.18, abs=1e-15)
    assert rel_u_score([0.3, 0.3, 0.4], np.zeros((3, 3))) == 0.0
    d = 1 / math.sqrt(2)
    D = np.array([[0, d], [d, 0]])
    assert rel_u_score([0.6, 0.4], D) == pytest.approx(2 * d * 0.24, abs=1e-15)
    assert rel_u_score([0.6, 0.4], D) == pytest.approx(0.33941, abs=1e-5)


def test_rel_u_dimension_mismatch():
    with pytest.raises(InputError):
        rel_u_score([0.5, 0.5], np.zeros((3, 3)))


def test_batch_shapes():
    P = np.array([[0.5, 0.5], [1.0, 0.0]])
    for f in (shannon_entropy, gini_score, msp_uncertainty):
        assert f(P).shape == (2,)
    assert rel_u_score(P, hamming_matrix(2)).shape == (2,)


def test_hamming_equals_gini_on_random_vectors():
    rng = np.random.default_rng(0)
    for C in (2, 3, 5, 10, 50):
        P = rng.dirichlet(np.full(C, 0.3), size=2000)
        assert np.max(np.abs(rel_u_score(P, hamming_matrix(C)) - gini_score(P))) <= 1e-12


@given(prob_vectors(), st.floats(0, 100))
def test_rel_u_bilinear_in_d(p, c):
    rng = np.random.default_rng(len(p))
    A = rng.uniform(size=(len(p), len(p)))
    D = A + A.T
    np.fill_diagonal(D, 0)
    assert rel_u_score(p, c * D) == pytest.approx(c * rel_u_score(p, D), rel=1e-12, abs=1e-12)


@given(prob_vectors())
def test_scores_non_negative(p):
    for s in (shannon_entropy(p), gini_score(p), msp_uncertainty(p), rel_u_score(p, hamming_matrix(len(p)))):
        assert s >= 0


@pytest.mark.parametrize("C", [2, 3, 7])
def test_minimum_exactly_on_one_hot(C):
    D = hamming_matrix(C) * 0.3
    for k in range(C):
        e = np.eye(C)[k]
        assert shannon_entropy(e) == 0 and gini_score(e) == 0 and msp_uncertainty(e) == 0
        assert rel_u_score(e, D) == 0
    p = np.full(C, 1.0 / C)
    assert min(shannon_entropy(p), gini_score(p), msp_uncertainty(p), rel_u_score(p, D)) > 0


@given(prob_vectors(min_c=3), st.randoms())
def test_entropy_and_gini_permutation_invariant(p, rnd):
    perm = list(range(len(p)))
    rnd.shuffle(perm)
    q = p[perm]
    assert shannon_entropy(q) == pytest.approx(shannon_entropy(p), abs=1e-12)
    assert gini_score(q) == pytest.approx(gini_score(p), abs=1e-12)


def test_rel_u_not_permutation_invariant():
    D = np.array([[0, 1.0, 0.0], [1.0, 0, 0.0], [0.0, 0.0, 0]])
    p = np.array([0.5, 0.5, 0.0])
    q = p[[0, 2, 1]]
    assert rel_u_score(p, D) != rel_u_score(q, D)


def test_gini_keeps_order_near_one_hot():
    # the naive 1 - sum p^2 form cancels to 0 for both vectors
    a = gini_score([1 - 1e-17, 1e-17])
    b = gini_score([1 - 2e-17, 2e-17])
    assert 0 < a < b
