import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deserfilter.features import FeatureVector, build_catalog
from deserfilter.markov import (EmptySequence, IndexOutOfRange, MarkovChain, NoSequences, count, empirical_fit,
                                log_prob)


def random_chain(rng, k, sparsity=0.0):
    def row():
        r = rng.dirichlet(np.ones(k))
        if sparsity:
            r[rng.random(k) < sparsity] = 0.0
            if r.sum() == 0:
                r[rng.integers(k)] = 1.0
            r /= r.sum()
        return r
    return MarkovChain(row(), np.array([row() for _ in range(k)]))


def brute_prob(chain, seq):
    """Plain product of probabilities, no logs."""
    p = chain.p_init[seq[0]]
    for a, b in zip(seq, seq[1:]):
        p *= chain.p_tr[a, b]
    return float(p)


def test_hand_example():
    chain = MarkovChain(np.array([0.5, 0.5]), np.array([[0.9, 0.1], [0.2, 0.8]]))
    assert abs(log_prob(chain, [0, 0, 1]) - math.log(0.045)) <= 1e-12


def test_degenerate_single_state():
    chain = MarkovChain(np.array([1.0]), np.array([[1.0]]))
    assert log_prob(chain, [0, 0, 0]) == 0.0


def test_zero_factor_is_minus_inf():
    chain = MarkovChain(np.array([0.5, 0.5]), np.array([[1.0, 0.0], [0.5, 0.5]]))
    assert log_prob(chain, [0, 1]) == -math.inf
    assert log_prob(chain, [1, 0, 0]) == pytest.approx(math.log(0.25))


def test_exhaustive_sums_to_one():
    rng = np.random.default_rng(1)
    for k in range(1, 5):
        for sparsity in (0.0, 0.4):
            chain = random_chain(rng, k, sparsity)
            for n in range(1, 6):
                total = sum(math.exp(log_prob(chain, s)) for s in itertools.product(range(k), repeat=n))
                assert abs(total - 1.0) <= 1e-9, (k, n)


def test_log_prob_matches_plain_product():
    rng = np.random.default_rng(2)
    chain = random_chain(rng, 4, 0.3)
    for seq in itertools.product(range(4), repeat=3):
        p = brute_prob(chain, seq)
        lp = log_prob(chain, seq)
        assert (p == 0 and lp == -math.inf) or math.isclose(math.exp(lp), p, rel_tol=1e-12)


def test_errors():
    chain = MarkovChain(np.array([1.0]), np.array([[1.0]]))
    with pytest.raises(EmptySequence):
        log_prob(chain, [])
    with pytest.raises(IndexOutOfRange):
        log_prob(chain, [0, 1])
    with pytest.raises(IndexOutOfRange):
        log_prob(chain, [-1])
    with pytest.raises(NoSequences):
        empirical_fit([], 2)
    with pytest.raises(ValueError):
        empirical_fit([[0]], 1, pseudocount=-1)


@pytest.mark.parametrize("p_init,p_tr", [
    ([0.5, 0.6], [[1, 0], [0, 1]]),
    ([1.0, 0.0], [[0.5, 0.4], [0, 1]]),
    ([1.5, -0.5], [[1, 0], [0, 1]]),
    ([1.0], [[1, 0]]),
])
def test_invalid_chains_rejected(p_init, p_tr):
    with pytest.raises(ValueError):
        MarkovChain(np.array(p_init, float), np.array(p_tr, float))


def test_chain_is_read_only():
    chain = MarkovChain(np.array([1.0]), np.array([[1.0]]))
    with pytest.raises(ValueError):
        chain.p_tr[0, 0] = 0.5


def test_empirical_examples():
    c = empirical_fit([[0, 1], [0, 1]], 2)
    np.testing.assert_allclose(c.p_init, [1, 0])
    np.testing.assert_allclose(c.p_tr, [[0, 1], [0.5, 0.5]])
    c = empirical_fit([[0, 1], [0, 1]], 2, pseudocount=1)
    np.testing.assert_allclose(c.p_init, [3 / 4, 1 / 4])
    np.testing.assert_allclose(c.p_tr[0], [1 / 4, 3 / 4])
    np.testing.assert_allclose(c.p_tr[1], [1 / 2, 1 / 2])
    c = empirical_fit([[0]], 3)
    np.testing.assert_allclose(c.p_tr, np.full((3, 3), 1 / 3))


def test_counts():
    init, tr = count([[0, 1, 1], [2], []], 3)
    assert init.tolist() == [1, 0, 1]
    assert tr.tolist() == [[0, 1, 0], [0, 1, 0], [0, 0, 0]]


def test_model_file_round_trip(tmp_path):
    cat = build_catalog([FeatureVector.parse("10000000")])
    c = empirical_fit([[0, 1, 0]], 2, catalog=cat)
    c.dump(tmp_path / "m.json")
    d = MarkovChain.load(tmp_path / "m.json")
    assert d.catalog == cat
    np.testing.assert_array_equal(d.p_tr, c.p_tr)
    assert set(c.to_dict()) == {"catalog", "p_init", "p_tr", "kind"}


seqs_k = st.integers(1, 5).flatmap(lambda k: st.tuples(
    st.just(k), st.lists(st.lists(st.integers(0, k - 1), min_size=1, max_size=12), min_size=1, max_size=6)))


@given(seqs_k, st.floats(0, 3))
def test_empirical_fit_is_a_chain(ks, pc):
    k, seqs = ks
    c = empirical_fit(seqs, k, pc)
    assert c.k == k
    assert abs(c.p_init.sum() - 1) <= 1e-9
    assert np.all(np.abs(c.p_tr.sum(axis=1) - 1) <= 1e-9)


@given(seqs_k, st.floats(0.01, 3), st.data())
def test_pseudocount_gives_finite_scores(ks, pc, data):
    k, seqs = ks
    c = empirical_fit(seqs, k, pc)
    probe = data.draw(st.lists(st.integers(0, k - 1), min_size=1, max_size=20))
    assert math.isfinite(log_prob(c, probe))


@settings(max_examples=50)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1), st.data())
def test_extension_never_increases(k, seed, data):
    chain = random_chain(np.random.default_rng(seed), k, 0.3)
    seq = data.draw(st.lists(st.integers(0, k - 1), min_size=1, max_size=15))
    scores = [log_prob(chain, seq[:i]) for i in range(1, len(seq) + 1)]
    assert all(b <= a for a, b in zip(scores, scores[1:]))
    assert all(s <= 0 for s in scores)
