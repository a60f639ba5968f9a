import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rankdistill.embed import l2_normalize_columns, similarity_matrix
from rankdistill.errors import AsymmetricInputError, IndexOutOfRangeError, InvalidParameterError
from rankdistill.labeling import PositiveSets, build_label_matrix, generate_labels, mixup_labeling, similarity_labeling
from rankdistill.mixup import MixRecord, mix_batch, sample_lambda, sample_partners

import oracles


def random_mixed_batch(rng, B=None, dim=8):
    B = B or int(rng.integers(2, 25))
    F = l2_normalize_columns(rng.normal(size=(dim, B)) + rng.normal(size=(dim, 1)))
    joint, mix = mix_batch(F, sample_partners(B, rng), sample_lambda(1.0, rng), rng)
    return similarity_matrix(joint), mix


def test_sl_examples(rng):
    S = np.array([[1.0, 0.8, 0.7], [0.8, 1.0, 0.1], [0.7, 0.1, 1.0]])
    assert similarity_labeling(S, 0.75)[0] == {1}
    F = l2_normalize_columns(rng.normal(size=(8, 30)))
    assert similarity_labeling(similarity_matrix(F), 1.0).sizes().sum() == 0


def test_sl_matches_double_loop(rng):
    F = l2_normalize_columns(rng.normal(size=(6, 50)) + 0.5)
    S = similarity_matrix(F)
    assert similarity_labeling(S, 0.75).sets == oracles.threshold_sets(S.tolist(), 0.75)


def test_sl_is_strict_and_excludes_self():
    S = np.array([[1.0, 0.75], [0.75, 1.0]])
    assert similarity_labeling(S, 0.75).sizes().tolist() == [0, 0]
    assert similarity_labeling(S, 0.0)[0] == {1}


def test_invalid_tau():
    for tau in (-0.1, 1.1):
        with pytest.raises(InvalidParameterError):
            similarity_labeling(np.eye(2), tau)


def test_ml_examples():
    # originals 0,1 with partner pairs (0->1, 1->0); mixed 2,3; a=1? use a larger set
    # batch of 3 originals, 3 mixed, plus labels among them
    B = 3
    sets = [set() for _ in range(2 * B)]
    # P_0 = {1}, P_1 = {0}, P_2 = {5}? keep SL symmetric
    sets[0], sets[1] = {1}, {0}
    sets[3], sets[5] = {5}, {3}
    P = PositiveSets.from_sets(sets)
    mix = MixRecord([1, 2, 0], 0.5, B)
    out = mixup_labeling(P, mix).sets
    # mixed 3 = (0, 1): P_3 = {5} | {1} | {0}
    assert out[3] == {0, 1, 5}
    assert all(3 in out[z] for z in (0, 1, 5))
    empty = PositiveSets.from_sets([set() for _ in range(4)])
    # mixed 3 from originals 1 and 0, all empty
    assert mixup_labeling(empty, MixRecord([1, 0], 0.5, 2))[3] == set()


def test_ml_matches_set_algebra(rng):
    for _ in range(20):
        S, mix = random_mixed_batch(rng)
        sl = similarity_labeling(S, 0.75)
        got = mixup_labeling(sl, mix).sets
        assert got == oracles.mixup_union(sl.sets, mix.partners.tolist())


def test_ml_index_check():
    P = PositiveSets.from_sets([set(), set(), set()])
    with pytest.raises(IndexOutOfRangeError):
        mixup_labeling(P, MixRecord([1, 0], 0.5, 2))
    with pytest.raises(IndexOutOfRangeError):
        PositiveSets.from_sets([{3}, set()])


def test_label_matrix_examples(rng):
    Y = build_label_matrix(PositiveSets.from_sets([{1}, {0}]))
    assert Y.tolist() == [[0, 1], [1, 0]]
    assert not build_label_matrix(PositiveSets.from_sets([set()] * 4)).any()
    member = rng.random((100, 100)) < 0.1
    member |= member.T
    np.fill_diagonal(member, False)
    P = PositiveSets(member)
    Y = build_label_matrix(P)
    assert np.array_equal(Y, Y.T)
    assert Y.sum(axis=1).tolist() == [len(s) for s in P.sets]
    with pytest.raises(AsymmetricInputError):
        build_label_matrix(PositiveSets.from_sets([{1}, set()]))


@settings(max_examples=60)
@given(st.integers(0, 2**31), st.floats(0.0, 1.0))
def test_sl_ml_properties(seed, tau):
    S, mix = random_mixed_batch(np.random.default_rng(seed))
    sl = similarity_labeling(S, tau)
    final = mixup_labeling(sl, mix)
    assert final.is_symmetric()
    assert np.all(final.member[sl.member])
    assert not np.any(np.diag(final.member))
    Y = generate_labels(S, tau, mix)
    assert np.array_equal(Y, Y.T)


@settings(max_examples=40)
@given(st.integers(0, 2**31), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_cardinality_monotone_in_tau(seed, t1, t2):
    lo, hi = sorted((t1, t2))
    S, mix = random_mixed_batch(np.random.default_rng(seed))
    for use_ml in (False, True):
        assert generate_labels(S, hi, mix, use_ml).sum() <= generate_labels(S, lo, mix, use_ml).sum()


def test_near_duplicate_cluster_is_fully_positive(rng):
    c = rng.normal(size=16)
    F = l2_normalize_columns(c[:, None] + 1e-3 * rng.normal(size=(16, 12)))
    joint, mix = mix_batch(F, sample_partners(12, rng), 0.4)
    Y = generate_labels(similarity_matrix(joint), 0.75, mix)
    assert np.array_equal(Y, 1 - np.eye(24, dtype=np.uint8))
