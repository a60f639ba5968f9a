import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rankdistill.ap_loss import APLossConfig, quantized_ap
from rankdistill.embed import l2_normalize_columns
from rankdistill.errors import FileFormatError, IndexOutOfRangeError, InvalidParameterError, NoQueriesError, RankDeficientError
from rankdistill.evaluation import (
    RetrievalGroundTruth,
    apply_whitening,
    average_precision,
    evaluate,
    fit_whitening,
    mean_average_precision,
    mean_precision_at_k,
    rank_database,
    read_ground_truth,
    write_ground_truth,
    write_metrics_csv,
)

import oracles


def test_map_examples():
    assert abs(mean_average_precision([[1, 0, 1]]) - 0.8333) < 1e-4
    assert mean_average_precision([[1, 0, 1]]) == pytest.approx(5 / 6, abs=1e-15)
    assert mean_average_precision([[1, 1, 1, 1]]) == 1.0
    assert mean_average_precision([[0, 0, 1]]) == pytest.approx(1 / 3)


def test_map_excludes_queries_without_positives():
    value, excluded = mean_average_precision([[1, 0], [0, 0], [0, 1]], return_excluded=True)
    assert excluded == 1 and value == pytest.approx(0.75)
    assert average_precision([0, 0]) is None
    with pytest.raises(NoQueriesError):
        mean_average_precision([[0, 0]])


def test_precision_at_k_examples(rng):
    assert mean_precision_at_k([[1] * 10], 10) == 1.0
    assert mean_precision_at_k([[1, 0]], 2) == 0.5
    assert mean_precision_at_k([[1]], 4) == 0.25
    rels = [rng.random(int(rng.integers(1, 30))) < 0.4 for _ in range(50)]
    for k in (1, 5, 10):
        assert mean_precision_at_k(rels, k) == np.mean([oracles.precision_at_k(list(r), k) for r in rels])
    with pytest.raises(InvalidParameterError):
        mean_precision_at_k(rels, 0)
    with pytest.raises(NoQueriesError):
        mean_precision_at_k([], 3)


def _world(rng, q=10, n=60, dim=8, clusters=4):
    centers = rng.normal(size=(dim, clusters))
    ql, dl = rng.integers(0, clusters, q), rng.integers(0, clusters, n)
    Q = l2_normalize_columns(centers[:, ql] + 0.8 * rng.normal(size=(dim, q)))
    D = l2_normalize_columns(centers[:, dl] + 0.8 * rng.normal(size=(dim, n)))
    return Q, D, RetrievalGroundTruth.from_labels(ql, dl)


def test_metrics_invariant_to_database_relabeling(rng):
    Q, D, gt = _world(rng)
    perm = rng.permutation(D.shape[1])
    inv = np.argsort(perm)
    gt_perm = RetrievalGroundTruth({q: sorted(inv[r].tolist()) for q, r in gt.relevant.items()})
    a = evaluate(Q, D, gt)
    b = evaluate(Q, D[:, perm], gt_perm)
    assert a["mAP"] == pytest.approx(b["mAP"], abs=1e-12)
    assert a["mP@10"] == pytest.approx(b["mP@10"], abs=1e-12)


def test_perfect_similarities_give_unit_map():
    # similarities that give quantized AP = 1 also give retrieval mAP = 1
    labels = np.repeat(np.arange(3), 5)
    S = np.where(labels[:, None] == labels[None, :], 1.0, -1.0)
    Y = (labels[:, None] == labels[None, :]).astype(float)
    np.fill_diagonal(Y, 0)
    cfg = APLossConfig(10)
    assert all(quantized_ap(S[q], Y[q], cfg, query=q) == 1.0 for q in range(15))
    F = np.zeros((3, 15))
    F[labels, np.arange(15)] = 1.0
    gt = RetrievalGroundTruth.from_labels(labels, labels)
    assert evaluate(F, F, gt)["mAP"] == 1.0


def test_ranking_ties_go_to_lower_index():
    q = np.array([[1.0], [0.0]])
    db = np.array([[0.0, 1.0, 1.0, 0.0], [1.0, 0.0, 0.0, 1.0]])
    assert rank_database(q, db)[0].tolist() == [1, 2, 0, 3]


def test_ground_truth_roundtrip_and_errors(tmp_path):
    gt = RetrievalGroundTruth({0: [1, 4], 1: [], 2: [0]}, split="hard")
    p = tmp_path / "gt.txt"
    write_ground_truth(p, gt)
    back = read_ground_truth(p)
    assert back.relevant == gt.relevant and back.split == "hard"
    back.validate(3, 5)
    with pytest.raises(IndexOutOfRangeError):
        back.validate(3, 4)
    with pytest.raises(IndexOutOfRangeError):
        back.validate(2, 5)
    with pytest.raises(FileFormatError):
        RetrievalGroundTruth({0: [1, 1]}).validate(1, 2)
    for bad in ("0 1 2\n", "x: 1\n", "0: 1\n0: 2\n"):
        p.write_text(bad)
        with pytest.raises(FileFormatError):
            read_ground_truth(p)


def test_whitening_isotropic_covariance():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(2, 10_000)) * np.array([[3.0], [0.5]]) + np.array([[2.0], [-1.0]])
    model = fit_whitening(X, 2)
    Z = apply_whitening(model, X, normalize=False)
    assert np.linalg.norm(np.cov(Z, bias=True) - np.eye(2)) < 0.1
    np.testing.assert_allclose(model.mean, [2.0, -1.0], atol=0.1)


def test_whitening_centering_axis(rng):
    X = rng.normal(size=(3, 500))
    X[1] -= X[1].mean()
    assert abs(fit_whitening(X, 2).mean[1]) < 1e-12


def test_whitening_composition(rng):
    X = rng.normal(size=(4, 800)) * np.array([[2.0], [1.0], [0.5], [0.1]])
    m = fit_whitening(X, 4)
    once = apply_whitening(m, X, normalize=False)
    # a second model learned on whitened data is a pure rotation after recentering
    m2 = fit_whitening(once, 4)
    np.testing.assert_allclose(m2.projection @ m2.projection.T, np.eye(4), atol=1e-8)
    np.testing.assert_allclose(m2.mean, 0.0, atol=1e-12)
    twice = apply_whitening(m2, once, normalize=False)
    np.testing.assert_allclose(twice.T @ twice, once.T @ once, atol=1e-8)


def test_whitening_rows_orthogonal_after_unscaling(rng):
    m = fit_whitening(rng.normal(size=(6, 300)), 4)
    V = m.projection * np.sqrt(m.eigenvalues)[:, None]
    np.testing.assert_allclose(V @ V.T, np.eye(4), atol=1e-10)
    assert np.all(m.eigenvalues >= 1e-10)


def test_whitening_preserves_neighbours_for_isotropic_inputs():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(5, 20_000))
    m = fit_whitening(X, 5)
    # identity-covariance data: the learned map is close to a rotation, so rankings change little
    Q = l2_normalize_columns(rng.normal(size=(5, 20)))
    D = l2_normalize_columns(rng.normal(size=(5, 200)))
    Qw = apply_whitening(m, Q + m.mean[:, None])
    Dw = apply_whitening(m, D + m.mean[:, None])
    top = rank_database(Q, D)[:, 0]
    top_w = rank_database(Qw, Dw)[:, 0]
    assert np.mean(top == top_w) >= 0.9


def test_whitening_errors(rng):
    X = rng.normal(size=(3, 100))
    X[2] = X[0]
    with pytest.raises(RankDeficientError):
        fit_whitening(X, 3)
    with pytest.raises(InvalidParameterError):
        fit_whitening(X, 4)
    with pytest.raises(InvalidParameterError):
        fit_whitening(X[:, :3], 3)


def test_metrics_csv(tmp_path):
    p = tmp_path / "m.csv"
    write_metrics_csv(p, [("mAP", "all", 0.5), ("mP@10", "all", 0.25)])
    assert p.read_text().splitlines() == ["metric,split,value", "mAP,all,0.5", "mP@10,all,0.25"]


@settings(max_examples=50)
@given(st.lists(st.lists(st.booleans(), min_size=1, max_size=25), min_size=1, max_size=10), st.integers(1, 15))
def test_precision_at_k_counting_property(rels, k):
    assert mean_precision_at_k(rels, k) == np.mean([oracles.precision_at_k(r, k) for r in rels])
