import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaexpert.data import DatasetSpec, default_partition, generate, make_test_split, memberships
from metaexpert.evaluation import (
    ModelOutputs,
    ACCURACY_COLUMNS,
    dea_confidence_profile,
    depth_bias_probe,
    diagonal_row_maxima,
    eps_cpe,
    eps_ours,
    error_matrix,
    evaluate,
    from_eps,
    interval_accuracy,
    kmeans,
    policy_predict,
    pseudo_label_f1,
    utilization,
)
from metaexpert.model import EncoderConfig, MetaExpert
from metaexpert.numerics import seeded_rng
from metaexpert.objectives import PseudoLabelBatch

PART = default_partition(10)


def pseudo(y_hat, mask, labeler="expert1"):
    y_hat, mask = np.asarray(y_hat), np.asarray(mask, dtype=bool)
    return PseudoLabelBatch(labeler, y_hat, np.where(mask, 0.99, 0.5), mask, 0.95)


# --- accuracy ------------------------------------------------------------------

def test_perfect_predictions():
    y = np.arange(10).repeat(3)
    assert interval_accuracy(y, y, PART).as_tuple() == (100.0, 100.0, 100.0, 100.0)


def test_constant_head_prediction_brute_force():
    y = np.arange(10).repeat(3)          # 30 samples
    pred = np.zeros_like(y)
    acc = interval_accuracy(pred, y, PART)
    # head = classes {0, 1}: 3 of 6 correct
    head = [i for i in range(30) if y[i] in PART.head]
    assert acc.head == 100.0 * sum(pred[i] == y[i] for i in head) / len(head) == 50.0
    assert acc.medium == 0.0 and acc.tail == 0.0
    assert acc.overall == 100.0 * 3 / 30


def test_empty_interval_undefined():
    y = np.array([0, 1, 0])
    acc = interval_accuracy(np.array([0, 0, 0]), y, PART)
    assert acc.medium is None and acc.tail is None
    assert acc.overall == pytest.approx(200 / 3)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 80))
def test_accuracy_recombines_and_is_permutation_invariant(seed, n):
    rng = seeded_rng(seed)
    y, pred = rng.integers(0, 10, n), rng.integers(0, 10, n)
    acc = interval_accuracy(pred, y, PART)
    weighted = sum(a * c for a, c in zip(acc.by_interval(), acc.counts) if a is not None) / n
    assert abs(weighted - acc.overall) <= 1e-12
    p = rng.permutation(n)
    assert interval_accuracy(pred[p], y[p], PART).as_tuple() == acc.as_tuple()


# --- F1 --------------------------------------------------------------------------

def test_f1_hand_confusion():
    part = default_partition(3)
    # class 0: TP=2, FP=1, FN=1
    y = np.array([0, 0, 0, 1, 2])
    yh = np.array([0, 0, 1, 0, 2])
    rep = pseudo_label_f1(pseudo(yh, [1] * 5), y, part)
    assert rep.per_class[0] == pytest.approx(100 * 2 / 3)


def test_f1_perfect_and_empty():
    y = np.arange(10).repeat(2)
    rep = pseudo_label_f1(pseudo(y, [1] * 20), y, PART)
    assert rep.overall == 100.0 and set(rep.per_interval.values()) == {100.0}
    assert pseudo_label_f1(pseudo(y, [0] * 20), y, PART) is None


def test_f1_absent_class_recorded():
    y = np.array([0, 1])
    rep = pseudo_label_f1(pseudo(y, [1, 1]), y, PART)
    assert rep.absent == list(range(2, 10)) and rep.per_class[5] == 0.0


def test_utilization_counts():
    assert utilization(pseudo([0] * 4, [1, 1, 1, 0])) == 0.75
    assert utilization(pseudo([0] * 4, [1] * 4)) == 1.0
    assert utilization(pseudo([0] * 4, [0] * 4)) == 0.0


# --- error matrix ---------------------------------------------------------------------

def test_error_matrix_hand_fixture():
    # 12 samples, four per interval; classes chosen inside each interval
    y = np.array([0, 1, 0, 1, 2, 3, 2, 3, 4, 5, 6, 7])
    mem = memberships(y, PART)
    e1 = pseudo([0, 1, 0, 0, 2, 3, 9, 3, 4, 5, 6, 7], [1, 1, 1, 1, 1, 0, 1, 1, 0, 0, 0, 0])
    e2 = pseudo(y, [1] * 12)
    e3 = pseudo([1, 1, 0, 1, 2, 3, 2, 3, 5, 5, 6, 8], [1, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1])
    m = error_matrix([e1, e2, e3], y, mem)
    # brute-force recount
    for i, pl in enumerate([e1, e2, e3]):
        for j in range(3):
            acc = [s for s in range(12) if pl.mask[s] and mem[s] == j]
            if not acc:
                assert np.isnan(m.eps[i, j])
            else:
                assert m.eps[i, j] == sum(pl.y_hat[s] != y[s] for s in acc) / len(acc)
    assert m.eps[0, 0] == 0.25 and m.eps[0, 1] == pytest.approx(1 / 3)
    assert np.isnan(m.eps[0, 2]) and np.isnan(m.eps[2, 1])
    assert m.undefined_count == 2
    assert np.all(m.eps[1] == 0)


def test_discrepancy_rate_counts_accept_correct_mismatch():
    y = np.array([0, 0, 0, 0])
    pl = pseudo([0, 1, 0, 1], [1, 1, 0, 0])   # ok+acc, wrong+acc, ok+rej, wrong+rej
    m = error_matrix([pl], y, memberships(y, PART))
    assert m.discrepancy[0, 0] == 0.5


def test_eps_constant_and_hand_matrix():
    assert eps_cpe(from_eps(np.full((3, 3), 0.2))) == pytest.approx(0.2)
    assert eps_ours(from_eps(np.full((3, 3), 0.2))) == pytest.approx(0.2)
    m = from_eps(np.where(np.eye(3, dtype=bool), 0.1, 0.4))
    assert eps_cpe(m) == pytest.approx((3 * 0.1 + 6 * 0.4) / 9) == pytest.approx(0.3)
    assert eps_ours(m) == pytest.approx(0.1)


def test_eps_zero_diagonal():
    rng = seeded_rng(1)
    e = rng.random((3, 3))
    np.fill_diagonal(e, 0)
    assert eps_ours(from_eps(e)) == 0.0


def test_eps_excludes_undefined_and_rejects_all_undefined():
    e = np.full((3, 3), 0.3)
    e[0, 1] = np.nan
    e[2, 2] = np.nan
    assert eps_cpe(from_eps(e)) == pytest.approx(0.3)
    assert eps_ours(from_eps(e)) == pytest.approx(0.3)
    with pytest.raises(ValueError, match="undefined"):
        eps_cpe(from_eps(np.full((3, 3), np.nan)))


def test_column_dominant_diagonal_never_worse():
    rng = seeded_rng(7)
    for _ in range(1000):
        e = rng.random((3, 3))
        for j in range(3):
            e[j, j] = e[:, j].min()
        m = from_eps(e)
        assert eps_ours(m) <= eps_cpe(m) + 1e-15


# --- policies ------------------------------------------------------------------------------

def outputs_fixture():
    # each expert is right on its own interval and wrong elsewhere
    y = np.arange(10).repeat(2)
    mem = memberships(y, PART)
    zs = []
    for k in range(3):
        wrong = (y + 1) % 10
        target = np.where(mem == k, y, wrong)
        zs.append(5.0 * np.eye(10)[target])
    w = np.eye(3)[mem]
    agg = sum(w[:, [k]] * zs[k] for k in range(3))
    return y, mem, ModelOutputs(zs, w, agg)


def test_upper_e_on_constructed_fixture():
    y, mem, out = outputs_fixture()
    pred = policy_predict("upper_e", out, mem)
    assert interval_accuracy(pred, y, PART).overall == 100.0
    for k in range(3):
        sel = mem == k
        assert np.array_equal(pred[sel], policy_predict(f"expert{k + 1}", out)[sel])


def test_dea_with_one_hot_weights_is_routed_expert():
    y, mem, out = outputs_fixture()
    assert np.array_equal(policy_predict("dea", out), policy_predict("upper_e", out, mem))


def test_cpe_policy_variants():
    y, mem, out = outputs_fixture()
    assert np.array_equal(policy_predict("cpe", out), policy_predict("expert2", out))
    mean = policy_predict("cpe", out, cpe_mean_softmax=True)
    probs = sum(out.expert_probs(k) for k in range(3)) / 3
    assert np.array_equal(mean, probs.argmax(1))


def test_upper_e_needs_oracle():
    with pytest.raises(ValueError, match="oracle"):
        policy_predict("upper_e", outputs_fixture()[2])
    with pytest.raises(ValueError, match="unknown policy"):
        policy_predict("best", outputs_fixture()[2])


def test_profile_identity_and_uniform():
    mem = np.array([0, 1, 2, 2, 1])
    assert np.array_equal(dea_confidence_profile(np.eye(3)[mem], mem), np.eye(3))
    assert np.allclose(dea_confidence_profile(np.full((5, 3), 1 / 3), mem), 1 / 3)
    assert diagonal_row_maxima(np.eye(3))
    assert not diagonal_row_maxima(np.full((3, 3), 1 / 3))


# --- k-means probe ------------------------------------------------------------------------

def test_one_hot_features_cluster_perfectly():
    y = np.arange(10).repeat(5)
    feats = np.eye(10)[y]
    for probe in depth_bias_probe([feats] * 3, y, PART):
        assert probe.overall == 100.0 and probe.gap == 0.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), k=st.integers(2, 6))
def test_kmeans_objective_non_increasing(seed, k):
    x = seeded_rng(seed).normal(size=(60, 3))
    res = kmeans(x, k, seed=seed)
    assert all(b <= a + 1e-9 * max(1.0, a) for a, b in zip(res.objective, res.objective[1:]))
    assert res.iterations <= 100


def test_kmeans_reseeds_empty_cluster():
    # two distinct points and k = 3: the third centroid duplicates one and starts empty
    x = np.array([[0.0, 0.0]] * 3 + [[1.0, 0.0]] * 3)
    res = kmeans(x, 3, seed=0)
    assert res.reseeded > 0
    assert res.objective[-1] == 0.0


def test_kmeans_separated_blobs():
    rng = seeded_rng(2)
    centers = np.array([[0, 0], [10, 0], [0, 10]])
    x = np.concatenate([c + 0.1 * rng.normal(size=(20, 2)) for c in centers])
    res = kmeans(x, 3, seed=1)
    assert len({tuple(res.labels[i * 20:(i + 1) * 20]) for i in range(3)}) == 3
    assert all(len(set(res.labels[i * 20:(i + 1) * 20])) == 1 for i in range(3))


def test_probe_rejects_wrong_k():
    with pytest.raises(ValueError, match="k"):
        depth_bias_probe([np.eye(10)] * 3, np.arange(10), PART, k=4)


# --- full report ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def report_inputs():
    spec = DatasetSpec(n1=80, m_anchor=60, gamma_l=10, feature_dim=8)
    split = generate(spec)
    model = MetaExpert(8, 10, EncoderConfig((12, 12, 12)), seed=1)
    return model, make_test_split(spec, per_class=10), split


def test_evaluate_report_shapes(report_inputs):
    model, test, split = report_inputs
    pols = ["expert1", "expert2", "expert3", "dea", "upper_e"]
    rep = evaluate(model, test, split, PART, pols, oracle=True, threshold=0.1)
    assert list(rep.policies) == pols
    assert rep.accuracy_table().splitlines()[0].split() == list(ACCURACY_COLUMNS)
    assert rep.dea_profile.shape == (3, 3)
    assert [p["depth"] for p in rep.probe] == ["shallow", "middle", "deep"]
    assert rep.accuracy == rep.policies["dea"]["overall"]
    json.loads(rep.to_json())
    assert rep.f1_csv().splitlines()[0].startswith("labeler,f1_overall")
    assert len(rep.profile_csv().splitlines()) == 4


def test_evaluate_is_deterministic(report_inputs):
    model, test, split = report_inputs
    a = evaluate(model, test, split, PART, threshold=0.1)
    b = evaluate(model, test, split, PART, threshold=0.1)
    assert a.to_json() == b.to_json() and a.text() == b.text()


def test_evaluate_rejects_upper_e_without_oracle(report_inputs):
    model, test, split = report_inputs
    with pytest.raises(ValueError, match="oracle"):
        evaluate(model, test, split, PART, ["upper_e"])


def test_cpe_union_error_pools_accepting_experts():
    y = np.array([0, 0, 4, 4])
    mem = memberships(y, PART)
    a = pseudo([0, 1, 4, 4], [1, 1, 0, 0])
    b = pseudo([0, 0, 5, 4], [0, 1, 1, 0])
    from metaexpert.evaluation import cpe_union_error
    # head: both samples accepted, sample 1 wrong under expert a; tail: one accepted, wrong
    assert cpe_union_error([a, b], y, mem) == [0.5, None, 1.0]
