import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import outliers_brute
from itss.analysis import (
    OutlierReport,
    ablation_monotone,
    detect_outliers,
    disable_and_finetune,
    outlier_report,
    overlap_statistic,
    random_mask_like,
    similarity_matrix,
    top_outlier_positions,
    transfer_matrix,
    update_vector,
)
from itss.data import generate_suite
from itss.errors import ShapeError
from itss.nn import LayerLayout, ModelSpec, init_model
from itss.subspace import LowDimState, SubspaceBasis, random_basis, reparameterize, train_in_subspace
from itss.train import TrainConfig


def coord_basis(dim, cols):
    lay = LayerLayout("layer0", (("w", (dim,)),))
    v = np.eye(dim)[:, cols]
    return SubspaceBasis((lay,), (v,), (np.ones(len(cols)),), (np.zeros(dim),), "test")


def test_update_vector_examples():
    b = coord_basis(6, [3])
    assert np.array_equal(update_vector(b, LowDimState([np.zeros((4, 1))]))[0].values, np.zeros(6))
    u = update_vector(b, LowDimState([np.array([[2.0]])]))[0].values
    assert np.array_equal(u, 2.0 * np.eye(6)[3])
    with pytest.raises(ShapeError):
        update_vector(b, LowDimState([np.zeros((1, 2))]))


def test_update_vector_equals_materialized_delta():
    m = init_model(ModelSpec(input_dim=3, hidden_dim=5))
    b = random_basis(m.layouts, 4, 0, m.hidden_values())
    st_ = LowDimState([np.random.default_rng(i).standard_normal((3, 4)) for i in range(2)])
    for u, theta, o in zip(update_vector(b, st_), reparameterize(b, st_), b.origin):
        np.testing.assert_allclose(u.values, theta - o, atol=1e-15)


def test_single_spike():
    u = np.zeros(1000)
    u[-1] = 10.0
    rep = detect_outliers(u)
    assert rep.indices.tolist() == [999]
    assert rep.mean == pytest.approx(0.01)
    assert rep.std == pytest.approx(0.31606961258558214, rel=1e-12)
    assert rep.scores[0] == pytest.approx(31.60696125855822, rel=1e-12)
    assert rep.top == 999


@pytest.mark.parametrize("value", [0.0, 0.1, -3.7, 1e300])
def test_constant_vector_has_no_outliers(value):
    assert detect_outliers(np.full(17, value)).indices.size == 0


def test_too_short():
    with pytest.raises(ShapeError):
        detect_outliers(np.ones(1))


@given(seed=st.integers(0, 2**31), n=st.integers(2, 300), k=st.sampled_from([1.0, 2.0, 3.0]),
       heavy=st.booleans())
def test_matches_brute_force(seed, n, k, heavy):
    r = np.random.default_rng(seed)
    u = r.standard_t(2, n) if heavy else r.standard_normal(n)
    got = detect_outliers(u, k)
    assert got.indices.tolist() == outliers_brute(u.tolist(), k)
    assert np.all(got.scores >= k)


@given(seed=st.integers(0, 2**31), c=st.floats(1e-3, 1e3))
def test_scale_covariance(seed, c):
    u = np.random.default_rng(seed).standard_t(3, 200)
    assert np.array_equal(detect_outliers(u).indices, detect_outliers(c * u).indices)


def test_report_mask_and_random_mask_counts():
    lays = [LayerLayout(f"layer{i}", (("w", (50,)),)) for i in range(2)]
    u0 = np.zeros(50)
    u0[[3, 7]] = [9.0, -9.0]
    u1 = np.zeros(50)
    u1[11] = 5.0
    rep = outlier_report([u0, u1])
    mask = rep.mask(lays)
    assert [m.sum() for m in mask.layers] == [2, 1]
    assert rep.count() == 3 and rep.fraction(100) == 0.03
    rnd = random_mask_like(rep, lays, 0)
    assert [m.sum() for m in rnd.layers] == [2, 1]
    assert all(np.array_equal(a, b) for a, b in zip(rnd.layers, random_mask_like(rep, lays, 0).layers))


def test_positions_resolve_through_layout():
    lay = LayerLayout("layer0", (("w", (10, 10)), ("b", (10,))))
    u = np.zeros(110)
    u[12] = 50.0
    u[101] = -40.0
    rep = outlier_report([u])
    (pos,), overlap = top_outlier_positions(rep, [lay])
    assert pos[0] == (12, "w", (1, 2))
    assert pos[1] == (101, "b", (1,))
    assert overlap == 1.0


def test_overlap_statistic():
    assert overlap_statistic([{1, 2}, {1, 2}]) == 1.0
    assert overlap_statistic([{1, 2}, {3, 4}]) == 0.0
    assert overlap_statistic([{1, 2}, {2, 3}]) == pytest.approx(1 / 3)


def test_transfer_matrix_shape_and_diagonal():
    ref = np.array([0.9, 0.8, 0.7])
    acc = np.array([[0.91, 0.75, 0.6], [0.85, 0.79, 0.65], [0.8, 0.7, 0.7]])
    drops, rnd, rows = transfer_matrix(ref, acc, [0.5, 0.5, 0.5])
    assert np.all(np.diag(drops) == 0.0)
    assert drops[0, 1] == pytest.approx(0.05)
    np.testing.assert_allclose(rnd, [0.4, 0.3, 0.2])
    assert rows[0] == pytest.approx((0.05 + 0.1) / 2)
    with pytest.raises(ShapeError):
        transfer_matrix(ref, acc[:2], [0.5] * 3)


def test_similarity_matrix():
    r = np.random.default_rng(0)
    states = [LowDimState([r.standard_normal((4, 8)) for _ in range(2)]) for _ in range(3)]
    s = similarity_matrix(states)
    assert np.array_equal(np.diag(s), np.ones(3))
    assert np.array_equal(s, s.T)
    za, zb = states[0].members[0][1], states[1].members[0][1]
    assert -1 <= s[0, 1] <= 1
    same = similarity_matrix([states[0], states[0]])
    assert same[0, 1] == pytest.approx(1.0)
    assert za.shape == zb.shape


def test_similarity_skips_zero_members():
    a = LowDimState([np.array([[1.0, 0.0], [0.0, 0.0]])])
    b = LowDimState([np.array([[1.0, 1.0], [1.0, 0.0]])])
    with pytest.warns(UserWarning):
        s = similarity_matrix([a, b])
    assert s[0, 1] == pytest.approx(2 ** -0.5)


def test_ablation_monotone_rule():
    assert ablation_monotone(np.array([[0.8, 0.85, 0.9], [0.7, 0.69, 0.8]]))
    assert not ablation_monotone(np.array([[0.8, 0.75, 0.9], [0.7, 0.69, 0.8]]))
    assert not ablation_monotone(np.array([[0.9, 0.8, 0.7], [0.7, 0.75, 0.8]]))


def test_disable_and_finetune_runs_three_ways():
    task = generate_suite(8, 16, 0, small_n=64, n_val=64)[0]
    m = init_model(ModelSpec(input_dim=16, hidden_dim=10, num_classes=2))
    cfg = TrainConfig(epochs=3)
    b = random_basis(m.layouts, 4, 0, m.hidden_values())
    _, state = train_in_subspace(m, b, task.train, task.val, cfg, h=2)
    rep = outlier_report(update_vector(b, state))
    res = disable_and_finetune(m, task, rep, cfg, mask_seed=1)
    assert res.masked_count == rep.count()
    assert all(0.0 <= a <= 1.0 for a in (res.outlier_accuracy, res.random_accuracy, res.full_accuracy))
    empty = OutlierReport(tuple(rep.layers[i].__class__("x", 0.0, 0.0, np.zeros(0, int), np.zeros(0))
                                for i in range(2)), 3.0)
    with pytest.warns(UserWarning):
        noop = disable_and_finetune(m, task, empty, cfg, mask_seed=1)
    assert noop.outlier_accuracy == noop.random_accuracy == noop.full_accuracy
