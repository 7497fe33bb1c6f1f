import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradcheck import full_space_errors
from itss.errors import InvalidInputError, ShapeError
from itss.nn import (
    LayerLayout,
    Mask,
    ModelSpec,
    ParamVector,
    apply_mask,
    backward,
    flatten,
    forward_loss,
    init_model,
    loss_and_grad,
    predict_logits,
    unflatten,
)
from itss.train import TrainConfig, train_full
from itss.data import Dataset

SMALL = {
    "mlp": ModelSpec(kind="mlp", input_dim=5, hidden_dim=6, depth=2, num_classes=3, seed=0),
    "tiny-transformer": ModelSpec(kind="tiny-transformer", input_dim=5, hidden_dim=4, depth=2,
                                  num_classes=3, seq_len=3, seed=0, bias_scale=0.1),
}


def batch(seed, n=6, d=5, c=3):
    r = np.random.default_rng(seed)
    return r.standard_normal((n, d)), r.integers(0, c, n)


def test_mlp_layer_size():
    m = init_model(ModelSpec(input_dim=2, hidden_dim=4, depth=1, num_classes=2))
    assert [l.total_len for l in m.layouts] == [20]


def test_transformer_structure():
    m = init_model(ModelSpec(kind="tiny-transformer", hidden_dim=8, depth=2))
    assert len(m.layouts) == 2
    names = m.layouts[0].names
    for part in ("query", "key", "value", "output"):
        assert f"attention.{part}.weight" in names and f"attention.{part}.bias" in names
    assert {"ffn.intermediate.weight", "ffn.output.weight"} <= set(names)
    assert sum(n.endswith("layernorm.weight") for n in names) == 2
    assert sum(n.endswith("layernorm.bias") for n in names) == 2


@pytest.mark.parametrize("kind", ["mlp", "tiny-transformer"])
def test_init_deterministic(kind):
    a, b = init_model(SMALL[kind]), init_model(SMALL[kind])
    for x, y in zip(a.hidden_values(), b.hidden_values()):
        assert np.array_equal(x, y)
    assert all(np.array_equal(a.readout[k], b.readout[k]) for k in a.readout)


def test_default_hidden_size_in_range():
    m = init_model(ModelSpec())
    assert all(1e3 <= l.total_len <= 1e4 for l in m.layouts)


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(depth=0)
    with pytest.raises(ValueError):
        ModelSpec(kind="rnn")


def test_uniform_logits_loss_is_ln2():
    m = init_model(ModelSpec(input_dim=3, hidden_dim=4, num_classes=2))
    m.readout["readout.weight"][:] = 0.0
    x, _ = batch(0, d=3)
    loss, _ = forward_loss(m, x, np.array([0, 1, 1, 0, 0, 1]))
    assert loss == pytest.approx(np.log(2), abs=1e-15)


def test_large_margin_loss_tends_to_zero():
    m = init_model(ModelSpec(input_dim=3, hidden_dim=4, num_classes=2))
    m.readout["readout.weight"][:] = 0.0
    m.readout["readout.bias"][:] = [500.0, -500.0]
    loss, _ = forward_loss(m, np.ones((1, 3)), np.array([0]))
    assert loss < 1e-300 or loss == 0.0


@pytest.mark.parametrize("kind", ["mlp", "tiny-transformer"])
def test_forward_matches_oracle(kind):
    spec = ModelSpec(kind=kind, input_dim=5, hidden_dim=6, depth=2, num_classes=3, seed=0)
    m = init_model(spec)
    x, y = batch(42, n=8)
    loss, _ = forward_loss(m, x, y)
    from gradcheck import _as_ld, oracle_loss
    ref = oracle_loss(m, *_as_ld(m), x, y)
    assert abs(loss - float(ref)) <= 1e-12


def test_dimension_mismatch():
    m = init_model(SMALL["mlp"])
    with pytest.raises(ShapeError):
        forward_loss(m, np.ones((2, 4)), np.array([0, 1]))


def test_readout_bias_gradient_is_frequency_difference():
    m = init_model(ModelSpec(input_dim=2, hidden_dim=4, num_classes=2))
    m.readout["readout.weight"][:] = 0.0
    x = np.array([[1.0, -1.0], [-1.0, 1.0]])
    g = backward(m, x, np.array([0, 0]))
    # uniform softmax 1/2 minus empirical class frequency (1, 0)
    np.testing.assert_allclose(g.readout["readout.bias"], [-0.5, 0.5], atol=1e-15)


def test_stationary_point_has_zero_gradient():
    m = init_model(ModelSpec(input_dim=2, hidden_dim=4, num_classes=2))
    m.readout["readout.weight"][:] = 0.0
    g = backward(m, np.array([[1.0, 2.0], [3.0, -1.0]]), np.array([0, 1]))
    assert np.max(np.abs(g.readout["readout.bias"])) <= 1e-12


@pytest.mark.parametrize("kind", ["mlp", "tiny-transformer"])
def test_gradients_match_finite_differences(kind):
    m = init_model(SMALL[kind])
    x, y = batch(1)
    worst = max(full_space_errors(m, x, y), key=lambda e: e[1])
    assert worst[1] < 1e-5, worst


def test_flatten_roundtrip_and_order():
    lay = LayerLayout("l", (("a.weight", (2, 3)), ("a.bias", (3,))))
    r = np.random.default_rng(0)
    params = {"a.weight": r.standard_normal((2, 3)), "a.bias": r.standard_normal(3)}
    pv = flatten(lay, params)
    assert np.array_equal(pv.values[:6], params["a.weight"].ravel())
    back = unflatten(pv)
    assert all(np.array_equal(back[k], params[k]) for k in params)
    assert np.array_equal(flatten(lay, back).values, pv.values)
    with pytest.raises(ShapeError):
        ParamVector(lay, np.zeros(8))
    with pytest.raises(InvalidInputError):
        ParamVector(lay, np.full(9, np.nan))


@given(shapes=st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=4),
       seed=st.integers(0, 2**31))
def test_flatten_bijection(shapes, seed):
    lay = LayerLayout("l", tuple((f"t{i}", s) for i, s in enumerate(shapes)))
    v = np.random.default_rng(seed).standard_normal(lay.total_len)
    pv = ParamVector(lay, v)
    assert np.array_equal(flatten(lay, unflatten(pv)).values, v)
    for idx in range(lay.total_len):
        name, pos = lay.locate(idx)
        assert unflatten(pv)[name][pos] == v[idx]


def test_empty_mask_is_identity():
    m = init_model(SMALL["mlp"])
    out = apply_mask(m, Mask.empty(m.layouts))
    assert all(np.array_equal(a, b) for a, b in zip(m.hidden_values(), out.hidden_values()))


def test_all_true_mask_zeroes_layer_output():
    m = init_model(ModelSpec(input_dim=3, hidden_dim=5, depth=2, num_classes=2))
    masks = [np.ones(m.layouts[0].total_len, bool), np.zeros(m.layouts[1].total_len, bool)]
    out = apply_mask(m, Mask(tuple(masks)))
    assert np.all(out.hidden[0].values == 0.0)
    # with layer 0 dead the logits no longer depend on the input
    x = np.random.default_rng(0).standard_normal((4, 3))
    logits = predict_logits(out, x)
    np.testing.assert_allclose(logits, np.broadcast_to(logits[0], logits.shape), atol=0)


def test_mask_length_mismatch():
    m = init_model(SMALL["mlp"])
    with pytest.raises(ShapeError):
        apply_mask(m, Mask((np.zeros(3, bool), np.zeros(3, bool))))


def test_masked_entries_stay_zero_under_training():
    m = init_model(ModelSpec(input_dim=3, hidden_dim=8, num_classes=2))
    r = np.random.default_rng(0)
    masks = tuple(r.random(l.total_len) < 0.2 for l in m.layouts)
    mm = apply_mask(m, Mask(masks))
    x = r.standard_normal((40, 3))
    ds = Dataset(x, (x[:, 0] > 0).astype(int), "train", 2)
    res = train_full(mm, ds, ds, TrainConfig(epochs=10, batch_size=4, base_lr=1e-2))
    for v, mk in zip(res.model.hidden_values(), masks):
        assert np.all(v[mk] == 0.0)
    for ck in res.trajectory.checkpoints:
        for v, mk in zip(ck, masks):
            assert np.all(v[mk] == 0.0)


@pytest.mark.parametrize("kind", ["mlp", "tiny-transformer"])
def test_forward_deterministic(kind):
    m = init_model(SMALL[kind])
    x, y = batch(3)
    assert forward_loss(m, x, y)[0] == forward_loss(m.copy(), x, y)[0]
    l1, _, g1 = loss_and_grad(m, x, y)
    l2, _, g2 = loss_and_grad(m, x, y)
    assert all(np.array_equal(a, b) for a, b in zip(g1.hidden, g2.hidden))
