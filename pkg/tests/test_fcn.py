import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from masscrf import fcn
from masscrf import tensor as T
from masscrf.errors import BadParam, LengthMismatch, ShapeMismatch
from masscrf.fcn import TABLE1, FcnModel
from masscrf.tensor import Tensor


def _prior(seed=0):
    return np.random.default_rng(seed).uniform(0.02, 0.98, size=(40, 40))


def _zero_kernels(model):
    for k, t in model.params.items():
        if k != "prior_bias":
            t.data = np.zeros_like(t.data)


def test_fcn1_shape_walk():
    m = FcnModel("fcn1", _prior(), seed=0)
    p = m.params
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 40, 40)))
    x = T.maxpool2x2(T.tanh(T.conv2d(x, p["conv1.w"], p["conv1.b"])))
    assert x.shape == (1, 6, 20, 20)
    x = T.maxpool2x2(T.tanh(T.conv2d(x, p["conv2.w"], p["conv2.b"])))
    assert x.shape == (1, 12, 10, 10)
    x = T.tanh(T.conv2d(x, p["conv3.w"], p["conv3.b"], padding="valid"))
    assert x.shape == (1, 588, 4, 4)
    x = T.transposed_conv2d(x, p["deconv.w"])
    assert x.shape == (1, 2, 43, 43)


@pytest.mark.parametrize("name,crop", [("fcn1", 43), ("fcn2", 43), ("fcn3", 42), ("fcn4", 41)])
def test_every_config_outputs_40x40(name, crop):
    assert TABLE1[name].pre_crop == (crop, crop)
    m = FcnModel(name, _prior(), seed=1)
    out = fcn.fcn_forward(m, np.random.default_rng(2).normal(size=(2, 1, 40, 40)))
    assert out.shape == (2, 2, 40, 40)
    assert np.max(np.abs(out.data.sum(axis=1) - 1)) < 1e-12


@pytest.mark.parametrize("name", sorted(TABLE1))
def test_bias_only_network_reproduces_prior(name):
    prior = _prior(3)
    m = FcnModel(name, prior, seed=0)
    _zero_kernels(m)
    p = fcn.fcn_forward(m, np.random.default_rng(4).normal(size=(1, 1, 40, 40))).data[0]
    np.testing.assert_allclose(p[1], prior, atol=2e-6)
    np.testing.assert_array_equal(p.argmax(axis=0), (prior > 0.5).astype(int))


def test_per_layer_parameter_counts_close_to_fcn1():
    ref = fcn.layer_param_counts("fcn1")
    for name in TABLE1:
        for mine, base in zip(fcn.layer_param_counts(name), ref):
            assert abs(mine - base) <= 0.2 * base


def test_param_count_matches_layers():
    m = FcnModel("fcn1", seed=0)
    deconv = 588 * 2 * 40 * 40
    assert fcn.param_count(m) == sum(fcn.layer_param_counts("fcn1")) + deconv + 2 * 40 * 40


def test_init_is_seeded():
    a, b = FcnModel("fcn2", seed=5), FcnModel("fcn2", seed=5)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    c = FcnModel("fcn2", seed=6)
    assert c.params["conv1.w"].data.tobytes() != a.params["conv1.w"].data.tobytes()


def test_glorot_bounds():
    m = FcnModel("fcn3", seed=0)
    w = m.params["conv1.w"].data
    bound = np.sqrt(6.0 / (1 * 9 + 16 * 9))
    assert np.abs(w).max() <= bound


def test_prior_can_be_frozen():
    m = FcnModel("fcn1", seed=0, train_prior=False)
    assert "prior_bias" not in m.parameters()


def test_bad_config_and_shapes():
    with pytest.raises(BadParam):
        fcn.get_config("fcn9")
    with pytest.raises(BadParam):
        fcn.FcnConfig("x", (fcn.ConvSpec(2, 3, 3),))
    with pytest.raises(ShapeMismatch):
        FcnModel("fcn1", prior=np.zeros((10, 10)))
    with pytest.raises(ShapeMismatch):
        FcnModel("fcn1").logits(np.zeros((1, 1, 20, 20)))


def test_unary_from_fcn_values():
    u = fcn.unary_from_fcn(np.full((1, 2, 3, 3), 0.5)).data
    np.testing.assert_allclose(u, np.log(2.0), rtol=1e-15)
    p = np.zeros((1, 2, 1, 1))
    p[0, 0] = 1.0
    u = fcn.unary_from_fcn(p).data.ravel()
    assert u[0] == pytest.approx(0.0, abs=1e-15)
    assert u[1] == pytest.approx(-np.log(1e-12))
    assert u[1] == pytest.approx(27.631, abs=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_unary_inverse(seed):
    p = T.softmax_channels(Tensor(np.random.default_rng(seed).normal(scale=5, size=(1, 2, 4, 4)))).data
    back = np.exp(-fcn.unary_from_fcn(p).data)
    live = p > 1e-12
    assert np.max(np.abs(back[live] - p[live])) < 1e-10


def test_fuse_unaries_examples():
    rng = np.random.default_rng(0)
    f = [Tensor(rng.normal(size=(2, 5, 5))) for _ in range(4)]
    np.testing.assert_array_equal(fcn.fuse_unaries(f[:1], [1.0]).data, f[0].data)
    np.testing.assert_allclose(fcn.fuse_unaries([f[0], f[0]], [0.5, 0.5]).data, f[0].data, rtol=1e-15)
    np.testing.assert_array_equal(fcn.fuse_unaries(f, Tensor([1.0, 0.0, 0.0, 0.0])).data, f[0].data)
    with pytest.raises(LengthMismatch):
        fcn.fuse_unaries(f, [1.0, 2.0])
    with pytest.raises(LengthMismatch):
        fcn.fuse_unaries([], [])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_fuse_is_linear_in_each_field(seed, a, b):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=3)
    f = [rng.normal(size=(2, 3, 3)) for _ in range(3)]
    g = rng.normal(size=(2, 3, 3))
    lhs = fcn.fuse_unaries([Tensor(a * f[0] + b * g), Tensor(f[1]), Tensor(f[2])], w).data
    rhs = a * fcn.fuse_unaries([Tensor(f[0]), Tensor(f[1]), Tensor(f[2])], w).data
    rhs += b * fcn.fuse_unaries([Tensor(g), Tensor(f[1]), Tensor(f[2])], w).data
    rhs += (1 - a - b) * fcn.fuse_unaries([Tensor(np.zeros_like(g)), Tensor(f[1]), Tensor(f[2])], w).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_nll_loss_examples():
    mask = np.random.default_rng(0).integers(0, 2, size=(40, 40))
    perfect = fcn.one_hot(mask)[None]
    assert fcn.fcn_nll_loss(perfect, mask[None]).item() == pytest.approx(0.0, abs=1e-11)
    uniform = np.full((1, 2, 40, 40), 0.5)
    assert fcn.fcn_nll_loss(uniform, mask[None]).item() == pytest.approx(np.log(2.0), rel=1e-14)
    with pytest.raises(ShapeMismatch):
        fcn.fcn_nll_loss(uniform, np.zeros((1, 20, 20)))


def test_probabilities_from_unary_round_trip():
    p = T.softmax_channels(Tensor(np.random.default_rng(1).normal(size=(1, 2, 3, 3)))).data
    back = fcn.probabilities_from_unary(fcn.unary_from_fcn(p)).data
    np.testing.assert_allclose(back, p, atol=1e-14)
