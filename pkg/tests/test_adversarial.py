import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from masscrf import adversarial as adv
from masscrf import tensor as T
from masscrf.errors import BadParam, DegenerateGradient
from masscrf.fcn import fcn_nll_loss
from masscrf.gradcheck import CHECKS
from masscrf.tensor import Tensor

seeds = st.integers(0, 2**31 - 1)


class TinyModel:
    """Per-pixel two-class conv model; log-likelihood is the batch mean over pixels."""

    def __init__(self, seed, square=False):
        rng = np.random.default_rng(seed)
        self.k = Tensor(rng.normal(size=(2, 1, 3, 3)), requires_grad=True)
        self.b = Tensor(rng.normal(size=2), requires_grad=True)
        self.square = square

    def __call__(self, x, masks):
        x = T.as_tensor(x)
        if self.square:
            x = x * x
        return -fcn_nll_loss(T.softmax_channels(T.conv2d(x, self.k, self.b)), masks)


def _batch(seed, n=3, size=6):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 1, size, size)), rng.integers(0, 2, size=(n, size, size))


def test_input_gradient_of_pixel_sum():
    g = adv.input_gradient(lambda x: x.sum(), np.zeros((1, 1, 4, 4)))
    np.testing.assert_array_equal(g, np.ones((1, 1, 4, 4)))


def test_input_gradient_of_constant():
    c = Tensor([2.0], requires_grad=True)
    g = adv.input_gradient(lambda x: (x * 0.0).sum() + c.sum(), np.ones((1, 1, 3, 3)))
    assert not g.any()
    assert c.grad is None or not c.grad.any()


def test_input_gradient_leaves_parameters_alone():
    model = TinyModel(0)
    x, m = _batch(0)
    adv.input_gradient(model, x, m)
    assert model.k.grad is None or not model.k.grad.any()


def test_input_gradient_full_fcn_crf():
    fn, tol = CHECKS["input_gradient"]
    assert max(fn(s) for s in range(5)) < tol


def test_perturbation_examples():
    R = adv.make_perturbation(np.array([3.0, 4.0]), 1.0).R
    np.testing.assert_allclose(R, [-0.6, -0.8], rtol=1e-15)
    g = np.random.default_rng(0).normal(size=(1, 40, 40))
    assert np.linalg.norm(adv.make_perturbation(g, 0.1).R) == pytest.approx(0.1, rel=1e-12)
    with pytest.raises(DegenerateGradient):
        adv.make_perturbation(np.zeros(5), 0.1)
    with pytest.raises(BadParam):
        adv.make_perturbation(np.ones(5), 0.0)


@settings(max_examples=100, deadline=None)
@given(seeds, st.floats(1e-6, 10.0), st.floats(1e-3, 1e3))
def test_perturbation_norm_and_scale_invariance(seed, eps, c):
    g = np.random.default_rng(seed).normal(size=(1, 8, 8))
    p = adv.make_perturbation(g, eps)
    assert abs(np.linalg.norm(p.R) - eps) <= 1e-9 * eps
    np.testing.assert_allclose(adv.make_perturbation(c * g, eps).R, p.R, rtol=1e-12, atol=1e-15 * eps)
    assert float((g * p.R).sum()) < 0


def test_batch_perturbations_flags_degenerate():
    g = np.zeros((3, 1, 2, 2))
    g[1] = 1.0
    R, flags = adv.batch_perturbations(g, 0.5)
    assert flags.tolist() == [True, False, True]
    assert not R[0].any() and not R[2].any()
    assert np.linalg.norm(R[1]) == pytest.approx(0.5)


def test_adversarial_loss_continuity():
    model = TinyModel(1)
    x, m = _batch(1)
    emp = -model(Tensor(x), m).item()
    assert abs(adv.adversarial_loss(model, x, m, 1e-8).item() - emp) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_adversarial_loss_not_below_empirical(seed):
    model = TinyModel(seed)
    x, m = _batch(seed, n=1)
    emp = -model(Tensor(x), m).item()
    assert adv.adversarial_loss(model, x, m, 1e-3).item() >= emp - 1e-9


def test_degenerate_sample_uses_clean_loss():
    model = TinyModel(2, square=True)
    x, m = _batch(2, n=2)
    x[0] = 0.0  # d(x*x)/dx = 0 here, so the input gradient of image 0 vanishes
    eps = 0.3
    got = adv.adversarial_loss(model, x, m, eps).item()
    g = adv.input_gradient(model, x, m)
    R1 = adv.make_perturbation(g[1], eps).R
    l0 = -model(Tensor(x[:1]), m[:1]).item()
    l1 = -model(Tensor(x[1:] + R1), m[1:]).item()
    assert got == pytest.approx((l0 + l1) / 2, rel=1e-12)


def test_adversarial_loss_needs_batch():
    with pytest.raises(BadParam):
        adv.adversarial_loss(TinyModel(0), np.zeros((0, 1, 6, 6)), np.zeros((0, 6, 6)), 0.1)


def test_total_loss_limit_is_twice_empirical():
    model = TinyModel(3)
    x, m = _batch(3)
    emp = -model(Tensor(x), m).item()
    assert adv.total_loss(model, x, m, 1e-10, 0.0).item() == pytest.approx(2 * emp, abs=1e-8)
    assert adv.total_loss(model, x, m, None, 0.0).item() == pytest.approx(emp, rel=1e-15)


def test_penalty_arithmetic():
    w = Tensor([1.0, 1.0], requires_grad=True)
    assert adv.crf_penalty([w], 0.5).item() == pytest.approx(0.5)
    assert adv.crf_penalty([], 0.5) is None
    with pytest.raises(BadParam):
        adv.crf_penalty([w], -1.0)


def test_penalty_gradient_is_lambda_w():
    model = TinyModel(4)
    x, m = _batch(4)
    w = Tensor([0.7, -1.3], requires_grad=True)

    def evaluate(lam):
        def model_eval(xt, masks):
            return model(xt, masks) + (w * 0.0).sum()

        loss = adv.total_loss(model_eval, x, m, 0.1, lam, [w])
        return T.grad(loss, [model.k, model.b, w])

    g0, g5 = evaluate(0.0), evaluate(0.5)
    np.testing.assert_array_equal(g0[0], g5[0])
    np.testing.assert_array_equal(g0[1], g5[1])
    np.testing.assert_allclose(g5[2] - g0[2], 0.5 * w.data, rtol=1e-15)


def test_adversarial_objective_gradient():
    fn, tol = CHECKS["adversarial_objective"]
    assert max(fn(s) for s in range(5)) < tol
