"""Central finite-difference checks for every differentiable operator and objective.

Each check builds a small random instance from a seed, computes the analytic
gradient by reverse mode and compares it with central differences (h = 1e-5).
The error measure is ``max|a - n| / max(max|a|, max|n|)`` over the compared
entries, i.e. the worst deviation relative to the gradient's scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import tensor as T
from .adversarial import batch_perturbations, crf_penalty, input_gradient
from .crf import CrfParams, build_kernels, crf_infer, crf_nll_loss, flatten_field
from .fcn import ConvSpec, FcnConfig, FcnModel, fcn_forward, fcn_nll_loss, unary_from_fcn
from .tensor import Tensor

H = 1e-5
SCALE_FLOOR = 1e-12


@dataclass
class CheckResult:
    op: str
    seed: int
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def rel_error(analytic, numeric) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), SCALE_FLOOR)
    return float(np.max(np.abs(a - n), initial=0.0) / scale)


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = H, indices: Optional[Iterable] = None) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. entries of ``arr`` (perturbed in place).

    With ``indices`` only those flat positions are evaluated and a 1-d array is returned.
    """
    flat = arr.reshape(-1)
    positions = range(flat.size) if indices is None else list(indices)
    out = np.zeros(len(positions))
    for k, i in enumerate(positions):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[k] = (fp - fm) / (2 * h)
    return out.reshape(arr.shape) if indices is None else out


def _check_leaves(loss_fn: Callable[[], Tensor], leaves: list) -> float:
    """Gradient of ``loss_fn()`` w.r.t. every leaf vs central differences."""
    loss = loss_fn()
    analytic = T.grad(loss, leaves)
    errs = []
    for leaf, a in zip(leaves, analytic):
        n = numerical_grad(lambda: loss_fn().item(), leaf.data)
        errs.append(rel_error(a, n))
    return max(errs)


def _projection(rng, shape):
    return Tensor(rng.normal(size=shape))


# primitive operators ----------------------------------------------------------


def check_conv2d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    padding = "same" if seed % 2 == 0 else "valid"
    proj = _projection(rng, T.conv2d(x, k, b, padding=padding).shape)
    return _check_leaves(lambda: (T.conv2d(x, k, b, padding=padding) * proj).sum(), [x, k, b])


def check_conv2d_even(seed: int) -> float:
    rng = np.random.default_rng(seed)
    kh = int(rng.integers(2, 5))
    x = Tensor(rng.normal(size=(2, 2, 5, 6)), requires_grad=True)
    k = Tensor(rng.normal(size=(2, 2, kh, kh)), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    proj = _projection(rng, (2, 2, 5, 6))
    return _check_leaves(lambda: (T.conv2d(x, k, b, padding="same") * proj).sum(), [x, k, b])


def check_transposed_conv2d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    B, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    h, w, kh, kw, s = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 3)
    x = Tensor(rng.normal(size=(B, cin, h, w)), requires_grad=True)
    k = Tensor(rng.normal(size=(cin, cout, kh, kw)), requires_grad=True)
    b = Tensor(rng.normal(size=cout), requires_grad=True)
    proj = _projection(rng, T.transposed_conv2d(x, k, b, stride=int(s)).shape)
    return _check_leaves(lambda: (T.transposed_conv2d(x, k, b, stride=int(s)) * proj).sum(), [x, k, b])


def check_maxpool2x2(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 3, 8, 8)), requires_grad=True)
    proj = _projection(rng, (1, 3, 4, 4))
    return _check_leaves(lambda: (T.maxpool2x2(x) * proj).sum(), [x])


def check_tanh(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(scale=2.0, size=(2, 3, 4, 4)), requires_grad=True)
    proj = _projection(rng, x.shape)
    return _check_leaves(lambda: (T.tanh(x) * proj).sum(), [x])


def check_softmax_channels(seed: int) -> float:
    """Full Jacobian-vector product against a directional central difference."""
    rng = np.random.default_rng(seed)
    x0 = rng.normal(scale=3.0, size=(1, 3, 2, 3))
    v = rng.normal(size=x0.shape)
    x = Tensor(x0.copy(), requires_grad=True)
    y = T.softmax_channels(x)
    jac = np.zeros((y.size, x.size))
    for r in range(y.size):
        e = np.zeros(y.size)
        e[r] = 1.0
        out = T.softmax_channels(x)
        (jac[r],) = (g.ravel() for g in T.grad((out * Tensor(e.reshape(y.shape))).sum(), [x]))
    jvp = jac @ v.ravel()
    fd = (T.softmax_channels(x0 + H * v).data - T.softmax_channels(x0 - H * v).data).ravel() / (2 * H)
    return rel_error(jvp, fd)


def check_elementwise(seed: int) -> float:
    """add, sub, mul, exp, log, sum, mean, reshape, indexing and matmul in one graph."""
    rng = np.random.default_rng(seed)
    a = Tensor(rng.uniform(0.5, 2.0, size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    c = Tensor(rng.normal(size=(3,)), requires_grad=True)

    def f():
        m = T.matmul(a, b)  # 2,3,3
        z = (m * c - a[:, :, :3].exp()) + T.log(a, floor=1e-12).reshape(2, 12)[:, :9].reshape(2, 3, 3)
        return (z * z).mean() + c[1] * a.sum()

    return _check_leaves(f, [a, b, c])


def check_upsample2x2(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    proj = _projection(rng, (1, 2, 6, 6))
    return _check_leaves(lambda: (T.upsample2x2(x) * proj).sum(), [x])


def check_composite(seed: int) -> float:
    """conv -> tanh -> softmax -> NLL, gradients of every parameter."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 1, 6, 6)))
    k = Tensor(rng.normal(size=(2, 1, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    mask = rng.integers(0, 2, size=(2, 6, 6))
    return _check_leaves(lambda: fcn_nll_loss(T.softmax_channels(T.tanh(T.conv2d(x, k, b))), mask), [k, b])


def check_fcn_nll(seed: int) -> float:
    """Loss gradient with respect to the logits."""
    rng = np.random.default_rng(seed)
    z = Tensor(rng.normal(scale=2.0, size=(2, 2, 5, 5)), requires_grad=True)
    mask = rng.integers(0, 2, size=(2, 5, 5))
    return _check_leaves(lambda: fcn_nll_loss(T.softmax_channels(z), mask), [z])


# CRF and full objectives -------------------------------------------------------


def _small_crf(rng, n_side=(2, 4), form="exp_unary"):
    img = rng.uniform(0, 1, size=n_side)
    params = CrfParams(
        kernel_weights=Tensor(rng.uniform(0.1, 1.0, size=2), requires_grad=True),
        theta_alpha=float(rng.uniform(1, 3)),
        theta_beta=float(rng.uniform(0.2, 1.0)),
        theta_gamma=float(rng.uniform(1, 3)),
        update_form=form,
    )
    return img, params, build_kernels(img, params)


def check_crf_unroll(seed: int) -> float:
    """crf_nll_loss through a 5-step unroll on an 8-pixel instance: unary and kernel weights."""
    rng = np.random.default_rng(seed)
    form = "exp_unary" if seed % 2 == 0 else "conventional"
    _, params, kernels = _small_crf(rng, form=form)
    unary = Tensor(rng.uniform(0.0, 3.0, size=(2, 8)), requires_grad=True)
    mask = rng.integers(0, 2, size=8)
    return _check_leaves(lambda: crf_nll_loss(crf_infer(unary, kernels, params, steps=5), mask), [unary, params.kernel_weights])


GC_CONFIG = FcnConfig("gradcheck", (ConvSpec(2, 3, 3), ConvSpec(2, 3, 3), ConvSpec(3, 7, 7)))


def _fcn_crf_instance(seed: int):
    rng = np.random.default_rng(seed)
    prior = rng.uniform(0.05, 0.95, size=(40, 40))
    model = FcnModel(GC_CONFIG, prior, seed=seed)
    for t in model.params.values():
        t.data = t.data + rng.normal(scale=0.05, size=t.shape)
    # raise the deconv scale so the FCN output is not dominated by the prior
    model.params["deconv.w"].data = rng.normal(scale=0.3, size=model.params["deconv.w"].shape)
    raw = rng.uniform(0, 1, size=(1, 1, 40, 40))
    x = rng.normal(size=(1, 1, 40, 40))
    params = CrfParams(kernel_weights=Tensor(rng.uniform(0.05, 0.3, size=2), requires_grad=True))
    kernels = build_kernels(raw, params)
    mask = (rng.uniform(size=(1, 40, 40)) < prior).astype(int)

    def loglik(xt, m=mask):
        probs = fcn_forward(model, xt)
        Q = crf_infer(flatten_field(unary_from_fcn(probs)), kernels, params, steps=params.t_train)
        return -crf_nll_loss(Q, m)

    return rng, model, params, x, mask, loglik


def check_input_gradient(seed: int) -> float:
    """FCN-CRF log-likelihood gradient w.r.t. the input at 10 random pixels."""
    rng, model, params, x, mask, loglik = _fcn_crf_instance(seed)
    g = input_gradient(loglik, x, mask)
    idx = rng.choice(x.size, size=10, replace=False)
    xx = x.copy()
    n = numerical_grad(lambda: loglik(Tensor(xx)).item(), xx, indices=idx)
    return rel_error(g.ravel()[idx], n)


def check_adversarial_objective(seed: int) -> float:
    """Full 5-step FCN-CRF adversarial objective w.r.t. sampled parameter entries.

    The perturbation is computed once at the base point and then held fixed, which
    is the function whose gradient the training step actually follows.
    """
    rng, model, params, x, mask, loglik = _fcn_crf_instance(seed)
    lam = 0.5
    g = input_gradient(loglik, x, mask)
    R, _ = batch_perturbations(g, 0.1)
    leaves = [t for t in model.params.values()] + [params.kernel_weights]

    def objective():
        loss = -loglik(Tensor(x + R)) - loglik(Tensor(x))
        return loss + crf_penalty([params.kernel_weights], lam)

    analytic = T.grad(objective(), leaves)
    picks = [(leaf, a, rng.choice(leaf.size, size=min(leaf.size, 3), replace=False)) for leaf, a in zip(leaves, analytic)]
    a_all = np.concatenate([a.ravel()[idx] for _, a, idx in picks])
    errors = []
    # a max-pool winner can switch inside +-h; a smaller step steps back off the kink
    for h in (1e-5, 1e-6):
        n_all = np.concatenate([numerical_grad(lambda: objective().item(), leaf.data, h=h, indices=idx) for leaf, _, idx in picks])
        errors.append(rel_error(a_all, n_all))
        if errors[-1] < 1e-6:
            break
    return min(errors)


# registry ----------------------------------------------------------------------

CHECKS = {
    "conv2d": (check_conv2d, 1e-6),
    "conv2d_even": (check_conv2d_even, 1e-6),
    "transposed_conv2d": (check_transposed_conv2d, 1e-6),
    "maxpool2x2": (check_maxpool2x2, 1e-5),
    "tanh": (check_tanh, 1e-8),
    "softmax_channels": (check_softmax_channels, 1e-7),
    "elementwise": (check_elementwise, 1e-5),
    "upsample2x2": (check_upsample2x2, 1e-5),
    "composite": (check_composite, 1e-5),
    "fcn_nll": (check_fcn_nll, 1e-5),
    "crf_unroll": (check_crf_unroll, 1e-4),
    "input_gradient": (check_input_gradient, 1e-4),
    "adversarial_objective": (check_adversarial_objective, 1e-4),
}


def run(ops: Optional[Iterable[str]] = None, seeds: Iterable[int] = range(20)) -> list:
    names = list(CHECKS) if ops is None else list(ops)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradcheck op(s): {', '.join(unknown)}; available: {', '.join(CHECKS)}")
    seeds = list(seeds)
    results = []
    for name in names:
        fn, tol = CHECKS[name]
        for s in seeds:
            results.append(CheckResult(name, s, fn(s), tol))
    return results
