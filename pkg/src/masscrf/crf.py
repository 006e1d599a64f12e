"""Fully connected pairwise CRF: Gaussian kernels, unrolled mean field, exact oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import BadParam, FieldTooLarge, ShapeMismatch
from .tensor import Tensor

MAX_DENSE_PIXELS = 4096
MAX_EXACT_PIXELS = 16
PROB_FLOOR = 1e-12
POTTS = np.array([[0.0, 1.0], [1.0, 0.0]])
UPDATE_FORMS = ("exp_unary", "conventional")


@dataclass
class CrfParams:
    """Kernel bandwidths, learnable kernel weights and unroll lengths.

    ``update_form="exp_unary"`` adds the unary term as ``exp(-psi)`` before the final
    normalization; ``"conventional"`` uses ``-psi`` (the usual dense-CRF update).
    """

    kernel_weights: Tensor = field(default_factory=lambda: Tensor([1.0, 1.0], requires_grad=True))
    theta_alpha: float = 3.0
    theta_beta: float = 0.1
    theta_gamma: float = 3.0
    t_train: int = 5
    t_test: int = 10
    update_form: str = "exp_unary"

    def __post_init__(self):
        if not isinstance(self.kernel_weights, Tensor):
            self.kernel_weights = Tensor(self.kernel_weights, requires_grad=True)
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise BadParam("kernel bandwidths must be positive")
        if self.t_train < 1 or self.t_test < 1:
            raise BadParam("mean-field step counts must be >= 1")
        if self.update_form not in UPDATE_FORMS:
            raise BadParam(f"update_form must be one of {UPDATE_FORMS}, got {self.update_form!r}")

    @property
    def compatibility(self) -> np.ndarray:
        return POTTS


@lru_cache(maxsize=8)
def _sq_dist(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    pos = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    d2.setflags(write=False)
    return d2


@lru_cache(maxsize=8)
def _spatial(h: int, w: int, theta: float) -> np.ndarray:
    k = np.exp(-_sq_dist(h, w) / (2.0 * theta**2))
    np.fill_diagonal(k, 0.0)
    k.setflags(write=False)
    return k


def build_kernels(image, params: CrfParams) -> list:
    """Bilateral and spatial Gaussian kernel matrices over the pixels of ``image``.

    ``image`` is (H, W), (1, 1, H, W) or a batch (B, 1, H, W).  For B > 1 the
    bilateral matrix has shape (B, N, N); otherwise both are (N, N).  The spatial
    kernel is image independent and shared.  Diagonals are zero.
    """
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None, None]
    if img.ndim != 4 or img.shape[1] != 1:
        raise ShapeMismatch(f"expected an image [B,1,H,W], got {img.shape}")
    B, _, h, w = img.shape
    if h * w > MAX_DENSE_PIXELS:
        raise FieldTooLarge(f"{h}x{w} field exceeds {MAX_DENSE_PIXELS} pixels for dense kernels")
    flat = img.reshape(B, h * w)
    spatial_arg = _sq_dist(h, w) * (-0.5 / params.theta_alpha**2)
    scale = -0.5 / params.theta_beta**2
    bilateral = np.empty((B, h * w, h * w))
    for b in range(B):
        out = bilateral[b]
        np.subtract(flat[b][:, None], flat[b][None, :], out=out)
        np.square(out, out=out)
        out *= scale
        out += spatial_arg
        np.exp(out, out=out)
        np.fill_diagonal(out, 0.0)
    if B == 1:
        bilateral = bilateral[0]
    return [bilateral, _spatial(h, w, float(params.theta_gamma))]


def _check_weights(kernels: Sequence, params: CrfParams) -> Tensor:
    w = params.kernel_weights
    if w.shape != (len(kernels),):
        raise ShapeMismatch(f"{len(kernels)} kernels but kernel_weights has shape {w.shape}")
    return w


def meanfield_step(Q_in, unary, kernels: Sequence, params: CrfParams) -> Tensor:
    """One mean-field update on label-major fields of shape [..., 2, N].

    Message passing, re-weighting, Potts compatibility transform, unary update and
    per-pixel normalization, all recorded on the tape.
    """
    Q_in, unary = T.as_tensor(Q_in), T.as_tensor(unary)
    if Q_in.shape[-2:] != unary.shape[-2:] or Q_in.shape[-2] != 2:
        raise ShapeMismatch(f"Q {Q_in.shape} vs unary {unary.shape}")
    w = _check_weights(kernels, params)
    weighted = None
    for m, K in enumerate(kernels):
        if K.shape[-1] != Q_in.shape[-1]:
            raise ShapeMismatch(f"kernel {K.shape} vs field with {Q_in.shape[-1]} pixels")
        # kernels are symmetric, so Q @ K equals sum_j K_ij Q_j(l)
        msg = T.matmul(Q_in, K)
        term = w[m] * msg
        weighted = term if weighted is None else weighted + term
    compat = T.matmul(params.compatibility, weighted)
    if params.update_form == "exp_unary":
        local = T.exp(-unary) - compat
    else:
        local = -unary - compat
    return T.softmax(local, axis=-2)


def initial_marginals(unary) -> Tensor:
    return T.softmax(-T.as_tensor(unary), axis=-2)


def crf_infer(unary, kernels: Sequence, params: CrfParams, steps: Optional[int] = None, trace: Optional[list] = None) -> Tensor:
    """Mean-field marginals after ``steps`` updates starting from softmax(-unary).

    ``steps`` defaults to ``params.t_test``.  If ``trace`` is a list every iterate
    (including the initial one) is appended to it.
    """
    steps = params.t_test if steps is None else steps
    if steps < 1:
        raise BadParam(f"steps must be >= 1, got {steps}")
    Q = initial_marginals(unary)
    if trace is not None:
        trace.append(Q)
    for _ in range(steps):
        Q = meanfield_step(Q, unary, kernels, params)
        if trace is not None:
            trace.append(Q)
    return Q


def exact_marginals(unary, kernels: Sequence, params: CrfParams) -> np.ndarray:
    """Exact per-pixel marginals of exp(-E) by enumerating every labelling."""
    psi = np.asarray(unary.data if isinstance(unary, Tensor) else unary, dtype=np.float64)
    if psi.ndim != 2 or psi.shape[0] != 2:
        raise ShapeMismatch(f"expected a unary field [2, N], got {psi.shape}")
    n = psi.shape[1]
    if n > MAX_EXACT_PIXELS:
        raise FieldTooLarge(f"exact enumeration limited to {MAX_EXACT_PIXELS} pixels, got {n}")
    weights = _check_weights(kernels, params).data
    pair = np.zeros((n, n))
    for wm, K in zip(weights, kernels):
        pair += wm * np.asarray(K)
    upper = np.triu(pair, 1)
    labels = ((np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1).astype(np.float64)
    energy = (labels * psi[1] + (1 - labels) * psi[0]).sum(axis=1)
    # sum_{i<j} W_ij [y_i != y_j] with y_i + y_j - 2 y_i y_j as the disagreement indicator
    energy += labels @ (upper.sum(axis=1) + upper.sum(axis=0)) - 2.0 * ((labels @ upper) * labels).sum(axis=1)
    logp = -energy - np.max(-energy)
    p = np.exp(logp)
    p /= p.sum()
    fg = p @ labels
    return np.stack([1.0 - fg, fg])


def crf_nll_loss(Q, mask) -> Tensor:
    """Mean over pixels (and images) of ``-log Q(true label)``, floored at 1e-12."""
    Q = T.as_tensor(Q)
    mask = np.asarray(mask, dtype=np.float64).reshape(Q.shape[:-2] + (Q.shape[-1],))
    target = np.stack([1.0 - mask, mask], axis=-2)
    picked = (T.log(Q, floor=PROB_FLOOR) * target).sum(axis=-2)
    return -picked.mean()


def flatten_field(field) -> Tensor:
    """[..., 2, H, W] -> [..., 2, H*W]."""
    field = T.as_tensor(field)
    return field.reshape(field.shape[:-2] + (field.shape[-2] * field.shape[-1],))
