"""L2-normalised adversarial perturbations and the combined training objective.

``model_eval(images, masks)`` is any callable returning the scalar mean per-pixel
log-likelihood of ``masks`` given ``images`` as a :class:`Tensor`.  The same pixel
mean normalisation is used for the clean and the adversarial term so that the two
coincide as epsilon goes to zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import BadParam, DegenerateGradient, NonFinite
from .tensor import Tensor

DEGENERATE_NORM = 1e-12

ModelEval = Callable[[Tensor, np.ndarray], Tensor]


@dataclass
class Perturbation:
    R: np.ndarray
    epsilon: float
    source_grad_norm: float


def input_gradient(model_eval: Callable, image, masks=None, retain_graph: bool = False) -> np.ndarray:
    """Exact gradient of the log-likelihood with respect to every input pixel.

    Parameters referenced by ``model_eval`` do not receive gradient from this call.
    """
    x = Tensor(np.asarray(image.data if isinstance(image, Tensor) else image), requires_grad=True)
    ll = model_eval(x) if masks is None else model_eval(x, masks)
    (g,) = T.grad(ll, [x], retain_graph=retain_graph)
    if not np.all(np.isfinite(g)):
        raise NonFinite("input gradient is not finite")
    return g


def make_perturbation(g, epsilon: float) -> Perturbation:
    """``R = -epsilon * g / ||g||_2``; raises DegenerateGradient when ``||g||_2 < 1e-12``."""
    if not epsilon > 0:
        raise BadParam(f"epsilon must be positive, got {epsilon}")
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g.ravel()))
    if norm < DEGENERATE_NORM:
        raise DegenerateGradient(f"gradient norm {norm:.3e} is below {DEGENERATE_NORM}")
    return Perturbation(-epsilon * (g / norm), float(epsilon), norm)


def batch_perturbations(g: np.ndarray, epsilon: float) -> tuple:
    """Per-image perturbations for a gradient batch [B, ...].

    Images whose gradient is degenerate get a zero perturbation and are flagged.
    """
    R = np.zeros_like(g)
    degenerate = np.zeros(len(g), dtype=bool)
    for n in range(len(g)):
        try:
            R[n] = make_perturbation(g[n], epsilon).R
        except DegenerateGradient:
            degenerate[n] = True
    return R, degenerate


def _adversarial_term(model_eval, images: np.ndarray, masks, epsilon: float, clean_graph: Optional[tuple] = None) -> Tensor:
    if clean_graph is None:
        x = Tensor(images, requires_grad=True)
        ll = model_eval(x, masks)
        (g,) = T.grad(ll, [x])
    else:
        x, ll = clean_graph
        (g,) = T.grad(ll, [x], retain_graph=True)
    R, _ = batch_perturbations(g, epsilon)
    # R is a constant: no gradient flows through the perturbation itself
    return -model_eval(Tensor(images + R), masks)


def adversarial_loss(model_eval, images, masks, epsilon: float) -> Tensor:
    """Mean negative log-likelihood of the batch at its adversarially perturbed inputs."""
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    if len(images) == 0:
        raise BadParam("adversarial_loss needs a non-empty batch")
    return _adversarial_term(model_eval, images, masks, epsilon)


def crf_penalty(crf_params: Sequence[Tensor], lam: float) -> Optional[Tensor]:
    """``lam / 2 * sum ||t||^2`` over the CRF-side parameters, or None if there are none."""
    if lam < 0:
        raise BadParam(f"lambda must be >= 0, got {lam}")
    total = None
    for t in crf_params:
        sq = (t * t).sum()
        total = sq if total is None else total + sq
    return None if total is None else total * (0.5 * lam)


def total_loss(model_eval, images, masks, epsilon: Optional[float], lam: float, crf_params: Sequence[Tensor] = ()) -> Tensor:
    """Adversarial + empirical loss + L2 penalty on CRF-side parameters only.

    ``epsilon=None`` drops the adversarial term (plain empirical training).
    """
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    if len(images) == 0:
        raise BadParam("total_loss needs a non-empty batch")
    x = Tensor(images, requires_grad=epsilon is not None)
    clean_ll = model_eval(x, masks)
    loss = -clean_ll
    if epsilon is not None:
        loss = _adversarial_term(model_eval, images, masks, epsilon, clean_graph=(x, clean_ll)) + loss
    penalty = crf_penalty(crf_params, lam)
    if penalty is not None:
        loss = loss + penalty
    return loss
