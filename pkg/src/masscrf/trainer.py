"""End-to-end Adam training and evaluation of the eight FCN / CRF / adversarial variants."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import metrics
from . import tensor as T
from .adversarial import total_loss
from .checkpoint import Checkpoint
from .crf import CrfParams, build_kernels, crf_infer, crf_nll_loss, flatten_field
from .dataio import Dataset, NormalizationStats, compute_stats, estimate_prior, normalize
from .errors import BadParam, EmptyDataset, NonFinite, VariantMismatch
from .fcn import FcnModel, fcn_forward, fcn_nll_loss, fuse_unaries, unary_from_fcn
from .tensor import Tensor

logger = logging.getLogger(__name__)

VARIANTS = (
    "fcn",
    "fcn_adv",
    "fcn_crf",
    "fcn_crf_adv",
    "multi_fcn",
    "multi_fcn_adv",
    "multi_fcn_crf",
    "multi_fcn_crf_adv",
)
MULTI_NETS = ("fcn1", "fcn2", "fcn3", "fcn4")
TRIMAP_WIDTHS = (1, 2, 3, 4, 5)


@dataclass
class TrainConfig:
    variant: str = "fcn"
    lr: float = 0.003
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 16
    epsilon: float = 0.1
    lam: float = 0.5
    seed: int = 0
    fcn_config: str = "fcn1"
    train_prior: bool = True
    crf_theta_alpha: float = 3.0
    crf_theta_beta: float = 0.1
    crf_theta_gamma: float = 3.0
    crf_w_init: float = 1.0
    crf_t_train: int = 5
    crf_t_test: int = 10
    crf_update_form: str = "exp_unary"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise BadParam(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.epochs < 0 or self.batch_size < 1:
            raise BadParam("epochs must be >= 0 and batch_size >= 1")
        if self.adversarial and not self.epsilon > 0:
            raise BadParam("adversarial variants need epsilon > 0")

    @property
    def adversarial(self) -> bool:
        return self.variant.endswith("_adv")

    @property
    def uses_crf(self) -> bool:
        return "crf" in self.variant

    @property
    def multi(self) -> bool:
        return self.variant.startswith("multi")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class SegmentationNet:
    """FCN (or four fused FCNs) optionally followed by the unrolled CRF."""

    def __init__(self, cfg: TrainConfig, prior: Optional[np.ndarray] = None, stats: Optional[NormalizationStats] = None):
        self.cfg = cfg
        names = MULTI_NETS if cfg.multi else (cfg.fcn_config,)
        self.fcns = {n: FcnModel(n, prior, seed=cfg.seed, train_prior=cfg.train_prior) for n in names}
        self.fusion = Tensor(np.full(len(names), 1.0 / len(names)), requires_grad=True) if cfg.multi else None
        self.crf = None
        if cfg.uses_crf:
            self.crf = CrfParams(
                kernel_weights=Tensor([cfg.crf_w_init, cfg.crf_w_init], requires_grad=True),
                theta_alpha=cfg.crf_theta_alpha,
                theta_beta=cfg.crf_theta_beta,
                theta_gamma=cfg.crf_theta_gamma,
                t_train=cfg.crf_t_train,
                t_test=cfg.crf_t_test,
                update_form=cfg.crf_update_form,
            )
        self.stats = stats

    # parameters ---------------------------------------------------------------
    def all_tensors(self) -> dict:
        out = {}
        for n, model in self.fcns.items():
            for k, t in model.params.items():
                out[f"{n}.{k}"] = t
        if self.fusion is not None:
            out["fusion.w"] = self.fusion
        if self.crf is not None:
            out["crf.w"] = self.crf.kernel_weights
        return out

    def parameters(self) -> dict:
        return {k: t for k, t in self.all_tensors().items() if t.requires_grad}

    def crf_side(self) -> list:
        """Parameters under the L2 penalty: CRF kernel weights and unary fusion weights."""
        return [t for t in (self.crf.kernel_weights if self.crf else None, self.fusion) if t is not None]

    def state_arrays(self) -> dict:
        arrays = {k: t.data.copy() for k, t in self.all_tensors().items()}
        if self.stats is not None:
            arrays["norm.mean"] = self.stats.mean
            arrays["norm.std"] = self.stats.std
        return arrays

    def load_arrays(self, arrays: dict) -> None:
        for k, t in self.all_tensors().items():
            if k not in arrays:
                raise VariantMismatch(f"checkpoint has no array {k!r}")
            if arrays[k].shape != t.shape:
                raise VariantMismatch(f"array {k!r}: checkpoint shape {arrays[k].shape} vs model {t.shape}")
            t.data = arrays[k].copy()
        if "norm.mean" in arrays:
            self.stats = NormalizationStats(arrays["norm.mean"], arrays["norm.std"])

    # forward ------------------------------------------------------------------
    def inputs(self, images01: np.ndarray) -> np.ndarray:
        """[B,40,40] enhanced images -> normalised network input [B,1,40,40]."""
        x = normalize(images01, self.stats) if self.stats is not None else np.asarray(images01, dtype=np.float64)
        return x[:, None]

    def kernels(self, images01: np.ndarray) -> Optional[list]:
        if self.crf is None:
            return None
        return build_kernels(np.asarray(images01)[:, None], self.crf)

    def field(self, x, kernels=None, steps: Optional[int] = None) -> Tensor:
        """Label distribution per pixel: [B,2,40,40] without CRF, [B,2,1600] with it."""
        probs = [fcn_forward(m, x) for m in self.fcns.values()]
        if self.fusion is None and self.crf is None:
            return probs[0]
        unaries = [unary_from_fcn(p) for p in probs]
        unary = unaries[0] if self.fusion is None else fuse_unaries(unaries, self.fusion)
        if self.crf is None:
            return T.softmax(-unary, axis=1)
        steps = self.crf.t_test if steps is None else steps
        return crf_infer(flatten_field(unary), kernels, self.crf, steps=steps)

    def nll(self, field_out: Tensor, masks) -> Tensor:
        if self.crf is None:
            return fcn_nll_loss(field_out, masks)
        return crf_nll_loss(field_out, masks)

    def predict(self, images01: np.ndarray, steps: Optional[int] = None, batch_size: int = 16) -> np.ndarray:
        """Final per-pixel distributions [B,2,40,40] (no tape is kept)."""
        out = []
        for start in range(0, len(images01), batch_size):
            chunk = np.asarray(images01[start : start + batch_size])
            f = self.field(Tensor(self.inputs(chunk)), self.kernels(chunk), steps).data
            out.append(f.reshape(len(chunk), 2, *chunk.shape[1:]))
        return np.concatenate(out)


# ---------------------------------------------------------------------------
# Adam


def adam_step(params: dict, grads: dict, moments: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> tuple:
    """One bias-corrected Adam update.

    ``moments`` is ``{"t": int, "m": {name: array}, "v": {name: array}}``; missing
    entries start at zero.  Returns new ``(params, moments)`` without mutating inputs.
    """
    b1, b2 = betas
    t = moments.get("t", 0) + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if not np.all(np.isfinite(g)):
            raise NonFinite(f"non-finite gradient for {name}")
        m = b1 * moments.get("m", {}).get(name, 0.0) + (1.0 - b1) * g
        v = b2 * moments.get("v", {}).get(name, 0.0) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, {"t": t, "m": new_m, "v": new_v}


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    loss: float
    dice_train: float


def _rng_state_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def build_checkpoint(net: SegmentationNet, cfg: TrainConfig, moments: dict, epoch: int, rng: np.random.Generator) -> Checkpoint:
    arrays = net.state_arrays()
    for name in net.parameters():
        if name in moments.get("m", {}):
            arrays[f"adam.m.{name}"] = moments["m"][name]
            arrays[f"adam.v.{name}"] = moments["v"][name]
    meta = {"train_config": asdict(cfg), "epoch": epoch, "adam_t": moments.get("t", 0), "rng_state": _rng_state_json(rng)}
    return Checkpoint(arrays, meta)


def restore(ckpt: Checkpoint) -> tuple:
    """Rebuild ``(net, cfg, moments, epoch, rng)`` from a checkpoint."""
    cfg = TrainConfig.from_dict(ckpt.config)
    net = SegmentationNet(cfg)
    net.load_arrays(ckpt.arrays)
    moments = {"t": int(ckpt.meta.get("adam_t", 0)), "m": {}, "v": {}}
    for name in net.parameters():
        if f"adam.m.{name}" in ckpt.arrays:
            moments["m"][name] = ckpt.arrays[f"adam.m.{name}"]
            moments["v"][name] = ckpt.arrays[f"adam.v.{name}"]
    rng = np.random.default_rng()
    if "rng_state" in ckpt.meta:
        rng.bit_generator.state = ckpt.meta["rng_state"]
    return net, cfg, moments, ckpt.epoch, rng


def train_step(net: SegmentationNet, cfg: TrainConfig, images01: np.ndarray, masks: np.ndarray) -> tuple:
    """Forward, total loss and backward for one batch.

    Returns ``(loss, grads, clean_field)``; parameter ``.grad`` buffers are cleared.
    """
    params = net.parameters()
    for t in params.values():
        t.zero_grad()
    x = net.inputs(images01)
    kernels = net.kernels(images01)
    steps = cfg.crf_t_train
    captured = []

    def model_eval(xt, m):
        out = net.field(xt, kernels, steps)
        if not captured:
            captured.append(out.data)
        return -net.nll(out, m)

    eps = cfg.epsilon if cfg.adversarial else None
    loss = total_loss(model_eval, x, masks, eps, cfg.lam, net.crf_side())
    T.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
    for t in params.values():
        t.zero_grad()
    return loss.item(), grads, captured[0]


def _batch_dice(field_out: np.ndarray, masks: np.ndarray) -> list:
    pred = field_out.reshape(len(masks), 2, -1).argmax(axis=1).reshape(masks.shape)
    return [metrics.dice(p, m) for p, m in zip(pred, masks)]


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    resume: Optional[Checkpoint] = None,
    on_epoch: Optional[Callable[[Checkpoint, EpochLog], None]] = None,
) -> tuple:
    """Train ``cfg.variant`` on a (preprocessed, augmented) train split.

    Returns ``(checkpoint, logs)`` where ``logs`` holds one :class:`EpochLog` per
    epoch run in this call.  ``on_epoch`` is called after each epoch with the
    checkpoint for that point, which is how the CLI persists resumable state.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    images, masks = dataset.images(), dataset.masks()
    if resume is not None:
        net, saved_cfg, moments, start, rng = restore(resume)
        if saved_cfg.variant != cfg.variant:
            raise VariantMismatch(f"checkpoint variant {saved_cfg.variant!r} vs requested {cfg.variant!r}")
        cfg = TrainConfig.from_dict(dict(asdict(saved_cfg), epochs=cfg.epochs))
    else:
        stats = dataset.normalization_stats or compute_stats(images)
        net = SegmentationNet(cfg, estimate_prior(dataset), stats)
        moments, start = {"t": 0, "m": {}, "v": {}}, 0
        rng = np.random.default_rng(cfg.seed)

    params = net.parameters()
    logs = []
    step = moments["t"]
    for epoch in range(start, cfg.epochs):
        order = rng.permutation(len(dataset))
        losses, dices, weights = [], [], []
        for b0 in range(0, len(order), cfg.batch_size):
            idx = order[b0 : b0 + cfg.batch_size]
            try:
                loss, grads, out = train_step(net, cfg, images[idx], masks[idx])
                new_p, moments = adam_step(
                    {k: t.data for k, t in params.items()},
                    grads,
                    moments,
                    cfg.lr,
                    (cfg.adam_beta1, cfg.adam_beta2),
                    cfg.adam_eps,
                )
            except NonFinite as exc:
                raise NonFinite(f"training aborted at step {step}: {exc}") from exc
            step += 1
            for k, t in params.items():
                t.data = new_p[k]
            losses.append(loss)
            weights.append(len(idx))
            dices.extend(_batch_dice(out, masks[idx]))
        entry = EpochLog(epoch + 1, float(np.average(losses, weights=weights)), float(np.mean(dices)))
        logs.append(entry)
        logger.info("epoch %d loss %.5f dice_train %.4f", entry.epoch, entry.loss, entry.dice_train)
        if on_epoch is not None:
            on_epoch(build_checkpoint(net, cfg, moments, epoch + 1, rng), entry)
    return build_checkpoint(net, cfg, moments, max(start, cfg.epochs), rng), logs


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    variant: str
    ids: list
    dice: list
    mean_dice: float
    trimap: dict
    predictions: np.ndarray
    correct: np.ndarray
    both_empty: int = 0
    probabilities: Optional[np.ndarray] = field(default=None, repr=False)


def evaluate(checkpoint: Checkpoint, dataset: Dataset, variant: Optional[str] = None, steps: Optional[int] = None) -> EvalReport:
    """Score a checkpoint with T_test mean-field steps and per-pixel argmax decisions.

    Trimap accuracies pool band pixels over every image of the set.
    """
    net, cfg, *_ = restore(checkpoint)
    if variant is not None and variant != cfg.variant:
        raise VariantMismatch(f"checkpoint holds {cfg.variant!r}, evaluation requested {variant!r}")
    if len(dataset) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    images, masks = dataset.images(), dataset.masks()
    probs = net.predict(images, steps=steps)
    pred = probs.argmax(axis=1)
    dices = [metrics.dice(p, m) for p, m in zip(pred, masks)]
    both_empty = int(sum(1 for p, m in zip(pred, masks) if not p.any() and not m.any()))
    trimap = {}
    for w in TRIMAP_WIDTHS:
        counts = [metrics.trimap_counts(p, m, w) for p, m in zip(pred, masks)]
        total = sum(c[1] for c in counts)
        trimap[w] = 1.0 if total == 0 else sum(c[0] for c in counts) / total
    return EvalReport(
        cfg.variant,
        dataset.ids(),
        dices,
        float(np.mean(dices)),
        trimap,
        pred,
        pred == masks,
        both_empty,
        probs,
    )
