"""Losses, AdaMax optimizer and the joint training loop.

The multi-task objective is an affine combination of a classification
cross-entropy and a segmentation Dice loss, weighted by ``lambda`` in
[0, 1]: at lambda = 1 the segmentation path receives no gradient, at
lambda = 0 the classification head is frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .network import OrganClass, UNetModel
from .tensor import Tensor

DICE_EPS = 1e-6
ADAMAX_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lam: float

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")


@dataclass
class LossReport:
    """Per-epoch (or per-batch) loss summary."""

    l_cls: float
    l_seg: float
    l_joint: float
    lam: float
    batch_size: int


@dataclass(frozen=True)
class TrainConfig:
    lam: float
    lr0: float = 5e-4
    decay_gamma: float = 0.97
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0

    def validate(self) -> None:
        LossWeights(self.lam)
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not (0.0 < self.decay_gamma <= 1.0):
            raise ValueError(f"decay_gamma must be in (0, 1], got {self.decay_gamma}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(class_logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over a batch, via max-shifted log-sum-exp."""
    n, c = class_logits.shape
    labels = [int(l) for l in labels]
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for batch of {n}")
    if any(l < 0 or l >= c for l in labels):
        raise ValueError(f"labels must be in [0, {c}), got {labels}")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = T.tsum(T.mul(T.log_softmax(class_logits), Tensor(onehot)))
    return (-1.0 / n) * picked


def dice_loss(pred_probs: Tensor, true_mask: Tensor) -> Tensor:
    """Soft Dice loss with squared-sum denominator, summed jointly over the
    whole batch; smoothing keeps empty masks finite."""
    if pred_probs.shape != true_mask.shape:
        raise T.ShapeError(
            f"prediction {pred_probs.shape} vs mask {true_mask.shape} mismatch")
    if pred_probs.data.min() < 0.0 or pred_probs.data.max() > 1.0:
        raise ValueError("pred_probs must lie in [0, 1] (apply sigmoid first)")
    inter = T.tsum(T.mul(pred_probs, true_mask))
    denom = T.tsum(T.mul(pred_probs, pred_probs)) + T.tsum(T.mul(true_mask, true_mask))
    # 1 - (2*inter + eps) / (denom + eps), kept differentiable via log/exp-free ops
    ratio = _scalar_div(2.0 * inter + DICE_EPS, denom + DICE_EPS)
    return 1.0 + (-ratio)


def _scalar_div(num: Tensor, den: Tensor) -> Tensor:
    """Differentiable scalar division built from the primitive set."""
    data = np.asarray(num.data / den.data)

    def bw(g):
        return g / den.data, -g * num.data / (den.data * den.data)

    return T._node(data, (num, den), bw)


def joint_loss(l_cls: Tensor, l_seg: Tensor, w: LossWeights) -> Tensor:
    """lambda * l_cls + (1 - lambda) * l_seg."""
    return w.lam * l_cls + (1.0 - w.lam) * l_seg


# ---------------------------------------------------------------------------
# AdaMax
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Per-parameter first moment and infinity-norm accumulator."""

    m: list[np.ndarray]
    u: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999

    @classmethod
    def for_params(cls, params, beta1: float = 0.9, beta2: float = 0.999) -> "OptimizerState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   u=[np.zeros_like(p.data) for p in params],
                   beta1=beta1, beta2=beta2)


def adamax_step(params, grads, state: OptimizerState, lr_t: float) -> None:
    """One in-place AdaMax update.

    m <- b1*m + (1-b1)*g;  u <- max(b2*u, |g|);
    theta <- theta - lr_t/(1-b1^t) * m/(u + 1e-12).
    """
    if len(params) != len(state.m):
        raise ValueError(f"{len(params)} params vs optimizer state of {len(state.m)}")
    state.t += 1
    bias = 1.0 - state.beta1 ** state.t
    for p, g, m, u in zip(params, grads, state.m, state.u):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise T.ShapeError(f"gradient shape {g.shape} vs parameter {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        p.data = p.data - (lr_t / bias) * m / (u + ADAMAX_EPS)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _stack_batch(samples, idx):
    imgs = np.stack([samples[i].image for i in idx])[:, None, :, :]
    masks = np.stack([samples[i].mask.astype(np.float64) for i in idx])[:, None, :, :]
    labels = [int(samples[i].organ) for i in idx]
    return Tensor(imgs), Tensor(masks), labels


def compute_batch_loss(model: UNetModel, images: Tensor, masks: Tensor, labels,
                       weights: LossWeights, mode: str = "train"):
    """Forward pass plus the three losses; returns (l_joint, l_cls, l_seg)."""
    out = model.forward(images, mode)
    probs = T.sigmoid(out.seg_logits)
    l_seg = dice_loss(probs, masks)
    l_cls = cross_entropy(out.class_logits, labels)
    return joint_loss(l_cls, l_seg, weights), l_cls, l_seg


def train(model: UNetModel, samples, config: TrainConfig) -> list[LossReport]:
    """Train in place; returns one loss report per epoch.

    Batches are drawn with a seeded shuffle per epoch; epoch e uses
    learning rate lr0 * decay_gamma**e.  Fully deterministic given the
    seed.
    """
    config.validate()
    if not samples:
        raise ValueError("empty training dataset")
    weights = LossWeights(config.lam)
    params = model.parameters()
    state = OptimizerState.for_params(params)
    rng = np.random.default_rng(config.seed)
    n = len(samples)

    history: list[LossReport] = []
    for epoch in range(config.epochs):
        lr_t = config.lr0 * config.decay_gamma ** epoch
        perm = rng.permutation(n)
        cls_sum = seg_sum = 0.0
        count = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            if len(idx) < 2:
                continue  # batchnorm needs at least 2 elements
            images, masks, labels = _stack_batch(samples, idx)
            l_joint, l_cls, l_seg = compute_batch_loss(model, images, masks, labels, weights)
            model.zero_grad()
            T.backward(l_joint)
            adamax_step(params, [p.grad for p in params], state, lr_t)
            cls_sum += l_cls.item() * len(idx)
            seg_sum += l_seg.item() * len(idx)
            count += len(idx)
        l_cls_e = cls_sum / count
        l_seg_e = seg_sum / count
        # the joint value is recomputed with the same affine formula so the
        # report invariant holds exactly
        l_joint_e = weights.lam * l_cls_e + (1.0 - weights.lam) * l_seg_e
        history.append(LossReport(l_cls=l_cls_e, l_seg=l_seg_e, l_joint=l_joint_e,
                                  lam=config.lam, batch_size=config.batch_size))
    return history


def lambda_sweep(train_samples, test_samples, lambdas, config: TrainConfig,
                 model_config, model_seed: int = 0):
    """Train and evaluate one model per lambda from the same initial seed.

    Returns one report row per lambda in the given order.  Rows at
    lambda = 0 use true-class routing for the biometric, since the
    classification head is untrained there.
    """
    from .evaluation import evaluate
    from .network import build_unet

    rows = []
    for lam in lambdas:
        try:
            weights = LossWeights(lam)
            model = build_unet(model_config, model_seed)
            cfg = TrainConfig(lam=weights.lam, lr0=config.lr0,
                              decay_gamma=config.decay_gamma, epochs=config.epochs,
                              batch_size=config.batch_size, seed=config.seed)
            train(model, train_samples, cfg)
            routing = "true" if weights.lam == 0.0 else "predicted"
            _, row = evaluate(model, test_samples, routing=routing)
            row.lam = weights.lam
            rows.append(row)
        except Exception as exc:
            raise RuntimeError(f"sweep failed at lambda={lam}: {exc}") from exc
    return rows
