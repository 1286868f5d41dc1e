"""Evidential training losses as value + gradient kernels over logits.

Every kernel takes ``(H, W, C)`` logits and an ``(H, W)`` label grid and
returns a :class:`LossResult` whose gradient has the logits' shape.  Pixel
sums are normalised by the number of non-VOID pixels so values do not depend
on resolution; VOID pixels contribute neither value nor gradient.

Gradients are derived with respect to the Dirichlet parameters ``alpha`` and
then pushed through the evidence activation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from .evidential import Activation, evidence, evidence_derivative
from .grid import VOID, check_labels, one_hot

DEFAULT_LAMBDA_MAX = 0.06
ANNEALING_EPOCHS = 60


@dataclass(frozen=True)
class LossResult:
    value: float
    gradient: np.ndarray

    def __add__(self, other: "LossResult") -> "LossResult":
        return LossResult(self.value + other.value, self.gradient + other.gradient)

    def scaled(self, weight: float) -> "LossResult":
        return LossResult(weight * self.value, weight * self.gradient)


@dataclass(frozen=True)
class ScheduleState:
    t: int
    iters_per_epoch: int
    lambda_max: float = DEFAULT_LAMBDA_MAX

    def __post_init__(self):
        if self.t < 0 or self.iters_per_epoch < 1 or self.lambda_max < 0:
            raise ValueError(f"invalid schedule state {self}")


def lambda_schedule(state: ScheduleState) -> float:
    """KL weight ramping linearly to ``lambda_max`` over the first 60 epochs."""
    ramp = state.t / (ANNEALING_EPOCHS * state.iters_per_epoch)
    if ramp >= 1:
        return state.lambda_max
    return state.lambda_max * ramp


class _Prepared:
    """Shared per-call state: valid pixels, alpha, one-hot targets."""

    def __init__(self, logits, labels, activation: Activation):
        logits = np.asarray(logits, dtype=np.float64)
        if logits.ndim != 3:
            raise ValueError(f"logits must be (H, W, C), got {logits.shape}")
        c = logits.shape[2]
        if c < 2:
            raise ValueError("evidential losses need at least two classes")
        labels = check_labels(labels, c)
        if labels.shape != logits.shape[:2]:
            raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
        self.shape = logits.shape
        self.valid = labels != VOID
        self.n = int(self.valid.sum())
        if self.n == 0:
            raise ValueError("all pixels are VOID")
        x = logits[self.valid]
        self.logits = x
        self.labels = labels[self.valid]
        self.alpha = evidence(x, activation) + 1.0
        self.strength = self.alpha.sum(axis=1, keepdims=True)
        self.y = one_hot(self.labels[None], c)[0]
        self.dedl = evidence_derivative(x, activation)

    def finish(self, value_per_pixel_sum: float, grad_alpha: np.ndarray) -> LossResult:
        grad = np.zeros(self.shape)
        grad[self.valid] = grad_alpha * self.dedl / self.n
        return LossResult(float(value_per_pixel_sum) / self.n, grad)


def evidential_log_loss(logits, labels, activation: Activation = "softplus") -> LossResult:
    """Type-II maximum likelihood loss, mean over pixels of ``ln(S / alpha_gt)``."""
    p = _Prepared(logits, labels, activation)
    alpha_gt = (p.alpha * p.y).sum(axis=1, keepdims=True)
    value = np.sum(np.log(p.strength) - np.log(alpha_gt))
    grad = 1.0 / p.strength - p.y / alpha_gt
    return p.finish(value, grad)


def evidential_digamma_loss(logits, labels, activation: Activation = "softplus") -> LossResult:
    p = _Prepared(logits, labels, activation)
    alpha_gt = (p.alpha * p.y).sum(axis=1, keepdims=True)
    value = np.sum(digamma(p.strength) - digamma(alpha_gt))
    grad = polygamma(1, p.strength) - p.y * polygamma(1, alpha_gt)
    return p.finish(value, grad)


def evidential_mse_loss(logits, labels, activation: Activation = "softplus") -> LossResult:
    """Squared error to the one-hot target plus the Dirichlet variance term."""
    p = _Prepared(logits, labels, activation)
    s = p.strength
    prob = p.alpha / s
    var = prob * (1 - prob)
    v = var.sum(axis=1, keepdims=True)
    value = np.sum((p.y - prob) ** 2) + np.sum(v / (s + 1))
    # dL/dp at fixed S, then through p = alpha / S, plus the explicit S in 1/(S+1)
    g = -2 * (p.y - prob) + (1 - 2 * prob) / (s + 1)
    grad = (g - (g * prob).sum(axis=1, keepdims=True)) / s - v / (s + 1) ** 2
    return p.finish(value, grad)


def dirichlet_kl_uniform(alpha: np.ndarray) -> np.ndarray:
    """``KL(Dir(alpha) || Dir(1, ..., 1))`` along the last axis."""
    c = alpha.shape[-1]
    s = alpha.sum(axis=-1)
    return (
        gammaln(s)
        - gammaln(c)
        - gammaln(alpha).sum(axis=-1)
        + ((alpha - 1) * (digamma(alpha) - digamma(s)[..., None])).sum(axis=-1)
    )


def kl_regularizer(logits, labels, activation: Activation = "softplus") -> LossResult:
    """KL penalty on evidence for non-ground-truth classes.

    The ground-truth entry of alpha is replaced by 1 before measuring the
    divergence from the uniform Dirichlet, so its gradient is exactly zero.
    """
    p = _Prepared(logits, labels, activation)
    a = p.y + (1 - p.y) * p.alpha
    s = a.sum(axis=1, keepdims=True)
    c = a.shape[1]
    value = np.sum(dirichlet_kl_uniform(a))
    grad_a = (a - 1) * polygamma(1, a) - polygamma(1, s) * (s - c)
    return p.finish(value, grad_a * (1 - p.y))


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Jaccard-loss increments along a descending error ordering."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_evidential_loss(
    logits, labels, activation: Activation = "softplus", present_only: bool = False
) -> LossResult:
    """Lovász extension of the per-class Jaccard loss on evidential probabilities.

    Errors are ``1 - p`` on the ground-truth class and ``p`` elsewhere.  The
    value is the mean over all classes (or over classes present in the labels
    when ``present_only``); it is already scale-free so no pixel normalisation
    is applied.  At sorting ties the stable-sort order picks the subgradient.
    """
    p = _Prepared(logits, labels, activation)
    prob = p.alpha / p.strength
    c = prob.shape[1]
    classes = np.unique(p.labels) if present_only else np.arange(c)
    grad_p = np.zeros_like(prob)
    value = 0.0
    for k in classes:
        fg = p.y[:, k]
        err = np.abs(fg - prob[:, k])
        order = np.argsort(-err, kind="stable")
        w = lovasz_grad(fg[order])
        value += float(np.dot(err[order], w))
        weights = np.empty_like(w)
        weights[order] = w
        # d err / d p is -1 on foreground, +1 elsewhere
        grad_p[:, k] = weights * (1.0 - 2.0 * fg)
    m = len(classes)
    grad_p /= m
    s = p.strength
    grad_alpha = (grad_p - (grad_p * prob).sum(axis=1, keepdims=True)) / s
    grad = np.zeros(p.shape)
    grad[p.valid] = grad_alpha * p.dedl
    return LossResult(value / m, grad)


def semantic_loss(logits, labels, state: ScheduleState, activation: Activation = "softplus") -> LossResult:
    lam = lambda_schedule(state)
    return evidential_log_loss(logits, labels, activation) + kl_regularizer(logits, labels, activation).scaled(lam)


def mask_loss(mask_logits, mask_labels, state: ScheduleState, activation: Activation = "softplus") -> LossResult:
    """Mask-head loss; ``mask_logits`` is laid out (28, 28, K) like any dense grid."""
    return semantic_loss(mask_logits, mask_labels, state, activation)


def classification_loss(
    class_logits, gt_class: int, lambda_i: float, activation: Activation = "softplus"
) -> LossResult:
    class_logits = np.asarray(class_logits, dtype=np.float64)
    if class_logits.ndim != 1:
        raise ValueError("class logits must be a vector")
    k = class_logits.shape[0]
    if not 0 <= gt_class < k:
        raise ValueError(f"gt class {gt_class} outside [0, {k})")
    grid = class_logits[None, None, :]
    label = np.array([[gt_class]])
    res = evidential_log_loss(grid, label, activation) + kl_regularizer(grid, label, activation).scaled(lambda_i)
    return LossResult(res.value, res.gradient[0, 0])


def total_semantic_objective(
    logits, labels, state: ScheduleState, activation: Activation = "softplus"
) -> LossResult:
    return semantic_loss(logits, labels, state, activation) + lovasz_evidential_loss(logits, labels, activation)


LOSSES = {
    "log": evidential_log_loss,
    "digamma": evidential_digamma_loss,
    "mse": evidential_mse_loss,
    "kl": kl_regularizer,
    "lovasz": lovasz_evidential_loss,
}


def loss_by_name(name: str, state: ScheduleState | None = None):
    """Resolve a loss name to a ``f(logits, labels, activation)`` kernel."""
    if name in LOSSES:
        return LOSSES[name]
    if name == "total":
        state = state or ScheduleState(t=ANNEALING_EPOCHS, iters_per_epoch=1)
        return lambda logits, labels, activation="softplus": total_semantic_objective(
            logits, labels, state, activation
        )
    raise ValueError(f"unknown loss {name!r}")
