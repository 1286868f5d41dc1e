"""Evidence activations and the Dirichlet probability/uncertainty transform.

Also hosts the two softmax-side baselines: normalized-entropy uncertainty and
temperature scaling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import softmax

from .grid import VOID, check_labels

Activation = Literal["softplus", "relu"]

TEMPERATURE_BOUNDS = (0.05, 20.0)


def softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # equals x + log1p(exp(-x)) for x > 0 and log1p(exp(x)) otherwise
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    """Logit whose softplus is ``y`` (``y > 0``)."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def evidence(logits: np.ndarray, activation: Activation = "softplus") -> np.ndarray:
    if activation == "softplus":
        return softplus(logits)
    if activation == "relu":
        return np.maximum(np.asarray(logits, dtype=np.float64), 0.0)
    raise ValueError(f"unknown activation {activation!r}")


def evidence_derivative(logits: np.ndarray, activation: Activation = "softplus") -> np.ndarray:
    """d evidence / d logit; the ReLU kink at 0 takes derivative 0."""
    if activation == "softplus":
        return sigmoid(logits)
    if activation == "relu":
        return (np.asarray(logits) > 0).astype(np.float64)
    raise ValueError(f"unknown activation {activation!r}")


@dataclass(frozen=True)
class DirichletField:
    """Per-pixel Dirichlet parameters ``alpha`` (H, W, C) and strength (H, W, 1)."""

    alpha: np.ndarray
    strength: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[-1]


def dirichlet_from_logits(logits: np.ndarray, activation: Activation = "softplus") -> DirichletField:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] < 2:
        raise ValueError("a Dirichlet needs at least two classes")
    alpha = evidence(logits, activation) + 1.0
    return DirichletField(alpha, alpha.sum(axis=-1, keepdims=True))


def class_probabilities(field: DirichletField) -> np.ndarray:
    return field.alpha / field.strength


def predictive_uncertainty(field: DirichletField) -> np.ndarray:
    return field.num_classes / field.strength


def normalized_entropy(probs: np.ndarray) -> np.ndarray:
    """Entropy of each pixel's class distribution divided by ``ln C``, shape (H, W, 1)."""
    probs = np.asarray(probs, dtype=np.float64)
    if (probs < 0).any():
        raise ValueError("negative probability")
    c = probs.shape[-1]
    if c < 2:
        raise ValueError("normalized entropy needs at least two classes")
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
    u = -plogp.sum(axis=-1, keepdims=True) / np.log(c)
    return np.clip(u, 0.0, 1.0)


def entropy_confidence(probs: np.ndarray) -> np.ndarray:
    return 1.0 - normalized_entropy(probs)


def temperature_scale(logits: np.ndarray, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return np.asarray(logits, dtype=np.float64) / temperature


def _flatten_calibration_set(logits: Sequence[np.ndarray], labels: Sequence[np.ndarray]):
    if len(logits) == 0 or len(logits) != len(labels):
        raise ValueError("calibration set must be non-empty with one label grid per logit grid")
    xs, ys = [], []
    for lg, lb in zip(logits, labels):
        lg = np.asarray(lg, dtype=np.float64)
        lb = check_labels(lb, lg.shape[-1])
        if lb.shape != lg.shape[:2]:
            raise ValueError(f"label grid {lb.shape} does not match logits {lg.shape}")
        keep = lb != VOID
        xs.append(lg[keep])
        ys.append(lb[keep])
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    if y.size == 0:
        raise ValueError("all calibration pixels are VOID")
    return x, y


def temperature_nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    """Mean softmax cross-entropy of ``logits / T`` over flattened pixels."""
    z = logits / temperature
    top = np.argmax(z, axis=-1)[:, None]
    zmax = np.take_along_axis(z, top, axis=-1)
    rest = np.exp(z - zmax)
    np.put_along_axis(rest, top, 0.0, axis=-1)
    # log1p keeps the loss resolvable when the label dominates (NLL ~ 1e-18)
    margin = zmax[:, 0] - np.take_along_axis(z, labels[:, None], axis=-1)[:, 0]
    return float(np.mean(margin + np.log1p(rest.sum(axis=-1))))


def fit_temperature(logits: Sequence[np.ndarray], labels: Sequence[np.ndarray], tol: float = 1e-4) -> float:
    """Fit the softmax temperature minimizing cross-entropy on a calibration set.

    The search runs over ``log T`` on ``[ln 0.05, ln 20]`` with bounded Brent;
    the objective is convex in ``1/T`` and unimodal on the bracket.
    """
    x, y = _flatten_calibration_set(logits, labels)
    lo, hi = np.log(TEMPERATURE_BOUNDS[0]), np.log(TEMPERATURE_BOUNDS[1])
    res = minimize_scalar(
        lambda log_t: temperature_nll(x, y, np.exp(log_t)),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": tol},
    )
    return float(np.exp(res.x))


def softmax_probabilities(logits: np.ndarray) -> np.ndarray:
    return softmax(np.asarray(logits, dtype=np.float64), axis=-1)
