"""Central finite-difference checks for the loss kernels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .evidential import class_probabilities, dirichlet_from_logits
from .losses import loss_by_name

FD_STEP = 1e-5


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        fp = f(x)
        flat[j] = orig - step
        fm = f(x)
        flat[j] = orig
        g[j] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest componentwise deviation relative to the gradient's magnitude.

    Normalising by the larger of the two infinity norms keeps tiny gradient
    components (saturated softplus, masked channels) from dominating.
    """
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


@dataclass(frozen=True)
class GradCheck:
    loss: str
    value: float
    max_rel_error: float
    min_sort_gap: float | None = None


def random_problem(seed: int, shape: tuple[int, int, int], scale: float = 2.0):
    """Seeded logits and labels for a gradient check."""
    rng = np.random.default_rng(seed)
    logits = rng.normal(0.0, scale, size=shape)
    labels = rng.integers(0, shape[2], size=shape[:2])
    return logits, labels


def lovasz_sort_gap(logits, labels, activation="softplus") -> float:
    """Smallest distance between two per-class error values.

    A gap well above the FD step means the sort order is locally constant,
    so the Lovász loss is smooth in the finite-difference neighbourhood.
    """
    prob = class_probabilities(dirichlet_from_logits(logits, activation)).reshape(-1, logits.shape[2])
    lab = np.asarray(labels).reshape(-1)
    gap = np.inf
    for k in range(prob.shape[1]):
        err = np.sort(np.abs((lab == k) - prob[:, k]))
        if err.size > 1:
            gap = min(gap, float(np.min(np.diff(err))))
    return gap


def check_loss(name: str, logits, labels, activation="softplus", step: float = FD_STEP) -> GradCheck:
    fn = loss_by_name(name)
    res = fn(logits, labels, activation=activation)
    numeric = central_difference(lambda x: fn(x, labels, activation=activation).value, logits, step)
    gap = lovasz_sort_gap(logits, labels, activation) if name in ("lovasz", "total") else None
    return GradCheck(name, res.value, relative_error(res.gradient, numeric), gap)
