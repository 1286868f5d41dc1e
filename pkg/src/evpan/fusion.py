"""Probabilistic panoptic fusion of semantic logits and instance predictions.

Pipeline: drop low-probability instances, paste each instance's mask logits
into the image, suppress heavily overlapping masks, turn mask logits and the
semantic head into probability/uncertainty fields, average the two views per
instance, and settle pixel ownership by argmax over semantic channels plus one
channel per instance.  Pixels not won by an instance fall back to the best
stuff class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evidential import Activation, class_probabilities, dirichlet_from_logits, predictive_uncertainty, softplus
from .grid import BBox, ClassConfig, OFFSET, as_map, check_dense, iou, resize_bilinear

MASK_SIZE = 28


@dataclass(frozen=True)
class InstancePrediction:
    bbox: BBox
    class_id: int
    class_prob: float
    mask_logits: np.ndarray  # (h, w) foreground logits, usually 28x28

    def __post_init__(self):
        if not 0.0 <= self.class_prob <= 1.0:
            raise ValueError(f"class probability {self.class_prob} outside [0, 1]")
        m = np.asarray(self.mask_logits, dtype=np.float64)
        if m.ndim == 3 and m.shape[2] == 1:
            m = m[..., 0]
        if m.ndim != 2 or 0 in m.shape:
            raise ValueError(f"mask logits must be (h, w), got {m.shape}")
        object.__setattr__(self, "mask_logits", m)


@dataclass
class RasterizedInstance:
    instance: InstancePrediction
    mask: np.ndarray  # (H, W) bool
    logits: np.ndarray  # (H, W), -inf outside the bbox


@dataclass
class FusedInstance:
    instance: InstancePrediction
    prob: np.ndarray  # P_F
    uncertainty: np.ndarray  # U_F


@dataclass
class PanopticResult:
    panoptic: np.ndarray  # (H, W) int64
    uncertainty: np.ndarray  # (H, W) float64
    instances_kept: list[InstancePrediction] = field(default_factory=list)


def filter_instances(instances, threshold: float = 0.5) -> list[InstancePrediction]:
    """Keep instances with ``class_prob >= threshold``, most probable first."""
    kept = [inst for inst in instances if inst.class_prob >= threshold]
    return sorted(kept, key=lambda inst: -inst.class_prob)


def rasterize_instance(inst: InstancePrediction, height: int, width: int) -> RasterizedInstance:
    inst.bbox.check_within(height, width)
    box = inst.bbox
    local = resize_bilinear(inst.mask_logits[..., None], box.height, box.width)[..., 0]
    logits = np.full((height, width), -np.inf)
    logits[box.region()] = local
    # sigmoid(l) > 0.5 exactly when l > 0
    return RasterizedInstance(inst, logits > 0, logits)


def resolve_overlaps(rasterized: list[RasterizedInstance], overlap_threshold: float = 0.5) -> list[RasterizedInstance]:
    """Greedy suppression in the given (probability-sorted) order."""
    kept: list[RasterizedInstance] = []
    for cand in rasterized:
        if all(iou(cand.mask, k.mask) <= overlap_threshold for k in kept):
            kept.append(cand)
    return kept


def instance_uncertainty_fields(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Foreground probability P_I and uncertainty U_I of a pasted mask.

    Each pixel is a two-class Dirichlet: foreground evidence from the mask
    logit, background evidence zero.  Outside the bbox (``-inf``) the
    instance claims nothing: P_I = 0, U_I = 1.
    """
    logits = np.asarray(logits, dtype=np.float64)
    outside = np.isneginf(logits)
    alpha_fg = softplus(np.where(outside, 0.0, logits)) + 1.0
    strength = alpha_fg + 1.0
    prob = np.where(outside, 0.0, alpha_fg / strength)
    unc = np.where(outside, 1.0, 2.0 / strength)
    return prob, unc


def semantic_instance_fields(p_s: np.ndarray, u_s: np.ndarray, inst: InstancePrediction):
    """Semantic view of one instance: its class channel and U_S inside the bbox."""
    p_s = np.asarray(p_s)
    u_s = as_map(u_s)
    h, w, c = p_s.shape
    if not 0 <= inst.class_id < c:
        raise ValueError(f"instance class {inst.class_id} outside [0, {c})")
    inside = inst.bbox.mask(h, w)
    p_si = np.where(inside, p_s[..., inst.class_id], 0.0)
    u_si = np.where(inside, u_s, 1.0)
    return p_si, u_si


def fuse_fields(p_i, p_si, u_i, u_si) -> tuple[np.ndarray, np.ndarray]:
    p_i, p_si, u_i, u_si = (np.asarray(a, dtype=np.float64) for a in (p_i, p_si, u_i, u_si))
    if not (p_i.shape == p_si.shape == u_i.shape == u_si.shape):
        raise ValueError("fusion fields must share one shape")
    return (p_i + p_si) / 2, (u_i + u_si) / 2


def panoptic_merge(p_s, u_s, fused: list[FusedInstance], classes: ClassConfig) -> PanopticResult:
    p_s = np.asarray(p_s, dtype=np.float64)
    u_s = as_map(u_s)
    h, w, c = p_s.shape
    if c != classes.num_classes:
        raise ValueError(f"semantic grid has {c} channels, class config {classes.num_classes}")
    if not classes.stuff:
        raise ValueError("panoptic merge needs at least one stuff class")

    stacked = np.concatenate([p_s] + [f.prob[..., None] for f in fused], axis=2)
    winner = np.argmax(stacked, axis=2)

    stuff = np.asarray(classes.stuff)
    best_stuff = stuff[np.argmax(p_s[..., stuff], axis=2)]
    panoptic = best_stuff.astype(np.int64) * OFFSET
    uncertainty = u_s.astype(np.float64).copy()

    kept = []
    next_index: dict[int, int] = {}
    for k, f in enumerate(fused):
        won = winner == c + k
        if not won.any():
            continue
        cls = f.instance.class_id
        next_index[cls] = next_index.get(cls, 0) + 1
        panoptic[won] = cls * OFFSET + next_index[cls]
        uncertainty[won] = f.uncertainty[won]
        kept.append(f.instance)
    return PanopticResult(panoptic, uncertainty, kept)


def fuse(
    semantic_logits,
    instances,
    classes: ClassConfig,
    prob_threshold: float = 0.5,
    overlap_threshold: float = 0.5,
    activation: Activation = "softplus",
) -> PanopticResult:
    """Run the full fusion pipeline on one image."""
    semantic_logits = check_dense(semantic_logits)
    field = dirichlet_from_logits(semantic_logits, activation)
    p_s = class_probabilities(field)
    u_s = predictive_uncertainty(field)[..., 0]
    h, w, _ = p_s.shape

    for inst in instances:
        if not classes.is_thing(inst.class_id):
            raise ValueError(f"instance class {inst.class_id} is not a thing class")
    candidates = filter_instances(instances, prob_threshold)
    rasterized = [rasterize_instance(inst, h, w) for inst in candidates]
    survivors = resolve_overlaps(rasterized, overlap_threshold)

    fused = []
    for r in survivors:
        p_i, u_i = instance_uncertainty_fields(r.logits)
        p_si, u_si = semantic_instance_fields(p_s, u_s, r.instance)
        p_f, u_f = fuse_fields(p_i, p_si, u_i, u_si)
        fused.append(FusedInstance(r.instance, p_f, u_f))
    return panoptic_merge(p_s, u_s, fused, classes)
