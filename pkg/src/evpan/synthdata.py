"""Seeded synthetic scenes and predictors with controllable calibration.

Randomness comes from counter-based Philox generators keyed by
``(seed, stream)``: stream 0 draws the scene, stream 1 the predictor noise.
Scene ``k`` of a batch started at ``seed`` uses seed ``seed + k``.

Scene construction (stream 0, in this order):

1. ``2 * n_stuff`` Voronoi sites, each ``(y, x)`` uniform on the image
   (``rng.uniform(0, H)``, ``rng.uniform(0, W)``); site ``k`` carries stuff
   class ``k % n_stuff``.  Every pixel takes the class of its nearest site
   (squared distance from the pixel centre, ties to the lower site index).
2. For instance ``j``, class ``n_stuff + j % n_thing``.  Up to
   ``MAX_PLACEMENT_TRIES`` attempts each draw: shape (``rng.random() < 0.5``
   means ellipse), height and width (``rng.integers(lo, hi + 1)`` with
   ``lo = max(2, min(H, W) // 8)``, ``hi = max(lo, min(H, W) // 4)``), and the
   top-left corner (``rng.integers(0, H - h + 1)``, ``rng.integers(0, W - w + 1)``).
   An attempt is accepted when it does not touch any earlier instance.
   Instance indices run 1..n per class in placement order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from .evidential import inverse_softplus, softplus
from .fusion import MASK_SIZE, InstancePrediction
from .grid import OFFSET, BBox, ClassConfig, bounding_box, resize_bilinear

SCENE_STREAM = 0
NOISE_STREAM = 1
MAX_PLACEMENT_TRIES = 100
BACKGROUND_LOGIT = -30.0
MAX_CONFIDENCE = 1.0 - 1e-9


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    n_stuff: int = 3
    n_thing: int = 2
    n_instances: int = 4
    noise_level: float = 0.0
    target_confidence: float = 0.9
    seed: int = 0
    calibrated: bool = False

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("scene must be at least 1x1")
        if self.n_stuff < 1:
            raise ValueError("need at least one stuff class")
        if self.n_thing < 0 or self.n_instances < 0:
            raise ValueError("negative class or instance count")
        if self.n_instances and not self.n_thing:
            raise ValueError("instances need at least one thing class")
        if not 0 <= self.noise_level <= 1:
            raise ValueError("noise level must lie in [0, 1]")
        if not 0 < self.target_confidence <= 1:
            raise ValueError("target confidence must lie in (0, 1]")

    @property
    def num_classes(self) -> int:
        return self.n_stuff + self.n_thing

    @property
    def classes(self) -> ClassConfig:
        return ClassConfig(
            self.num_classes, tuple(range(self.n_stuff)), tuple(range(self.n_stuff, self.num_classes))
        )

    def with_seed(self, seed: int) -> "SceneConfig":
        return SceneConfig(**{**asdict(self), "seed": seed})

    def to_dict(self) -> dict:
        return asdict(self)


def stream(seed: int, stream_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed % 2**64, stream_id]))


def _shape_mask(ellipse: bool, h: int, w: int) -> np.ndarray:
    if not ellipse:
        return np.ones((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    ry, rx = h / 2, w / 2
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def generate_scene(cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth panoptic grid and semantic label grid for one scene."""
    rng = stream(cfg.seed, SCENE_STREAM)
    h, w = cfg.height, cfg.width

    n_sites = 2 * cfg.n_stuff
    sites = np.empty((n_sites, 2))
    for k in range(n_sites):
        sites[k] = rng.uniform(0, h), rng.uniform(0, w)
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (yy[..., None] + 0.5 - sites[:, 0]) ** 2 + (xx[..., None] + 0.5 - sites[:, 1]) ** 2
    labels = (np.argmin(d2, axis=2) % cfg.n_stuff).astype(np.int64)
    panoptic = labels * OFFSET

    occupied = np.zeros((h, w), dtype=bool)
    lo = max(2, min(h, w) // 8)
    hi = max(lo, min(h, w) // 4)
    next_index: dict[int, int] = {}
    for j in range(cfg.n_instances):
        cls = cfg.n_stuff + j % cfg.n_thing
        for _ in range(MAX_PLACEMENT_TRIES):
            ellipse = rng.random() < 0.5
            sh = int(rng.integers(lo, hi + 1))
            sw = int(rng.integers(lo, hi + 1))
            sh, sw = min(sh, h), min(sw, w)
            y0 = int(rng.integers(0, h - sh + 1))
            x0 = int(rng.integers(0, w - sw + 1))
            shape = _shape_mask(ellipse, sh, sw)
            if not (occupied[y0 : y0 + sh, x0 : x0 + sw] & shape).any():
                break
        else:
            raise ValueError(f"could not place instance {j} without overlap after {MAX_PLACEMENT_TRIES} tries")
        next_index[cls] = next_index.get(cls, 0) + 1
        region = np.zeros((h, w), dtype=bool)
        region[y0 : y0 + sh, x0 : x0 + sw] = shape
        occupied |= region
        labels[region] = cls
        panoptic[region] = cls * OFFSET + next_index[cls]
    return panoptic, labels


def evidence_for_confidence(confidence, num_classes: int, other_evidence: float = 0.0):
    """Evidence on one class giving Dirichlet confidence ``1 - C/S``.

    ``other_evidence`` is the evidence already held by each remaining class.
    """
    confidence = np.minimum(np.asarray(confidence, dtype=np.float64), MAX_CONFIDENCE)
    strength = num_classes / (1.0 - confidence)
    return np.maximum(strength - num_classes - (num_classes - 1) * other_evidence, 1e-12)


def _sample_mask_logits(fg: np.ndarray, magnitude: float) -> np.ndarray:
    """28x28 logits whose corner-aligned resize back to ``fg.shape`` recovers ``fg``.

    A clipped signed distance (>= 1 inside, <= -1 outside) is sampled at the
    positions the inverse resize will read, so interpolation never flips the
    sign at pixel centres far from the boundary.
    """
    if fg.all() or not fg.any():
        sdf = np.where(fg, 1.0, -1.0)
    else:
        sdf = np.clip(np.where(fg, distance_transform_edt(fg), -distance_transform_edt(~fg)), -1.0, 1.0)
    sampled = resize_bilinear(sdf[..., None], MASK_SIZE, MASK_SIZE)[..., 0]
    return magnitude * sampled


def synthesize_predictions(gt: np.ndarray, cfg: SceneConfig) -> tuple[np.ndarray, list[InstancePrediction]]:
    """Semantic logits and instance predictions for a generated scene.

    Fixed mode: every pixel has Dirichlet confidence ``target_confidence`` and
    exactly ``round(noise_level * N)`` seeded pixels predict a wrong class.
    Calibrated mode: per-pixel confidence is uniform on an interval centred at
    ``target_confidence`` and each pixel is correct with that probability.
    """
    rng = stream(cfg.seed, NOISE_STREAM)
    h, w = gt.shape
    c = cfg.num_classes
    labels = gt // OFFSET
    n = h * w

    if cfg.calibrated:
        t = cfg.target_confidence
        half = min(t, 1.0 - t)
        conf = rng.uniform(t - half, t + half, size=(h, w))
        wrong = rng.random((h, w)) >= conf
    else:
        conf = np.full((h, w), cfg.target_confidence)
        wrong = np.zeros(n, dtype=bool)
        wrong[rng.permutation(n)[: int(round(cfg.noise_level * n))]] = True
        wrong = wrong.reshape(h, w)
    shift = rng.integers(1, c, size=(h, w)) if c > 1 else np.zeros((h, w), dtype=np.int64)
    predicted = np.where(wrong, (labels + shift) % c, labels)

    eps = float(softplus(BACKGROUND_LOGIT))
    logits = np.full((h, w, c), BACKGROUND_LOGIT)
    evid = evidence_for_confidence(conf, c, eps)
    np.put_along_axis(logits, predicted[..., None], inverse_softplus(evid)[..., None], axis=2)

    # mask evidence beats any semantic probability at the same confidence
    sem_evid = float(evidence_for_confidence(cfg.target_confidence, c))
    mask_logit = float(inverse_softplus(2.0 * (c + sem_evid)))
    cls_evid = float(evidence_for_confidence(cfg.target_confidence, max(cfg.n_thing, 2)))
    class_prob = (1.0 + cls_evid) / (max(cfg.n_thing, 2) + cls_evid)

    instances = []
    thing_ids = np.unique(gt[gt % OFFSET != 0])
    for seg in thing_ids.tolist():
        box = bounding_box(gt == seg)
        if cfg.noise_level > 0:
            extent = np.array([box.width, box.height, box.width, box.height])
            jitter = np.rint(cfg.noise_level * rng.uniform(-1, 1, size=4) * extent).astype(int)
            x0 = int(np.clip(box.x0 + jitter[0], 0, w - 1))
            y0 = int(np.clip(box.y0 + jitter[1], 0, h - 1))
            x1 = int(np.clip(box.x1 + jitter[2], x0 + 1, w))
            y1 = int(np.clip(box.y1 + jitter[3], y0 + 1, h))
            box = BBox(x0, y0, x1, y1)
        fg = gt[box.region()] == seg
        instances.append(InstancePrediction(box, seg // OFFSET, class_prob, _sample_mask_logits(fg, mask_logit)))
    return logits, instances
