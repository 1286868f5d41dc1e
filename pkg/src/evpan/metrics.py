"""Segment matching, PQ/SQ/RQ, calibration errors (ECE, uECE, pECE) and uPQ.

All sums that feed a metric are kept exact: IoU sums as rationals of pixel
counts, confidence sums as rationals of the binary float values.  Merging
per-image accumulators is therefore associative and commutative bit for bit,
and a metric is rounded to ``float`` only when it is reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .grid import OFFSET, VOID, ClassConfig, as_map, check_labels

DEFAULT_BINS = 10


# -- exact binned sums ------------------------------------------------------


def bin_index(confidence: np.ndarray, n_bins: int) -> np.ndarray:
    """Equal-width bin per value on [0, 1]; 1.0 lands in the top bin."""
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.searchsorted(edges, confidence, side="right") - 1
    return np.clip(idx, 0, n_bins - 1)


def exact_bin_sums(values: np.ndarray, bins: np.ndarray, n_bins: int) -> list[Fraction]:
    """Exact per-bin sums of non-negative floats, as Fractions."""
    values = np.asarray(values, dtype=np.float64).ravel()
    bins = np.asarray(bins, dtype=np.int64).ravel()
    sums = [Fraction(0)] * n_bins
    if values.size == 0:
        return sums
    mant, expo = np.frexp(values)
    mant = (mant * 2.0**53).astype(np.int64)  # exact: 53-bit integer significand
    expo = expo.astype(np.int64)
    e_min = int(expo.min())
    span = int(expo.max()) - e_min + 1
    keys, inverse = np.unique(bins * span + (expo - e_min), return_inverse=True)
    hi = np.zeros(keys.size, dtype=np.int64)
    lo = np.zeros(keys.size, dtype=np.int64)
    # split so each int64 partial sum stays far from overflow
    np.add.at(hi, inverse, mant >> 26)
    np.add.at(lo, inverse, mant & ((1 << 26) - 1))
    for key, h, l in zip(keys.tolist(), hi.tolist(), lo.tolist()):
        b, e = divmod(key, span)
        e += e_min - 53
        total = (h << 26) + l
        sums[b] += Fraction(total * 2**e) if e >= 0 else Fraction(total, 2**-e)
    return sums


@dataclass
class CalibrationHistogram:
    """Per-bin pixel count, confidence sum and number of correct pixels."""

    n_bins: int = DEFAULT_BINS
    count: np.ndarray = None
    conf_sum: list = None
    acc_sum: np.ndarray = None

    def __post_init__(self):
        if self.n_bins < 1:
            raise ValueError("need at least one bin")
        if self.count is None:
            self.count = np.zeros(self.n_bins, dtype=np.int64)
            self.acc_sum = np.zeros(self.n_bins, dtype=np.int64)
            self.conf_sum = [Fraction(0)] * self.n_bins

    @property
    def total(self) -> int:
        return int(self.count.sum())

    def add(self, confidence: np.ndarray, correct: np.ndarray) -> "CalibrationHistogram":
        confidence = np.asarray(confidence, dtype=np.float64).ravel()
        correct = np.asarray(correct, dtype=bool).ravel()
        if confidence.shape != correct.shape:
            raise ValueError("confidence and correctness sizes differ")
        if confidence.size and (not np.all(np.isfinite(confidence)) or confidence.min() < 0 or confidence.max() > 1):
            raise ValueError("confidence values must lie in [0, 1]")
        b = bin_index(confidence, self.n_bins)
        self.count += np.bincount(b, minlength=self.n_bins)
        self.acc_sum += np.bincount(b[correct], minlength=self.n_bins)
        for i, s in enumerate(exact_bin_sums(confidence, b, self.n_bins)):
            self.conf_sum[i] += s
        return self

    def merged(self, other: "CalibrationHistogram") -> "CalibrationHistogram":
        if self.n_bins != other.n_bins:
            raise ValueError("histograms have different bin counts")
        return CalibrationHistogram(
            self.n_bins,
            self.count + other.count,
            [a + b for a, b in zip(self.conf_sum, other.conf_sum)],
            self.acc_sum + other.acc_sum,
        )

    def calibration_error(self) -> Fraction:
        """``sum_b |b|/N * |acc(b) - conf(b)|``, exactly."""
        n = self.total
        if n == 0:
            raise ValueError("calibration error over zero pixels")
        return sum((abs(int(a) - c) for a, c in zip(self.acc_sum, self.conf_sum)), Fraction(0)) / n

    def curve(self) -> list["ReliabilityBin"]:
        rows = []
        for b in range(self.n_bins):
            n = int(self.count[b])
            rows.append(
                ReliabilityBin(
                    center=(b + 0.5) / self.n_bins,
                    mean_confidence=float(self.conf_sum[b] / n) if n else None,
                    mean_accuracy=int(self.acc_sum[b]) / n if n else None,
                    count=n,
                )
            )
        return rows


@dataclass(frozen=True)
class ReliabilityBin:
    center: float
    mean_confidence: float | None
    mean_accuracy: float | None
    count: int


def _histogram(confidence, correctness, n_bins, mask=None) -> CalibrationHistogram:
    conf = as_map(confidence) if np.ndim(confidence) >= 2 else np.asarray(confidence)
    corr = np.asarray(correctness, dtype=bool)
    if conf.shape != corr.shape:
        raise ValueError(f"confidence {conf.shape} and correctness {corr.shape} differ")
    if mask is not None:
        conf, corr = conf[mask], corr[mask]
    return CalibrationHistogram(n_bins).add(conf, corr)


def uece(confidence, correctness, n_bins: int = DEFAULT_BINS, mask=None) -> float:
    """Calibration error of a confidence field (``1 - u``) against pixel correctness."""
    return float(_histogram(confidence, correctness, n_bins, mask).calibration_error())


def reliability_curve(confidence, correctness, n_bins: int = DEFAULT_BINS, mask=None) -> list[ReliabilityBin]:
    hist = _histogram(confidence, correctness, n_bins, mask)
    if hist.total == 0:
        raise ValueError("reliability curve over zero pixels")
    return hist.curve()


def ece_maxprob(probs, labels, n_bins: int = DEFAULT_BINS) -> float:
    """Classic ECE: confidence is the largest class probability."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = check_labels(labels, probs.shape[-1])
    valid = labels != VOID
    conf = probs.max(axis=-1)
    correct = probs.argmax(axis=-1) == labels
    return uece(conf, correct, n_bins, mask=valid)


# -- segment matching and PQ ------------------------------------------------


@dataclass(frozen=True)
class SegmentMatch:
    pred_id: int
    gt_id: int
    class_id: int
    intersection: int
    union: int

    @property
    def iou(self) -> float:
        return self.intersection / self.union

    @property
    def iou_exact(self) -> Fraction:
        return Fraction(self.intersection, self.union)


@dataclass
class PanopticCounts:
    num_classes: int
    tp: np.ndarray = None
    fp: np.ndarray = None
    fn: np.ndarray = None
    iou_sum: list = None

    def __post_init__(self):
        if self.tp is None:
            self.tp = np.zeros(self.num_classes, dtype=np.int64)
            self.fp = np.zeros(self.num_classes, dtype=np.int64)
            self.fn = np.zeros(self.num_classes, dtype=np.int64)
            self.iou_sum = [Fraction(0)] * self.num_classes

    def merged(self, other: "PanopticCounts") -> "PanopticCounts":
        if self.num_classes != other.num_classes:
            raise ValueError("counts have different class counts")
        return PanopticCounts(
            self.num_classes,
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            [a + b for a, b in zip(self.iou_sum, other.iou_sum)],
        )


def _segment_areas(ids: np.ndarray) -> dict[int, int]:
    u, n = np.unique(ids, return_counts=True)
    return dict(zip(u.tolist(), n.tolist()))


def match_segments(pred, gt, num_classes: int) -> tuple[list[SegmentMatch], PanopticCounts]:
    """Match predicted to ground-truth segments by IoU > 0.5 within a class.

    VOID ground-truth pixels are removed from every union, and predicted
    segments lying more than half on VOID are ignored instead of counted
    as false positives.
    """
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"panoptic grids differ in shape: {pred.shape} vs {gt.shape}")
    for name, grid in (("prediction", pred), ("ground truth", gt)):
        cls = grid[grid != VOID] // OFFSET
        if cls.size and (cls.min() < 0 or cls.max() >= num_classes):
            raise ValueError(f"{name} has class ids outside [0, {num_classes})")

    pred_area = _segment_areas(pred[pred != VOID])
    gt_area = _segment_areas(gt[gt != VOID])
    void_area = _segment_areas(pred[(gt == VOID) & (pred != VOID)])
    both = (pred != VOID) & (gt != VOID)
    pairs, inter = np.unique(np.stack([pred[both], gt[both]]), axis=1, return_counts=True)

    counts = PanopticCounts(num_classes)
    matches = []
    pred_matched, gt_matched = set(), set()
    for (p, g), n in zip(pairs.T.tolist(), inter.tolist()):
        if p // OFFSET != g // OFFSET:
            continue
        union = pred_area[p] - void_area.get(p, 0) + gt_area[g] - n
        if 2 * n > union:
            matches.append(SegmentMatch(p, g, p // OFFSET, n, union))
            pred_matched.add(p)
            gt_matched.add(g)
    for m in matches:
        counts.tp[m.class_id] += 1
        counts.iou_sum[m.class_id] += m.iou_exact
    for g in gt_area:
        if g not in gt_matched:
            counts.fn[g // OFFSET] += 1
    for p, area in pred_area.items():
        if p in pred_matched or 2 * void_area.get(p, 0) > area:
            continue
        counts.fp[p // OFFSET] += 1
    return matches, counts


@dataclass(frozen=True)
class QualityScores:
    pq: float
    sq: float
    rq: float
    n_classes: int


def _class_quality(counts: PanopticCounts, c: int) -> tuple[Fraction, Fraction, Fraction] | None:
    tp, fp, fn = int(counts.tp[c]), int(counts.fp[c]), int(counts.fn[c])
    if tp + fp + fn == 0:
        return None
    denom = Fraction(2 * tp + fp + fn, 2)
    sq = counts.iou_sum[c] / tp if tp else Fraction(0)
    return counts.iou_sum[c] / denom, sq, tp / denom


def _mean(values) -> Fraction:
    values = list(values)
    return sum(values, Fraction(0)) / len(values) if values else Fraction(0)


def panoptic_quality(counts: PanopticCounts, classes: Sequence[int] | None = None) -> tuple[dict, QualityScores]:
    """Per-class ``(pq, sq, rq)`` and their unweighted mean over included classes.

    A class is included when it has at least one TP, FP or FN.
    """
    classes = range(counts.num_classes) if classes is None else classes
    per_class = {}
    for c in classes:
        q = _class_quality(counts, c)
        if q is not None:
            per_class[c] = q
    agg = QualityScores(
        float(_mean(q[0] for q in per_class.values())),
        float(_mean(q[1] for q in per_class.values())),
        float(_mean(q[2] for q in per_class.values())),
        len(per_class),
    )
    return {c: tuple(float(v) for v in q) for c, q in per_class.items()}, agg


# -- panoptic calibration -----------------------------------------------------


def segment_calibration(match: SegmentMatch, confidence, pred, gt, n_bins: int = DEFAULT_BINS) -> Fraction:
    """Exact uECE over the predicted segment of a match, scored against its gt segment."""
    domain = (pred == match.pred_id) & (gt != VOID)
    return _histogram(confidence, gt == match.gt_id, n_bins, domain).calibration_error()


def pece(matches: Sequence[SegmentMatch], confidence, pred, gt, n_bins: int = DEFAULT_BINS) -> float:
    """Mean per-segment uECE over matched pairs; 1.0 when nothing matched."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    conf = as_map(confidence)
    if not (pred.shape == gt.shape == conf.shape):
        raise ValueError("prediction, ground truth and confidence shapes differ")
    if not matches:
        return 1.0
    return float(_mean(segment_calibration(m, conf, pred, gt, n_bins) for m in matches))


def upq(pq: float, pece_value: float) -> float:
    return (1.0 - pece_value) * pq


# -- dataset accumulation -----------------------------------------------------


@dataclass
class EvalAccumulator:
    """Everything needed to produce a :class:`MetricReport`, mergeable across images."""

    classes: ClassConfig
    n_bins: int = DEFAULT_BINS
    counts: PanopticCounts = None
    uece_hist: CalibrationHistogram = None
    ece_hist: CalibrationHistogram | None = None
    pece_sum: list = None
    matched: np.ndarray = None
    image_uece_sum: Fraction = Fraction(0)
    images: int = 0

    def __post_init__(self):
        c = self.classes.num_classes
        if self.counts is None:
            self.counts = PanopticCounts(c)
        if self.uece_hist is None:
            self.uece_hist = CalibrationHistogram(self.n_bins)
        if self.pece_sum is None:
            self.pece_sum = [Fraction(0)] * c
        if self.matched is None:
            self.matched = np.zeros(c, dtype=np.int64)

    def update(self, pred, gt, uncertainty, semantic_probs=None) -> "EvalAccumulator":
        """Add one image: predicted/gt panoptic grids and the predicted uncertainty."""
        pred = np.asarray(pred, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        u = as_map(uncertainty).astype(np.float64)
        if not (pred.shape == gt.shape == u.shape):
            raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, uncertainty {u.shape}")
        if not np.all(np.isfinite(u)) or u.min() < 0 or u.max() > 1:
            raise ValueError("uncertainty values must lie in [0, 1]")
        conf = 1.0 - u
        matches, counts = match_segments(pred, gt, self.classes.num_classes)
        self.counts = self.counts.merged(counts)

        valid = gt != VOID
        pred_cls = np.where(pred == VOID, -1, pred // OFFSET)
        correct = pred_cls == gt // OFFSET
        hist = CalibrationHistogram(self.n_bins).add(conf[valid], correct[valid])
        self.uece_hist = self.uece_hist.merged(hist)
        if hist.total:
            self.image_uece_sum += hist.calibration_error()
            self.images += 1

        for m in matches:
            self.pece_sum[m.class_id] += segment_calibration(m, conf, pred, gt, self.n_bins)
            self.matched[m.class_id] += 1

        if semantic_probs is not None:
            probs = np.asarray(semantic_probs, dtype=np.float64)
            gt_cls = np.where(valid, gt // OFFSET, VOID)
            h = CalibrationHistogram(self.n_bins).add(
                probs.max(axis=-1)[valid], (probs.argmax(axis=-1) == gt_cls)[valid]
            )
            self.ece_hist = h if self.ece_hist is None else self.ece_hist.merged(h)
        return self

    def report(self) -> "MetricReport":
        return MetricReport.from_accumulator(self)


def merge_accumulators(a: EvalAccumulator, b: EvalAccumulator) -> EvalAccumulator:
    if a.classes != b.classes or a.n_bins != b.n_bins:
        raise ValueError("cannot merge accumulators with different configurations")
    if a.ece_hist is None:
        ece = b.ece_hist
    elif b.ece_hist is None:
        ece = a.ece_hist
    else:
        ece = a.ece_hist.merged(b.ece_hist)
    return EvalAccumulator(
        a.classes,
        a.n_bins,
        a.counts.merged(b.counts),
        a.uece_hist.merged(b.uece_hist),
        ece,
        [x + y for x, y in zip(a.pece_sum, b.pece_sum)],
        a.matched + b.matched,
        a.image_uece_sum + b.image_uece_sum,
        a.images + b.images,
    )


@dataclass(frozen=True)
class SplitScores:
    pq: float
    sq: float
    rq: float
    upq: float
    pece: float
    matched: int
    n_classes: int
    pece_undefined: bool


@dataclass(frozen=True)
class ClassScores:
    kind: str
    tp: int
    fp: int
    fn: int
    iou_sum: float
    matched: int
    pq: float | None
    sq: float | None
    rq: float | None
    pece: float | None
    upq: float | None


@dataclass
class MetricReport:
    all: SplitScores
    things: SplitScores
    stuff: SplitScores
    uece: float | None
    uece_image_mean: float | None
    ece: float | None
    per_class: dict[int, ClassScores]
    reliability: list[ReliabilityBin]
    n_bins: int
    classes: ClassConfig
    per_image: list = field(default_factory=list)

    @classmethod
    def from_accumulator(cls, acc: EvalAccumulator) -> "MetricReport":
        cfg = acc.classes

        def split(ids) -> SplitScores:
            _, q = panoptic_quality(acc.counts, ids)
            m = int(sum(acc.matched[c] for c in ids))
            p = float(sum((acc.pece_sum[c] for c in ids), Fraction(0)) / m) if m else 1.0
            return SplitScores(q.pq, q.sq, q.rq, upq(q.pq, p), p, m, q.n_classes, m == 0)

        per_class = {}
        quality, _ = panoptic_quality(acc.counts)
        for c in range(cfg.num_classes):
            m = int(acc.matched[c])
            q = quality.get(c)
            p = float(acc.pece_sum[c] / m) if m else (1.0 if q else None)
            per_class[c] = ClassScores(
                "thing" if cfg.is_thing(c) else "stuff",
                int(acc.counts.tp[c]),
                int(acc.counts.fp[c]),
                int(acc.counts.fn[c]),
                float(acc.counts.iou_sum[c]),
                m,
                q[0] if q else None,
                q[1] if q else None,
                q[2] if q else None,
                p,
                upq(q[0], p) if q else None,
            )
        has_pixels = acc.uece_hist.total > 0
        return cls(
            all=split(range(cfg.num_classes)),
            things=split(cfg.thing),
            stuff=split(cfg.stuff),
            uece=float(acc.uece_hist.calibration_error()) if has_pixels else None,
            uece_image_mean=float(acc.image_uece_sum / acc.images) if acc.images else None,
            ece=float(acc.ece_hist.calibration_error()) if acc.ece_hist is not None and acc.ece_hist.total else None,
            per_class=per_class,
            reliability=acc.uece_hist.curve(),
            n_bins=acc.n_bins,
            classes=cfg,
        )

    # convenience accessors for the headline numbers
    @property
    def pq(self) -> float:
        return self.all.pq

    @property
    def pece(self) -> float:
        return self.all.pece

    @property
    def upq(self) -> float:
        return self.all.upq
