"""Independent brute-force oracles shared across test modules.

None of these reuse the library's vectorised paths: matching loops over all
segment pairs, binning walks pixels one at a time with exact rationals, and
the Lovász oracle evaluates set functions on explicit prefixes.
"""

from fractions import Fraction

import numpy as np
import pytest

from evpan.grid import OFFSET, VOID


def oracle_bin(conf: float, n_bins: int) -> int:
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    for b in range(n_bins):
        if edges[b] <= conf < edges[b + 1]:
            return b
    return n_bins - 1


def oracle_calibration_error(conf, correct, n_bins) -> Fraction:
    """Per-pixel loop; exact rationals so the result does not depend on order."""
    count = [0] * n_bins
    conf_sum = [Fraction(0)] * n_bins
    acc_sum = [0] * n_bins
    for c, ok in zip(np.ravel(conf).tolist(), np.ravel(correct).tolist()):
        b = oracle_bin(c, n_bins)
        count[b] += 1
        conf_sum[b] += Fraction(c)
        acc_sum[b] += int(bool(ok))
    n = sum(count)
    total = Fraction(0)
    for b in range(n_bins):
        if count[b]:
            total += Fraction(count[b], n) * abs(Fraction(acc_sum[b], count[b]) - conf_sum[b] / count[b])
    return total


def oracle_match(pred, gt):
    """All-pairs matching; returns ({(p, g): Fraction iou}, fp set, fn set)."""
    pred_ids = sorted(set(np.unique(pred).tolist()) - {VOID})
    gt_ids = sorted(set(np.unique(gt).tolist()) - {VOID})
    gt_void = gt == VOID
    matches = {}
    for p in pred_ids:
        for g in gt_ids:
            if p // OFFSET != g // OFFSET:
                continue
            pm = (pred == p) & ~gt_void
            gm = gt == g
            inter = int(np.sum(pm & gm))
            union = int(np.sum(pm | gm))
            if union and Fraction(inter, union) > Fraction(1, 2):
                matches[(p, g)] = Fraction(inter, union)
    mp = {p for p, _ in matches}
    mg = {g for _, g in matches}
    fn = {g for g in gt_ids if g not in mg}
    fp = set()
    for p in pred_ids:
        if p in mp:
            continue
        area = int(np.sum(pred == p))
        void = int(np.sum((pred == p) & gt_void))
        if Fraction(void, area) <= Fraction(1, 2):
            fp.add(p)
    return matches, fp, fn


def jaccard_loss_of_set(mispredicted: set, fg: set) -> Fraction:
    if not mispredicted:
        return Fraction(0)
    return Fraction(len(mispredicted), len(fg | mispredicted))


def oracle_lovasz_extension(errors, fg_mask) -> float:
    """Lovász extension via explicit prefix sets of the descending order."""
    errors = list(errors)
    order = sorted(range(len(errors)), key=lambda i: -errors[i])
    fg = {i for i, f in enumerate(fg_mask) if f}
    total = 0.0
    prefix: set = set()
    prev = Fraction(0)
    for i in order:
        prefix = prefix | {i}
        cur = jaccard_loss_of_set(prefix, fg)
        total += errors[i] * float(cur - prev)
        prev = cur
    return total


def random_panoptic_pair(rng, size=8, max_segments=4, num_classes=3, void=True):
    """Random 8x8 panoptic grids with at most ``max_segments`` segments each."""

    def grid():
        n = int(rng.integers(1, max_segments + 1))
        ids = []
        for k in range(n):
            cls = int(rng.integers(0, num_classes))
            ids.append(cls * OFFSET + (k + 1 if rng.random() < 0.6 else 0))
        ids = list(dict.fromkeys(ids))
        g = np.array(ids)[rng.integers(0, len(ids), size=(size, size))]
        # blocky structure so IoUs above 0.5 actually occur
        if rng.random() < 0.7:
            half = size // 2
            g[:half, :half] = ids[0]
        return g.astype(np.int64)

    gt = grid()
    pred = gt.copy() if rng.random() < 0.5 else grid()
    flip = rng.random((size, size)) < rng.uniform(0, 0.4)
    other = grid()
    pred = np.where(flip, other, pred)
    if void and rng.random() < 0.5:
        gt = np.where(rng.random((size, size)) < 0.1, VOID, gt)
    return pred, gt


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
