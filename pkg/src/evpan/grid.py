"""Dense grids, label/panoptic encodings and geometric primitives.

Conventions shared by every module:

* A dense grid is a float ``ndarray`` of shape ``(H, W, C)``, row-major with
  the channel axis last.  Single-channel fields (uncertainty, confidence) are
  carried either as ``(H, W, 1)`` or squeezed to ``(H, W)``; :func:`as_map`
  normalises to the latter.
* A label grid is an integer ``(H, W)`` array of class ids in ``[0, C)`` or
  :data:`VOID`.
* A panoptic grid is an integer ``(H, W)`` array holding
  ``class_id * OFFSET + instance_index`` (instance 0 for stuff) or :data:`VOID`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

OFFSET = 1000
VOID = 2**32 - 1


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box; ``(x0, y0)`` inclusive, ``(x1, y1)`` exclusive."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"degenerate bbox {self.as_list()}")

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    def check_within(self, height: int, width: int) -> None:
        if self.x0 < 0 or self.y0 < 0 or self.x1 > width or self.y1 > height:
            raise ValueError(f"bbox {self.as_list()} exceeds image {height}x{width}")

    def region(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def mask(self, height: int, width: int) -> np.ndarray:
        out = np.zeros((height, width), dtype=bool)
        out[self.region()] = True
        return out


@dataclass(frozen=True)
class ClassConfig:
    """Partition of the class ids ``0..num_classes-1`` into stuff and things."""

    num_classes: int
    stuff: tuple[int, ...]
    thing: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "stuff", tuple(sorted(int(c) for c in self.stuff)))
        object.__setattr__(self, "thing", tuple(sorted(int(c) for c in self.thing)))
        if set(self.stuff) & set(self.thing):
            raise ValueError("stuff and thing classes overlap")
        if sorted(self.stuff + self.thing) != list(range(self.num_classes)):
            raise ValueError(
                f"stuff {list(self.stuff)} and thing {list(self.thing)} must cover "
                f"0..{self.num_classes - 1} exactly once"
            )

    @classmethod
    def from_lists(cls, stuff: Iterable[int], thing: Iterable[int]) -> "ClassConfig":
        stuff, thing = tuple(stuff), tuple(thing)
        return cls(len(stuff) + len(thing), stuff, thing)

    @classmethod
    def from_dict(cls, d: dict) -> "ClassConfig":
        try:
            stuff, thing = d["stuff"], d["thing"]
        except (KeyError, TypeError) as e:
            raise ValueError("class config needs 'stuff' and 'thing' lists") from e
        n = d.get("num_classes", len(stuff) + len(thing))
        return cls(int(n), tuple(stuff), tuple(thing))

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "stuff": list(self.stuff), "thing": list(self.thing)}

    def is_thing(self, class_id: int) -> bool:
        return class_id in self.thing


def as_map(field: np.ndarray) -> np.ndarray:
    """Squeeze an ``(H, W, 1)`` field to ``(H, W)``; pass ``(H, W)`` through."""
    field = np.asarray(field)
    if field.ndim == 3 and field.shape[2] == 1:
        return field[..., 0]
    if field.ndim != 2:
        raise ValueError(f"expected a single-channel field, got shape {field.shape}")
    return field


def check_dense(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or 0 in grid.shape:
        raise ValueError(f"dense grid must be non-empty (H, W, C), got {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise ValueError("dense grid contains non-finite values")
    return grid


def check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label grid must be (H, W), got {labels.shape}")
    labels = labels.astype(np.int64)
    bad = (labels != VOID) & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        raise ValueError(f"label ids outside [0, {num_classes}) and not VOID")
    return labels


def encode_panoptic(class_id, instance_index):
    return np.asarray(class_id, dtype=np.int64) * OFFSET + np.asarray(instance_index, dtype=np.int64)


def panoptic_class(panoptic: np.ndarray) -> np.ndarray:
    """Class id per pixel of a panoptic grid; VOID stays VOID."""
    panoptic = np.asarray(panoptic, dtype=np.int64)
    return np.where(panoptic == VOID, VOID, panoptic // OFFSET)


def iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # corner-aligned: output index i samples input coordinate i*(n_in-1)/(n_out-1)
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(pos).astype(np.int64)
    lo = np.clip(lo, 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an ``(H, W, C)`` grid."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or 0 in grid.shape:
        raise ValueError(f"resize needs a non-empty (H, W, C) grid, got {grid.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"invalid target size {out_h}x{out_w}")
    h, w, _ = grid.shape
    if (h, w) == (out_h, out_w):
        return grid.copy()
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bottom = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def channel_argmax(grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel argmax over channels (ties to the lowest index) and its value."""
    grid = np.asarray(grid)
    if grid.ndim != 3 or 0 in grid.shape:
        raise ValueError(f"argmax needs a non-empty (H, W, C) grid, got {grid.shape}")
    labels = np.argmax(grid, axis=2)
    values = np.take_along_axis(grid, labels[..., None], axis=2)[..., 0]
    return labels, values


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """``(H, W, C)`` float one-hot encoding; VOID pixels become all-zero rows."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (num_classes,), dtype=np.float64)
    valid = labels != VOID
    out[valid, labels[valid]] = 1.0
    return out


def bounding_box(mask: np.ndarray) -> BBox | None:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def stack_maps(maps: Sequence[np.ndarray], height: int, width: int) -> np.ndarray:
    if not maps:
        return np.zeros((height, width, 0))
    return np.stack([as_map(m) for m in maps], axis=2)
