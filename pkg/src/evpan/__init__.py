"""Uncertainty-aware panoptic segmentation: evidential losses, probabilistic fusion and metrics."""

__version__ = "0.1.0"

from .grid import OFFSET, VOID, BBox, ClassConfig  # noqa: E402
from .evidential import (  # noqa: E402
    DirichletField,
    class_probabilities,
    dirichlet_from_logits,
    entropy_confidence,
    evidence,
    fit_temperature,
    normalized_entropy,
    predictive_uncertainty,
    temperature_scale,
)
from .fusion import InstancePrediction, PanopticResult, fuse  # noqa: E402
from .metrics import EvalAccumulator, MetricReport, merge_accumulators  # noqa: E402
