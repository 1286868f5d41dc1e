"""JSON report documents for :class:`~evpan.metrics.MetricReport`."""

from __future__ import annotations

import json
from dataclasses import asdict

from . import __version__
from .metrics import MetricReport

SCHEMA_VERSION = 1
UPQ_TOLERANCE = 1e-12


def _check_identity(scores: dict, where: str) -> None:
    if scores.get("upq") is None:
        return
    expected = (1.0 - scores["pece"]) * scores["pq"]
    if abs(scores["upq"] - expected) > UPQ_TOLERANCE:
        raise AssertionError(f"uPQ identity violated for {where}: {scores['upq']} != {expected}")


def report_document(report: MetricReport, inputs: dict | None = None) -> dict:
    doc = {
        "tool": {"name": "evpan", "version": __version__, "schema": SCHEMA_VERSION},
        "inputs": inputs or {},
        "config": {"bins": report.n_bins, **report.classes.to_dict()},
        "summary": {
            "all": asdict(report.all),
            "things": asdict(report.things),
            "stuff": asdict(report.stuff),
        },
        "uece": report.uece,
        "uece_image_mean": report.uece_image_mean,
        "ece": report.ece,
        "per_class": {str(c): asdict(s) for c, s in report.per_class.items()},
        "reliability": [asdict(r) for r in report.reliability],
    }
    if report.per_image:
        doc["per_image"] = report.per_image
    for name, scores in doc["summary"].items():
        _check_identity(scores, name)
    for c, scores in doc["per_class"].items():
        _check_identity(scores, f"class {c}")
    return doc


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"
