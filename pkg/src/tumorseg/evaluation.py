"""Region overlap metrics: Dice, positive predictive value and sensitivity."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .volume import LabelVolume

REGIONS = {
    "complete": (1, 2, 3, 4),
    "core": (1, 3, 4),
    "enhancing": (4,),
}


def region_mask(labels: LabelVolume | np.ndarray, kind: str) -> np.ndarray:
    data = labels.data if isinstance(labels, LabelVolume) else np.asarray(labels)
    try:
        members = REGIONS[kind]
    except KeyError:
        raise ValueError(f"unknown region {kind!r}; expected one of {sorted(REGIONS)}") from None
    return np.isin(data, members)


@dataclass(frozen=True)
class RegionScore:
    dice: float
    ppv: float
    sensitivity: float
    predicted: int
    truth: int
    overlap: int


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def score_masks(pred: np.ndarray, truth: np.ndarray) -> RegionScore:
    """Metrics for two boolean masks.

    Both empty counts as perfect agreement; exactly one empty scores 0.
    """
    p, t = int(np.count_nonzero(pred)), int(np.count_nonzero(truth))
    both = int(np.count_nonzero(pred & truth))
    if p == 0 and t == 0:
        return RegionScore(1.0, 1.0, 1.0, 0, 0, 0)
    return RegionScore(_ratio(2 * both, p + t), _ratio(both, p), _ratio(both, t), p, t, both)


def score(pred: LabelVolume, truth: LabelVolume, kind: str) -> RegionScore:
    if pred.dims != truth.dims:
        raise ValueError(f"prediction dims {pred.dims} != truth dims {truth.dims}")
    return score_masks(region_mask(pred, kind), region_mask(truth, kind))


def score_report(pred: LabelVolume, truth: LabelVolume) -> dict[str, RegionScore]:
    return {kind: score(pred, truth, kind) for kind in REGIONS}


def report_json(report: dict[str, RegionScore]) -> dict:
    return {kind: asdict(entry) for kind, entry in report.items()}


def write_report(report: dict[str, RegionScore], path) -> None:
    Path(path).write_text(json.dumps(report_json(report), indent=2) + "\n")
