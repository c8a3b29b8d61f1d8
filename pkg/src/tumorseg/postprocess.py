"""Rule-based cleanup of a fused label volume using the normalised intensities.

Six steps, each optional, always run in ascending order. Component statistics
and global means are recomputed from the current labels at the start of every
step.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from .volume import LabelVolume, MultiModalVolume, border_connected, connected_components_3d

log = logging.getLogger(__name__)

ALL_STEPS = (1, 2, 3, 4, 5, 6)
_RATIOS = ("theta21", "theta23", "theta31", "theta61")


@dataclass(frozen=True)
class PostprocessThresholds:
    theta11: float = 150.0  # bright component: mean Flair
    theta12: float = 150.0  # bright component: mean T2
    theta21: float = 0.8  # low signal: fraction of tumour mean Flair
    theta22: float = 125.0  # low signal: T1c
    theta23: float = 0.9  # low signal: fraction of tumour mean T2
    theta31: float = 0.1  # smallest kept component, relative to the largest
    theta41: float = 100.0  # enhancing with T1c below this becomes necrosis
    theta61: float = 0.05  # enhancing fraction that triggers step 6
    theta62: float = 85.0  # edema with T1c below this becomes non-enhancing

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not value > 0:
                raise ValueError(f"{f.name} must be positive, got {value}")
            if f.name in _RATIOS and value > 1:
                raise ValueError(f"{f.name} is a ratio and must lie in (0, 1], got {value}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict | None) -> "PostprocessThresholds":
        doc = dict(doc or {})
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown thresholds: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in doc.items()})


def region_mean_intensity(channel: np.ndarray, component: np.ndarray) -> float:
    """Arithmetic mean of ``channel`` over the voxels selected by ``component``."""
    component = np.asarray(component, dtype=bool)
    if not component.any():
        raise ValueError("empty component")
    return float(np.mean(channel[component], dtype=np.float64))


def _channels(volume: MultiModalVolume):
    try:
        return (volume.channel("flair").astype(np.float64), volume.channel("t1c").astype(np.float64),
                volume.channel("t2").astype(np.float64))
    except ValueError:
        raise ValueError(
            f"post-processing needs flair, t1c and t2 channels, got {volume.channel_names}"
        ) from None


def _remove_bright(res, flair, t2, th):
    comps = connected_components_3d(res > 0)
    if comps.count == 0:
        return res
    idx = np.arange(1, comps.count + 1)
    mean_f = np.atleast_1d(_label_mean(flair, comps.ids, idx))
    mean_t = np.atleast_1d(_label_mean(t2, comps.ids, idx))
    drop = idx[(mean_f > th.theta11) & (mean_t > th.theta12)]
    res[np.isin(comps.ids, drop)] = 0
    return res


def _label_mean(channel, ids, idx):
    sums = np.bincount(ids.ravel(), weights=channel.ravel(), minlength=idx[-1] + 1)
    counts = np.bincount(ids.ravel(), minlength=idx[-1] + 1)
    return sums[idx] / counts[idx]


def _clear_low_signal(res, flair, t1c, t2, th):
    tumour = res > 0
    if not tumour.any():
        return res
    mean_f, mean_t = flair[tumour].mean(), t2[tumour].mean()
    low = (flair < th.theta21 * mean_f) & (t1c < th.theta22) & (t2 < th.theta23 * mean_t)
    res[low & (res < 4)] = 0
    return res


def _drop_small(res, th):
    comps = connected_components_3d(res > 0)
    if comps.count == 0:
        return res
    sizes = comps.sizes
    small = np.flatnonzero(sizes / sizes.max() < th.theta31) + 1
    res[np.isin(comps.ids, small)] = 0
    return res


def _fill_holes(res):
    background = res == 0
    hole = background & ~border_connected(background, connectivity=6)
    res[hole] = 1
    return res


def _relabel_dark_enhancing(res, t1c, th):
    res[(t1c < th.theta41) & (res == 4)] = 1
    return res


def _edema_to_core(res, t1c, th):
    vol_t = np.count_nonzero(res)
    if vol_t == 0:
        return res
    vol_e = np.count_nonzero(res == 4)
    if vol_e / vol_t < th.theta61:
        res[(t1c < th.theta62) & (res == 2)] = 3
    return res


def postprocess(
    labels: LabelVolume,
    volume: MultiModalVolume,
    thresholds: PostprocessThresholds | None = None,
    steps=ALL_STEPS,
) -> LabelVolume:
    th = thresholds or PostprocessThresholds()
    steps = sorted(set(steps))
    if any(s not in ALL_STEPS for s in steps):
        raise ValueError(f"steps must be a subset of 1..6, got {steps}")
    if labels.dims != volume.dims:
        raise ValueError(f"label dims {labels.dims} != volume dims {volume.dims}")
    if not steps:
        return labels
    flair, t1c, t2 = _channels(volume)
    res = labels.data.copy()
    for step in steps:
        if step == 1:
            res = _remove_bright(res, flair, t2, th)
        elif step == 2:
            res = _clear_low_signal(res, flair, t1c, t2, th)
        elif step == 3:
            res = _drop_small(res, th)
        elif step == 4:
            res = _fill_holes(res)
        elif step == 5:
            res = _relabel_dark_enhancing(res, t1c, th)
        else:
            res = _edema_to_core(res, t1c, th)
        log.debug("after step %d: %d tumour voxels", step, np.count_nonzero(res))
    return LabelVolume(res)
