"""Majority-vote fusion of the axial, coronal and sagittal label volumes."""

from __future__ import annotations

import numpy as np

from .volume import NUM_CLASSES, LabelVolume


def fuse_voxel(ra: int, rc: int, rs: int) -> int:
    """Fused label of one voxel from its three per-view labels."""
    views = (ra, rc, rs)
    for r in views:
        if not 0 <= int(r) < NUM_CLASSES:
            raise ValueError(f"label {r} outside 0..4")
    r = 0
    if sum(v > 0 for v in views) >= 2:
        r = 2
    # later rules override earlier ones
    for label in (1, 3, 4):
        if sum(v == label for v in views) >= 2:
            r = label
    return r


def fuse_arrays(a: np.ndarray, c: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Vectorised :func:`fuse_voxel` over equally shaped label arrays."""
    if not a.shape == c.shape == s.shape:
        raise ValueError(f"view shapes differ: {a.shape}, {c.shape}, {s.shape}")
    stack = np.stack([a, c, s]).astype(np.int16)
    if stack.size and (stack.min() < 0 or stack.max() >= NUM_CLASSES):
        raise ValueError("labels must lie in 0..4")
    return _vote(stack)


def _vote(stack: np.ndarray) -> np.ndarray:
    out = np.where((stack > 0).sum(0) >= 2, 2, 0)
    for label in (1, 3, 4):
        out = np.where((stack == label).sum(0) >= 2, label, out)
    return out.astype(np.uint8)


def fuse_many(volumes) -> LabelVolume:
    """Fuse any number of views with the same "two or more agree" rules.

    One view passes through unchanged; with two views both must agree.
    """
    volumes = list(volumes)
    if not volumes:
        raise ValueError("nothing to fuse")
    if len({v.dims for v in volumes}) != 1:
        raise ValueError(f"view dims differ: {[v.dims for v in volumes]}")
    if len(volumes) == 1:
        return volumes[0]
    return LabelVolume(_vote(np.stack([v.data for v in volumes])))


def fuse_volumes(axial: LabelVolume, coronal: LabelVolume, sagittal: LabelVolume) -> LabelVolume:
    if not axial.dims == coronal.dims == sagittal.dims:
        raise ValueError(
            f"view dims differ: {axial.dims}, {coronal.dims}, {sagittal.dims}"
        )
    return LabelVolume(fuse_arrays(axial.data, coronal.data, sagittal.data))
