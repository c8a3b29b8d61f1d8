"""Class-balanced training patch sampling from zero-padded slices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..volume import NUM_CLASSES, LabelVolume, MultiModalVolume, axis_dim
from .network import context_reduction, small_padding


@dataclass
class PatchBatch:
    small: np.ndarray  # (N, C, s, s)
    large: np.ndarray  # (N, C, 2s - 1, 2s - 1)
    labels: np.ndarray  # (N,)
    centers: np.ndarray  # (N, 3) slice index, row, column in the view's plane

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=NUM_CLASSES)

    def subset(self, index) -> "PatchBatch":
        return PatchBatch(self.small[index], self.large[index], self.labels[index],
                          self.centers[index])

    @staticmethod
    def concatenate(batches) -> "PatchBatch":
        batches = list(batches)
        return PatchBatch(
            np.concatenate([b.small for b in batches]),
            np.concatenate([b.large for b in batches]),
            np.concatenate([b.labels for b in batches]),
            np.concatenate([b.centers for b in batches]),
        )


def plane_stack(data: np.ndarray, axis: str) -> np.ndarray:
    """Reorder a (C, Z, Y, X) or (Z, Y, X) grid into a stack of view slices.

    Returns (S, C, H, W) or (S, H, W); slice ``k`` equals ``extract_slice(..., axis, k)``.
    """
    dim = axis_dim(axis)
    if data.ndim == 4:
        return np.moveaxis(data, dim + 1, 0)
    return np.moveaxis(data, dim, 0)


def sample_training_patches(
    volume: MultiModalVolume,
    labels: LabelVolume,
    per_class: int,
    n: int,
    axis: str,
    seed: int,
) -> PatchBatch:
    """Draw ``per_class`` patch pairs for every class from one volume.

    Centres are sampled uniformly without replacement from the voxels of each
    class (with replacement when a class has fewer voxels than requested).
    Pixels outside the slice read as zero.
    """
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    if volume.dims != labels.dims:
        raise ValueError(f"volume dims {volume.dims} != label dims {labels.dims}")
    rng = np.random.default_rng(seed)
    r = context_reduction(n)
    before, _ = small_padding(n)
    side_small, side_large = r + 1, 2 * r + 1

    stack = plane_stack(volume.data, axis)
    label_stack = plane_stack(labels.data, axis)
    padded = np.pad(stack, ((0, 0), (0, 0), (r, r), (r, r)))

    centers = []
    classes = []
    flat = label_stack.ravel()
    for cls in range(NUM_CLASSES):
        where = np.flatnonzero(flat == cls)
        if where.size == 0:
            raise ValueError(f"class {cls} is absent from the volume")
        pick = rng.choice(where, size=per_class, replace=where.size < per_class)
        centers.append(np.stack(np.unravel_index(pick, label_stack.shape), axis=1))
        classes.append(np.full(per_class, cls, dtype=np.int64))
    centers = np.concatenate(centers)
    classes = np.concatenate(classes)

    count = len(classes)
    c = stack.shape[1]
    small = np.empty((count, c, side_small, side_small))
    large = np.empty((count, c, side_large, side_large))
    for k, (s, i, j) in enumerate(centers):
        large[k] = padded[s, :, i : i + side_large, j : j + side_large]
        top, left = i + r - before, j + r - before
        small[k] = padded[s, :, top : top + side_small, left : left + side_small]
    return PatchBatch(small, large, classes, centers)
