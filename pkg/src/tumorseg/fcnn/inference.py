"""Dense slice-mode inference and the padding that makes it match patch mode."""

from __future__ import annotations

import numpy as np

from ..volume import SliceTensor
from .layers import softmax
from .network import FCNN, context_reduction, small_padding


def pad_slice(image: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad a ``(C, h, w)`` slice into the small and large network inputs.

    Sizes are ``(h + r) x (w + r)`` and ``(h + 2r) x (w + 2r)`` with
    ``r = 17 + 3n``.
    """
    r = context_reduction(n)
    before, after = small_padding(n)
    small = np.pad(image, ((0, 0), (before, after), (before, after)))
    large = np.pad(image, ((0, 0), (r, r), (r, r)))
    return small, large


def slice_scores(net: FCNN, images: np.ndarray) -> np.ndarray:
    """Raw class scores for a stack of slices ``(N, C, h, w)`` -> ``(N, 5, h, w)``."""
    images = np.asarray(images, dtype=np.float64)
    padded = [pad_slice(img, net.n) for img in images]
    small = np.stack([p[0] for p in padded])
    large = np.stack([p[1] for p in padded])
    return net.forward(small, large)


def segment_slice(net: FCNN, slice_: SliceTensor | np.ndarray) -> np.ndarray:
    """Five probability planes with the same height/width as the slice."""
    image = slice_.data if isinstance(slice_, SliceTensor) else slice_
    return softmax(slice_scores(net, image[None])[0], axis=0)
