"""Mode-anchored robust intensity normalization of MR channels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import MultiModalVolume

# (sigma, offset) per channel, measured on a reference bias-corrected case
DEFAULT_TARGETS = {
    "flair": (30.0, 75.0),
    "t1c": (31.0, 99.0),
    "t2": (37.0, 55.0),
}


class NormalizationError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizationTargets:
    sigma: float
    offset: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0 <= self.offset <= 255:
            raise ValueError(f"offset must lie in [0, 255], got {self.offset}")


@dataclass(frozen=True)
class IntensityHistogram:
    counts: np.ndarray  # 256 unit-width bins over [0, 256)
    mode_bin: int
    voxel_count: int


def targets_for(name: str, overrides: dict | None = None) -> NormalizationTargets:
    table = dict(DEFAULT_TARGETS)
    table.update(overrides or {})
    if name not in table:
        raise NormalizationError(f"no normalization targets for channel {name!r}")
    sigma, offset = table[name]
    return NormalizationTargets(float(sigma), float(offset))


def rescale_to_255(channel: np.ndarray) -> np.ndarray:
    """Affine map of the channel's [min, max] onto [0, 255]. No quantization."""
    channel = np.asarray(channel, dtype=np.float64)
    lo, hi = channel.min(), channel.max()
    if hi <= lo:
        raise NormalizationError("degenerate intensity range")
    out = (channel - lo) * (255.0 / (hi - lo))
    # pin the end points and clip so rounding cannot push values off the range
    out[channel == lo] = 0.0
    out[channel == hi] = 255.0
    return np.clip(out, 0.0, 255.0, out=out)


def counted(channel: np.ndarray) -> np.ndarray:
    """Voxels that take part in histogram/deviation statistics (non-zero ones)."""
    return channel[channel != 0]


def histogram_mode(channel: np.ndarray) -> IntensityHistogram:
    values = counted(np.asarray(channel, dtype=np.float64))
    if values.size == 0:
        raise NormalizationError("empty foreground")
    bins = np.clip(np.floor(values), 0, 255).astype(np.int64)
    counts = np.bincount(bins, minlength=256)
    # argmax returns the first maximum, i.e. ties go to the lowest bin
    return IntensityHistogram(counts, int(np.argmax(counts)), int(values.size))


def robust_deviation(channel: np.ndarray, mode_value: float) -> float:
    """Root-mean-square deviation of the counted voxels from the histogram mode."""
    values = counted(np.asarray(channel, dtype=np.float64))
    if values.size == 0:
        raise NormalizationError("no counted voxels")
    return float(np.sqrt(np.mean((mode_value - values) ** 2)))


def normalize_channel(channel: np.ndarray, targets: NormalizationTargets) -> np.ndarray:
    """Normalize a channel already rescaled to [0, 255].

    Counted voxels go to ``(I - mode) / deviation * sigma + offset`` and are then
    clamped to [0, 255]; zero voxels stay zero.
    """
    channel = np.asarray(channel, dtype=np.float64)
    mode = histogram_mode(channel).mode_bin
    deviation = robust_deviation(channel, mode)
    if deviation == 0:
        raise NormalizationError("degenerate deviation")
    out = (channel - mode) / deviation * targets.sigma + targets.offset
    out = np.clip(out, 0.0, 255.0)
    out[channel == 0] = 0.0
    return out


def normalize_volume(volume: MultiModalVolume, overrides: dict | None = None) -> MultiModalVolume:
    """Run rescaling and mode/deviation normalization on every channel."""
    out = []
    for name, channel in zip(volume.channel_names, volume.data):
        try:
            rescaled = rescale_to_255(channel)
            out.append(normalize_channel(rescaled, targets_for(name, overrides)))
        except NormalizationError as exc:
            raise NormalizationError(f"channel {name!r}: {exc}") from None
    return MultiModalVolume(np.stack(out).astype(np.float32), volume.channel_names)
