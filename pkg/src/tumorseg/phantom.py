"""Synthetic multi-modal tumor phantoms with known ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .volume import DEFAULT_CHANNELS, LabelVolume, MultiModalVolume

# Per-channel class means, indexed by label (healthy, necrosis, edema,
# non-enhancing core, enhancing core). Raw scanner-like units. Besides keeping
# the classes apart, the table keeps the normalized phantom away from the
# post-processing decision boundaries: only edema is bright in Flair (so a
# whole tumour never reads as an artefact), and every non-enhancing class is
# bright in at least one of Flair, T1c and T2.
DEFAULT_MEANS = {
    "flair": (300.0, 200.0, 600.0, 140.0, 250.0),
    "t1c": (430.0, 310.0, 680.0, 370.0, 760.0),
    "t2": (260.0, 700.0, 540.0, 640.0, 480.0),
    "t1": (420.0, 200.0, 340.0, 270.0, 560.0),
}
# Cerebrospinal fluid: healthy (label 0) but dark in Flair and bright in T2.
# It only has to stand apart from the tumour classes, not from healthy tissue.
DEFAULT_CSF_MEANS = {"flair": 80.0, "t1c": 430.0, "t2": 820.0, "t1": 120.0}


class PhantomError(ValueError):
    pass


@dataclass
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 32, 32)
    channel_names: tuple[str, ...] = DEFAULT_CHANNELS
    noise: float = 10.0
    # semi-axes of the brain ellipsoid as fractions of each extent
    brain_extent: tuple[float, float, float] = (0.46, 0.46, 0.46)
    tumor_radius: float = 8.0
    radius_jitter: float = 0.15
    # outer radii of the nested subregions relative to the edema boundary
    enhancing_outer: float = 0.62
    shell_outer: float = 0.45
    core_outer: float = 0.32
    enable_shell: bool = True
    means: dict = field(default_factory=lambda: dict(DEFAULT_MEANS))
    # semi-axes of the central ventricle as fractions of the brain semi-axes;
    # None disables it
    csf_extent: tuple[float, float, float] | None = (0.45, 0.35, 0.45)
    csf_means: dict = field(default_factory=lambda: dict(DEFAULT_CSF_MEANS))

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 24:
            raise PhantomError(f"phantom dims must be at least 24^3, got {self.dims}")
        if self.noise < 0 or not np.isfinite(self.noise):
            raise PhantomError(f"noise scale must be non-negative, got {self.noise}")
        if self.tumor_radius <= 0:
            raise PhantomError("tumor radius must be positive")
        reach = self.tumor_radius * (1 + self.radius_jitter) + 1
        if 2 * reach >= min(self.dims):
            raise PhantomError(
                f"tumor of radius {self.tumor_radius} does not fit in dims {self.dims}"
            )
        if not 0 < self.core_outer < self.shell_outer < self.enhancing_outer < 1:
            raise PhantomError("subregion radii must satisfy core < shell < enhancing < 1")
        for name in self.channel_names:
            if name not in self.means or len(self.means[name]) != 5:
                raise PhantomError(f"no class means for channel {name!r}")
        if self.csf_extent is not None:
            if len(self.csf_extent) != 3 or not all(0 < e < 1 for e in self.csf_extent):
                raise PhantomError("ventricle extent must be three fractions in (0, 1)")
            missing = [n for n in self.channel_names if n not in self.csf_means]
            if missing:
                raise PhantomError(f"no ventricle mean for channel {missing[0]!r}")
        if self.noise > 0:
            for name in self.channel_names:
                m = np.sort(np.asarray(self.means[name], dtype=float))
                if np.min(np.diff(m)) < 3 * self.noise:
                    raise PhantomError(
                        f"class means of {name!r} closer than 3x the noise scale"
                    )
                if self.csf_extent is not None:
                    gap = np.abs(np.asarray(self.means[name][1:]) - self.csf_means[name]).min()
                    if gap < 3 * self.noise:
                        raise PhantomError(
                            f"ventricle mean of {name!r} closer than 3x the noise scale "
                            "to a tumour class"
                        )


def generate_phantom(seed: int, config: PhantomConfig | None = None):
    """Generate ``(MultiModalVolume, LabelVolume)`` deterministically from ``seed``.

    The tumor is a randomly rotated ellipsoid of edema enclosing an enhancing
    rim, an optional thin non-enhancing shell and a necrotic core. Healthy
    tissue contains an optional central ventricle of fluid. Voxels outside the
    brain ellipsoid are exactly zero, mimicking skull stripping.
    """
    config = config or PhantomConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    dims = np.asarray(config.dims)
    grid = np.stack(np.meshgrid(*(np.arange(d, dtype=float) for d in dims), indexing="ij"), -1)

    centre = (dims - 1) / 2.0
    brain_axes = np.asarray(config.brain_extent) * dims
    brain = (((grid - centre) / brain_axes) ** 2).sum(-1) <= 1.0

    reach = config.tumor_radius * (1 + config.radius_jitter)
    lo = np.maximum(centre - brain_axes + reach, reach + 1)
    hi = np.minimum(centre + brain_axes - reach, dims - reach - 2)
    lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
    tumor_centre = rng.uniform(lo, hi)
    scales = config.tumor_radius * (1 + rng.uniform(-config.radius_jitter, config.radius_jitter, 3))
    rotation = Rotation.random(random_state=rng).as_matrix()
    local = (grid - tumor_centre) @ rotation
    rho = np.sqrt(((local / scales) ** 2).sum(-1))

    labels = np.zeros(config.dims, dtype=np.uint8)
    labels[rho <= 1.0] = 2
    labels[rho <= config.enhancing_outer] = 4
    if config.enable_shell:
        labels[rho <= config.shell_outer] = 3
    labels[rho <= config.core_outer] = 1
    inside = brain | (labels > 0)
    csf = np.zeros(config.dims, dtype=bool)
    if config.csf_extent is not None:
        csf_axes = brain_axes * np.asarray(config.csf_extent)
        csf = ((((grid - centre) / csf_axes) ** 2).sum(-1) <= 1.0) & (labels == 0)

    channels = []
    for name in config.channel_names:
        means = np.asarray(config.means[name], dtype=np.float64)
        values = np.where(csf, config.csf_means.get(name, 0.0), means[labels])
        if config.noise > 0:
            values = values + rng.normal(0.0, config.noise, size=values.shape)
        values = np.where(inside, np.maximum(values, 1.0), 0.0)
        channels.append(values.astype(np.float32))
    return MultiModalVolume(np.stack(channels), config.channel_names), LabelVolume(labels)
