"""Pipeline configuration: one JSON document, defaults embedded, any key overridable."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .crf.meanfield import DEFAULT_THETA
from .postprocess import ALL_STEPS, PostprocessThresholds
from .preprocess import DEFAULT_TARGETS
from .volume import AXES, DEFAULT_CHANNELS


class ConfigError(ValueError):
    pass


@dataclass
class FcnnSettings:
    n: int = 5
    width: int = 64
    input_shift: float = 0.0
    input_scale: float = 1.0
    per_class: int = 1000  # patches per class drawn from each training volume
    base_lr: float = 1e-5
    decay_every: int = 20
    decay_factor: float = 10.0
    epochs: int = 60
    batch_size: int = 128
    momentum: float = 0.9
    dtype: str = "float32"


@dataclass
class CrfSettings:
    theta: list = field(default_factory=lambda: list(DEFAULT_THETA))
    iterations: int = 5
    w_init: list = field(default_factory=lambda: [1.0, 1.0])
    slices_per_volume: int = 3  # tumour-bearing slices per training volume
    step2_rate: float = 1e-8
    step2_epochs: int = 5
    step3_rate: float = 1e-10
    step3_epochs: int = 5
    momentum: float = 0.9


@dataclass
class PostprocessSettings:
    steps: list = field(default_factory=lambda: list(ALL_STEPS))
    thresholds: dict = field(default_factory=lambda: asdict(PostprocessThresholds()))


@dataclass
class PipelineConfig:
    channels: list = field(default_factory=lambda: list(DEFAULT_CHANNELS))
    normalization: dict = field(
        default_factory=lambda: {k: {"sigma": s, "offset": o} for k, (s, o) in DEFAULT_TARGETS.items()}
    )
    views: list = field(default_factory=lambda: list(AXES))
    # view -> {"fcnn": path, "crf": path or null}
    models: dict = field(default_factory=dict)
    fcnn: FcnnSettings = field(default_factory=FcnnSettings)
    crf: CrfSettings = field(default_factory=CrfSettings)
    postprocess: PostprocessSettings = field(default_factory=PostprocessSettings)
    train_steps: list = field(default_factory=lambda: [1, 2, 3])
    seed: int = 0
    input: str | None = None
    output: str | None = None
    data_dir: str | None = None
    model_dir: str | None = None
    dump_dir: str | None = None

    def validate(self) -> "PipelineConfig":
        if not self.views or any(v not in AXES for v in self.views):
            raise ConfigError(f"views must be a non-empty subset of {AXES}, got {self.views}")
        if len(set(self.views)) != len(self.views):
            raise ConfigError(f"duplicate views in {self.views}")
        if self.fcnn.n < 1 or self.fcnn.n % 2 == 0:
            raise ConfigError(f"pool size n must be odd and >= 1, got {self.fcnn.n}")
        if len(self.channels) not in (3, 4):
            raise ConfigError(f"expected 3 or 4 modalities, got {len(self.channels)}")
        if any(s not in ALL_STEPS for s in self.postprocess.steps):
            raise ConfigError(f"post-processing steps must lie in 1..6, got {self.postprocess.steps}")
        if any(s not in (1, 2, 3) for s in self.train_steps):
            raise ConfigError(f"training steps must lie in 1..3, got {self.train_steps}")
        if self.crf.iterations < 1:
            raise ConfigError("CRF needs at least one iteration")
        PostprocessThresholds.from_json(self.postprocess.thresholds)
        return self

    # -- derived views -------------------------------------------------------

    def normalization_targets(self) -> dict:
        return {k: (v["sigma"], v["offset"]) for k, v in self.normalization.items()}

    def thresholds(self) -> PostprocessThresholds:
        return PostprocessThresholds.from_json(self.postprocess.thresholds)

    def model_paths(self, view: str) -> tuple[Path, Path | None]:
        entry = self.models.get(view)
        if entry is None and self.model_dir is not None:
            base = Path(self.model_dir)
            crf = base / f"{view}.crf"
            return base / f"{view}.fcnn", crf if crf.exists() else None
        if entry is None or not entry.get("fcnn"):
            raise ConfigError(f"no model configured for view {view!r}")
        crf = entry.get("crf")
        return Path(entry["fcnn"]), Path(crf) if crf else None

    # -- JSON ----------------------------------------------------------------

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "PipelineConfig":
        return _merge(cls(), doc, "").validate()

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_json(doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    def updated(self, **overrides) -> "PipelineConfig":
        """Copy with dotted-key overrides, e.g. ``updated(**{"fcnn.n": 3})``."""
        doc: dict = {}
        for key, value in overrides.items():
            node = doc
            *head, last = key.split(".")
            for part in head:
                node = node.setdefault(part, {})
            node[last] = value
        return _merge(copy.deepcopy(self), doc, "").validate()


def _merge(target, doc: dict, prefix: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"expected an object at {prefix or 'top level'}")
    names = {f.name for f in fields(target)}
    for key, value in doc.items():
        if key not in names:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        current = getattr(target, key)
        if is_dataclass(current):
            _merge(current, value, prefix + key + ".")
        elif key == "thresholds" or key == "normalization" or key == "models":
            merged = copy.deepcopy(current)
            for k, v in dict(value).items():
                if isinstance(v, dict) and isinstance(merged.get(k), dict):
                    merged[k] = {**merged[k], **v}
                else:
                    merged[k] = v
            setattr(target, key, merged)
        else:
            setattr(target, key, value)
    return target
