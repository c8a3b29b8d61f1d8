"""End-to-end orchestration: normalize, per-view FCNN + CRF, fuse, post-process.

Training and segmentation errors are re-raised as :class:`StageError` carrying
the name of the stage that failed, so the CLI can report it.
"""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .crf.meanfield import CrfParameters, crf_rnn_forward, potts
from .crf.training import SliceSchedule, TrainingSlice, finetune_step3, train_step2
from .fcnn.inference import slice_scores
from .fcnn.network import FCNN
from .fcnn.patches import PatchBatch, plane_stack, sample_training_patches
from .fcnn.training import TrainingSchedule, train_step1
from .fusion import fuse_many
from .postprocess import postprocess
from .preprocess import normalize_volume
from .volume import (
    LabelVolume,
    MultiModalVolume,
    load_labels,
    load_volume,
    save_labels,
)

log = logging.getLogger(__name__)

VOLUME_SUFFIX = "_volume.mmv"
LABELS_SUFFIX = "_labels.mmv"
SLICE_BATCH = 8


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        raise StageError(name, str(exc) or type(exc).__name__) from exc


@dataclass
class Case:
    name: str
    volume: MultiModalVolume
    labels: LabelVolume


def load_cases(directory) -> list[Case]:
    """Pairs ``NAME_volume.mmv`` / ``NAME_labels.mmv`` found in ``directory``, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory {directory} does not exist")
    cases = []
    for vol_path in sorted(directory.glob("*" + VOLUME_SUFFIX)):
        name = vol_path.name[: -len(VOLUME_SUFFIX)]
        lab_path = directory / (name + LABELS_SUFFIX)
        if not lab_path.exists():
            raise FileNotFoundError(f"labels for case {name!r} missing: {lab_path}")
        volume, labels = load_volume(vol_path), load_labels(lab_path)
        if volume.dims != labels.dims:
            raise ValueError(f"case {name!r}: volume dims {volume.dims} != label dims {labels.dims}")
        cases.append(Case(name, volume, labels))
    if not cases:
        raise FileNotFoundError(f"no *{VOLUME_SUFFIX} files in {directory}")
    return cases


# ---------------------------------------------------------------------------
# segmentation


def segment_view(volume: MultiModalVolume, net: FCNN, crf: CrfParameters | None,
                 axis: str) -> LabelVolume:
    """Label every slice of a normalized volume along one view.

    The label is the argmax of the final beliefs, ties going to the lower
    class index; without CRF parameters the FCNN softmax is used directly.
    """
    stack = plane_stack(volume.data, axis)
    out = np.empty((stack.shape[0],) + stack.shape[2:], dtype=np.uint8)
    for start in range(0, len(stack), SLICE_BATCH):
        chunk = np.ascontiguousarray(stack[start : start + SLICE_BATCH], dtype=np.float64)
        scores = slice_scores(net, chunk)
        for k, (score, image) in enumerate(zip(scores, chunk)):
            beliefs = score if crf is None else crf_rnn_forward(score, image, crf)
            out[start + k] = np.argmax(beliefs, axis=0)
    grid = np.empty(volume.dims, dtype=np.uint8)
    plane_stack(grid, axis)[...] = out
    return LabelVolume(grid)


@dataclass
class SegmentationResult:
    views: dict  # view -> LabelVolume
    fused: LabelVolume
    final: LabelVolume
    normalized: MultiModalVolume = field(repr=False)


def load_models(config: PipelineConfig) -> dict:
    models = {}
    for view in config.views:
        with stage(f"load-model:{view}"):
            fcnn_path, crf_path = config.model_paths(view)
            if not Path(fcnn_path).exists():
                raise FileNotFoundError(f"missing FCNN model for view {view}: {fcnn_path}")
            net = FCNN.load(fcnn_path)
            crf = CrfParameters.load(crf_path) if crf_path else None
            if crf is not None and crf.iterations != config.crf.iterations:
                log.info("view %s: CRF file sets T=%d", view, crf.iterations)
            models[view] = (net, crf)
    return models


def segment_volume(volume: MultiModalVolume, config: PipelineConfig, models: dict,
                   normalized: bool = False) -> SegmentationResult:
    with stage("preprocess"):
        if list(volume.channel_names) != list(config.channels):
            raise ValueError(
                f"volume channels {list(volume.channel_names)} != configured {config.channels}"
            )
        norm = volume if normalized else normalize_volume(volume, config.normalization_targets())
    views = {}
    for view in config.views:
        net, crf = models[view]
        with stage(f"segment:{view}"):
            if net.c_in != volume.channels:
                raise ValueError(f"model expects {net.c_in} channels, volume has {volume.channels}")
            views[view] = segment_view(norm, net, crf, view)
    with stage("fuse"):
        fused = fuse_many([views[v] for v in config.views])
    with stage("postprocess"):
        final = postprocess(fused, norm, config.thresholds(), config.postprocess.steps)
    return SegmentationResult(views, fused, final, norm)


def dump_result(result: SegmentationResult, directory) -> None:
    """Write every intermediate label volume so later stages can be replayed."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for view, labels in result.views.items():
        save_labels(labels, directory / f"view_{view}.mmv")
    save_labels(result.fused, directory / "fused.mmv")
    save_labels(result.final, directory / "final.mmv")


def run_segment(config: PipelineConfig, volume: MultiModalVolume | None = None) -> LabelVolume:
    config.validate()
    if volume is None:
        with stage("load-volume"):
            if not config.input:
                raise ValueError("no input volume configured")
            volume = load_volume(config.input)
    result = segment_volume(volume, config, load_models(config))
    if config.dump_dir:
        with stage("dump"):
            dump_result(result, config.dump_dir)
    if config.output:
        with stage("write-output"):
            save_labels(result.final, config.output)
    return result.final


# ---------------------------------------------------------------------------
# training


def training_slices(volume: MultiModalVolume, labels: LabelVolume, axis: str,
                    per_volume: int) -> list[TrainingSlice]:
    """Evenly spaced tumour-bearing slices (all of them when ``per_volume`` <= 0)."""
    stack = plane_stack(volume.data, axis)
    label_stack = plane_stack(labels.data, axis)
    bearing = np.flatnonzero(label_stack.reshape(len(label_stack), -1).max(axis=1) > 0)
    if bearing.size == 0:
        return []
    if 0 < per_volume < bearing.size:
        bearing = np.unique(bearing[np.linspace(0, bearing.size - 1, per_volume).round().astype(int)])
    return [
        TrainingSlice(np.ascontiguousarray(stack[k], dtype=np.float64),
                      np.ascontiguousarray(label_stack[k]))
        for k in bearing
    ]


def normalize_cases(config: PipelineConfig, cases: list[Case]) -> list[Case]:
    targets = config.normalization_targets()
    return [Case(c.name, normalize_volume(c.volume, targets), c.labels) for c in cases]


def train_fcnn(config: PipelineConfig, cases: list[Case], view: str):
    """Step 1 on normalized cases. Returns ``(net, loss trace)``."""
    fs = config.fcnn
    batch = PatchBatch.concatenate(
        sample_training_patches(c.volume, c.labels, fs.per_class, fs.n, view, config.seed + k)
        for k, c in enumerate(cases)
    )
    net = FCNN.create(fs.n, len(config.channels), fs.width, config.seed,
                      fs.input_shift, fs.input_scale)
    schedule = TrainingSchedule(fs.base_lr, fs.decay_every, fs.decay_factor, fs.epochs,
                                fs.batch_size, fs.momentum, config.seed, fs.dtype)
    return train_step1(net, batch, schedule)


def slices_for(config: PipelineConfig, cases: list[Case], view: str) -> list[TrainingSlice]:
    slices = [s for c in cases
              for s in training_slices(c.volume, c.labels, view, config.crf.slices_per_volume)]
    if not slices:
        raise ValueError("no tumour-bearing training slices")
    return slices


def train_crf(config: PipelineConfig, net: FCNN, slices: list[TrainingSlice]):
    """Step 2 from the configured initial ``w`` and Potts compatibility."""
    cs = config.crf
    params = CrfParameters(cs.w_init, potts(), cs.theta, cs.iterations)
    schedule = SliceSchedule(cs.step2_rate, cs.step2_epochs, cs.momentum, config.seed)
    return train_step2(net, params, slices, schedule)


def finetune(config: PipelineConfig, net: FCNN, params: CrfParameters, slices):
    """Step 3. Returns ``(net, params, loss trace)``; ``net`` is updated in place."""
    cs = config.crf
    schedule = SliceSchedule(cs.step3_rate, cs.step3_epochs, cs.momentum, config.seed)
    return finetune_step3(net, params, slices, schedule)


def write_trace(path, stage_name: str, trace) -> None:
    Path(path).write_text(
        json.dumps({"stage": stage_name, "loss": [float(x) for x in trace]}) + "\n"
    )


def train_view(config: PipelineConfig, cases: list[Case], view: str, model_dir: Path,
               normalized: bool = False) -> dict:
    """Run the enabled training steps for one view; returns the written paths.

    Models go to ``VIEW.fcnn`` / ``VIEW.crf`` and loss traces to
    ``VIEW.stepK.json`` inside ``model_dir``.
    """
    fcnn_path, crf_path = model_dir / f"{view}.fcnn", model_dir / f"{view}.crf"
    written = {}
    if not normalized:
        with stage(f"preprocess:{view}"):
            cases = normalize_cases(config, cases)

    if 1 in config.train_steps:
        with stage(f"train-fcnn:{view}"):
            net, trace = train_fcnn(config, cases, view)
            net.save(fcnn_path)
            write_trace(model_dir / f"{view}.step1.json", "step1", trace)
            written["fcnn"] = fcnn_path

    slices = None
    if 2 in config.train_steps or 3 in config.train_steps:
        with stage(f"slices:{view}"):
            slices = slices_for(config, cases, view)

    if 2 in config.train_steps:
        with stage(f"train-crf:{view}"):
            params, trace = train_crf(config, FCNN.load(fcnn_path), slices)
            params.save(crf_path)
            write_trace(model_dir / f"{view}.step2.json", "step2", trace)
            written["crf"] = crf_path

    if 3 in config.train_steps:
        with stage(f"finetune:{view}"):
            net, params, trace = finetune(config, FCNN.load(fcnn_path),
                                          CrfParameters.load(crf_path), slices)
            net.save(fcnn_path)
            params.save(crf_path)
            write_trace(model_dir / f"{view}.step3.json", "step3", trace)
            written["fcnn"], written["crf"] = fcnn_path, crf_path
    return written


def run_train(config: PipelineConfig, cases: list[Case] | None = None) -> dict:
    """Train every configured view. Returns ``{view: {"fcnn": path, "crf": path}}``."""
    config.validate()
    if not config.model_dir:
        raise StageError("train", "no model directory configured")
    model_dir = Path(config.model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    if cases is None:
        with stage("load-data"):
            if not config.data_dir:
                raise ValueError("no training data directory configured")
            cases = load_cases(config.data_dir)
    return {view: train_view(config, cases, view, model_dir) for view in config.views}
