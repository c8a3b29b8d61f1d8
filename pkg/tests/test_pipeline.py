import json

import numpy as np
import pytest

from tumorseg.config import CrfSettings, FcnnSettings, PipelineConfig
from tumorseg.crf.meanfield import CrfParameters
from tumorseg.fcnn.network import FCNN
from tumorseg.phantom import PhantomConfig, generate_phantom
from tumorseg.pipeline import (
    Case,
    StageError,
    load_cases,
    load_models,
    run_segment,
    run_train,
    segment_view,
    training_slices,
)
from tumorseg.preprocess import normalize_volume
from tumorseg.volume import LabelVolume, MultiModalVolume, load_labels, save_labels, save_volume

SMALL = PhantomConfig(dims=(24, 24, 24), tumor_radius=6.0)


def tiny_config(**extra) -> PipelineConfig:
    return PipelineConfig(
        fcnn=FcnnSettings(n=1, width=2, per_class=2, epochs=1, batch_size=10, base_lr=1e-3,
                          input_shift=100.0, input_scale=0.02),
        crf=CrfSettings(slices_per_volume=1, iterations=2, step2_rate=1e-4, step2_epochs=1,
                        step3_rate=1e-6, step3_epochs=1),
        **extra,
    ).validate()


def write_cases(directory, seeds):
    directory.mkdir(parents=True, exist_ok=True)
    for s in seeds:
        vol, lab = generate_phantom(s, SMALL)
        save_volume(vol, directory / f"case{s}_volume.mmv")
        save_labels(lab, directory / f"case{s}_labels.mmv")


def test_load_cases(tmp_path):
    write_cases(tmp_path / "d", [0, 1])
    cases = load_cases(tmp_path / "d")
    assert [c.name for c in cases] == ["case0", "case1"]
    with pytest.raises(FileNotFoundError):
        load_cases(tmp_path / "missing")
    (tmp_path / "d" / "case1_labels.mmv").unlink()
    with pytest.raises(FileNotFoundError, match="case1"):
        load_cases(tmp_path / "d")
    (tmp_path / "e").mkdir()
    with pytest.raises(FileNotFoundError, match="no"):
        load_cases(tmp_path / "e")


def test_training_slices_pick_tumour_slices():
    vol, lab = generate_phantom(0, SMALL)
    all_slices = training_slices(vol, lab, "axial", 0)
    bearing = [k for k in range(24) if lab.data[k].max() > 0]
    assert len(all_slices) == len(bearing)
    picked = training_slices(vol, lab, "axial", 3)
    assert len(picked) == 3
    assert all(s.labels.max() > 0 for s in picked)
    assert training_slices(vol, LabelVolume(np.zeros((24, 24, 24))), "axial", 3) == []


def test_segment_view_shape_and_crf_option():
    vol, _ = generate_phantom(0, SMALL)
    norm = normalize_volume(vol)
    net = FCNN.create(n=1, c_in=3, width=2, seed=0, input_shift=100, input_scale=0.02)
    plain = segment_view(norm, net, None, "coronal")
    with_crf = segment_view(norm, net, CrfParameters(iterations=1), "coronal")
    assert plain.dims == with_crf.dims == (24, 24, 24)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    write_cases(root / "data", [0, 1])
    config = tiny_config(data_dir=str(root / "data"), model_dir=str(root / "models"))
    written = run_train(config)
    return root, config, written


def test_training_writes_models_and_traces(trained):
    root, _, written = trained
    assert set(written) == {"axial", "coronal", "sagittal"}
    for view in written:
        assert (root / "models" / f"{view}.fcnn").exists()
        assert CrfParameters.load(root / "models" / f"{view}.crf").iterations == 2
        for step in (1, 2, 3):
            trace = json.loads((root / "models" / f"{view}.step{step}.json").read_text())
            assert trace["stage"] == f"step{step}" and len(trace["loss"]) == 1


def test_segment_end_to_end(trained, tmp_path):
    root, config, _ = trained
    cfg = config.updated(input=str(root / "data" / "case0_volume.mmv"),
                         output=str(tmp_path / "seg.mmv"), dump_dir=str(tmp_path / "dump"))
    final = run_segment(cfg)
    assert load_labels(tmp_path / "seg.mmv").dims == final.dims == (24, 24, 24)
    for name in ("view_axial", "view_coronal", "view_sagittal", "fused", "final"):
        assert (tmp_path / "dump" / f"{name}.mmv").exists()
    single = run_segment(cfg.updated(views=["axial"], dump_dir=str(tmp_path / "one")))
    assert np.array_equal(load_labels(tmp_path / "one" / "view_axial.mmv").data,
                          load_labels(tmp_path / "one" / "fused.mmv").data)
    assert single.dims == (24, 24, 24)


def test_stage_errors(trained, tmp_path):
    root, config, _ = trained
    vol, _ = generate_phantom(0, SMALL)
    renamed = MultiModalVolume(vol.data, ("flair", "t1c", "t1"))
    with pytest.raises(StageError, match=r"^\[preprocess\]"):
        run_segment(config, renamed)
    with pytest.raises(StageError, match=r"^\[load-model:axial\]"):
        run_segment(config.updated(model_dir=str(tmp_path)), vol)
    with pytest.raises(StageError, match=r"^\[load-volume\]"):
        run_segment(config.updated(input=str(tmp_path / "none.mmv")))


def test_train_without_model_dir():
    with pytest.raises(StageError, match=r"^\[train\]"):
        run_train(tiny_config(), [Case("x", *generate_phantom(0, SMALL))])
