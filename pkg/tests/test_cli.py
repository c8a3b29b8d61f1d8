import json

import numpy as np
import pytest

from test_pipeline import tiny_config
from tumorseg.cli import main
from tumorseg.preprocess import normalize_volume
from tumorseg.volume import load_labels, load_volume, save_labels


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["phantom", "--out", str(root / "data"), "--count", "2", "--dims", "24,24,24"]) == 0
    tiny_config().save(root / "tiny.json")
    return root


def run(*argv):
    return main([str(a) for a in argv])


def test_phantom_files(workspace):
    names = sorted(p.name for p in (workspace / "data").iterdir())
    assert names == ["phantom_0000_labels.mmv", "phantom_0000_volume.mmv",
                     "phantom_0001_labels.mmv", "phantom_0001_volume.mmv"]


def test_preprocess_with_overrides(workspace, tmp_path):
    src = workspace / "data" / "phantom_0000_volume.mmv"
    assert run("preprocess", "--in", src, "--out", tmp_path / "n.mmv") == 0
    assert np.array_equal(load_volume(tmp_path / "n.mmv").data, normalize_volume(load_volume(src)).data)
    assert run("preprocess", "--in", src, "--out", tmp_path / "m.mmv",
               "--sigma", "20,20,20", "--offset", "100,100,100") == 0
    want = normalize_volume(load_volume(src), {k: (20, 100) for k in ("flair", "t1c", "t2")})
    assert np.array_equal(load_volume(tmp_path / "m.mmv").data, want.data)


def test_step_by_step_training_and_segmentation(workspace, tmp_path, capsys):
    data, cfg = workspace / "data", workspace / "tiny.json"
    fcnn, crf = tmp_path / "axial.fcnn", tmp_path / "axial.crf"
    assert run("train-fcnn", "--config", cfg, "--data", data, "--out", fcnn, "--axis", "axial") == 0
    assert json.loads((tmp_path / "axial.fcnn.loss.json").read_text())["stage"] == "step1"
    assert run("train-crf", "--config", cfg, "--fcnn", fcnn, "--slices", data, "--out", crf) == 0
    tuned_f, tuned_c = tmp_path / "tuned.fcnn", tmp_path / "tuned.crf"
    assert run("finetune", "--config", cfg, "--fcnn", fcnn, "--crf", crf, "--slices", data,
               "--out-fcnn", tuned_f, "--out-crf", tuned_c) == 0
    assert tuned_f.exists() and tuned_c.exists()

    volume, truth = data / "phantom_0001_volume.mmv", data / "phantom_0001_labels.mmv"
    seg = tmp_path / "seg.mmv"
    assert run("segment", "--config", cfg, "--volume", volume, "--out", seg,
               "--model", f"axial={tuned_f},{tuned_c}", "--views", "axial",
               "--skip-step", "4", "--dump", tmp_path / "dump") == 0
    assert load_labels(seg).dims == (24, 24, 24)
    assert (tmp_path / "dump" / "view_axial.mmv").exists()

    assert run("evaluate", "--pred", truth, "--truth", truth, "--out", tmp_path / "r.json") == 0
    out = capsys.readouterr().out
    assert "complete  dice 1.0000" in out
    assert json.loads((tmp_path / "r.json").read_text())["core"]["dice"] == 1.0


def test_train_all_views(workspace, tmp_path):
    assert run("train", "--config", workspace / "tiny.json", "--data", workspace / "data",
               "--model-dir", tmp_path, "--steps", "1", "2") == 0
    assert sorted(p.name for p in tmp_path.glob("*.crf")) == [
        "axial.crf", "coronal.crf", "sagittal.crf"]
    assert not (tmp_path / "axial.step3.json").exists()
    seg = tmp_path / "seg.mmv"
    assert run("segment", "--config", workspace / "tiny.json", "--model-dir", tmp_path,
               "--volume", workspace / "data" / "phantom_0000_volume.mmv", "--out", seg,
               "--no-postprocess") == 0
    assert seg.exists()


def test_fuse_and_postprocess(workspace, tmp_path):
    truth = workspace / "data" / "phantom_0000_labels.mmv"
    volume = workspace / "data" / "phantom_0000_volume.mmv"
    assert run("fuse", "--axial", truth, "--coronal", truth, "--sagittal", truth,
               "--out", tmp_path / "f.mmv") == 0
    assert np.array_equal(load_labels(tmp_path / "f.mmv").data, load_labels(truth).data)
    assert run("postprocess", "--labels", truth, "--volume", volume, "--normalize",
               "--theta", "31=0.2", "--theta", "theta61=0.01", "--skip-step", "4",
               "--out", tmp_path / "p.mmv") == 0
    assert np.array_equal(load_labels(tmp_path / "p.mmv").data, load_labels(truth).data)


def test_errors_exit_with_stage(workspace, tmp_path, capsys):
    assert run("evaluate", "--pred", tmp_path / "nope.mmv", "--truth", tmp_path / "nope.mmv") == 1
    assert "error: [evaluate]" in capsys.readouterr().err
    assert run("segment", "--volume", workspace / "data" / "phantom_0000_volume.mmv",
               "--model-dir", tmp_path) == 1
    assert "[load-model:axial]" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text('{"fcnn": {"n": 2}}')
    assert run("train-fcnn", "--config", bad, "--data", workspace / "data", "--out", tmp_path / "x") == 1
    assert "odd" in capsys.readouterr().err
    assert run("postprocess", "--labels", workspace / "data" / "phantom_0000_labels.mmv",
               "--volume", workspace / "data" / "phantom_0000_volume.mmv",
               "--theta", "99=1", "--out", tmp_path / "p.mmv") == 1
    assert "theta99" in capsys.readouterr().err


def test_benchmark_command_small(workspace, tmp_path, capsys):
    assert run("benchmark", "--config", workspace / "tiny.json", "--out", tmp_path,
               "--train-cases", "2", "--test-cases", "1") == 0
    out = capsys.readouterr().out
    assert "fused" in out and "runtime" in out
    report = json.loads((tmp_path / "report.json").read_text())
    assert set(report["dice"]) == {"axial", "coronal", "sagittal", "fused"}
    assert len(list((tmp_path / "labels").glob("*.mmv"))) == 4


def test_labels_written_by_cli_are_valid(workspace, tmp_path):
    lab = load_labels(workspace / "data" / "phantom_0000_labels.mmv")
    save_labels(lab, tmp_path / "copy.mmv")
    assert (tmp_path / "copy.mmv").read_bytes() == (
        workspace / "data" / "phantom_0000_labels.mmv").read_bytes()
