import json

import pytest

from tumorseg.config import ConfigError, PipelineConfig


def test_defaults():
    c = PipelineConfig().validate()
    assert c.channels == ["flair", "t1c", "t2"]
    assert c.views == ["axial", "coronal", "sagittal"]
    assert (c.fcnn.n, c.fcnn.width, c.fcnn.base_lr, c.fcnn.decay_every) == (5, 64, 1e-5, 20)
    assert (c.crf.theta, c.crf.iterations) == ([160.0, 3.0, 3.0], 5)
    assert (c.crf.step2_rate, c.crf.step3_rate) == (1e-8, 1e-10)
    assert c.postprocess.steps == [1, 2, 3, 4, 5, 6]
    assert c.train_steps == [1, 2, 3]


def test_json_round_trip(tmp_path):
    c = PipelineConfig().updated(**{"fcnn.n": 3, "crf.iterations": 2, "seed": 9})
    c.save(tmp_path / "c.json")
    assert PipelineConfig.load(tmp_path / "c.json").to_json() == c.to_json()


def test_partial_documents_merge_into_defaults():
    c = PipelineConfig.from_json({
        "normalization": {"t2": {"sigma": 40}},
        "postprocess": {"thresholds": {"theta31": 0.2}},
    })
    assert c.normalization["t2"] == {"sigma": 40, "offset": 55.0}
    assert c.normalization["flair"] == {"sigma": 30.0, "offset": 75.0}
    assert c.thresholds().theta31 == 0.2 and c.thresholds().theta11 == 150


@pytest.mark.parametrize("doc, message", [
    ({"bogus": 1}, "unknown config key 'bogus'"),
    ({"fcnn": {"depth": 3}}, "fcnn.depth"),
    ({"views": ["axial", "oblique"]}, "views"),
    ({"views": ["axial", "axial"]}, "duplicate"),
    ({"fcnn": {"n": 4}}, "odd"),
    ({"postprocess": {"steps": [0]}}, "1..6"),
    ({"train_steps": [4]}, "1..3"),
    ({"crf": {"iterations": 0}}, "iteration"),
    ({"postprocess": {"thresholds": {"theta31": 2}}}, "ratio"),
])
def test_validation(doc, message):
    with pytest.raises((ConfigError, ValueError), match=message):
        PipelineConfig.from_json(doc)


def test_load_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError, match="cannot read"):
        PipelineConfig.load(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        PipelineConfig.load(tmp_path / "missing.json")


def test_model_paths(tmp_path):
    c = PipelineConfig(models={"axial": {"fcnn": "a.fcnn", "crf": None}})
    assert c.model_paths("axial") == (tmp_path.__class__("a.fcnn"), None)
    with pytest.raises(ConfigError):
        c.model_paths("coronal")
    (tmp_path / "coronal.crf").write_text(json.dumps({}))
    d = PipelineConfig(model_dir=str(tmp_path))
    fcnn, crf = d.model_paths("coronal")
    assert fcnn == tmp_path / "coronal.fcnn" and crf == tmp_path / "coronal.crf"
    assert d.model_paths("axial")[1] is None


def test_updated_does_not_mutate():
    c = PipelineConfig()
    d = c.updated(**{"crf.w_init": [0.5, 0.5]})
    assert c.crf.w_init == [1.0, 1.0] and d.crf.w_init == [0.5, 0.5]
