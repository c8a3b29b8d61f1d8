import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from tumorseg.evaluation import (
    REGIONS,
    region_mask,
    report_json,
    score,
    score_masks,
    score_report,
    write_report,
)
from tumorseg.volume import LabelVolume

grids = arrays(np.uint8, (3, 4, 3), elements=st.integers(0, 4))


@settings(max_examples=60)
@given(grids, grids)
def test_matches_set_oracle(p, t):
    for region in REGIONS:
        got = score(LabelVolume(p), LabelVolume(t), region)
        want = oracles.set_metrics(p, t, region)
        assert (got.dice, got.ppv, got.sensitivity) == pytest.approx(want, abs=1e-12)


@given(grids, grids)
def test_dice_is_symmetric_and_bounded(p, t):
    a = score(LabelVolume(p), LabelVolume(t), "complete")
    b = score(LabelVolume(t), LabelVolume(p), "complete")
    assert a.dice == b.dice and a.ppv == b.sensitivity
    assert 0.0 <= a.dice <= 1.0


def test_region_membership():
    lab = np.array([[[0, 1, 2, 3, 4]]])
    assert region_mask(lab, "complete").tolist() == [[[False, True, True, True, True]]]
    assert region_mask(lab, "core").tolist() == [[[False, True, False, True, True]]]
    assert region_mask(lab, "enhancing").tolist() == [[[False, False, False, False, True]]]
    with pytest.raises(ValueError):
        region_mask(lab, "edema")


def test_empty_conventions():
    empty = np.zeros((2, 2), dtype=bool)
    full = np.ones((2, 2), dtype=bool)
    assert score_masks(empty, empty).dice == 1.0
    one_sided = score_masks(full, empty)
    assert (one_sided.dice, one_sided.ppv, one_sided.sensitivity) == (0.0, 0.0, 0.0)
    other = score_masks(empty, full)
    assert (other.dice, other.ppv, other.sensitivity) == (0.0, 0.0, 0.0)


def test_dims_mismatch():
    with pytest.raises(ValueError):
        score(LabelVolume(np.zeros((1, 1, 1))), LabelVolume(np.zeros((1, 1, 2))), "core")


def test_report_json(tmp_path, rng):
    p = LabelVolume(rng.integers(0, 5, (4, 4, 4)))
    report = score_report(p, p)
    write_report(report, tmp_path / "r.json")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc == report_json(report)
    assert set(doc) == set(REGIONS) and doc["core"]["dice"] == 1.0
