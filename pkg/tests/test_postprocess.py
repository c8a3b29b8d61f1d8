import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tumorseg.postprocess import (
    PostprocessThresholds,
    postprocess,
    region_mean_intensity,
)
from tumorseg.volume import LabelVolume, MultiModalVolume


def _volume(dims, flair=100.0, t1c=130.0, t2=100.0):
    data = np.empty((3, *dims))
    data[0], data[1], data[2] = flair, t1c, t2
    return data


def test_threshold_defaults_and_validation():
    th = PostprocessThresholds()
    assert (th.theta11, th.theta12, th.theta21, th.theta22, th.theta23) == (150, 150, 0.8, 125, 0.9)
    assert (th.theta31, th.theta41, th.theta61, th.theta62) == (0.1, 100, 0.05, 85)
    with pytest.raises(ValueError):
        PostprocessThresholds(theta31=1.5)
    with pytest.raises(ValueError):
        PostprocessThresholds(theta11=0)
    with pytest.raises(ValueError, match="unknown"):
        PostprocessThresholds.from_json({"theta99": 1})
    assert PostprocessThresholds.from_json(th.to_json()) == th


def test_region_mean_intensity():
    channel = np.arange(8.0).reshape(2, 2, 2)
    comp = np.zeros((2, 2, 2), dtype=bool)
    comp[0, 0] = True
    assert region_mean_intensity(channel, comp) == 0.5
    with pytest.raises(ValueError, match="empty"):
        region_mean_intensity(channel, np.zeros((2, 2, 2), dtype=bool))


def test_statistics_are_recomputed_between_steps():
    """Step 1 removes a bright blob; step 3 must then measure sizes without it."""
    dims = (12, 12, 12)
    labels = np.zeros(dims, dtype=np.uint8)
    data = _volume(dims)
    labels[0:6, 0:6, 0:6] = 2  # 216 voxels, bright -> removed by step 1
    data[0][0:6, 0:6, 0:6] = 200
    data[2][0:6, 0:6, 0:6] = 200
    labels[8:11, 8:11, 8:11] = 2  # 27 voxels
    labels[8, 0, 0:3] = 2  # 3 voxels, 3/27 >= 0.1 -> kept once the big blob is gone
    out = postprocess(LabelVolume(labels), MultiModalVolume(data), steps={1, 3}).data
    assert out[0:6, 0:6, 0:6].max() == 0
    assert np.all(out[8, 0, 0:3] == 2)
    only3 = postprocess(LabelVolume(labels), MultiModalVolume(data), steps={3}).data
    assert np.all(only3[8, 0, 0:3] == 0)  # 3/216 < 0.1


def test_steps_run_in_ascending_order_regardless_of_input_order():
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 5, size=(8, 8, 8)).astype(np.uint8)
    vol = MultiModalVolume(rng.uniform(0, 255, size=(3, 8, 8, 8)))
    a = postprocess(LabelVolume(labels), vol, steps=[6, 2, 4, 1])
    b = postprocess(LabelVolume(labels), vol, steps=[1, 2, 4, 6])
    assert np.array_equal(a.data, b.data)


def test_empty_tumour_is_left_alone():
    dims = (6, 6, 6)
    out = postprocess(LabelVolume(np.zeros(dims)), MultiModalVolume(_volume(dims)))
    assert out.data.max() == 0


def test_errors():
    dims = (4, 4, 4)
    with pytest.raises(ValueError, match="dims"):
        postprocess(LabelVolume(np.zeros((4, 4, 5))), MultiModalVolume(_volume(dims)))
    with pytest.raises(ValueError, match="steps"):
        postprocess(LabelVolume(np.zeros(dims)), MultiModalVolume(_volume(dims)), steps=[7])
    with pytest.raises(ValueError, match="flair"):
        postprocess(LabelVolume(np.zeros(dims)),
                    MultiModalVolume(_volume(dims), ("a", "b", "c")), steps=[1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sets(st.integers(1, 6)))
def test_invariants(seed, steps):
    rng = np.random.default_rng(seed)
    labels = (rng.random((8, 8, 8)) < 0.3) * rng.integers(1, 5, size=(8, 8, 8))
    vol = MultiModalVolume(rng.uniform(0, 255, size=(3, 8, 8, 8)))
    out = postprocess(LabelVolume(labels), vol, steps=steps).data
    assert out.min() >= 0 and out.max() <= 4
    if 4 not in steps:
        # only hole filling can add tumour voxels
        assert np.all(out[labels == 0] == 0)
    # post-processing is a function of its inputs
    again = postprocess(LabelVolume(labels), vol, steps=steps).data
    assert np.array_equal(out, again)


def test_hole_filling_is_idempotent():
    rng = np.random.default_rng(1)
    labels = (rng.random((10, 10, 10)) < 0.6).astype(np.uint8) * 2
    vol = MultiModalVolume(_volume((10, 10, 10)))
    once = postprocess(LabelVolume(labels), vol, steps={4})
    twice = postprocess(once, vol, steps={4})
    assert np.array_equal(once.data, twice.data)
