import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reqdesc.gtensor import GroupTensor
from reqdesc.orientation import (CandidateConfig, angular_difference, candidate_orientations,
                                 dominant_orientation, histogram_map, quantize_rotation)


def test_histogram_map():
    t = GroupTensor(np.random.default_rng(0).standard_normal((1, 4, 3, 3)))
    assert np.array_equal(histogram_map(t), t.data[0])
    data = np.zeros((3, 4, 2, 2))
    data[0] = 1.0
    assert np.all(histogram_map(GroupTensor(data)) == 1.0)


def test_dominant_examples():
    est = dominant_orientation([0.1, 0.9, 0.2, 0.3])
    assert (est.delta, est.theta, est.score) == (1, 90.0, pytest.approx(0.9))
    assert dominant_orientation(np.ones(4)).delta == 0
    o = np.zeros(16)
    o[4] = 1
    assert dominant_orientation(o).theta == 90.0


def test_candidate_examples():
    assert [c.delta for c in candidate_orientations([1.0, 0.7, 0.3, 0.1], 0.6, 4)] == [0, 1]
    assert [c.delta for c in candidate_orientations([0.2, 0.9, 0.9, 0.1], 1.0, 4)] == [1, 2]
    assert [c.delta for c in candidate_orientations([0.5, 0.1, 0.9, 0.7], 0.0, 3)] == [2, 3, 0]
    assert len(candidate_orientations(np.ones(8), 0.6, 4)) == 4


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**16), g=st.sampled_from([4, 8, 16]), delta=st.integers(-40, 40),
       scale=st.floats(0.01, 100), ratio=st.floats(0.05, 1.0))
def test_orientation_properties(seed, g, delta, scale, ratio):
    o = np.random.default_rng(seed).standard_normal(g)
    d0 = dominant_orientation(o).delta
    shifted = np.roll(o, -delta)  # cyclic_shift by delta
    assert dominant_orientation(shifted).delta == (d0 - delta) % g
    cands = candidate_orientations(o, ratio, 4)
    assert cands[0].delta == d0
    assert [c.delta for c in candidate_orientations(o * scale, ratio, 4)] == [c.delta for c in cands]
    assert all(c.theta == c.delta * 360.0 / g for c in cands)


def test_candidate_config_validation():
    with pytest.raises(ValueError):
        CandidateConfig(1.5, 2)
    with pytest.raises(ValueError):
        CandidateConfig(0.6, 0)


def test_quantize_and_difference():
    assert quantize_rotation(90, 4) == 1
    assert quantize_rotation(350, 4) == 0
    assert quantize_rotation(200, 16) == 9
    assert angular_difference(350, 10) == 20
    assert angular_difference(10, 350) == 20
