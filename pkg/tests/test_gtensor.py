import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reqdesc.errors import NonSquareError, OutOfBoundsError
from reqdesc.gtensor import (GroupTensor, bilinear_sample, cyclic_shift, read_tensor,
                             resize_planes, rotate_spatial_quarter)


def _tensor(rng, c=2, g=4, h=3, w=3):
    return GroupTensor(rng.standard_normal((c, g, h, w)))


def test_shift_example():
    t = GroupTensor(np.array([1.0, 2, 3, 4]).reshape(1, 4, 1, 1))
    assert cyclic_shift(t, 1).data.ravel().tolist() == [2, 3, 4, 1]
    assert np.array_equal(cyclic_shift(t, 0).data, t.data)
    assert np.array_equal(cyclic_shift(t, 4).data, t.data)
    assert np.array_equal(cyclic_shift(t, -1).data.ravel(), [4, 1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(a=st.integers(-20, 20), b=st.integers(-20, 20), seed=st.integers(0, 2**16))
def test_shift_composes(a, b, seed):
    t = _tensor(np.random.default_rng(seed))
    lhs = cyclic_shift(cyclic_shift(t, a), b).data
    assert np.array_equal(lhs, cyclic_shift(t, a + b).data)
    assert np.allclose(cyclic_shift(t, a).data.sum(axis=1), t.data.sum(axis=1))
    assert np.array_equal(cyclic_shift(t, a).data.max(axis=1), t.data.max(axis=1))


def test_quarter_rotation_example():
    t = GroupTensor(np.array([[1.0, 2], [3, 4]]).reshape(1, 1, 2, 2))
    assert rotate_spatial_quarter(t, 1).data[0, 0].tolist() == [[2, 4], [1, 3]]
    assert np.array_equal(rotate_spatial_quarter(t, 0).data, t.data)


@pytest.mark.parametrize("q", range(4))
def test_quarter_rotation_inverse(q):
    t = _tensor(np.random.default_rng(q), h=5, w=5)
    back = rotate_spatial_quarter(rotate_spatial_quarter(t, q), 4 - q)
    assert np.array_equal(back.data, t.data)
    four = t
    for _ in range(4):
        four = rotate_spatial_quarter(four, q)
    assert np.array_equal(four.data, t.data)


def test_quarter_rotation_rejects_rectangles():
    with pytest.raises(NonSquareError):
        rotate_spatial_quarter(GroupTensor(np.zeros((1, 1, 2, 3))), 1)


def test_bilinear_examples():
    rng = np.random.default_rng(0)
    t = _tensor(rng, h=4, w=5)
    assert np.allclose(bilinear_sample(t, 2, 3), t.data[:, :, 2, 3].ravel())
    const = GroupTensor(np.full((1, 1, 2, 2), 3.5))
    assert np.allclose(bilinear_sample(const, 0.5, 0.5), 3.5)
    ramp = GroupTensor(np.array([[0.0, 0], [1, 1]]).reshape(1, 1, 2, 2))
    assert np.allclose(bilinear_sample(ramp, 0.5, 0.3), 0.5)
    # the last row and column are inside the valid range
    assert np.allclose(bilinear_sample(t, 3, 4), t.data[:, :, 3, 4].ravel())


@pytest.mark.parametrize("y,x", [(-0.1, 0), (0, 4.01), (3.5, 0), (np.nan, 1)])
def test_bilinear_out_of_bounds(y, x):
    with pytest.raises(OutOfBoundsError):
        bilinear_sample(_tensor(np.random.default_rng(1), h=4, w=5), y, x)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), a=st.floats(-3, 3), b=st.floats(-3, 3),
       y=st.floats(0, 3), x=st.floats(0, 4))
def test_bilinear_is_linear(seed, a, b, y, x):
    rng = np.random.default_rng(seed)
    t1, t2 = _tensor(rng, h=4, w=5), _tensor(rng, h=4, w=5)
    mix = GroupTensor(a * t1.data.astype(np.float64) + b * t2.data)
    expected = a * bilinear_sample(t1, y, x) + b * bilinear_sample(t2, y, x)
    assert np.allclose(bilinear_sample(mix, y, x), expected, atol=1e-4)


def test_invalid_dims():
    with pytest.raises(ValueError):
        GroupTensor(np.zeros((1, 0, 2, 2)))
    with pytest.raises(ValueError):
        GroupTensor(np.zeros((2, 2, 2)))


def test_bytes_round_trip(tmp_path):
    t = _tensor(np.random.default_rng(3), c=3, g=8, h=2, w=5)
    raw = t.to_bytes()
    assert raw[:4] == b"GT01"
    assert len(raw) == 4 + 16 + 4 * t.data.size
    back = GroupTensor.from_bytes(raw)
    assert np.array_equal(back.data, t.data) and back.to_bytes() == raw
    t.save(tmp_path / "t.gt")
    assert GroupTensor.load(tmp_path / "t.gt").to_bytes() == raw
    again, end = read_tensor(raw + b"xx")
    assert end == len(raw) and np.array_equal(again.data, t.data)


def test_resize_identity_and_constant():
    rng = np.random.default_rng(4)
    planes = rng.standard_normal((2, 6, 6)).astype(np.float32)
    assert np.allclose(resize_planes(planes, 6, 6), planes)
    const = np.full((1, 4, 4), 2.0)
    assert np.allclose(resize_planes(const, 7, 3), 2.0)
