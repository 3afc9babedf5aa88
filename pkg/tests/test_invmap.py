import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reqdesc.datagen import project, rotation_homography, synthetic_texture, warp_image
from reqdesc.eqnn import Backbone, BackboneConfig
from reqdesc.errors import FormatError, ZeroVectorError
from reqdesc.gtensor import GroupTensor
from reqdesc.invmap import (DescriptorSet, KeypointFeature, descriptors_from_bytes, descriptors_to_bytes,
                            extract_descriptors, group_align, group_pool, read_descriptors,
                            write_descriptors)
from reqdesc.orientation import CandidateConfig, quantize_rotation


def kf(values, c=1):
    return KeypointFeature(np.asarray(values, dtype=np.float64).reshape(c, -1))


def test_align_examples():
    d = group_align(kf([1, 2, 3, 4]), 1)
    assert np.allclose(d.d, np.array([2, 3, 4, 1]) / np.sqrt(30))
    assert d.delta == 1 and d.method == "align"
    p = np.arange(1.0, 9.0).reshape(2, 4)
    assert np.allclose(group_align(KeypointFeature(p), 0).d, p.ravel() / np.linalg.norm(p))


def test_pool_examples():
    p = kf([1, 2, 3, 4])
    assert np.allclose(group_pool(p, "avg").d, [1.0])
    assert np.allclose(group_pool(p, "max").d, [1.0])
    assert np.allclose(group_pool(p, "none").d, group_align(p, 0).d)
    const = KeypointFeature(np.array([[2.0, 2, 2, 2], [1, 1, 1, 1]]))
    assert np.allclose(group_pool(const, "avg").d, group_pool(const, "max").d)


def test_zero_vector():
    with pytest.raises(ZeroVectorError):
        group_align(kf([0, 0, 0, 0]), 2)
    with pytest.raises(ZeroVectorError):
        group_pool(kf([0, 0, 0, 0]), "max")


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**16), delta=st.integers(0, 7), dlt=st.integers(-20, 20))
def test_alignment_cancellation_and_pool_invariance(seed, delta, dlt):
    p = np.random.default_rng(seed).standard_normal((3, 8))
    shifted = KeypointFeature(np.roll(p, dlt, axis=1))  # cyclic_shift by -dlt
    lhs = group_align(shifted, (delta + dlt) % 8).d
    assert np.allclose(lhs, group_align(KeypointFeature(p), delta).d, atol=1e-6)
    for mode in ("avg", "max"):
        assert np.allclose(group_pool(shifted, mode).d, group_pool(KeypointFeature(p), mode).d, atol=1e-6)
    assert abs(np.linalg.norm(lhs.astype(np.float64)) - 1) <= 1e-6


def test_pooling_collides_where_alignment_does_not():
    a = np.array([[1.0, 2, 3, 4], [5, 6, 7, 8]])
    b = a[:, [0, 2, 1, 3]]  # same multiset per channel, different arrangement
    for mode in ("avg", "max"):
        assert np.allclose(group_pool(KeypointFeature(a), mode).d, group_pool(KeypointFeature(b), mode).d)
    for delta in range(4):
        assert not np.allclose(group_align(KeypointFeature(a), delta).d, group_align(KeypointFeature(b), delta).d)


def test_extract_counts_and_candidates():
    data = np.zeros((2, 4, 4, 4), np.float32)
    data[0, :, :, :] = np.array([1.0, 0.8, 0.1, 0.2])[:, None, None]
    data[1] = 0.5
    F = GroupTensor(data)
    xy = np.array([[3.0, 3.0]])
    one = extract_descriptors(F, xy, "align")
    assert len(one) == 1 and one.dim == 8
    two = extract_descriptors(F, xy, "align", CandidateConfig(0.6, 4))
    assert len(two) == 2 and list(two.keypoint_ids) == [0, 0] and list(two.deltas) == [0, 1]
    pooled = extract_descriptors(F, xy, "avg")
    assert pooled.dim == 2


def test_extract_skips_out_of_range():
    F = GroupTensor(np.ones((1, 4, 4, 4), np.float32))
    ds = extract_descriptors(F, np.array([[3.0, 3.0], [40.0, 1.0], [-5.0, 2.0]]), "max")
    assert len(ds) == 1 and ds.skipped == [1, 2]


def test_paper_scale_descriptor_length():
    cfg = BackboneConfig(group_order=16, widths=(32, 32, 32, 32), pyramid_layers=(2, 4))
    F = GroupTensor(np.random.default_rng(0).random((cfg.channels, 16, 4, 4)).astype(np.float32) + 0.1)
    assert extract_descriptors(F, np.array([[3.0, 3.0]]), "align").dim == 1024


def test_aligned_descriptors_survive_quarter_turn():
    model = Backbone(BackboneConfig(group_order=4, widths=(8, 16, 16, 32)))
    img = synthetic_texture(np.random.default_rng(7), 48, "mixed")
    c = 23.5
    rng = np.random.default_rng(8)
    xy = rng.uniform(6, 41, size=(20, 2))
    for theta in (90, 180, 270):
        h = rotation_homography(theta, (c, c))
        tgt, _ = warp_image(img, h)
        a = extract_descriptors(model.features(img), xy, "align", deltas=np.zeros(20, int))
        b = extract_descriptors(model.features(tgt), project(h, xy), "align",
                                deltas=np.full(20, quantize_rotation(theta, 4)))
        assert np.abs(a.desc - b.desc).max() <= 1e-3


def test_descriptor_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    desc = rng.standard_normal((5, 12)).astype(np.float32)
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    ds = DescriptorSet(desc, np.array([0, 0, 2, 3, 7]), rng.random((5, 2)) * 50, np.array([1, 2, 0, 3, 65535]))
    raw = descriptors_to_bytes(ds)
    assert raw[:4] == b"DSC1" and len(raw) == 12 + 5 * (4 + 4 + 4 + 2 + 48)
    write_descriptors(tmp_path / "a.dsc", ds)
    back = read_descriptors(tmp_path / "a.dsc")
    assert np.array_equal(back.desc, desc) and list(back.keypoint_ids) == [0, 0, 2, 3, 7]
    assert descriptors_to_bytes(back) == raw
    with pytest.raises(FormatError):
        descriptors_from_bytes(raw[:-3])
    with pytest.raises(FormatError):
        descriptors_from_bytes(b"XXXX" + raw[4:])
