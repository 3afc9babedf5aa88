import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reqdesc.datagen import (HomographyRanges, JitterConfig, PairConfig, adjust,
                             decompose_rotation, harris_keypoints, list_images, make_pair,
                             photometric_jitter, project, read_image, rotation_homography,
                             sample_homography, synthetic_texture, warp_image, write_pgm)
from reqdesc.errors import EmptyCorpusError, FormatError, UndefinedRotationError


def test_identity_ranges_give_identity():
    h = sample_homography(np.random.default_rng(0), HomographyRanges.identity())
    assert np.allclose(h, np.eye(3))


def test_rotation_only_upper_block():
    ranges = HomographyRanges(rotation=(30.0, 30.0), scale=(1.0, 1.0), translation=0.0, perspective=0.0)
    h = sample_homography(np.random.default_rng(0), ranges)
    assert h[0, 0] == pytest.approx(np.cos(np.radians(30)))
    assert h[1, 0] == pytest.approx(np.sin(np.radians(30)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_sampled_homography_invertible(seed):
    h = sample_homography(np.random.default_rng(seed), HomographyRanges())
    assert h[2, 2] == 1.0
    assert np.allclose(h @ np.linalg.inv(h), np.eye(3), atol=1e-9)


@pytest.mark.parametrize("theta", [0, 30, 90, 200, 350])
def test_decompose_pure_rotation(theta):
    assert decompose_rotation(rotation_homography(theta, (12.3, 4.5))) == pytest.approx(theta, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(a=st.floats(0, 359.999), b=st.floats(0, 359.999))
def test_decompose_composition(a, b):
    h = rotation_homography(a) @ rotation_homography(b)
    got = decompose_rotation(h)
    diff = (got - (a + b) % 360.0) % 360.0
    assert min(diff, 360 - diff) <= 1e-6


def test_decompose_undefined():
    with pytest.raises(UndefinedRotationError):
        decompose_rotation(np.array([[0.0, 1, 0], [0, 1, 0], [0, 0, 1]]))


def test_warp_identity_and_quarter():
    img = synthetic_texture(np.random.default_rng(1), 32)
    out, mask = warp_image(img, np.eye(3))
    assert np.allclose(out, img) and mask.all()
    c = 15.5
    out, mask = warp_image(img, rotation_homography(90, (c, c)))
    assert np.allclose(out, np.rot90(img, -1), atol=1e-6) and mask.all()


def test_warp_round_trip_psnr():
    img = synthetic_texture(np.random.default_rng(2), 64)
    h = sample_homography(np.random.default_rng(3), HomographyRanges(), (64, 64))
    fwd, m1 = warp_image(img, h)
    back, m2 = warp_image(fwd, np.linalg.inv(h))
    m = m2 & warp_image(m1.astype(np.float32), np.linalg.inv(h))[0].astype(bool)
    from scipy import ndimage
    m = ndimage.binary_erosion(m, iterations=2)
    mse = np.mean((back[m] - img[m]) ** 2)
    assert 10 * np.log10(1.0 / mse) > 30


def test_harris_constant_and_square():
    assert len(harris_keypoints(np.full((40, 40), 0.5), 10)) == 0
    img = np.zeros((48, 48))
    img[16:32, 16:32] = 1.0
    kp = harris_keypoints(img, 4)
    corners = {(15.5, 15.5), (31.5, 15.5), (15.5, 31.5), (31.5, 31.5)}
    for x, y in kp.xy:
        assert min(np.hypot(x - cx, y - cy) for cx, cy in corners) <= 1.5
    assert len(kp) == 4 and not kp.too_few


def test_harris_margin_and_determinism():
    img = synthetic_texture(np.random.default_rng(4), 64)
    a = harris_keypoints(img, 512)
    b = harris_keypoints(img, 512)
    assert np.array_equal(a.xy, b.xy) and a.too_few
    assert (a.xy >= 8).all() and (a.xy <= 55).all()
    assert np.all(np.diff(a.response) <= 0)


def test_jitter_identity_and_range():
    img = synthetic_texture(np.random.default_rng(5), 32)
    zero = JitterConfig(0, 0, 0, 0)
    assert np.array_equal(photometric_jitter(img, np.random.default_rng(0), zero), img)
    assert adjust(np.full((2, 2), 0.5), 1.0, 0.1) == pytest.approx(0.6)
    strong = JitterConfig(brightness=2.0, contrast=3.0, noise=1.0, blur=2.0)
    out = photometric_jitter(img, np.random.default_rng(1), strong)
    assert out.min() >= 0 and out.max() <= 1


def _rot_only(theta):
    return HomographyRanges(rotation=(theta, theta), scale=(1, 1), translation=0, perspective=0)


def test_make_pair_identity():
    img = synthetic_texture(np.random.default_rng(6), 96)
    cfg = PairConfig(homography=HomographyRanges.identity(), jitter=JitterConfig(0, 0, 0, 0))
    pair = make_pair(img, np.random.default_rng(0), cfg)
    assert np.array_equal(pair.kp_a, pair.kp_b) and pair.theta == 0.0
    assert np.allclose(pair.source, pair.target)


def test_make_pair_quarter_rotation():
    img = synthetic_texture(np.random.default_rng(7), 64)
    cfg = PairConfig(homography=_rot_only(90.0), jitter=JitterConfig(0, 0, 0, 0))
    pair = make_pair(img, np.random.default_rng(1), cfg)
    c = 31.5
    expected = np.c_[2 * c - pair.kp_a[:, 1], pair.kp_a[:, 0]]
    assert np.array_equal(pair.kp_b, expected)
    assert pair.theta == decompose_rotation(pair.homography) == 90.0


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_make_pair_projection_consistency(seed):
    img = synthetic_texture(np.random.default_rng(8), 96)
    pair = make_pair(img, np.random.default_rng(seed), PairConfig(num_keypoints=64))
    assert np.all(np.linalg.norm(project(pair.homography, pair.kp_a) - pair.kp_b, axis=1) <= 0.5)
    m = pair.source.shape[0] - 9
    assert ((pair.kp_b >= 8) & (pair.kp_b <= m)).all()
    assert pair.theta == decompose_rotation(pair.homography)


def test_pnm_io(tmp_path):
    img = synthetic_texture(np.random.default_rng(9), 20)
    write_pgm(tmp_path / "a.pgm", img)
    back = read_image(tmp_path / "a.pgm")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6
    rgb = np.zeros((3, 4, 3), np.uint8)
    rgb[..., 1] = 255
    (tmp_path / "b.ppm").write_bytes(b"P6\n# comment\n4 3\n255\n" + rgb.tobytes())
    assert np.allclose(read_image(tmp_path / "b.ppm"), 0.587, atol=1e-6)
    (tmp_path / "c.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(FormatError):
        read_image(tmp_path / "c.pgm")
    (tmp_path / "sub").mkdir()
    write_pgm(tmp_path / "sub" / "d.pgm", img)
    assert [p.name for p in list_images(tmp_path)] == ["a.pgm", "b.ppm", "c.pgm"]
    with pytest.raises(EmptyCorpusError):
        list_images(tmp_path / "missing")
