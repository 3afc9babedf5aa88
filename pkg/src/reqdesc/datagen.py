"""Training-pair synthesis: homographies, warping, Harris keypoints, photometric jitter.

Images are single-channel float arrays in [0, 1], indexed ``img[y, x]``.
Keypoints are ``(x, y)`` rows in pixel units.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (DegenerateError, EmptyCorpusError, FormatError, TooFewKeypointsError,
                     UndefinedRotationError)
from .gtensor import bilinear_stencil

# ---------------------------------------------------------------- image files

_LUMA = np.array([0.299, 0.587, 0.114])


def _pnm_tokens(buf: bytes, count: int):
    vals, pos = [], 2
    while len(vals) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        vals.append(int(buf[start:pos]))
    return vals, pos + 1


def read_image(path) -> np.ndarray:
    """Read an 8-bit binary PGM (P5) or PPM (P6, converted to luma) into [0, 1]."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported image type {magic!r}; need P5 or P6")
    (w, h, maxval), start = _pnm_tokens(buf, 3)
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    chans = 1 if magic == b"P5" else 3
    n = w * h * chans
    if len(buf) - start < n:
        raise FormatError(f"{path}: truncated pixel data")
    px = np.frombuffer(buf, dtype=np.uint8, count=n, offset=start).astype(np.float64) / 255.0
    if chans == 3:
        px = px.reshape(h, w, 3) @ _LUMA
    return px.reshape(h, w).astype(np.float32)


def write_pgm(path, img: np.ndarray) -> None:
    data = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def list_images(directory) -> list[Path]:
    """PGM/PPM files directly inside ``directory``, sorted by name."""
    d = Path(directory)
    if not d.is_dir():
        raise EmptyCorpusError(f"corpus directory {d} does not exist")
    files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in (".pgm", ".ppm"))
    if not files:
        raise EmptyCorpusError(f"no PGM/PPM images in {d}")
    return files


# ---------------------------------------------------------------- synthetic textures


def synthetic_texture(rng: np.random.Generator, size: int = 128, kind: str = "mixed") -> np.ndarray:
    """Procedural grayscale image: ``blobs``, ``checker``, ``gradient`` or ``mixed``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "checker":
        cell = rng.integers(6, 14)
        ang = rng.uniform(0, np.pi)
        u = np.cos(ang) * xx + np.sin(ang) * yy
        v = -np.sin(ang) * xx + np.cos(ang) * yy
        img = ((np.floor(u / cell) + np.floor(v / cell)) % 2).astype(np.float64)
        img = 0.2 + 0.6 * img + 0.1 * ndimage.gaussian_filter(rng.standard_normal((size, size)), 2)
    elif kind == "gradient":
        gx, gy = rng.uniform(-1, 1, 2)
        img = gx * xx / size + gy * yy / size
        img += 0.3 * ndimage.gaussian_filter(rng.standard_normal((size, size)), 3) * 4
    elif kind == "blobs":
        img = np.zeros((size, size))
        for _ in range(rng.integers(15, 30)):
            cx, cy = rng.uniform(0, size, 2)
            sx, sy = rng.uniform(2, size / 8, 2)
            th = rng.uniform(0, np.pi)
            dx, dy = xx - cx, yy - cy
            u = (np.cos(th) * dx + np.sin(th) * dy) / sx
            v = (-np.sin(th) * dx + np.cos(th) * dy) / sy
            img += rng.uniform(-1, 1) * np.exp(-0.5 * (u * u + v * v))
    elif kind == "mixed":
        img = np.zeros((size, size))
        for sigma, weight in ((1.0, 0.15), (2.5, 0.5), (6.0, 1.0)):
            img += weight * ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma) * sigma
        for _ in range(rng.integers(8, 16)):
            cx, cy = rng.uniform(0, size, 2)
            a, b = rng.uniform(3, size / 6, 2)
            th = rng.uniform(0, np.pi)
            dx, dy = xx - cx, yy - cy
            u = np.abs(np.cos(th) * dx + np.sin(th) * dy) / a
            v = np.abs(-np.sin(th) * dx + np.cos(th) * dy) / b
            shape = (np.maximum(u, v) if rng.random() < 0.5 else u * u + v * v) < 1
            img[shape] += rng.uniform(-1.5, 1.5)
        img = ndimage.gaussian_filter(img, 0.7)
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    lo, hi = np.percentile(img, [1, 99])
    return np.clip((img - lo) / max(hi - lo, 1e-9), 0, 1).astype(np.float32)


def write_synthetic_corpus(directory, count: int, size: int = 128, seed: int = 0,
                           kinds=("mixed", "blobs", "mixed", "checker", "mixed", "gradient")) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        img = synthetic_texture(rng, size, kinds[i % len(kinds)])
        path = d / f"tex_{i:03d}.pgm"
        write_pgm(path, img)
        paths.append(path)
    return paths


# ---------------------------------------------------------------- homographies


@dataclass
class HomographyRanges:
    rotation: tuple[float, float] = (0.0, 360.0)
    scale: tuple[float, float] = (0.8, 1.25)
    translation: float = 0.1      # fraction of the image extent
    perspective: float = 0.001    # per off-axis term

    @classmethod
    def identity(cls) -> "HomographyRanges":
        return cls(rotation=(0.0, 0.0), scale=(1.0, 1.0), translation=0.0, perspective=0.0)


def _cos_sin(theta_deg: float) -> tuple[float, float]:
    # exact values on quarter turns keep rotated grids integral
    t = float(theta_deg) % 360.0
    exact = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}
    if t in exact:
        return exact[t]
    r = math.radians(t)
    return math.cos(r), math.sin(r)


def rotation_homography(theta_deg: float, center=(0.0, 0.0)) -> np.ndarray:
    """Rotation by ``theta_deg`` about ``center`` = (cx, cy): H[0,0] = cos, H[1,0] = sin."""
    c, s = _cos_sin(theta_deg)
    cx, cy = center
    return np.array([[c, -s, cx - c * cx + s * cy],
                     [s, c, cy - s * cx - c * cy],
                     [0.0, 0.0, 1.0]])


def normalize_homography(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if abs(h[2, 2]) < 1e-12 or abs(np.linalg.det(h)) < 1e-9:
        raise DegenerateError("homography is singular")
    return h / h[2, 2]


def sample_homography(rng: np.random.Generator, ranges: HomographyRanges, size=(64, 64),
                      max_tries: int = 20) -> np.ndarray:
    """Similarity plus perspective perturbation about the centre of a ``size = (h, w)`` image."""
    h, w = size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    for _ in range(max_tries):
        lo, hi = ranges.rotation
        theta = rng.uniform(lo, hi) if hi > lo else lo
        slo, shi = ranges.scale
        scale = math.exp(rng.uniform(math.log(slo), math.log(shi))) if shi > slo else slo
        tx, ty = (rng.uniform(-1, 1, 2) * ranges.translation * np.array([w, h])
                  if ranges.translation > 0 else (0.0, 0.0))
        px, py = (rng.uniform(-1, 1, 2) * ranges.perspective if ranges.perspective > 0 else (0.0, 0.0))
        to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
        back = np.array([[1, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1.0]])
        c, s = _cos_sin(theta)
        sim = np.array([[scale * c, -scale * s, 0], [scale * s, scale * c, 0], [0, 0, 1.0]])
        persp = np.array([[1, 0, 0], [0, 1, 0], [px, py, 1.0]])
        hmat = back @ persp @ sim @ to_origin
        try:
            return normalize_homography(hmat)
        except DegenerateError:
            continue
    raise DegenerateError(f"no invertible homography after {max_tries} draws")


def decompose_rotation(h: np.ndarray) -> float:
    """In-plane rotation of a near-affine homography, degrees in [0, 360)."""
    h11, h21 = float(h[0, 0]), float(h[1, 0])
    if h11 == 0 and h21 == 0:
        raise UndefinedRotationError("H[0,0] and H[1,0] are both zero")
    theta = math.degrees(math.atan2(h21, h11)) % 360.0
    return 0.0 if theta >= 360.0 else theta


def project(h: np.ndarray, xy: np.ndarray) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    q = np.c_[xy, np.ones(len(xy))] @ np.asarray(h, dtype=np.float64).T
    return q[:, :2] / q[:, 2:3]


# ---------------------------------------------------------------- warping


def sample_image(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, tol: float = 1e-9):
    """Bilinear lookup at arbitrary points; returns values and an in-bounds mask."""
    h, w = img.shape
    valid = (xs >= -tol) & (xs <= w - 1 + tol) & (ys >= -tol) & (ys <= h - 1 + tol)
    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    weights, idx = bilinear_stencil(yc.ravel(), xc.ravel(), h, w)
    flat = img.reshape(-1).astype(np.float64)
    out = sum(wgt * flat[ind] for wgt, ind in zip(weights, idx)).reshape(xs.shape)
    return np.where(valid, out, 0.0), valid


def warp_image(img: np.ndarray, h: np.ndarray, out_shape=None, offset=(0.0, 0.0)):
    """Inverse-mapped bilinear warp: ``out[q] = img[H^-1 q + offset]``.

    ``offset`` = (ox, oy) lets ``img`` be a larger canvas whose crop at that
    offset is the frame ``H`` refers to. Returns the warped image and the mask
    of pixels whose preimage lies inside ``img``.
    """
    h = normalize_homography(h)
    oh, ow = out_shape or img.shape
    yy, xx = np.mgrid[0:oh, 0:ow].astype(np.float64)
    src = project(np.linalg.inv(h), np.c_[xx.ravel(), yy.ravel()])
    sx = src[:, 0].reshape(oh, ow) + offset[0]
    sy = src[:, 1].reshape(oh, ow) + offset[1]
    out, valid = sample_image(np.asarray(img), sx, sy)
    return out.astype(np.float32), valid


# ---------------------------------------------------------------- Harris


@dataclass
class HarrisParams:
    harris_sigma: float = 1.0
    harris_k: float = 0.04
    nms_radius: int = 4
    border_margin: int = 8
    min_response: float = 1e-6   # relative to the strongest response


@dataclass
class Keypoints:
    xy: np.ndarray          # (K, 2) x, y
    response: np.ndarray    # (K,)
    too_few: bool = False

    def __len__(self):
        return len(self.xy)


def harris_response(img: np.ndarray, params: HarrisParams | None = None) -> np.ndarray:
    params = params or HarrisParams()
    im = np.asarray(img, dtype=np.float64)
    gx = ndimage.sobel(im, axis=1, mode="nearest")
    gy = ndimage.sobel(im, axis=0, mode="nearest")
    s = params.harris_sigma
    ixx = ndimage.gaussian_filter(gx * gx, s, mode="nearest")
    iyy = ndimage.gaussian_filter(gy * gy, s, mode="nearest")
    ixy = ndimage.gaussian_filter(gx * gy, s, mode="nearest")
    return ixx * iyy - ixy * ixy - params.harris_k * (ixx + iyy) ** 2


def harris_keypoints(img: np.ndarray, k: int = 512, params: HarrisParams | None = None,
                     mask: np.ndarray | None = None, strict: bool = False) -> Keypoints:
    """Top-``k`` Harris corners after non-max suppression, away from the border.

    ``mask`` restricts detection to pixels whose full margin neighbourhood is
    valid, which keeps warp borders from producing corners. With fewer than
    ``k`` survivors the result is flagged ``too_few``; ``strict`` raises instead.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    params = params or HarrisParams()
    r = harris_response(img, params)
    h, w = r.shape
    m = params.border_margin
    size = 2 * params.nms_radius + 1
    peak = (r == ndimage.maximum_filter(r, size=size, mode="constant", cval=-np.inf))
    top = r.max()
    keep = peak & (r > 0) & (r > params.min_response * max(top, 0))
    keep[:m, :] = keep[h - m:, :] = False
    keep[:, :m] = keep[:, w - m:] = False
    if mask is not None:
        inner = ndimage.binary_erosion(mask, structure=np.ones((2 * m + 1, 2 * m + 1)), border_value=0)
        keep &= inner
    ys, xs = np.nonzero(keep)
    resp = r[ys, xs]
    order = np.lexsort((xs, ys, -resp))[:k]
    kp = Keypoints(np.c_[xs[order], ys[order]].astype(np.float64), resp[order], len(order) < k)
    if strict and kp.too_few:
        raise TooFewKeypointsError(f"only {len(kp)} of {k} keypoints survived")
    return kp


# ---------------------------------------------------------------- photometric jitter


@dataclass
class JitterConfig:
    brightness: float = 0.1
    contrast: float = 0.2
    noise: float = 0.02
    blur: float = 1.0


def adjust(img: np.ndarray, contrast: float = 1.0, brightness: float = 0.0) -> np.ndarray:
    """Affine intensity change about mid-gray, clamped to [0, 1]."""
    return np.clip(contrast * (np.asarray(img) - 0.5) + 0.5 + brightness, 0.0, 1.0).astype(np.float32)


def photometric_jitter(img: np.ndarray, rng: np.random.Generator, cfg: JitterConfig) -> np.ndarray:
    out = np.asarray(img, dtype=np.float64)
    if cfg.contrast > 0 or cfg.brightness > 0:
        c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast) if cfg.contrast > 0 else 1.0
        b = rng.uniform(-cfg.brightness, cfg.brightness) if cfg.brightness > 0 else 0.0
        out = contrast_brightness(out, c, b)
    if cfg.blur > 0:
        sigma = rng.uniform(0, cfg.blur)
        if sigma > 0.1:
            out = ndimage.gaussian_filter(out, sigma, mode="nearest")
    if cfg.noise > 0:
        out = out + rng.normal(0, rng.uniform(0, cfg.noise), out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def contrast_brightness(img, c, b):
    return c * (img - 0.5) + 0.5 + b


# ---------------------------------------------------------------- pairs


@dataclass
class PairConfig:
    crop_size: int = 64
    num_keypoints: int = 512
    jitter_source: bool = False
    homography: HomographyRanges = field(default_factory=HomographyRanges)
    jitter: JitterConfig = field(default_factory=JitterConfig)
    harris: HarrisParams = field(default_factory=HarrisParams)


@dataclass
class TrainingPair:
    source: np.ndarray
    target: np.ndarray
    homography: np.ndarray
    theta: float
    kp_a: np.ndarray        # (K, 2) source frame
    kp_b: np.ndarray        # (K, 2) target frame
    mask: np.ndarray

    @property
    def num_pairs(self) -> int:
        return len(self.kp_a)


def make_pair(img: np.ndarray, rng: np.random.Generator, cfg: PairConfig, min_pairs: int = 2) -> TrainingPair:
    """Random crop, random homography about its centre, jitter, Harris keypoints and correspondences.

    The target is resampled from the whole image, so content outside the
    crop fills the warped frame where available.
    """
    img = np.asarray(img, dtype=np.float32)
    s = cfg.crop_size
    ih, iw = img.shape
    if ih < s or iw < s:
        raise ValueError(f"image {ih}x{iw} smaller than crop {s}")
    oy = int(rng.integers(0, ih - s + 1))
    ox = int(rng.integers(0, iw - s + 1))
    source = img[oy:oy + s, ox:ox + s].copy()
    hmat = sample_homography(rng, cfg.homography, (s, s))
    target, mask = warp_image(img, hmat, (s, s), offset=(ox, oy))
    target = photometric_jitter(target, rng, cfg.jitter) * mask
    if cfg.jitter_source:
        source = photometric_jitter(source, rng, cfg.jitter)
    kps = harris_keypoints(source, cfg.num_keypoints, cfg.harris)
    kp_b = project(hmat, kps.xy)
    m = cfg.harris.border_margin
    inside = np.all((kp_b >= m) & (kp_b <= s - 1 - m), axis=1)
    if inside.any():
        xi = np.clip(np.round(kp_b[:, 0]).astype(int), 0, s - 1)
        yi = np.clip(np.round(kp_b[:, 1]).astype(int), 0, s - 1)
        inside &= mask[yi, xi]
    if inside.sum() < min_pairs:
        raise TooFewKeypointsError(f"only {int(inside.sum())} corresponding keypoints")
    return TrainingPair(source.astype(np.float32), target.astype(np.float32), hmat,
                        decompose_rotation(hmat), kps.xy[inside], kp_b[inside], mask)
