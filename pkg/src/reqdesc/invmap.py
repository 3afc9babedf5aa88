"""Group aligning and group pooling of keypoint features into descriptors."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ZeroVectorError
from .gtensor import GroupTensor, check_in_bounds, sample_planes
from .orientation import CandidateConfig, candidate_orientations

log = logging.getLogger(__name__)

METHODS = ("align", "avg", "max", "none")
DESCRIPTOR_MAGIC = b"DSC1"
NO_DELTA = 0xFFFF


@dataclass
class KeypointFeature:
    p: np.ndarray          # (C, G)
    keypoint_id: int = 0


@dataclass
class Descriptor:
    d: np.ndarray
    method: str
    delta: int | None = None
    keypoint_id: int = 0


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise ZeroVectorError("descriptor has zero norm")
    return (v / n).astype(np.float32)


def group_align(p: KeypointFeature, delta: int) -> Descriptor:
    """Shift along the group axis so that column i reads column i + delta, flatten, normalize."""
    g = p.p.shape[1]
    shifted = np.roll(p.p, -int(delta) % g, axis=1)
    return Descriptor(_normalize(shifted.reshape(-1).astype(np.float64)), "align", int(delta) % g, p.keypoint_id)


def group_pool(p: KeypointFeature, mode: str) -> Descriptor:
    if mode == "avg":
        v = p.p.mean(axis=1)
    elif mode == "max":
        v = p.p.max(axis=1)
    elif mode == "none":
        v = p.p.reshape(-1)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return Descriptor(_normalize(np.asarray(v, dtype=np.float64)), mode, None, p.keypoint_id)


def image_to_feature(xy: np.ndarray, stride: int) -> np.ndarray:
    """Map image (x, y) to feature-map (x, y).

    Feature cell j averages image pixels [s*j, s*j + s), so its centre sits at
    image coordinate s*j + (s - 1)/2.
    """
    return (np.asarray(xy, dtype=np.float64) - (stride - 1) / 2.0) / stride


@dataclass
class DescriptorSet:
    """Descriptors as rows plus the keypoint each row came from."""

    desc: np.ndarray                 # (M, D) float32, unit rows
    keypoint_ids: np.ndarray         # (M,) source keypoint index
    xy: np.ndarray                   # (M, 2) image coordinates
    deltas: np.ndarray               # (M,) group shift, NO_DELTA for pooled methods
    method: str = "align"
    skipped: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.desc)

    @property
    def dim(self) -> int:
        return self.desc.shape[1]

    def descriptors(self) -> list[Descriptor]:
        return [Descriptor(d, self.method, None if dl == NO_DELTA else int(dl), int(k))
                for d, dl, k in zip(self.desc, self.deltas, self.keypoint_ids)]


def keypoint_features(features: GroupTensor, xy: np.ndarray, stride: int = 2):
    """Bilinear features (K, C, G) at image keypoints plus a validity mask."""
    c, g, h, w = features.dims
    fxy = image_to_feature(np.asarray(xy, dtype=np.float64).reshape(-1, 2), stride)
    ok = check_in_bounds(fxy[:, 1], fxy[:, 0], h, w)
    p = np.zeros((len(fxy), c, g), dtype=np.float32)
    if ok.any():
        vals = sample_planes(features.data.reshape(c * g, h, w), fxy[ok, 1], fxy[ok, 0])
        p[ok] = vals.reshape(-1, c, g)
    return p, ok


def extract_descriptors(features: GroupTensor, xy, method: str = "align",
                        candidates: CandidateConfig | None = None, deltas=None,
                        stride: int = 2) -> DescriptorSet:
    """Descriptors for image keypoints ``xy`` (K, 2).

    For ``align`` the shift comes from ``deltas`` (one per keypoint, e.g. a
    ground-truth value) when given, otherwise from the orientation histogram
    with one descriptor per candidate orientation. Out-of-range keypoints and
    zero features are skipped and reported in ``skipped``.
    """
    p, ok = keypoint_features(features, xy, stride)
    return describe_keypoints([p], [ok], xy, method, candidates, deltas)


def describe_keypoints(feats: list[np.ndarray], oks: list[np.ndarray], xy, method: str = "align",
                       candidates: CandidateConfig | None = None, deltas=None) -> DescriptorSet:
    """Build descriptors from per-scale keypoint features, max-pooled over scales.

    ``feats`` holds one (K, C, G) array per scale and ``oks`` the matching
    validity masks. Every scale uses the same shift, picked from the summed
    orientation histogram, so the max runs over comparable coordinates.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    candidates = candidates or CandidateConfig(0.6, 1)
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    _, c, g = feats[0].shape
    if deltas is not None:
        deltas = np.broadcast_to(np.asarray(deltas, dtype=np.int64), (len(xy),))
    rows, ids, shifts, skipped = [], [], [], []
    for k in range(len(xy)):
        scales = [f[k] for f, ok in zip(feats, oks) if ok[k]]
        if not scales:
            skipped.append(k)
            continue
        if method == "align":
            if deltas is not None:
                picks = [int(deltas[k])]
            else:
                hist = np.sum([f[0] for f in scales], axis=0)
                picks = [e.delta for e in candidate_orientations(
                    hist, candidates.candidate_ratio, candidates.candidate_kmax)]
        else:
            picks = [None]
        made = []
        for dl in picks:
            per_scale = []
            for f in scales:
                feat = KeypointFeature(f, k)
                try:
                    per_scale.append(group_align(feat, dl) if dl is not None else group_pool(feat, method))
                except ZeroVectorError:
                    continue
            if not per_scale:
                continue
            d = per_scale[0].d
            if len(per_scale) > 1:
                d = _normalize(np.max([x.d for x in per_scale], axis=0).astype(np.float64))
            made.append((d, per_scale[0].delta))
        if not made:
            skipped.append(k)
            continue
        for d, dl in made:
            rows.append(d)
            ids.append(k)
            shifts.append(NO_DELTA if dl is None else dl)
    if skipped:
        log.debug("skipped %d of %d keypoints", len(skipped), len(xy))
    dim = c * (g if method in ("align", "none") else 1)
    desc = np.array(rows, dtype=np.float32).reshape(-1, dim)
    ids = np.array(ids, dtype=np.int64)
    return DescriptorSet(desc, ids, xy[ids] if len(ids) else np.zeros((0, 2)),
                         np.array(shifts, dtype=np.int64), method, skipped)


# ---------------------------------------------------------------- file format


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("kp", "<u4"), ("x", "<f4"), ("y", "<f4"), ("delta", "<u2"), ("d", "<f4", (dim,))])


def descriptors_to_bytes(ds: DescriptorSet) -> bytes:
    rec = np.zeros(len(ds), dtype=_record_dtype(ds.dim))
    rec["kp"] = ds.keypoint_ids
    rec["x"] = ds.xy[:, 0] if len(ds) else []
    rec["y"] = ds.xy[:, 1] if len(ds) else []
    rec["delta"] = ds.deltas
    rec["d"] = ds.desc
    return DESCRIPTOR_MAGIC + struct.pack("<II", len(ds), ds.dim) + rec.tobytes()


def descriptors_from_bytes(buf: bytes, method: str = "align") -> DescriptorSet:
    if buf[:4] != DESCRIPTOR_MAGIC:
        raise FormatError(f"bad descriptor magic {buf[:4]!r}")
    count, dim = struct.unpack_from("<II", buf, 4)
    dt = _record_dtype(dim)
    if len(buf) != 12 + count * dt.itemsize:
        raise FormatError(f"descriptor file size {len(buf)} does not match {count} x {dim} records")
    rec = np.frombuffer(buf, dtype=dt, count=count, offset=12)
    xy = np.stack([rec["x"], rec["y"]], axis=1).astype(np.float64) if count else np.zeros((0, 2))
    return DescriptorSet(rec["d"].astype(np.float32).reshape(count, dim), rec["kp"].astype(np.int64),
                         xy, rec["delta"].astype(np.int64), method)


def write_descriptors(path, ds: DescriptorSet) -> None:
    Path(path).write_bytes(descriptors_to_bytes(ds))


def read_descriptors(path) -> DescriptorSet:
    return descriptors_from_bytes(Path(path).read_bytes())
