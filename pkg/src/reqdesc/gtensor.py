"""Dense group-feature tensors and the cyclic-group index algebra.

A :class:`GroupTensor` stores a regular-representation feature map with
layout ``(C, G, H, W)``: channel-major, then group element, then rows and
columns. Every other module reads and writes this layout.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, NonSquareError, OutOfBoundsError, ShapeMismatchError

TENSOR_MAGIC = b"GT01"
_HEADER = struct.Struct("<4s4I")


@dataclass(frozen=True)
class GroupTensor:
    """Feature map with dims ``(C, G, H, W)`` stored as float32."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise ShapeMismatchError(f"GroupTensor needs 4 dims, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeMismatchError(f"all GroupTensor dims must be >= 1, got {data.shape}")
        if data.dtype != np.float32:
            data = data.astype(np.float32)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def group_order(self) -> int:
        return self.data.shape[1]

    def __getitem__(self, idx):
        return self.data[idx]

    def to_bytes(self) -> bytes:
        return _HEADER.pack(TENSOR_MAGIC, *self.dims) + np.ascontiguousarray(self.data, dtype="<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "GroupTensor":
        tensor, used = read_tensor(buf, 0)
        if used != len(buf):
            raise FormatError(f"{len(buf) - used} trailing bytes after tensor payload")
        return tensor

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "GroupTensor":
        return cls.from_bytes(Path(path).read_bytes())


def read_tensor(buf: bytes, offset: int = 0) -> tuple[GroupTensor, int]:
    """Parse one ``GT01`` record starting at ``offset``; return it and the end offset."""
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated tensor header")
    magic, c, g, h, w = _HEADER.unpack_from(buf, offset)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    start = offset + _HEADER.size
    end = start + 4 * c * g * h * w
    if end > len(buf):
        raise FormatError("truncated tensor payload")
    data = np.frombuffer(buf, dtype="<f4", count=c * g * h * w, offset=start).reshape(c, g, h, w)
    return GroupTensor(data.astype(np.float32)), end


def cyclic_shift(t: GroupTensor, delta: int) -> GroupTensor:
    """Return ``out[:, i] = t[:, (i + delta) mod G]``."""
    return GroupTensor(shift_group_axis(t.data, delta, axis=1))


def shift_group_axis(a: np.ndarray, delta: int, axis: int) -> np.ndarray:
    # output index i reads input index i + delta
    return np.roll(a, -int(delta), axis=axis)


def rotate_spatial_quarter(t: GroupTensor, q: int) -> GroupTensor:
    """Rotate every ``(c, g)`` plane by ``q`` counter-clockwise quarter turns."""
    if t.data.shape[2] != t.data.shape[3]:
        raise NonSquareError(f"quarter rotation needs H == W, got {t.data.shape[2:]}")
    return GroupTensor(np.rot90(t.data, int(q) % 4, axes=(2, 3)))


def bilinear_sample(t: GroupTensor, y: float, x: float) -> np.ndarray:
    """Interpolate all ``C*G`` planes at one point; returns a flat vector."""
    _, _, h, w = t.dims
    planes = t.data.reshape(-1, h, w)
    return sample_planes(planes, np.array([y]), np.array([x]))[0]


def _corners(coord: np.ndarray, size: int):
    # lower neighbour clamped so that coord == size - 1 lands on weight 1 of the upper one
    lo = np.clip(np.floor(coord).astype(np.int64), 0, max(size - 2, 0))
    frac = coord - lo
    hi = np.minimum(lo + 1, size - 1)
    return lo, hi, frac


def check_in_bounds(ys: np.ndarray, xs: np.ndarray, h: int, w: int) -> np.ndarray:
    return (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)


def sample_planes(planes: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear lookup of ``planes`` (P, H, W) at K points; returns (K, P)."""
    _, h, w = planes.shape
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    if not np.all(check_in_bounds(ys, xs, h, w)):
        bad = np.flatnonzero(~check_in_bounds(ys, xs, h, w))[0]
        raise OutOfBoundsError(f"sample point ({ys[bad]}, {xs[bad]}) outside {h}x{w} grid")
    weights, idx = bilinear_stencil(ys, xs, h, w)
    flat = planes.reshape(planes.shape[0], -1)
    out = np.zeros((len(ys), planes.shape[0]), dtype=planes.dtype)
    for wgt, ind in zip(weights, idx):
        out += wgt[:, None].astype(planes.dtype) * flat[:, ind].T
    return out


def bilinear_stencil(ys: np.ndarray, xs: np.ndarray, h: int, w: int):
    """Four (weight, flat index) arrays of the bilinear stencil at each point."""
    y0, y1, fy = _corners(ys, h)
    x0, x1, fx = _corners(xs, w)
    weights = ((1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx)
    idx = (y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1)
    return weights, idx


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear 1-D bilinear resampling matrix (n_out, n_in), half-pixel centres.

    The half-pixel convention is symmetric under index reversal, so resizing
    commutes with flips and quarter rotations of square grids.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo, hi, frac = _corners(src, n_in)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_planes(planes: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of (..., H, W) arrays to (..., out_h, out_w)."""
    ry = resize_matrix(planes.shape[-2], out_h).astype(planes.dtype)
    rx = resize_matrix(planes.shape[-1], out_w).astype(planes.dtype)
    return ry @ planes @ rx.T
