"""Rotation-equivariant convolutions over the cyclic group C_N.

Layers follow the regular-representation construction: a lifting convolution
turns a scalar image into ``N`` responses of rotated copies of each base
kernel, and a group convolution rotates its kernels spatially while shifting
their input-group axis in lockstep. Only the base kernels are stored.

Rotation convention: ``rotate_angle(k, theta)`` rotates by ``theta`` degrees in
image coordinates (x right, y down), the same sense as the homography
``[[cos, -sin], [sin, cos]]``. With this convention, for a backbone ``phi``
and ``R = np.rot90``::

    phi(R img) == R(cyclic_shift(phi(img), N // 4))

i.e. for N = 4 a counter-clockwise array quarter turn shifts the group axis
by one.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape
from .errors import FormatError, ShapeMismatchError
from .gtensor import GroupTensor, read_tensor

CHECKPOINT_MAGIC = b"REQ1"


@dataclass
class BackboneConfig:
    group_order: int = 16
    widths: tuple[int, ...] = (16, 32, 32, 32)
    strides: tuple[int, ...] = (2, 1, 1, 1)
    kernel_size: int = 3
    pyramid_layers: tuple[int, ...] = (2, 4)
    init_seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.strides = tuple(int(s) for s in self.strides)
        self.pyramid_layers = tuple(int(i) for i in self.pyramid_layers)
        if self.group_order < 2:
            raise ShapeMismatchError("group order must be >= 2")
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ShapeMismatchError("widths and strides must be non-empty and of equal length")
        if self.kernel_size % 2 == 0:
            raise ShapeMismatchError("kernel size must be odd")
        if not self.pyramid_layers or any(not 1 <= i <= len(self.widths) for i in self.pyramid_layers):
            raise ShapeMismatchError(f"pyramid layers {self.pyramid_layers} outside 1..{len(self.widths)}")
        if min(self.widths) < 1 or min(self.strides) < 1:
            raise ShapeMismatchError("widths and strides must be positive")

    @property
    def channels(self) -> int:
        """Channel count C of the concatenated feature pyramid."""
        return sum(self.widths[i - 1] for i in self.pyramid_layers)

    @property
    def descriptor_dim(self) -> int:
        return self.channels * self.group_order

    @property
    def feature_stride(self) -> int:
        return self.strides[0]

    def output_dims(self, h: int, w: int) -> tuple[int, int]:
        total = math.prod(self.strides)
        if h % total or w % total:
            raise ShapeMismatchError(f"input {h}x{w} not divisible by cumulative stride {total}")
        return h // self.feature_stride, w // self.feature_stride


# ---------------------------------------------------------------- kernel steering


def rotate_angle(kernel: np.ndarray, theta: float) -> np.ndarray:
    """Rotate a square kernel by ``theta`` degrees about its centre.

    Multiples of 90 degrees are exact array rotations; the remainder is
    applied by bilinear resampling with zeros outside the support.
    """
    kernel = np.asarray(kernel)
    theta = float(theta) % 360.0
    q = int(theta // 90.0)
    rest = theta - 90.0 * q
    if abs(rest - 90.0) < 1e-9:
        q, rest = q + 1, 0.0
    if rest < 1e-9:
        rest = 0.0
    out = np.rot90(kernel, -q)
    if rest == 0.0:
        return out.copy()
    return _resample_rotation(out, rest)


def _resample_rotation(kernel: np.ndarray, theta: float) -> np.ndarray:
    k = kernel.shape[0]
    c = (k - 1) / 2.0
    t = math.radians(theta)
    cs, sn = math.cos(t), math.sin(t)
    yy, xx = np.mgrid[0:k, 0:k].astype(np.float64)
    dx, dy = xx - c, yy - c
    sx = c + cs * dx + sn * dy
    sy = c - sn * dx + cs * dy
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    out = np.zeros((k, k), dtype=np.float64)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + oy, x0 + ox
        ok = (yi >= 0) & (yi < k) & (xi >= 0) & (xi < k)
        out[ok] += wgt[ok] * kernel[yi[ok], xi[ok]]
    return out.astype(kernel.dtype, copy=False)


@lru_cache(maxsize=None)
def rotation_operator(k: int, theta: float) -> np.ndarray:
    """Matrix M with ``vec(rotate_angle(psi, theta)) = M @ vec(psi)``."""
    basis = np.eye(k * k).reshape(k * k, k, k)
    return np.stack([rotate_angle(b, theta).reshape(-1) for b in basis], axis=1)


# ---------------------------------------------------------------- layers


@dataclass
class LiftingConv:
    psi: Parameter        # (C_out, 1, k, k)
    bias: Parameter       # (C_out,)
    stride: int = 1

    @property
    def out_channels(self) -> int:
        return self.psi.shape[0]

    def __call__(self, tape: Tape, img, order: int):
        w = ad.expand_lift(tape.param(self.psi), order)
        x = img if isinstance(img, ad.Var) else tape.constant(img)
        if x.value.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
        return _finish(tape, ad.conv2d(x, w), self.bias, self.stride, order)


@dataclass
class GroupConv:
    psi: Parameter        # (C_out, C_in, N, k, k)
    bias: Parameter       # (C_out,)
    stride: int = 1

    @property
    def out_channels(self) -> int:
        return self.psi.shape[0]

    @property
    def num_parameters(self) -> int:
        return self.psi.size + self.bias.size

    def __call__(self, tape: Tape, x, order: int):
        _, cin, n, _, _ = self.psi.shape
        if n != order or x.shape[0] != cin * order:
            raise ShapeMismatchError(f"input with {x.shape[0]} planes does not fit kernel {self.psi.shape}")
        w = ad.expand_group(tape.param(self.psi), order)
        return _finish(tape, ad.conv2d(x, w), self.bias, self.stride, order)


def _finish(tape: Tape, y, bias: Parameter, stride: int, order: int):
    # a strided layer averages s x s blocks of the dense response; unlike
    # subsampling, block averaging commutes with quarter turns on even grids
    if stride > 1:
        y = ad.avgpool(y, stride)
    b = ad.reshape(ad.repeat(tape.param(bias), order), (-1, 1, 1))
    return ad.relu(ad.add(y, b))


def standardize(img):
    """Zero-mean, unit-variance copy of an image; rotation commutes with it."""
    a = np.asarray(img.value if isinstance(img, ad.Var) else img, dtype=np.float32)
    return (a - a.mean()) / max(float(a.std()), 1e-6)


class Backbone:
    """Stack of one lifting and several group convolutions with a feature pyramid."""

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        n, k = cfg.group_order, cfg.kernel_size
        self.layers: list = []
        cin = 1
        for i, (width, stride) in enumerate(zip(cfg.widths, cfg.strides)):
            rng = np.random.default_rng([cfg.init_seed, i])
            if i == 0:
                fan_in = k * k
                shape = (width, 1, k, k)
            else:
                fan_in = cin * n * k * k
                shape = (width, cin, n, k, k)
            bound = math.sqrt(6.0 / fan_in)
            psi = Parameter(f"L{i + 1}.psi", rng.uniform(-bound, bound, size=shape))
            bias = Parameter(f"L{i + 1}.bias", np.zeros(width))
            layer_cls = LiftingConv if i == 0 else GroupConv
            self.layers.append(layer_cls(psi, bias, stride))
            cin = width

    @property
    def parameters(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            out.extend([layer.psi, layer.bias])
        return out

    def param_dict(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters}

    def forward(self, tape: Tape, img):
        """Feature pyramid F as a tape value of shape (C*G, H, W)."""
        n = self.cfg.group_order
        img_shape = img.shape if not isinstance(img, ad.Var) else img.value.shape
        th, tw = self.cfg.output_dims(*img_shape[-2:])
        x = self.layers[0](tape, standardize(img), n)
        taps = {1: x}
        for i, layer in enumerate(self.layers[1:], start=2):
            x = layer(tape, x, n)
            taps[i] = x
        parts = []
        for i in self.cfg.pyramid_layers:
            f = taps[i]
            if f.shape[-2:] != (th, tw):
                f = ad.resize(f, th, tw)
            parts.append(f)
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)

    def features(self, img: np.ndarray) -> GroupTensor:
        """Inference-only forward pass returning F as a GroupTensor."""
        tape = Tape(record=False)
        out = self.forward(tape, np.asarray(img, dtype=np.float32)).value
        c = self.cfg.channels
        return GroupTensor(out.reshape(c, self.cfg.group_order, *out.shape[-2:]))


def lift_forward(layer: LiftingConv, img: np.ndarray, order: int) -> GroupTensor:
    tape = Tape(record=False)
    out = layer(tape, np.asarray(img, dtype=np.float32), order).value
    return GroupTensor(out.reshape(layer.out_channels, order, *out.shape[-2:]))


def gconv_forward(layer: GroupConv, x: GroupTensor) -> GroupTensor:
    c, n, h, w = x.dims
    tape = Tape(record=False)
    out = layer(tape, tape.constant(x.data.reshape(c * n, h, w)), n).value
    return GroupTensor(out.reshape(layer.out_channels, n, *out.shape[-2:]))


def backbone_forward(model: Backbone, img: np.ndarray) -> GroupTensor:
    return model.features(img)


def equivariance_error(model: Backbone, img: np.ndarray, quarter_turns: int = 1) -> float:
    """Max abs deviation between phi(R^q img) and R^q(shift(phi(img), q*N/4))."""
    n = model.cfg.group_order
    if n % 4:
        raise ShapeMismatchError("quarter-turn equivariance needs N divisible by 4")
    q = quarter_turns % 4
    base = model.features(img).data
    rotated = model.features(np.rot90(img, q).copy()).data
    expected = np.rot90(np.roll(base, -q * n // 4, axis=1), q, axes=(2, 3))
    return float(np.abs(rotated - expected).max())


# ---------------------------------------------------------------- checkpoints


def _to4d(a: np.ndarray) -> np.ndarray:
    if a.ndim == 4:
        return a
    if a.ndim < 4:
        return a.reshape(a.shape + (1,) * (4 - a.ndim))
    return a.reshape(a.shape[0], -1, a.shape[-2], a.shape[-1])


def write_checkpoint(path, model: Backbone, config_text: str, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write magic, length-prefixed key=value config block, then named tensors."""
    tensors = [(p.name, p.value) for p in model.parameters]
    tensors += sorted((extra or {}).items())
    blob = bytearray(CHECKPOINT_MAGIC)
    text = config_text.encode("utf-8")
    blob += struct.pack("<I", len(text)) + text
    blob += struct.pack("<I", len(tensors))
    for name, value in tensors:
        raw = name.encode("utf-8")
        blob += struct.pack("<H", len(raw)) + raw
        blob += GroupTensor(_to4d(np.asarray(value, dtype=np.float32))).to_bytes()
    Path(path).write_bytes(bytes(blob))


def read_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {buf[:4]!r})")
    (n,) = struct.unpack_from("<I", buf, 4)
    text = buf[8:8 + n].decode("utf-8")
    off = 8 + n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, off)
        name = buf[off + 2:off + 2 + ln].decode("utf-8")
        tensor, off = read_tensor(buf, off + 2 + ln)
        tensors[name] = tensor.data
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return text, tensors


def load_parameters(model: Backbone, tensors: dict[str, np.ndarray]) -> None:
    for p in model.parameters:
        if p.name not in tensors:
            raise FormatError(f"checkpoint lacks parameter {p.name}")
        src = tensors[p.name]
        if src.size != p.size:
            raise ShapeMismatchError(f"{p.name}: checkpoint has {src.size} values, model needs {p.size}")
        p.value = src.reshape(p.shape).astype(np.float32)
