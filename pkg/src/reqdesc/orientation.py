"""Orientation histograms, dominant orientation and candidate selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gtensor import GroupTensor


@dataclass(frozen=True)
class OrientationEstimate:
    theta: float    # degrees, a bin centre in [0, 360)
    delta: int      # group shift, delta = theta * G / 360
    score: float


@dataclass
class CandidateConfig:
    candidate_ratio: float = 0.6
    candidate_kmax: int = 4

    def __post_init__(self):
        if not 0 <= self.candidate_ratio <= 1:
            raise ValueError("candidate ratio must lie in [0, 1]")
        if self.candidate_kmax < 1:
            raise ValueError("candidate_kmax must be >= 1")


def histogram_map(features: GroupTensor) -> np.ndarray:
    """Orientation map O of shape (G, H, W): the first channel of F."""
    return features.data[0]


def dominant_orientation(o) -> OrientationEstimate:
    o = np.asarray(o)
    g = o.shape[-1]
    delta = int(np.argmax(o))  # first maximum wins ties
    return OrientationEstimate(theta=delta * 360.0 / g, delta=delta, score=float(o[delta]))


def candidate_orientations(o, ratio: float = 0.6, k_max: int = 4) -> list[OrientationEstimate]:
    """Bins scoring at least ``ratio * max``, strongest first, at most ``k_max``.

    ``ratio=0`` is the static top-k strategy. Raw scores are compared; when
    the maximum is not positive only bins tied with it qualify.
    """
    o = np.asarray(o, dtype=np.float64)
    g = o.shape[-1]
    top = o.max()
    thresh = ratio * top if top > 0 else top
    if ratio == 0:
        thresh = -np.inf
    order = np.argsort(-o, kind="stable")
    picked = [int(i) for i in order if o[i] >= thresh][:k_max]
    return [OrientationEstimate(i * 360.0 / g, i, float(o[i])) for i in picked]


def quantize_rotation(theta_deg: float, order: int) -> int:
    """Group shift for a rotation: round(G * theta / 360) mod G."""
    return int(np.round(order * float(theta_deg) / 360.0)) % order


def angular_difference(a: float, b: float) -> float:
    """Smallest absolute difference between two angles in degrees."""
    d = (a - b) % 360.0
    return min(d, 360.0 - d)
