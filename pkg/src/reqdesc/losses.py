"""Self-supervised objectives: orientation alignment and contrastive descriptor loss.

Both accept either tape values (for training) or plain arrays, in which case
they evaluate on a throwaway tape and return a float.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import NotNormalizedError, ShapeMismatchError


@dataclass
class LossConfig:
    tau: float = 0.07
    alpha: float = 10.0
    inclusive_denominator: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def _as_vars(*xs):
    if any(isinstance(x, Var) for x in xs):
        tape = next(x.tape for x in xs if isinstance(x, Var))
        return tape, [x if isinstance(x, Var) else tape.constant(x) for x in xs], False
    tape = Tape(dtype=np.float64, record=False)
    return tape, [tape.constant(x) for x in xs], True


def _out(v: Var, plain: bool):
    return float(v.value) if plain else v


def orientation_loss(o_a, o_b, delta_gt: int):
    """Cross-entropy between softmax(O_A) and softmax(O_B shifted by delta_gt), summed over keypoints.

    ``o_a`` and ``o_b`` are (K, G) histograms at corresponding keypoints.
    """
    _, (a, b), plain = _as_vars(o_a, o_b)
    if a.shape != b.shape or len(a.shape) != 2:
        raise ShapeMismatchError(f"histogram shapes {a.shape} and {b.shape} must match as (K, G)")
    target = ad.softmax(a, axis=1)
    logp = ad.log_softmax(ad.shift(b, delta_gt, axis=1), axis=1)
    return _out(ad.mul(ad.sum_(ad.mul(target, logp)), -1.0), plain)


def descriptor_loss(d_a, d_b, tau: float = 0.07, inclusive: bool = False, norm_tol: float = 1e-3):
    """Contrastive loss over K corresponding unit descriptors.

    Term i is ``-log(exp(s_ii / tau) / sum_k exp(s_ik / tau))`` with cosine
    similarities ``s``. By default the sum runs over negatives only
    (``k != i``); ``inclusive=True`` adds the positive, giving the usual
    InfoNCE form, which is bounded below by zero.
    """
    _, (a, b), plain = _as_vars(d_a, d_b)
    if a.shape != b.shape or len(a.shape) != 2:
        raise ShapeMismatchError(f"descriptor shapes {a.shape} and {b.shape} must match as (K, D)")
    k = a.shape[0]
    if k < 2:
        raise ShapeMismatchError("descriptor loss needs at least two pairs")
    for v in (a, b):
        norms = np.linalg.norm(v.value, axis=1)
        if np.any(np.abs(norms - 1) > norm_tol):
            raise NotNormalizedError(f"descriptor norms deviate from 1 by up to {np.abs(norms - 1).max():.2e}")
    dtype = a.value.dtype
    logits = ad.mul(ad.matmul(a, ad.transpose(b)), 1.0 / tau)
    # constant shift keeps exp() in range; it cancels between numerator and denominator
    shifted = ad.add(logits, np.array(-1.0 / tau, dtype=dtype))
    e = ad.exp(shifted)
    if not inclusive:
        e = ad.mul(e, (1.0 - np.eye(k)).astype(dtype))
    log_denom = ad.log(ad.sum_(e, axis=1))
    positives = ad.sum_(ad.mul(shifted, np.eye(k, dtype=dtype)), axis=1)
    return _out(ad.sum_(ad.add(log_denom, ad.mul(positives, -1.0))), plain)


def total_loss(l_ori, l_desc, alpha: float):
    if isinstance(l_ori, Var) or isinstance(l_desc, Var):
        return ad.add(ad.mul(l_ori, alpha) if isinstance(l_ori, Var) else alpha * l_ori, l_desc)
    return alpha * l_ori + l_desc


def entropy(o: np.ndarray) -> float:
    """Summed Shannon entropy (nats) of softmax over the last axis."""
    z = o - o.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-(np.exp(logp) * logp).sum())
