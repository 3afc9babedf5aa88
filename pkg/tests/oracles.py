"""Slow reference implementations that the fast code is checked against."""
import itertools

import numpy as np

from reqdesc.datagen import project
from reqdesc.matcheval import corner_error, fit_homography, transfer_error


def brute_force_mnn(a, b):
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    out = []
    for i in range(len(a)):
        sims = [float(a[i] @ b[k]) for k in range(len(b))]
        j = sims.index(max(sims))
        back = [float(b[j] @ a[k]) for k in range(len(a))]
        if back.index(max(back)) == i:
            out.append((i, j))
    return out


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def synthetic_h(rng):
    h = np.array([[0.9, -0.2, 5.0], [0.25, 1.05, -3.0], [1e-4, -2e-4, 1.0]])
    return h + rng.normal(0, 1e-3, (3, 3)) * np.array([[1, 1, 1], [1, 1, 1], [0, 0, 0]])


def outlier_case(rng, n=12, inlier_frac=0.6):
    h = synthetic_h(rng)
    src = rng.uniform(0, 100, (n, 2))
    dst = project(h, src)
    n_out = n - int(round(inlier_frac * n))
    # outliers land 20 to 60 px from their true position, far outside any inlier threshold
    ang = rng.uniform(0, 2 * np.pi, n_out)
    dst[:n_out] += rng.uniform(20, 60, n_out)[:, None] * np.c_[np.cos(ang), np.sin(ang)]
    return h, src, dst


def exhaustive_hest(src, dst, h_gt, shape, eps=3.0, thr=3.0):
    """Try every 4-subset, keep the largest consensus, refit, and threshold the corner error.

    Ties in consensus size go to the lower summed inlier error.
    """
    best, best_score = None, (-1, 0.0)
    for s in itertools.combinations(range(len(src)), 4):
        try:
            h = fit_homography(src[list(s)], dst[list(s)])
        except Exception:
            continue
        err = transfer_error(h, src, dst)
        inl = err <= thr
        score = (int(inl.sum()), -float(err[inl].sum()))
        if score > best_score:
            best, best_score = inl, score
    h = fit_homography(src[best], dst[best])
    return corner_error(h, h_gt, shape) <= eps
