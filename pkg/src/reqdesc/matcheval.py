"""Matching, metrics and the rotated-pair benchmark."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import HarrisParams, harris_keypoints, project, rotation_homography, warp_image
from .eqnn import Backbone
from .errors import DegenerateError, DimMismatchError, TooFewMatchesError
from .gtensor import resize_planes
from .invmap import DescriptorSet, describe_keypoints, keypoint_features
from .orientation import CandidateConfig, quantize_rotation

ROTO_ANGLES = tuple(range(0, 360, 10))


# ---------------------------------------------------------------- scale pyramid


@dataclass
class ScalePyramidConfig:
    factor: float = 2 ** 0.25
    max_side: int = 1024
    min_side: int = 256

    def __post_init__(self):
        if self.factor <= 1:
            raise ValueError("pyramid factor must exceed 1")
        if not self.max_side >= self.min_side >= 1:
            raise ValueError("need max_side >= min_side >= 1")


def pyramid_sides(cfg: ScalePyramidConfig) -> list[int]:
    """Longest-side targets ``max * factor^-k`` that stay >= ``min``."""
    sides = []
    k = 0
    while True:
        side = cfg.max_side * cfg.factor ** (-k)
        if side < cfg.min_side - 1e-9:
            break
        sides.append(int(round(side)))
        k += 1
    return sides


def pyramid_level_count(cfg: ScalePyramidConfig) -> int:
    return len(pyramid_sides(cfg))


def _level_shape(h: int, w: int, side: int, multiple: int) -> tuple[int, int]:
    s = side / max(h, w)
    return (max(multiple, int(round(h * s / multiple)) * multiple),
            max(multiple, int(round(w * s / multiple)) * multiple))


def pyramid_descriptors(model: Backbone, img: np.ndarray, xy, method: str = "align",
                        pyramid: ScalePyramidConfig | None = None,
                        candidates: CandidateConfig | None = None, deltas=None) -> DescriptorSet:
    """Descriptors max-pooled over a scale pyramid; ``pyramid=None`` means native scale only."""
    img = np.asarray(img, dtype=np.float32)
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    stride = model.cfg.feature_stride
    multiple = math.prod(model.cfg.strides)
    h, w = img.shape
    shapes = [(h, w)] if pyramid is None else list(dict.fromkeys(
        _level_shape(h, w, side, multiple) for side in pyramid_sides(pyramid)))
    feats, oks = [], []
    for lh, lw in shapes:
        level = img if (lh, lw) == (h, w) else resize_planes(img[None], lh, lw)[0]
        # half-pixel centres: x' = (x + 0.5) * s - 0.5
        lxy = np.c_[(xy[:, 0] + 0.5) * lw / w - 0.5, (xy[:, 1] + 0.5) * lh / h - 0.5]
        p, ok = keypoint_features(model.features(level), lxy, stride)
        feats.append(p)
        oks.append(ok)
    return describe_keypoints(feats, oks, xy, method, candidates, deltas)


# ---------------------------------------------------------------- matching


@dataclass
class Matches:
    idx_a: np.ndarray      # rows of D_A
    idx_b: np.ndarray      # rows of D_B
    similarity: np.ndarray

    def __len__(self):
        return len(self.idx_a)


def mutual_nn_match(d_a: np.ndarray, d_b: np.ndarray) -> Matches:
    """Mutual nearest neighbours under cosine similarity; the first maximum wins ties."""
    d_a = np.asarray(d_a, dtype=np.float64)
    d_b = np.asarray(d_b, dtype=np.float64)
    if d_a.ndim != 2 or d_b.ndim != 2 or d_a.shape[1] != d_b.shape[1]:
        raise DimMismatchError(f"descriptor dims differ: {d_a.shape} vs {d_b.shape}")
    if len(d_a) == 0 or len(d_b) == 0:
        return Matches(np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    na = np.linalg.norm(d_a, axis=1, keepdims=True)
    nb = np.linalg.norm(d_b, axis=1, keepdims=True)
    sim = (d_a / np.maximum(na, 1e-12)) @ (d_b / np.maximum(nb, 1e-12)).T
    best_b = sim.argmax(axis=1)
    best_a = sim.argmax(axis=0)
    i = np.flatnonzero(best_a[best_b] == np.arange(len(d_a)))
    j = best_b[i]
    return Matches(i, j, sim[i, j])


def matched_keypoints(m: Matches, set_a: DescriptorSet, set_b: DescriptorSet) -> np.ndarray:
    """Unique (keypoint id A, keypoint id B) pairs behind descriptor-row matches."""
    pairs = np.c_[set_a.keypoint_ids[m.idx_a], set_b.keypoint_ids[m.idx_b]].astype(np.int64)
    return np.unique(pairs, axis=0) if len(pairs) else pairs.reshape(0, 2)


def reprojection_errors(pairs: np.ndarray, kp_a: np.ndarray, kp_b: np.ndarray, h_gt: np.ndarray) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if not len(pairs):
        return np.zeros(0)
    proj = project(h_gt, np.asarray(kp_a)[pairs[:, 0]])
    return np.linalg.norm(proj - np.asarray(kp_b)[pairs[:, 1]], axis=1)


def mma(pairs, kp_a, kp_b, h_gt, thresholds=(3, 5, 10)) -> tuple[dict[float, float], dict[float, int], int]:
    """Per-threshold accuracy, correct counts and number of distinct predicted matches.

    ``pairs`` are (index into kp_a, index into kp_b) rows; duplicates count once.
    No predictions give accuracy 0.
    """
    if any(t <= 0 for t in thresholds):
        raise ValueError("thresholds must be positive")
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs):
        pairs = np.unique(pairs, axis=0)
    err = reprojection_errors(pairs, kp_a, kp_b, h_gt)
    n = len(pairs)
    correct = {t: int((err <= t).sum()) for t in thresholds}
    acc = {t: (correct[t] / n if n else 0.0) for t in thresholds}
    return acc, correct, n


# ---------------------------------------------------------------- homography estimation


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / d if d > 1e-12 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def fit_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized DLT; least squares for more than four points."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 4:
        raise TooFewMatchesError("need at least four correspondences")
    ta, tb = _normalizer(src), _normalizer(dst)
    a = project(ta, src)
    b = project(tb, dst)
    rows = []
    for (x, y), (u, v) in zip(a, b):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, sv, vt = np.linalg.svd(np.array(rows))
    if len(src) == 4 and sv[-2] < 1e-10 * sv[0]:
        raise DegenerateError("degenerate minimal sample")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(tb) @ hn @ ta
    if abs(h[2, 2]) < 1e-12 or abs(np.linalg.det(h)) < 1e-12:
        raise DegenerateError("singular homography estimate")
    return h / h[2, 2]


def transfer_error(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.linalg.norm(project(h, src) - dst, axis=1)
    return np.where(np.isfinite(e), e, np.inf)


@dataclass
class RansacConfig:
    iterations: int = 1000
    inlier_threshold: float = 3.0
    seed: int = 0


def ransac_homography(src, dst, cfg: RansacConfig | None = None):
    """RANSAC over 4-point samples with a final refit on the best inlier set.

    Consensus size decides; equal sizes go to the lower summed inlier error.
    """
    cfg = cfg or RansacConfig()
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 4:
        raise TooFewMatchesError(f"{n} matches; a homography needs 4")
    rng = np.random.default_rng(cfg.seed)
    best, best_score = None, (-1, 0.0)
    for _ in range(cfg.iterations):
        sample = rng.choice(n, 4, replace=False)
        try:
            h = fit_homography(src[sample], dst[sample])
        except DegenerateError:
            continue
        err = transfer_error(h, src, dst)
        inl = err <= cfg.inlier_threshold
        score = (int(inl.sum()), -float(err[inl].sum()))
        if score > best_score:
            best, best_score = inl, score
    best_count = best_score[0]
    if best is None or best_count < 4:
        raise DegenerateError("no non-degenerate sample found")
    h = fit_homography(src[best], dst[best])
    return h, transfer_error(h, src, dst) <= cfg.inlier_threshold


def corner_error(h_est: np.ndarray, h_gt: np.ndarray, shape) -> float:
    hh, ww = shape
    corners = np.array([[0, 0], [ww - 1, 0], [ww - 1, hh - 1], [0, hh - 1]], dtype=np.float64)
    return float(np.linalg.norm(project(h_est, corners) - project(h_gt, corners), axis=1).mean())


@dataclass
class HEstResult:
    passed: bool
    corner_error: float
    inliers: int


def hestimation(pairs, kp_a, kp_b, h_gt, shape, eps: float = 3.0,
                cfg: RansacConfig | None = None) -> HEstResult:
    """RANSAC homography from matches; passes when the mean corner error is <= ``eps``."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    try:
        h, inl = ransac_homography(np.asarray(kp_a)[pairs[:, 0]], np.asarray(kp_b)[pairs[:, 1]], cfg)
    except (TooFewMatchesError, DegenerateError):
        return HEstResult(False, math.inf, 0)
    err = corner_error(h, h_gt, shape)
    return HEstResult(bool(err <= eps), err, int(inl.sum()))


# ---------------------------------------------------------------- rotated-pair benchmark


@dataclass
class RotoPair:
    pair_id: int
    image_index: int
    angle: float
    source: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    homography: np.ndarray


@dataclass
class RotoBenchmark:
    images: list[np.ndarray]
    angles: tuple[float, ...] = ROTO_ANGLES

    def __len__(self):
        return len(self.images) * len(self.angles)

    def __iter__(self):
        pid = 0
        for i, img in enumerate(self.images):
            h, w = img.shape
            for angle in self.angles:
                hmat = rotation_homography(angle, ((w - 1) / 2.0, (h - 1) / 2.0))
                tgt, mask = warp_image(img, hmat)
                yield RotoPair(pid, i, float(angle), img, tgt, mask, hmat)
                pid += 1


def build_roto_benchmark(images, angles=ROTO_ANGLES) -> RotoBenchmark:
    images = [np.asarray(im, dtype=np.float32) for im in images]
    if not images:
        raise ValueError("benchmark needs at least one image")
    return RotoBenchmark(images, tuple(angles))


@dataclass
class EvalConfig:
    thresholds: tuple[float, ...] = (3.0, 5.0, 10.0)
    num_keypoints: int = 512
    hest_eps: float = 3.0
    ransac: RansacConfig = field(default_factory=RansacConfig)
    harris: HarrisParams = field(default_factory=HarrisParams)
    pyramid: ScalePyramidConfig | None = None
    candidates: CandidateConfig = field(default_factory=lambda: CandidateConfig(0.6, 1))


@dataclass
class PairResult:
    pair_id: int
    image_index: int
    angle: float
    keypoints: int
    pred: int
    correct: dict
    mma: dict
    hest_pass: bool
    corner_err: float
    inliers: int


@dataclass
class MatchReport:
    method: str
    protocol: str
    thresholds: tuple[float, ...]
    pairs: list[PairResult] = field(default_factory=list)
    ransac_seed: int = 0
    gt_delta: bool = False

    def mean_mma(self, t: float) -> float:
        """Mean over pairs, zero-prediction pairs scoring 0."""
        return float(np.mean([p.mma[t] for p in self.pairs])) if self.pairs else 0.0

    def micro_mma(self, t: float) -> float:
        """Correct over predicted, pooled across pairs."""
        pred = sum(p.pred for p in self.pairs)
        return sum(p.correct[t] for p in self.pairs) / pred if pred else 0.0

    def per_angle(self) -> dict[float, dict[float, float]]:
        out: dict[float, dict[float, float]] = {}
        for a in sorted({p.angle for p in self.pairs}):
            rows = [p for p in self.pairs if p.angle == a]
            out[a] = {t: float(np.mean([p.mma[t] for p in rows])) for t in self.thresholds}
        return out

    def summary(self) -> dict:
        n = len(self.pairs)
        return {
            "method": self.method,
            "protocol": self.protocol,
            "gt_delta": self.gt_delta,
            "pairs": n,
            "thresholds": list(self.thresholds),
            "mma": {_fmt(t): self.mean_mma(t) for t in self.thresholds},
            "mma_micro": {_fmt(t): self.micro_mma(t) for t in self.thresholds},
            "hest_rate": float(np.mean([p.hest_pass for p in self.pairs])) if n else 0.0,
            "mean_pred": float(np.mean([p.pred for p in self.pairs])) if n else 0.0,
            "total_pred": int(sum(p.pred for p in self.pairs)),
            "mean_inliers": float(np.mean([p.inliers for p in self.pairs])) if n else 0.0,
            "zero_pred_pairs": int(sum(p.pred == 0 for p in self.pairs)),
            "ransac_seed": self.ransac_seed,
        }

    def pairs_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        ts = self.thresholds
        wr.writerow(["pair_id", "image", "angle", "keypoints", "pred"]
                    + [f"correct@{_fmt(t)}" for t in ts] + ["hest_pass", "corner_err", "inliers"])
        for p in self.pairs:
            wr.writerow([p.pair_id, p.image_index, _fmt(p.angle), p.keypoints, p.pred]
                        + [p.correct[t] for t in ts]
                        + [int(p.hest_pass), f"{p.corner_err:.6g}", p.inliers])
        return buf.getvalue()

    def angles_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["angle"] + [f"mma@{_fmt(t)}" for t in self.thresholds])
        for a, accs in self.per_angle().items():
            wr.writerow([_fmt(a)] + [f"{accs[t]:.6f}" for t in self.thresholds])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "pairs.csv").write_text(self.pairs_csv())
        (d / "angles.csv").write_text(self.angles_csv())
        (d / "summary.json").write_text(json.dumps(self.summary(), indent=2) + "\n")


def _fmt(t: float) -> str:
    return f"{t:g}"


def score_pair(pair_id, image_index, angle, set_a: DescriptorSet, set_b: DescriptorSet,
               kp_a, kp_b, h_gt, shape, cfg: EvalConfig) -> PairResult:
    m = mutual_nn_match(set_a.desc, set_b.desc)
    pairs = matched_keypoints(m, set_a, set_b)
    acc, correct, n = mma(pairs, kp_a, kp_b, h_gt, cfg.thresholds)
    hest = hestimation(pairs, kp_a, kp_b, h_gt, shape, cfg.hest_eps, cfg.ransac)
    return PairResult(pair_id, image_index, angle, len(kp_a), n, correct, acc,
                      hest.passed, hest.corner_error, hest.inliers)


def _inside(xy: np.ndarray, mask: np.ndarray, margin: int) -> np.ndarray:
    h, w = mask.shape
    ok = (xy[:, 0] >= margin) & (xy[:, 0] <= w - 1 - margin) & (xy[:, 1] >= margin) & (xy[:, 1] <= h - 1 - margin)
    xi = np.clip(np.round(xy[:, 0]).astype(int), 0, w - 1)
    yi = np.clip(np.round(xy[:, 1]).astype(int), 0, h - 1)
    return ok & mask[yi, xi]


def _rows_for(ds: DescriptorSet, keep: np.ndarray) -> DescriptorSet:
    rows = keep[ds.keypoint_ids]
    return DescriptorSet(ds.desc[rows], ds.keypoint_ids[rows], ds.xy[rows], ds.deltas[rows], ds.method)


def run_benchmark(model: Backbone, bench: RotoBenchmark, cfg: EvalConfig | None = None,
                  method: str = "align", protocol: str = "pred", gt_delta: bool = False) -> MatchReport:
    """Detect, describe, match and score every benchmark pair.

    ``protocol="gt"`` projects the source keypoints into the target;
    ``"pred"`` runs the detector on the target inside its valid region.
    ``gt_delta`` aligns source descriptors with shift 0 and target
    descriptors with the quantized ground-truth rotation.
    """
    cfg = cfg or EvalConfig()
    if protocol not in ("gt", "pred"):
        raise ValueError(f"unknown protocol {protocol!r}")
    if gt_delta and method != "align":
        raise ValueError("gt_delta only applies to the align method")
    g = model.cfg.group_order
    report = MatchReport(method, protocol, tuple(cfg.thresholds), ransac_seed=cfg.ransac.seed, gt_delta=gt_delta)
    cache: dict[int, tuple] = {}
    for pair in bench:
        if pair.image_index not in cache:
            kps = harris_keypoints(pair.source, cfg.num_keypoints, cfg.harris).xy
            set_a = pyramid_descriptors(model, pair.source, kps, method, cfg.pyramid, cfg.candidates,
                                        deltas=0 if gt_delta else None)
            cache = {pair.image_index: (kps, set_a)}
        kp_a, set_a = cache[pair.image_index]
        if protocol == "gt":
            proj = project(pair.homography, kp_a)
            keep = _inside(proj, pair.mask, 0)
            kp_b = np.where(keep[:, None], proj, np.nan)
            src_b = proj[keep]
        else:
            kp_b = harris_keypoints(pair.target, cfg.num_keypoints, cfg.harris, mask=pair.mask).xy
            src_b = kp_b
        delta = quantize_rotation(pair.angle, g) if gt_delta else None
        set_b = pyramid_descriptors(model, pair.target, src_b, method, cfg.pyramid, cfg.candidates, deltas=delta)
        if protocol == "gt":
            # map target rows back to source-keypoint numbering
            set_b.keypoint_ids = np.flatnonzero(keep)[set_b.keypoint_ids]
            set_a = _rows_for(set_a, keep)
        report.pairs.append(score_pair(pair.pair_id, pair.image_index, pair.angle, set_a, set_b,
                                       kp_a, kp_b, pair.homography, pair.source.shape, cfg))
    return report
