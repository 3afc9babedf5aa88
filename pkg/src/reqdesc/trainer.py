"""Self-supervised training of the equivariant backbone on synthetic homography pairs."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape
from .datagen import (PairConfig, TrainingPair, harris_keypoints, list_images, make_pair, project,
                      read_image, rotation_homography, warp_image)
from .eqnn import Backbone, BackboneConfig, load_parameters, read_checkpoint, write_checkpoint
from .errors import NonFiniteLossError, TooFewKeypointsError
from .invmap import image_to_feature, keypoint_features
from .losses import LossConfig, descriptor_loss, orientation_loss, total_loss
from .orientation import angular_difference, quantize_rotation

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.1
    epochs: int = 12
    iters_per_epoch: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pair: PairConfig = field(default_factory=PairConfig)

    def __post_init__(self):
        for name in ("batch_size", "epochs", "iters_per_epoch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr < 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ValueError("lr and weight_decay must be >= 0, adam_eps > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.pair.crop_size % 2:
            raise ValueError("crop size must be even")


class AdamW:
    """Adam with weight decay applied to the parameter values, not the gradients."""

    def __init__(self, params: list[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.beta1, self.beta2 = betas
        self.step_count = 0
        self.m = {p.name: np.zeros(p.shape, np.float32) for p in params}
        self.v = {p.name: np.zeros(p.shape, np.float32) for p in params}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteLossError(f"non-finite gradient in {name}")
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for p in self.params:
            g = np.asarray(grads[p.name], dtype=np.float32)
            self.m[p.name] = (self.beta1 * self.m[p.name] + (1 - self.beta1) * g).astype(np.float32)
            self.v[p.name] = (self.beta2 * self.v[p.name] + (1 - self.beta2) * g * g).astype(np.float32)
            if self.lr == 0:
                continue
            mhat = self.m[p.name] / c1
            vhat = self.v[p.name] / c2
            update = mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.value
            p.value = (p.value - self.lr * update).astype(np.float32)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.step"] = np.array([self.step_count], dtype=np.float32)
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for p in self.params:
            self.m[p.name] = tensors[f"adam.m.{p.name}"].reshape(p.shape).astype(np.float32)
            self.v[p.name] = tensors[f"adam.v.{p.name}"].reshape(p.shape).astype(np.float32)
        self.step_count = int(tensors["adam.step"].reshape(-1)[0])


def keypoint_tensor(model: Backbone, tape: Tape, img: np.ndarray, xy: np.ndarray):
    """Tape value (K, C, G) of bilinear features at image keypoints ``xy``."""
    cfg = model.cfg
    feats = model.forward(tape, np.asarray(img, dtype=np.float32))
    fxy = image_to_feature(xy, cfg.feature_stride)
    pts = np.c_[fxy[:, 1], fxy[:, 0]]
    sampled = ad.bilinear_sample(feats, pts)
    return ad.reshape(sampled, (len(xy), cfg.channels, cfg.group_order))


def _feature_inside(xy: np.ndarray, h: int, w: int, stride: int) -> np.ndarray:
    fxy = image_to_feature(xy, stride)
    fh, fw = h // stride, w // stride
    return (fxy[:, 0] >= 0) & (fxy[:, 0] <= fw - 1) & (fxy[:, 1] >= 0) & (fxy[:, 1] <= fh - 1)


def pair_loss(model: Backbone, tape: Tape, pair: TrainingPair, loss_cfg: LossConfig):
    """Return (total, orientation, descriptor) tape values for one training pair.

    Descriptors of the target are aligned with the ground-truth shift, the
    source with zero, so corresponding rows agree for an exactly equivariant
    network.
    """
    g = model.cfg.group_order
    delta = quantize_rotation(pair.theta, g)
    h, w = pair.source.shape
    keep = (_feature_inside(pair.kp_a, h, w, model.cfg.feature_stride)
            & _feature_inside(pair.kp_b, h, w, model.cfg.feature_stride))
    if keep.sum() < 2:
        raise TooFewKeypointsError("fewer than two usable keypoint pairs")
    pa = keypoint_tensor(model, tape, pair.source, pair.kp_a[keep])
    pb = keypoint_tensor(model, tape, pair.target, pair.kp_b[keep])
    k = int(keep.sum())
    o_a = ad.reshape(ad.index(pa, (slice(None), 0, slice(None))), (k, g))
    o_b = ad.reshape(ad.index(pb, (slice(None), 0, slice(None))), (k, g))
    l_ori = orientation_loss(o_a, o_b, delta)
    d_a = ad.l2_normalize(ad.reshape(pa, (k, -1)), axis=1)
    d_b = ad.l2_normalize(ad.reshape(ad.shift(pb, delta, axis=2), (k, -1)), axis=1)
    l_desc = descriptor_loss(d_a, d_b, loss_cfg.tau, inclusive=loss_cfg.inclusive_denominator)
    return total_loss(l_ori, l_desc, loss_cfg.alpha), l_ori, l_desc


def batch_loss(model: Backbone, tape: Tape, pairs: list[TrainingPair], loss_cfg: LossConfig):
    """Mean over the batch of the per-pair losses."""
    totals, oris, descs = [], [], []
    for pair in pairs:
        t, o, d = pair_loss(model, tape, pair, loss_cfg)
        totals.append(t)
        oris.append(o)
        descs.append(d)
    scale = 1.0 / len(pairs)

    def mean(vs):
        acc = vs[0]
        for v in vs[1:]:
            acc = ad.add(acc, v)
        return ad.mul(acc, scale)

    return mean(totals), mean(oris), mean(descs)


def draw_batch(images: list[np.ndarray], cfg: TrainConfig, iteration: int, max_tries: int = 50):
    """Deterministic batch for a global iteration index."""
    rng = np.random.default_rng([cfg.seed, iteration])
    pairs = []
    tries = 0
    while len(pairs) < cfg.batch_size:
        tries += 1
        if tries > max_tries * cfg.batch_size:
            raise TooFewKeypointsError("could not draw a batch with enough keypoints")
        img = images[int(rng.integers(len(images)))]
        try:
            pairs.append(make_pair(img, rng, cfg.pair, min_pairs=2))
        except TooFewKeypointsError:
            continue
    return pairs


@dataclass
class StepLosses:
    total: float
    orientation: float
    descriptor: float


def train_step(model: Backbone, pairs: list[TrainingPair], cfg: TrainConfig, opt: AdamW) -> StepLosses:
    tape = Tape(dtype=np.float32)
    for p in model.parameters:
        tape.param(p)
    total, l_ori, l_desc = batch_loss(model, tape, pairs, cfg.loss)
    losses = StepLosses(float(total.value), float(l_ori.value), float(l_desc.value))
    if not all(np.isfinite([losses.total, losses.orientation, losses.descriptor])):
        raise NonFiniteLossError(f"non-finite loss {losses} at step {opt.step_count + 1}")
    tape.output = total
    grads = ad.backward(tape)
    opt.step(grads)
    return losses


@dataclass
class TrainReport:
    total: list[float] = field(default_factory=list)
    orientation: list[float] = field(default_factory=list)
    descriptor: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str = ""
    start_iteration: int = 0

    def to_json(self, include_time: bool = True) -> str:
        d = asdict(self)
        if not include_time:
            d.pop("wall_time")
        return json.dumps(d, indent=2)


def make_optimizer(model: Backbone, cfg: TrainConfig) -> AdamW:
    return AdamW(model.parameters, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)


def train(corpus, cfg: TrainConfig, out, config_text: str = "", resume=None,
          model: Backbone | None = None, images: list[np.ndarray] | None = None,
          max_iterations: int | None = None) -> TrainReport:
    """Train for ``epochs * iters_per_epoch`` steps, checkpointing at each epoch end.

    ``resume`` continues from a checkpoint written by this function, restoring
    parameters, optimizer moments and the iteration counter. ``max_iterations``
    stops early (after checkpointing) and exists for resume testing.
    """
    if images is None:
        images = [read_image(p) for p in list_images(corpus)]
    model = model or Backbone(cfg.backbone)
    opt = make_optimizer(model, cfg)
    start = 0
    if resume is not None:
        _, tensors = read_checkpoint(resume)
        load_parameters(model, tensors)
        opt.load_state(tensors)
        start = opt.step_count
    report = TrainReport(checkpoint=str(out), start_iteration=start)
    total_iters = cfg.epochs * cfg.iters_per_epoch
    stop = total_iters if max_iterations is None else min(total_iters, start + max_iterations)
    t0 = time.perf_counter()
    for it in range(start, stop):
        pairs = draw_batch(images, cfg, it)
        losses = train_step(model, pairs, cfg, opt)
        report.total.append(losses.total)
        report.orientation.append(losses.orientation)
        report.descriptor.append(losses.descriptor)
        if (it + 1) % cfg.iters_per_epoch == 0 or it + 1 == stop:
            write_checkpoint(out, model, config_text, opt.state_tensors())
            log.info("iter %d: total %.4f ori %.4f desc %.4f", it + 1, losses.total,
                     losses.orientation, losses.descriptor)
    report.wall_time = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------- orientation consistency


def orientation_consistency(model: Backbone, images: list[np.ndarray], num_pairs: int = 50,
                            seed: int = 1000, crop_size: int = 64, num_keypoints: int = 64,
                            threshold: float = 30.0) -> float:
    """Fraction of keypoints whose predicted relative orientation is within ``threshold`` of GT.

    Pairs are random crops rotated by a uniform angle about their centre.
    """
    from .orientation import dominant_orientation

    good = total = 0
    for i in range(num_pairs):
        rng = np.random.default_rng([seed, i])
        img = images[int(rng.integers(len(images)))]
        ih, iw = img.shape
        oy = int(rng.integers(0, ih - crop_size + 1))
        ox = int(rng.integers(0, iw - crop_size + 1))
        src = img[oy:oy + crop_size, ox:ox + crop_size]
        theta = float(rng.uniform(0, 360))
        c = (crop_size - 1) / 2.0
        hmat = rotation_homography(theta, (c, c))
        tgt, mask = warp_image(img, hmat, (crop_size, crop_size), offset=(ox, oy))
        kps = harris_keypoints(src, num_keypoints)
        xy_b = project(hmat, kps.xy)
        inside = np.all((xy_b >= 8) & (xy_b <= crop_size - 9), axis=1)
        if not inside.any():
            continue
        fa, oka = keypoint_features(model.features(src), kps.xy[inside], model.cfg.feature_stride)
        fb, okb = keypoint_features(model.features(tgt), xy_b[inside], model.cfg.feature_stride)
        for pa, pb, a_ok, b_ok in zip(fa, fb, oka, okb):
            if not (a_ok and b_ok):
                continue
            rel = (dominant_orientation(pb[0]).theta - dominant_orientation(pa[0]).theta) % 360.0
            good += angular_difference(rel, theta) <= threshold
            total += 1
    return good / total if total else 0.0
