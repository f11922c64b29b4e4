"""Losses, optimizer, schedule, augmentation and the epoch loop."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np
import torch

from grt.backbone import GaussianRadarTransformer, predict
from grt.data import NUM_CLASSES, STATIC, RadarPointCloud
from grt.diffmath import backward, softmax
from grt.metrics import ConfusionMatrix


def _from_dict(cls, d):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class LossConfig:
    class_weights: tuple[float, ...] = (0.5,) + (8.0,) * (NUM_CLASSES - 1)
    lovasz: bool = True

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if min(self.class_weights) <= 0:
            raise ValueError("class weights must be positive")

    from_dict = classmethod(_from_dict)


@dataclass
class OptimConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 32
    lr_min: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0 and 0 <= momentum < 1")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_min < 0:
            raise ValueError("epochs and batch_size must be positive, lr_min non-negative")

    from_dict = classmethod(_from_dict)


@dataclass
class AugmentConfig:
    scale_range: tuple[float, float] = (0.9, 1.1)
    rotation_range: float = 2 * math.pi
    jitter_sigma: float = 0.05
    instance_prob: float = 0.5

    def __post_init__(self):
        self.scale_range = tuple(float(s) for s in self.scale_range)
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must be positive and ordered")
        if self.jitter_sigma < 0 or not 0 <= self.instance_prob <= 1 or self.rotation_range < 0:
            raise ValueError("invalid augmentation magnitudes")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(scale_range=(1.0, 1.0), rotation_range=0.0, jitter_sigma=0.0, instance_prob=0.0)

    from_dict = classmethod(_from_dict)


# -- losses -----------------------------------------------------------------

def _check_labels(labels: torch.Tensor, num_classes: int):
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")


def weighted_cross_entropy(logits: torch.Tensor, labels, weights, mask=None) -> torch.Tensor:
    """Class-weighted cross-entropy, normalized by the summed weights of the points.

    ``mask`` (bool, True = keep) drops points such as padding copies.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_labels(labels, logits.shape[-1])
    w = torch.as_tensor(weights, dtype=logits.dtype)[labels]
    if mask is not None:
        w = w * torch.as_tensor(mask, dtype=logits.dtype)
    nll = -torch.log_softmax(logits, dim=-1).gather(1, labels[:, None])[:, 0]
    return (w * nll).sum() / w.sum()


def lovasz_grad(fg_sorted: torch.Tensor) -> torch.Tensor:
    """Gradient of the Lovász extension of the Jaccard loss at a sorted error vector."""
    gts = fg_sorted.sum()
    intersection = gts - fg_sorted.cumsum(0)
    union = gts + (1.0 - fg_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if len(fg_sorted) > 1:
        jaccard = torch.cat([jaccard[:1], jaccard[1:] - jaccard[:-1]])
    return jaccard


def lovasz_softmax(probs: torch.Tensor, labels, mask=None) -> torch.Tensor:
    """Multiclass Lovász-Softmax averaged over the classes present in ``labels``."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_labels(labels, probs.shape[-1])
    if probs.numel() and (probs.sum(-1) - 1).abs().max() > 1e-4:
        raise ValueError("probability rows must sum to 1")
    if mask is not None:
        keep = torch.as_tensor(mask, dtype=torch.bool)
        probs, labels = probs[keep], labels[keep]
    losses = []
    for c in range(probs.shape[-1]):
        fg = (labels == c).to(probs.dtype)
        if fg.sum() == 0:
            continue
        errors = (fg - probs[:, c]).abs()
        errors_sorted, perm = torch.sort(errors, descending=True, stable=True)
        losses.append(torch.dot(errors_sorted, lovasz_grad(fg[perm])))
    if not losses:
        return probs.sum() * 0.0
    return torch.stack(losses).mean()


def total_loss(logits, labels, cfg: LossConfig, mask=None) -> torch.Tensor:
    """Weighted cross-entropy plus (optionally) Lovász-Softmax, unit weights."""
    loss = weighted_cross_entropy(logits, labels, cfg.class_weights, mask)
    if cfg.lovasz:
        loss = loss + lovasz_softmax(softmax(logits, axis=-1), labels, mask)
    return loss


# -- optimizer and schedule ------------------------------------------------

def sgd_step(params, state: dict, lr: float, momentum: float) -> None:
    """Classical momentum: ``v = m v + g``, ``p -= lr v``.

    ``params`` is a name -> parameter mapping; ``state`` holds the velocity
    buffers under the same names and is filled on first use.
    """
    with torch.no_grad():
        for name, p in params.items():
            if p.grad is None:
                continue
            buf = state.get(name)
            if buf is None:
                buf = state[name] = p.grad.detach().clone()
            else:
                buf.mul_(momentum).add_(p.grad)
            p.sub_(lr * buf)


def cosine_lr(epoch: float, cfg: OptimConfig) -> float:
    t = min(max(epoch, 0), cfg.epochs)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + math.cos(math.pi * t / cfg.epochs))


# -- augmentation -------------------------------------------------------------

def _rotate(coords, angle, about=(0.0, 0.0)):
    c, s = math.cos(angle), math.sin(angle)
    about = np.asarray(about)
    return (coords - about) @ np.array([[c, s], [-s, c]]) + about


def _instance_copy(cloud: RadarPointCloud, rng: np.random.Generator) -> RadarPointCloud:
    movers = np.unique(cloud.track_id[(cloud.track_id >= 0) & (cloud.label != STATIC)])
    if not len(movers):
        return cloud
    tid = movers[rng.integers(len(movers))]
    inst = cloud.subset(np.flatnonzero(cloud.track_id == tid))
    center = inst.coords.mean(axis=0)
    local = _rotate(inst.coords, rng.uniform(0, 2 * math.pi), center) - center
    radius = np.linalg.norm(local, axis=1).max() + 0.5
    extent = np.abs(cloud.coords).max()
    for _ in range(20):
        target = rng.uniform(-extent, extent, 2)
        if np.linalg.norm(cloud.coords - target, axis=1).min() > radius:
            break
    else:
        return cloud
    copy_ = inst.copy()
    moved = local + target
    copy_.x, copy_.y = moved[:, 0].copy(), moved[:, 1].copy()
    copy_.track_id[:] = cloud.track_id.max() + 1
    return RadarPointCloud.concat([cloud, copy_])


def augment(cloud: RadarPointCloud, cfg: AugmentConfig, rng: np.random.Generator) -> RadarPointCloud:
    """Instance copy, then scaling, rotation about the origin and coordinate jitter.

    Only coordinates change; Doppler, RCS and labels are carried over.
    """
    out = cloud.copy()
    if cfg.instance_prob > 0 and rng.uniform() < cfg.instance_prob:
        out = _instance_copy(out, rng)
    coords = out.coords
    lo, hi = cfg.scale_range
    if hi > lo or lo != 1.0:
        coords = coords * rng.uniform(lo, hi)
    if cfg.rotation_range > 0:
        coords = _rotate(coords, rng.uniform(0, cfg.rotation_range))
    if cfg.jitter_sigma > 0:
        coords = coords + rng.normal(0, cfg.jitter_sigma, coords.shape)
    out.x, out.y = coords[:, 0].copy(), coords[:, 1].copy()
    return out


# -- epoch loop ---------------------------------------------------------------

def _plan(model: GaussianRadarTransformer, cloud: RadarPointCloud, cache: dict | None):
    if cache is None:
        return model.plan(cloud.coords, cloud.features).as_tensors(model.dtype)
    key = id(cloud)
    if key not in cache:
        # the cloud is stored alongside so its id cannot be reused
        cache[key] = (cloud, model.plan(cloud.coords, cloud.features).as_tensors(model.dtype))
    return cache[key][1]


def batch_loss(model: GaussianRadarTransformer, clouds, loss_cfg: LossConfig,
               plans: dict | None = None) -> torch.Tensor:
    """Loss over the concatenated points of a batch; padding copies are ignored."""
    logits, labels, keep = [], [], []
    for cloud in clouds:
        logits.append(model(cloud.features, cloud.coords, _plan(model, cloud, plans)))
        labels.append(cloud.label)
        keep.append(~cloud.padding)
    return total_loss(torch.cat(logits), np.concatenate(labels), loss_cfg, np.concatenate(keep))


def evaluate(model: GaussianRadarTransformer, clouds, include_padding: bool = False,
             plans: dict | None = None) -> ConfusionMatrix:
    """Confusion matrix over ``clouds``; ``plans`` caches geometry between calls."""
    cm = ConfusionMatrix(model.config.num_classes)
    padded = clouds
    if plans is not None:
        padded = plans.setdefault("padded", {})
        padded = [padded.setdefault(id(c), (c, c.padded(model.config.min_points)))[1] for c in clouds]
    else:
        padded = [c.padded(model.config.min_points) for c in clouds]
    with torch.no_grad():
        for cloud in padded:
            pred = predict(model(cloud.features, cloud.coords, _plan(model, cloud, plans)))
            cm.update(pred, cloud.label, None if include_padding else cloud.padding)
    return cm


def _is_identity(aug: AugmentConfig) -> bool:
    return (aug.scale_range == (1.0, 1.0) and aug.rotation_range == 0
            and aug.jitter_sigma == 0 and aug.instance_prob == 0)


@dataclass
class TrainState:
    epoch: int = 0
    momentum: dict = field(default_factory=dict)
    best_miou: float = -1.0
    best_epoch: int = -1
    best_params: dict | None = None
    trace: list = field(default_factory=list)


def train(
    model: GaussianRadarTransformer,
    train_clouds: list[RadarPointCloud],
    val_clouds: list[RadarPointCloud] | None,
    optim: OptimConfig,
    loss_cfg: LossConfig,
    aug: AugmentConfig,
    seed: int = 0,
    state: TrainState | None = None,
    eval_every: int = 1,
    on_epoch: Callable[[dict, TrainState], None] | None = None,
) -> TrainState:
    """Run (or resume) SGD training; returns the final state with the trace.

    Every random draw comes from generators keyed by ``(seed, epoch)`` and
    ``(seed, epoch, scene)``, so a resumed run matches an uninterrupted one.
    The best validation mIoU snapshot is kept in ``state.best_params``.
    """
    if not train_clouds:
        raise ValueError("training set is empty")
    state = state or TrainState()
    params = dict(model.named_parameters())
    min_points = model.config.min_points
    static = _is_identity(aug)
    if static:
        # without augmentation every epoch sees the same geometry
        train_clouds = [c.padded(min_points) for c in train_clouds]
    train_plans = {} if static else None
    val_plans: dict = {}
    for epoch in range(state.epoch, optim.epochs):
        lr = cosine_lr(epoch, optim)
        order = np.random.default_rng([seed, epoch]).permutation(len(train_clouds))
        losses = []
        for start in range(0, len(order), optim.batch_size):
            batch = []
            for idx in order[start:start + optim.batch_size]:
                if static:
                    batch.append(train_clouds[idx])
                    continue
                rng = np.random.default_rng([seed, epoch, int(idx)])
                batch.append(augment(train_clouds[idx], aug, rng).padded(min_points))
            loss = batch_loss(model, batch, loss_cfg, train_plans)
            backward(loss, params.values())
            sgd_step(params, state.momentum, lr, optim.momentum)
            losses.append(loss.item())
        record = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
                  "val_miou": None, "val_macro_f1": None}
        last = epoch == optim.epochs - 1
        if val_clouds and ((epoch + 1) % eval_every == 0 or last):
            cm = evaluate(model, val_clouds, plans=val_plans)
            record["val_miou"] = cm.iou()[1]
            record["val_macro_f1"] = cm.f1()[1]
            if record["val_miou"] > state.best_miou:
                state.best_miou = record["val_miou"]
                state.best_epoch = epoch
                state.best_params = copy.deepcopy(model.state_dict())
        state.epoch = epoch + 1
        state.trace.append(record)
        if on_epoch is not None:
            on_epoch(record, state)
    if state.best_params is None:
        state.best_params = copy.deepcopy(model.state_dict())
        state.best_epoch = state.epoch - 1
    return state


def config_dicts(optim: OptimConfig, loss: LossConfig, aug: AugmentConfig) -> dict:
    return {"optim": asdict(optim), "loss": asdict(loss), "augment": asdict(aug)}
