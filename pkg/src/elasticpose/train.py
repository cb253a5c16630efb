"""Super-network training: key-frame phase, then multi-frame propagation.

Every step forwards the biggest, the smallest, and `n_random` random
sub-networks (sandwich rule) and applies one aggregated gradient step. The
biggest pass is supervised by ground-truth heatmaps only; its detached
predictions serve as soft labels for the other passes, which optimize
0.5 * MSE(gt) + 0.5 * MSE(soft) (equal weighting).

In the propagation phase the key network is frozen, frame t consumes the
previous frame's *predicted* heatmaps, and gradients flow through the
propagated heatmaps across frames. The biggest/smallest passes use the
corner CNN for every frame with fusion choices sampled at random; random
passes sample a unique (spatial, temporal) genome per frame.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .elastic import SlicedBatchNorm2d
from .genome import (
    SearchSpace,
    SpatialGenome,
    TemporalGenome,
    corner,
    sample_random,
    sample_temporal,
)
from .posekit import HEATMAP_STRIDE, VideoSample, encode
from .supernet import PoseSuperNet, StandaloneNet

GT_WEIGHT = 0.5
SOFT_WEIGHT = 0.5


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 16
    lr: float = 1e-3
    n_random: int = 2
    t_frames: int = 3
    seed: int = 0
    lr_schedule: str = "step"  # "step" (decay at 80%/92%) or "cosine"
    sigma: float = 2.0
    augment: bool = True

    def __post_init__(self):
        if self.t_frames < 2:
            raise ValueError("propagation training requires t_frames >= 2")
        if self.n_random < 0:
            raise ValueError("n_random must be nonnegative")


@dataclass(frozen=True)
class StepRecord:
    step: int
    pass_type: str  # biggest | smallest | random | plain
    gt_loss: float
    soft_loss: float | None
    total_loss: float


@dataclass
class TrainHistory:
    records: list[StepRecord] = field(default_factory=list)

    def losses_by_step(self):
        out: dict[int, float] = {}
        for r in self.records:
            out[r.step] = out.get(r.step, 0.0) + r.total_loss
        return [out[k] for k in sorted(out)]

    def csv_lines(self):
        yield "step,pass_type,gt_loss,soft_loss,total_loss"
        for r in self.records:
            soft = "" if r.soft_loss is None else f"{r.soft_loss:.6g}"
            yield f"{r.step},{r.pass_type},{r.gt_loss:.6g},{soft},{r.total_loss:.6g}"


def _lr_factor(schedule, epoch, total_epochs):
    if schedule == "step":
        if epoch >= math.ceil(0.92 * total_epochs):
            return 0.01
        if epoch >= math.ceil(0.80 * total_epochs):
            return 0.1
        return 1.0
    if schedule == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * epoch / max(total_epochs, 1)))
    raise ValueError(f"unknown lr schedule {schedule!r}")


def _set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def _check_finite(value, step, pass_type):
    if not math.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite loss {value} at step {step} ({pass_type} pass); "
            "lower the learning rate or check the data"
        )


def _shuffled_batches(n, batch_size, rng):
    order = list(range(n))
    rng.shuffle(order)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _flip_images(x):
    return torch.flip(x, dims=[-1])


# ---------------------------------------------------------------------------
# dataset -> tensors


def spatial_arrays(samples: list[VideoSample], sigma):
    """All frames of all sequences as independent (image, target) pairs."""
    images, targets = [], []
    for s in samples:
        t_total, _, h, w = s.frames.shape
        hm_size = (h // HEATMAP_STRIDE, w // HEATMAP_STRIDE)
        for t in range(t_total):
            images.append(s.frames[t])
            targets.append(encode(s.keypoints[t], s.visibility[t], hm_size, sigma))
    return torch.from_numpy(np.stack(images)), torch.from_numpy(np.stack(targets))


def video_arrays(samples: list[VideoSample], sigma):
    """Sequences as (S, T+1, ...) image and target-heatmap tensors."""
    frames = torch.from_numpy(np.stack([s.frames for s in samples]))
    targets = []
    for s in samples:
        t_total, _, h, w = s.frames.shape
        hm_size = (h // HEATMAP_STRIDE, w // HEATMAP_STRIDE)
        targets.append(
            np.stack(
                [encode(s.keypoints[t], s.visibility[t], hm_size, sigma) for t in range(t_total)]
            )
        )
    return frames, torch.from_numpy(np.stack(targets))


# ---------------------------------------------------------------------------
# key-frame phase


def train_spatial(
    supernet: PoseSuperNet,
    space: SearchSpace,
    images: torch.Tensor,
    targets: torch.Tensor,
    config: TrainConfig,
) -> TrainHistory:
    """Sandwich-rule training of the key-frame super-network weights."""
    rng = random.Random(config.seed)
    optimizer = torch.optim.Adam(supernet.parameters(), lr=config.lr)
    biggest = corner(space, "biggest")
    smallest = corner(space, "smallest")
    history = TrainHistory()
    supernet.train()
    step = 0
    for epoch in range(config.epochs):
        _set_lr(optimizer, config.lr * _lr_factor(config.lr_schedule, epoch, config.epochs))
        for idx in _shuffled_batches(len(images), config.batch_size, rng):
            x, y = images[idx], targets[idx]
            if config.augment and rng.random() < 0.5:
                x, y = _flip_images(x), _flip_images(y)
            genomes = [("biggest", biggest), ("smallest", smallest)]
            genomes += [("random", sample_random(space, rng)) for _ in range(config.n_random)]

            optimizer.zero_grad(set_to_none=True)
            total = None
            soft = None
            for pass_type, genome in genomes:
                pred = supernet.forward_key(x, genome)
                gt_loss = F.mse_loss(pred, y)
                if pass_type == "biggest":
                    loss = gt_loss
                    soft = pred.detach()
                    soft_val = None
                else:
                    soft_loss = F.mse_loss(pred, soft)
                    loss = GT_WEIGHT * gt_loss + SOFT_WEIGHT * soft_loss
                    soft_val = soft_loss.item()
                _check_finite(loss.item(), step, pass_type)
                total = loss if total is None else total + loss
                history.records.append(
                    StepRecord(step, pass_type, gt_loss.item(), soft_val, loss.item())
                )
            total.backward()
            optimizer.step()
            step += 1
    supernet.eval()
    return history


# ---------------------------------------------------------------------------
# propagation phase


def _sandwich_video_archs(space, t_frames, rng, corner_genome=None):
    """Per-frame genomes for one pass: fixed corner CNN with random fusion
    choices, or a fully random (spatial, temporal) draw per frame."""
    archs = []
    for _ in range(t_frames):
        if corner_genome is not None:
            archs.append(
                TemporalGenome(
                    spatial=corner_genome,
                    fusion_op=rng.choice(list(space.fusion_ops)),
                    fusion_stage=rng.choice(list(space.fusion_stages)),
                )
            )
        else:
            archs.append(sample_temporal(space, rng))
    return archs


def train_temporal(
    key_net: StandaloneNet,
    tnet: PoseSuperNet,
    space: SearchSpace,
    frames: torch.Tensor,
    targets: torch.Tensor,
    config: TrainConfig,
) -> TrainHistory:
    """Multi-frame propagation training of the temporal super-network; the key
    network stays frozen and supplies frame-0 heatmaps."""
    t_frames = frames.shape[1] - 1
    if t_frames < config.t_frames:
        raise ValueError(
            f"sequences have {t_frames} non-key frames, config expects {config.t_frames}"
        )
    rng = random.Random(config.seed)
    key_net.eval()
    for p in key_net.parameters():
        p.requires_grad_(False)
    optimizer = torch.optim.Adam(tnet.parameters(), lr=config.lr)
    biggest = corner(space, "biggest")
    smallest = corner(space, "smallest")
    history = TrainHistory()
    tnet.train()
    step = 0
    t_use = config.t_frames
    for epoch in range(config.epochs):
        _set_lr(optimizer, config.lr * _lr_factor(config.lr_schedule, epoch, config.epochs))
        for idx in _shuffled_batches(frames.shape[0], config.batch_size, rng):
            x, y = frames[idx], targets[idx]
            if config.augment and rng.random() < 0.5:
                x, y = _flip_images(x), _flip_images(y)
            with torch.no_grad():
                h0 = key_net(x[:, 0])

            passes = [
                ("biggest", _sandwich_video_archs(space, t_use, rng, biggest)),
                ("smallest", _sandwich_video_archs(space, t_use, rng, smallest)),
            ]
            passes += [
                ("random", _sandwich_video_archs(space, t_use, rng))
                for _ in range(config.n_random)
            ]

            optimizer.zero_grad(set_to_none=True)
            total = None
            soft_by_frame: list[torch.Tensor] = []
            for pass_type, archs in passes:
                h = h0
                gt_sum = 0.0
                soft_sum = 0.0
                loss = None
                for t in range(1, t_use + 1):
                    pred = tnet.forward_temporal(x[:, t], h, archs[t - 1])
                    gt_loss = F.mse_loss(pred, y[:, t])
                    if pass_type == "biggest":
                        frame_loss = gt_loss
                        soft_by_frame.append(pred.detach())
                    else:
                        soft_loss = F.mse_loss(pred, soft_by_frame[t - 1])
                        frame_loss = GT_WEIGHT * gt_loss + SOFT_WEIGHT * soft_loss
                        soft_sum += soft_loss.item()
                    gt_sum += gt_loss.item()
                    loss = frame_loss if loss is None else loss + frame_loss
                    h = pred
                _check_finite(loss.item(), step, pass_type)
                total = loss if total is None else total + loss
                history.records.append(
                    StepRecord(
                        step,
                        pass_type,
                        gt_sum,
                        None if pass_type == "biggest" else soft_sum,
                        loss.item(),
                    )
                )
            total.backward()
            optimizer.step()
            step += 1
    tnet.eval()
    return history


def train_plain(
    net: nn.Module, images: torch.Tensor, targets: torch.Tensor, config: TrainConfig
) -> TrainHistory:
    """Ordinary supervised heatmap regression (no elastic machinery); used for
    the no-fusion per-frame baselines."""
    rng = random.Random(config.seed)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr)
    history = TrainHistory()
    net.train()
    step = 0
    for epoch in range(config.epochs):
        _set_lr(optimizer, config.lr * _lr_factor(config.lr_schedule, epoch, config.epochs))
        for idx in _shuffled_batches(len(images), config.batch_size, rng):
            x, y = images[idx], targets[idx]
            if config.augment and rng.random() < 0.5:
                x, y = _flip_images(x), _flip_images(y)
            optimizer.zero_grad(set_to_none=True)
            pred = net(x)
            loss = F.mse_loss(pred, y)
            _check_finite(loss.item(), step, "plain")
            loss.backward()
            optimizer.step()
            history.records.append(
                StepRecord(step, "plain", loss.item(), None, loss.item())
            )
            step += 1
    net.eval()
    return history


def init_temporal_from_spatial(tnet: PoseSuperNet, snet: PoseSuperNet):
    """Reload the trained key-frame weights as the temporal super-network's
    initialization (fusion parameters keep their fresh init)."""
    result = tnet.load_state_dict(snet.state_dict(), strict=False)
    if result.unexpected_keys:
        raise ValueError(f"unexpected keys during reload: {result.unexpected_keys}")
    return result.missing_keys


# ---------------------------------------------------------------------------
# normalization statistics


def recalibrate_statistics(net, genome, calibration_batches):
    """Recompute running normalization statistics under the sliced forward.

    `net` is a super-network (genome required) or a standalone net (genome
    ignored). Each calibration batch is an images tensor, or an
    (images, prev_heatmaps) pair for temporal forwards. Weights untouched;
    calling twice with the same batches yields identical statistics.
    """
    if not calibration_batches:
        raise ValueError("at least one calibration batch required")
    was_training = net.training
    if isinstance(net, PoseSuperNet):
        bns = [m for m in net.modules() if isinstance(m, SlicedBatchNorm2d)]
        for bn in bns:
            bn.begin_calibration()
        with torch.no_grad():
            for batch in calibration_batches:
                _calibration_forward(net, genome, batch)
        for bn in bns:
            bn.finish_calibration()
    else:
        bns = [m for m in net.modules() if isinstance(m, nn.BatchNorm2d)]
        saved_momentum = [bn.momentum for bn in bns]
        for bn in bns:
            bn.reset_running_stats()
            bn.momentum = None  # cumulative averaging
        net.train()
        with torch.no_grad():
            for batch in calibration_batches:
                if isinstance(batch, (tuple, list)):
                    net(*batch)
                else:
                    net(batch)
        for bn, m in zip(bns, saved_momentum):
            bn.momentum = m
    net.train(was_training)


def _calibration_forward(net, genome, batch):
    if isinstance(genome, TemporalGenome):
        if not isinstance(batch, (tuple, list)) or len(batch) != 2:
            raise ValueError("temporal calibration batches must be (images, prev_heatmaps)")
        net.forward_temporal(batch[0], batch[1], genome)
    else:
        images = batch[0] if isinstance(batch, (tuple, list)) else batch
        net.forward_key(images, genome)
