"""Experiment orchestration shared by the CLI and the acceptance suite.

Each step is a plain function over in-memory objects; the CLI adds the run
directories, persistence, and plots on top.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cost import genome_cost
from .genome import SearchSpace, SpatialGenome, TemporalGenome, VideoGenome, corner
from .posekit import average_precision, decode
from .search import (
    SearchConfig,
    SearchResult,
    min_frame_cost,
    search_spatial,
)
from .supernet import PoseSuperNet, StandaloneNet
from .train import (
    TrainConfig,
    init_temporal_from_spatial,
    recalibrate_statistics,
    spatial_arrays,
    train_plain,
    train_spatial,
    train_temporal,
    video_arrays,
)


def spatial_budget(space, input_size, joints, frac: float) -> float:
    """Budget interpolated between the smallest and biggest corner costs."""
    lo = genome_cost(corner(space, "smallest"), space, input_size, joints).total_flops
    hi = genome_cost(corner(space, "biggest"), space, input_size, joints).total_flops
    return lo + frac * (hi - lo)


def frame_budget(space, input_size, joints, frac: float) -> float:
    """Per-frame allowance for video searches, interpolated between the
    cheapest and the costliest single-frame temporal genome."""
    lo = min_frame_cost(space, input_size, joints)
    big = corner(space, "biggest")
    hi = max(
        genome_cost(TemporalGenome(big, op, stage), space, input_size, joints).total_flops
        for op in space.fusion_ops
        for stage in space.fusion_stages
    )
    return lo + frac * (hi - lo)


def calibration_image_batches(samples, batch_size=16, max_batches=4):
    """Image-only calibration batches drawn from the leading sequences."""
    images = torch.from_numpy(np.stack([f for s in samples for f in s.frames]))
    batches = []
    for i in range(0, min(len(images), batch_size * max_batches), batch_size):
        batches.append(images[i : i + batch_size])
    return batches


def calibration_pair_batches(key_net, samples, batch_size=16, max_batches=4):
    """(image, previous-frame heatmaps) pairs for temporal calibration, with
    the heatmaps teacher-forced from the frozen key network."""
    images, prevs = [], []
    with torch.no_grad():
        for s in samples:
            frames = torch.from_numpy(s.frames)
            h = key_net(frames[:1])[0]
            for t in range(1, s.frames.shape[0]):
                images.append(frames[t])
                prevs.append(h)
                h = key_net(frames[t : t + 1])[0]
    batches = []
    for i in range(0, min(len(images), batch_size * max_batches), batch_size):
        batches.append(
            (torch.stack(images[i : i + batch_size]), torch.stack(prevs[i : i + batch_size]))
        )
    return batches


@dataclass
class SpatialStage:
    supernet: PoseSuperNet
    history: object
    search: SearchResult
    key_genome: SpatialGenome
    key_net: StandaloneNet


def run_spatial_stage(
    train_samples,
    eval_samples,
    space: SearchSpace,
    train_cfg: TrainConfig,
    search_cfg: SearchConfig,
    torch_seed: int = 0,
) -> SpatialStage:
    """Train the key-frame super-network, search it, and materialize the best
    genome into the frozen key network."""
    torch.manual_seed(torch_seed)
    supernet = PoseSuperNet(space, joints=search_cfg.joints)
    images, targets = spatial_arrays(train_samples, train_cfg.sigma)
    history = train_spatial(supernet, space, images, targets, train_cfg)
    calib = calibration_image_batches(train_samples)
    result = search_spatial(supernet, space, eval_samples, calib, search_cfg)
    key_genome = result.best.genome
    recalibrate_statistics(supernet, key_genome, calib)
    key_net = supernet.materialize(key_genome)
    return SpatialStage(supernet, history, result, key_genome, key_net)


@dataclass
class TemporalStage:
    tnet: PoseSuperNet
    history: object
    calib_pairs: list


def run_temporal_stage(
    key_net: StandaloneNet,
    spatial_supernet: PoseSuperNet,
    train_samples,
    space: SearchSpace,
    train_cfg: TrainConfig,
    joints: int,
    torch_seed: int = 0,
) -> TemporalStage:
    """Train the temporal super-network (initialized from the key-frame
    weights) with multi-frame propagation."""
    torch.manual_seed(torch_seed + 1)
    tnet = PoseSuperNet(space, joints=joints, temporal=True)
    init_temporal_from_spatial(tnet, spatial_supernet)
    frames, targets = video_arrays(train_samples, train_cfg.sigma)
    history = train_temporal(key_net, tnet, space, frames, targets, train_cfg)
    calib_pairs = calibration_pair_batches(key_net, train_samples)
    return TemporalStage(tnet, history, calib_pairs)


def materialize_video_nets(tnet: PoseSuperNet, vg: VideoGenome, calib_pairs):
    nets = []
    for fg in vg.frames:
        net = tnet.materialize(fg)
        recalibrate_statistics(net, None, calib_pairs)
        net.eval()
        nets.append(net)
    return nets


def nofusion_baseline_nets(
    tnet: PoseSuperNet,
    vg: VideoGenome,
    train_samples,
    train_cfg: TrainConfig,
    calib_images,
):
    """Equal-FLOPs no-fusion baseline: the searched per-frame CNN architectures
    materialized without their fusion modules, then retrained on single frames
    with the identical schedule."""
    images, targets = spatial_arrays(train_samples, train_cfg.sigma)
    nets = []
    for fg in vg.frames:
        net = tnet.materialize(fg.spatial)
        train_plain(net, images, targets, train_cfg)
        recalibrate_statistics(net, None, calib_images)
        net.eval()
        nets.append(net)
    return nets


def evaluate_image_baseline(frame_nets, samples, config: SearchConfig):
    """Per-frame image-only evaluation pooled over non-key frames, mirroring
    the propagation metric."""
    instances = []
    frames = torch.from_numpy(np.stack([s.frames for s in samples]))
    with torch.no_grad():
        for t in range(1, len(frame_nets) + 1):
            preds = frame_nets[t - 1](frames[:, t])
            maps = preds.cpu().numpy()
            for i, s in enumerate(samples):
                kp, _ = decode(maps[i])
                instances.append((kp, s.keypoints[t], s.visibility[t], s.scale))
    return average_precision(instances)
