"""Constrained random search over genomes.

Candidates are rejection-sampled from a seeded stream (duplicates skipped)
until `num_samples` budget-feasible genomes are found or the draw cap
(`draw_cap_factor * num_samples`) is hit. Every candidate is statistic-
recalibrated and scored by OKS-AP on the evaluation set; ranking is by score
descending, then total FLOPs ascending, then the canonical genome JSON.

The video search draws each frame's (spatial, temporal) genome independently,
so frames may receive unequal budgets, subject to
sum_t flops(arch_t) <= budget over the non-key frames. `search_shared` is the
ablation baseline that replicates one genome across all frames.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np
import torch

from .cost import genome_cost, video_cost
from .genome import (
    SearchSpace,
    SpatialGenome,
    TemporalGenome,
    VideoGenome,
    corner,
    sample_random,
    sample_temporal,
)
from .posekit import average_precision, decode
from .supernet import PoseSuperNet, StandaloneNet
from .train import recalibrate_statistics


class InfeasibleBudgetError(ValueError):
    def __init__(self, budget, min_cost, what):
        self.budget = budget
        self.min_cost = min_cost
        super().__init__(
            f"budget {budget:.3e} MACs is below the minimum achievable {what} cost "
            f"{min_cost:.3e} MACs"
        )


@dataclass(frozen=True)
class SearchConfig:
    budget: float
    num_samples: int = 64
    seed: int = 0
    input_size: tuple[int, int] = (64, 48)
    joints: int = 5
    t_frames: int = 3
    draw_cap_factor: int = 100
    eval_batch: int = 32

    def __post_init__(self):
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if self.num_samples < 1:
            raise ValueError("num_samples must be at least 1")


@dataclass(frozen=True)
class Candidate:
    genome: SpatialGenome | TemporalGenome | VideoGenome
    score: float
    flops: int


@dataclass(frozen=True)
class SearchResult:
    candidates: tuple[Candidate, ...]  # ranked, best first
    provenance: dict = field(default_factory=dict)

    @property
    def best(self) -> Candidate:
        return self.candidates[0]

    def csv_lines(self):
        yield "rank,score,flops,genome"
        for i, c in enumerate(self.candidates):
            yield f"{i},{c.score:.6f},{c.flops},{c.genome.to_json()}"


def _rank(entries):
    return tuple(
        sorted(entries, key=lambda c: (-c.score, c.flops, c.genome.to_json()))
    )


def min_spatial_cost(space, input_size, joints) -> int:
    return genome_cost(corner(space, "smallest"), space, input_size, joints).total_flops


def min_frame_cost(space, input_size, joints) -> int:
    """Cheapest possible per-frame temporal genome (cheapest fusion choice)."""
    smallest = corner(space, "smallest")
    costs = [
        genome_cost(
            TemporalGenome(smallest, op, stage), space, input_size, joints
        ).total_flops
        for op in space.fusion_ops
        for stage in space.fusion_stages
    ]
    return min(costs)


def _sample_feasible(draw_fn, cost_fn, config: SearchConfig):
    """First `num_samples` distinct feasible draws from the seeded stream."""
    rng = random.Random(config.seed)
    cap = config.draw_cap_factor * config.num_samples
    seen = set()
    accepted = []
    draws = 0
    while len(accepted) < config.num_samples and draws < cap:
        genome = draw_fn(rng)
        draws += 1
        key = genome.to_json()
        if key in seen:
            continue
        seen.add(key)
        flops = cost_fn(genome)
        if flops <= config.budget:
            accepted.append((genome, flops))
    if not accepted:
        raise InfeasibleBudgetError(config.budget, float("nan"), "sampled")
    return accepted, draws


# ---------------------------------------------------------------------------
# evaluation helpers


def _decode_instances(heatmaps: torch.Tensor, gts, viss, scales):
    out = []
    maps = heatmaps.detach().cpu().numpy()
    for i in range(maps.shape[0]):
        pred, _scores = decode(maps[i])
        out.append((pred, gts[i], viss[i], scales[i]))
    return out


def evaluate_images(forward_fn, samples, config: SearchConfig, frame_indices=None):
    """OKS-AP of an image model over selected frames of each sample."""
    instances = []
    images, gts, viss, scales = [], [], [], []
    for s in samples:
        t_total = s.frames.shape[0]
        idxs = range(t_total) if frame_indices is None else frame_indices
        for t in idxs:
            images.append(torch.from_numpy(s.frames[t]))
            gts.append(s.keypoints[t])
            viss.append(s.visibility[t])
            scales.append(s.scale)
    with torch.no_grad():
        for i in range(0, len(images), config.eval_batch):
            batch = torch.stack(images[i : i + config.eval_batch])
            preds = forward_fn(batch)
            instances.extend(
                _decode_instances(
                    preds,
                    gts[i : i + config.eval_batch],
                    viss[i : i + config.eval_batch],
                    scales[i : i + config.eval_batch],
                )
            )
    return average_precision(instances)


def evaluate_propagation(key_net, frame_nets, samples, config: SearchConfig):
    """Propagate each sequence through its per-frame nets; pool the non-key
    frames' predictions into one AP (frames t = 1..T)."""
    t_use = len(frame_nets)
    instances = []
    frames = torch.from_numpy(np.stack([s.frames for s in samples]))
    with torch.no_grad():
        h = key_net(frames[:, 0])
        for t in range(1, t_use + 1):
            h = frame_nets[t - 1](frames[:, t], h)
            instances.extend(
                _decode_instances(
                    h,
                    [s.keypoints[t] for s in samples],
                    [s.visibility[t] for s in samples],
                    [s.scale for s in samples],
                )
            )
    return average_precision(instances)


# ---------------------------------------------------------------------------
# searches


def search_spatial(
    supernet: PoseSuperNet,
    space: SearchSpace,
    eval_samples,
    calib_batches,
    config: SearchConfig,
) -> SearchResult:
    """Spatial search: rejection-sample genomes under the per-model budget,
    recalibrate statistics, score by AP on the evaluation set."""
    min_cost = min_spatial_cost(space, config.input_size, config.joints)
    if config.budget < min_cost:
        raise InfeasibleBudgetError(config.budget, min_cost, "spatial genome")

    def cost_fn(genome):
        return genome_cost(genome, space, config.input_size, config.joints).total_flops

    accepted, draws = _sample_feasible(
        lambda rng: sample_random(space, rng), cost_fn, config
    )
    entries = []
    for genome, flops in accepted:
        recalibrate_statistics(supernet, genome, calib_batches)
        supernet.eval()
        score = evaluate_images(
            lambda batch: supernet.forward_key(batch, genome), eval_samples, config
        )
        entries.append(Candidate(genome, score, flops))
    return SearchResult(
        candidates=_rank(entries),
        provenance={
            "kind": "spatial",
            "seed": config.seed,
            "num_samples": config.num_samples,
            "budget": config.budget,
            "draws": draws,
        },
    )


def _evaluate_video_genome(tnet, key_net, vg, eval_samples, calib_batches, config):
    frame_nets = []
    for fg in vg.frames:
        net = tnet.materialize(fg)
        recalibrate_statistics(net, None, calib_batches)
        net.eval()
        frame_nets.append(net)
    return evaluate_propagation(key_net, frame_nets, eval_samples, config)


def _video_search(
    tnet, key_net, key_genome, space, eval_samples, calib_batches, config, shared, kind
):
    min_cost = config.t_frames * min_frame_cost(space, config.input_size, config.joints)
    if config.budget < min_cost:
        raise InfeasibleBudgetError(config.budget, min_cost, f"{config.t_frames}-frame plan")

    def draw(rng):
        if shared:
            one = sample_temporal(space, rng)
            return VideoGenome(key=key_genome, frames=(one,) * config.t_frames)
        return VideoGenome(
            key=key_genome,
            frames=tuple(sample_temporal(space, rng) for _ in range(config.t_frames)),
        )

    def cost_fn(vg):
        return video_cost(vg, space, config.input_size, config.joints).non_key_flops

    accepted, draws = _sample_feasible(draw, cost_fn, config)
    entries = []
    for vg, flops in accepted:
        score = _evaluate_video_genome(tnet, key_net, vg, eval_samples, calib_batches, config)
        entries.append(Candidate(vg, score, flops))
    return SearchResult(
        candidates=_rank(entries),
        provenance={
            "kind": kind,
            "seed": config.seed,
            "num_samples": config.num_samples,
            "budget": config.budget,
            "t_frames": config.t_frames,
            "draws": draws,
        },
    )


def search_temporal(
    tnet: PoseSuperNet,
    key_net: StandaloneNet,
    key_genome: SpatialGenome,
    space: SearchSpace,
    eval_samples,
    calib_batches,
    config: SearchConfig,
) -> SearchResult:
    """Joint temporal search with automatic per-frame computation allocation:
    maximize pooled AP subject to sum_t flops(arch_t) <= budget."""
    return _video_search(
        tnet, key_net, key_genome, space, eval_samples, calib_batches, config,
        shared=False, kind="temporal",
    )


def search_shared(
    tnet: PoseSuperNet,
    key_net: StandaloneNet,
    key_genome: SpatialGenome,
    space: SearchSpace,
    eval_samples,
    calib_batches,
    config: SearchConfig,
) -> SearchResult:
    """Ablation baseline: one temporal genome shared by every frame."""
    return _video_search(
        tnet, key_net, key_genome, space, eval_samples, calib_batches, config,
        shared=True, kind="shared",
    )
