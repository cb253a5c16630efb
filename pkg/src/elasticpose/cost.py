"""Analytical FLOPs (MAC) and parameter counting for genomes.

Counting rule: one multiply-accumulate = 1 FLOP. Convolutions and transposed
convolutions are both charged at output resolution,

    flops = H_out * W_out * K^2 * (C_in / G) * C_out,

the dense-equivalent convention used by the common profiler tools in this
literature. Bias, normalization, activation, pooling and bilinear resizing
cost zero. Attention is charged as its 1x1 convs only: squeeze-excite as two
channel maps at 1x1 spatial extent; global-context as the HxW context mask
conv plus two transform convs.
"""

from __future__ import annotations

from dataclasses import dataclass

from .elastic import attention_hidden
from .genome import SearchSpace, SpatialGenome, TemporalGenome, VideoGenome, validate


@dataclass(frozen=True)
class CostItem:
    name: str
    flops: int
    params: int


@dataclass(frozen=True)
class CostReport:
    per_layer: tuple[CostItem, ...]

    @property
    def total_flops(self) -> int:
        return sum(item.flops for item in self.per_layer)

    @property
    def total_params(self) -> int:
        return sum(item.params for item in self.per_layer)

    def gmacs(self) -> float:
        return self.total_flops / 1e9

    def csv_lines(self):
        yield "layer,flops,params"
        for item in self.per_layer:
            yield f"{item.name},{item.flops},{item.params}"

    def summary(self) -> str:
        return (
            f"total {self.total_flops} MACs ({self.gmacs():.3f} GMACs), "
            f"{self.total_params} params ({self.total_params / 1e6:.2f}M)"
        )


@dataclass(frozen=True)
class VideoCostReport:
    """Per-frame cost breakdown: frame 0 is the key frame, frames 1..T the
    propagated frames. The budget constraint applies to the non-key total."""

    per_frame: tuple[CostReport, ...]

    @property
    def total_flops(self) -> int:
        return sum(r.total_flops for r in self.per_frame)

    @property
    def non_key_flops(self) -> int:
        return sum(r.total_flops for r in self.per_frame[1:])

    @property
    def average_flops(self) -> float:
        return self.total_flops / len(self.per_frame)

    @property
    def average_params(self) -> float:
        return sum(r.total_params for r in self.per_frame) / len(self.per_frame)


def conv_cost(h_out, w_out, kernel, c_in, c_out, groups=1, bias=False):
    """(flops, params) of one convolution at output resolution."""
    if c_in % groups or c_out % groups:
        raise ValueError(f"groups {groups} must divide channels ({c_in}, {c_out})")
    weight = kernel * kernel * (c_in // groups) * c_out
    return h_out * w_out * weight, weight + (c_out if bias else 0)


def conv_out_size(n, kernel, stride, padding):
    return (n + 2 * padding - kernel) // stride + 1


def _attention_cost(kind, c, h, w, hidden, bias=True):
    b = c if bias else 0
    if kind == "se":
        flops = c * hidden + hidden * c
        params = c * hidden + hidden + hidden * c + b
    elif kind == "gc":
        flops = h * w * c + c * hidden + hidden * c
        params = c + c * hidden + hidden + 2 * hidden + hidden * c + b
    else:
        raise ValueError(f"unknown attention kind {kind!r}")
    return flops, params


def genome_cost(
    genome, space: SearchSpace, input_size: tuple[int, int], joints: int
) -> CostReport:
    """Walk the network structure a genome selects and sum the layer costs.

    Accepts spatial and temporal genomes; a temporal genome adds the fusion
    projection and merge convs at the selected stage.
    """
    violations = validate(genome, space)
    if violations:
        raise ValueError("invalid genome: " + "; ".join(map(str, violations)))
    fusion = None
    if isinstance(genome, TemporalGenome):
        fusion = (genome.fusion_op, genome.fusion_stage)
        genome = genome.spatial

    h, w = input_size
    items = []

    h = conv_out_size(h, 7, 2, 3)
    w = conv_out_size(w, 7, 2, 3)
    f, p = conv_cost(h, w, 7, 3, genome.stem_width)
    items.append(CostItem("stem", f, p))
    h = conv_out_size(h, 3, 2, 1)
    w = conv_out_size(w, 3, 2, 1)

    heatmap_size = (input_size[0] // 4, input_size[1] // 4)
    c_in = genome.stem_width
    exp = space.expansion
    for s, (choice, srange, stride) in enumerate(
        zip(genome.stages, space.stages, space.stage_strides), start=1
    ):
        c_out = choice.width * exp
        hidden = attention_hidden(max(srange.width_values()) * exp)
        for i in range(choice.depth):
            block_in = c_in if i == 0 else c_out
            block_stride = stride if i == 0 else 1
            h_in, w_in = h, w
            if i == 0:
                h = conv_out_size(h, choice.kernel, block_stride, (choice.kernel - 1) // 2)
                w = conv_out_size(w, choice.kernel, block_stride, (choice.kernel - 1) // 2)
            name = f"stage{s}.block{i}"
            f, p = conv_cost(h_in, w_in, 1, block_in, choice.width)
            items.append(CostItem(f"{name}.conv1", f, p))
            f, p = conv_cost(h, w, choice.kernel, choice.width, choice.width, choice.group)
            items.append(CostItem(f"{name}.conv2", f, p))
            f, p = conv_cost(h, w, 1, choice.width, c_out)
            items.append(CostItem(f"{name}.conv3", f, p))
            if block_stride != 1 or block_in != c_out:
                f, p = conv_cost(h, w, 1, block_in, c_out)
                items.append(CostItem(f"{name}.proj", f, p))
            if choice.attention:
                f, p = _attention_cost(space.attention_kind, c_out, h, w, hidden)
                items.append(CostItem(f"{name}.attn", f, p))
        c_in = c_out
        if fusion is not None and fusion[1] == s:
            op = fusion[0]
            f, p = conv_cost(heatmap_size[0], heatmap_size[1], 1, joints, c_out, bias=True)
            items.append(CostItem(f"fusion.proj.stage{s}", f, p))
            merge_in = 2 * c_out if op == "cat" else c_out
            f, p = conv_cost(h, w, 1, merge_in, c_out, bias=True)
            items.append(CostItem(f"fusion.merge.{op}.stage{s}", f, p))

    for i, hc in enumerate(genome.head, start=1):
        h, w = 2 * h, 2 * w
        f, p = conv_cost(h, w, hc.kernel, c_in, hc.width, hc.group)
        items.append(CostItem(f"head.deconv{i}", f, p))
        c_in = hc.width
    f, p = conv_cost(h, w, 1, c_in, joints, bias=True)
    items.append(CostItem("head.final", f, p))
    return CostReport(per_layer=tuple(items))


def video_cost(
    video_genome: VideoGenome, space: SearchSpace, input_size: tuple[int, int], joints: int
) -> VideoCostReport:
    """Per-frame costs: frame 0 from the key genome, frames 1..T from the
    temporal genomes; the average spans all T+1 frames."""
    frames = [genome_cost(video_genome.key, space, input_size, joints)]
    frames.extend(genome_cost(fg, space, input_size, joints) for fg in video_genome.frames)
    return VideoCostReport(per_frame=tuple(frames))


def feasible(video_genome, space, input_size, joints, budget) -> bool:
    """Budget test of the search constraint: sum of non-key frame FLOPs <= C."""
    return video_cost(video_genome, space, input_size, joints).non_key_flops <= budget
