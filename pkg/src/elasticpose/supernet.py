"""ResNet-50-style elastic super-network for heatmap pose estimation.

Layout: 7x7 stride-2 stem conv + 3x3 stride-2 max pool (1/4 resolution), four
bottleneck stages at 1/8, 1/8, 1/16, 1/32, three stride-2 deconv layers back
to 1/4, and a 1x1 output conv producing one heatmap channel per joint. The
temporal variant adds a fusion module that injects the previous frame's
heatmaps after a selected stage.

The decoder output is bilinearly snapped to exactly (H/4, W/4) when the input
extent is not a multiple of 32, so heatmap resolution is independent of the
genome and of input divisibility beyond 4.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .elastic import (
    ElasticConv2d,
    SlicedBatchNorm2d,
    attention_hidden,
    conv_slice,
    deconv_slice,
    elastic_attention_forward,
    elastic_depth_forward,
    make_attention,
)
from .genome import (
    SearchSpace,
    SpatialGenome,
    TemporalGenome,
    validate,
)

class ElasticBottleneck(nn.Module):
    """1x1 entry conv, elastic KxK grouped middle conv (carries the stride),
    1x1 exit conv, projection shortcut on stage-entry blocks, optional
    attention applied to the block output."""

    def __init__(self, max_in, max_width, max_kernel, stride, expansion, attention_kind=None):
        super().__init__()
        self.expansion = expansion
        max_out = max_width * expansion
        self.conv1 = ElasticConv2d(max_in, max_width, 1)
        self.bn1 = SlicedBatchNorm2d(max_width)
        self.conv2 = ElasticConv2d(max_width, max_width, max_kernel, stride=stride)
        self.bn2 = SlicedBatchNorm2d(max_width)
        self.conv3 = ElasticConv2d(max_width, max_out, 1)
        self.bn3 = SlicedBatchNorm2d(max_out)
        self.has_proj = stride != 1 or max_in != max_out
        if self.has_proj:
            self.proj = ElasticConv2d(max_in, max_out, 1, stride=stride)
            self.proj_bn = SlicedBatchNorm2d(max_out)
        self.attn = make_attention(attention_kind, max_out) if attention_kind else None

    def forward(self, x, width, kernel, group, attention):
        out_w = width * self.expansion
        identity = self.proj_bn(self.proj(x, out_w, 1)) if self.has_proj else x
        y = F.relu(self.bn1(self.conv1(x, width, 1)), inplace=True)
        y = F.relu(self.bn2(self.conv2(y, width, kernel, group)), inplace=True)
        y = self.bn3(self.conv3(y, out_w, 1))
        y = F.relu(y + identity, inplace=True)
        if self.attn is not None:
            y = elastic_attention_forward(y, attention, self.attn)
        return y


class FusionModule(nn.Module):
    """Searchable temporal fusion: previous-frame heatmaps are projected by a
    per-stage 1x1 conv, bilinearly resized to the selected feature map, fused
    by add / mul / cat, and restored to the feature width by a 1x1 merge conv.
    Add and mul share a merge conv per stage; cat has its own (double-width
    input). Projection and merge are plain convs, no norm or activation."""

    def __init__(self, stage_max_channels, joints):
        super().__init__()
        self.stage_max_channels = tuple(stage_max_channels)
        self.joints = joints
        self.proj = nn.ModuleList(
            ElasticConv2d(joints, c, 1, bias=True) for c in stage_max_channels
        )
        self.merge_addmul = nn.ModuleList(
            ElasticConv2d(c, c, 1, bias=True) for c in stage_max_channels
        )
        self.merge_cat_weight = nn.ParameterList(
            nn.Parameter(torch.empty(c, 2 * c, 1, 1)) for c in stage_max_channels
        )
        self.merge_cat_bias = nn.ParameterList(
            nn.Parameter(torch.zeros(c)) for c in stage_max_channels
        )
        for w in self.merge_cat_weight:
            nn.init.kaiming_normal_(w, mode="fan_out", nonlinearity="relu")

    def cat_merge_slice(self, stage_index, width):
        """(width, 2*width, 1, 1) filter: first-width slots of the feature half
        and of the heatmap half of the stored double-width filter."""
        w = self.merge_cat_weight[stage_index]
        c_max = self.stage_max_channels[stage_index]
        return torch.cat([w[:width, :width], w[:width, c_max : c_max + width]], dim=1)

    def forward(self, features, heatmaps, op, stage, width):
        """`stage` is 1-based, matching the genome's fusion_stage field."""
        s = stage - 1
        p = self.proj[s](heatmaps, width, 1)
        p = F.interpolate(p, size=features.shape[-2:], mode="bilinear", align_corners=False)
        if op == "add":
            return self.merge_addmul[s](features + p, width, 1)
        if op == "mul":
            return self.merge_addmul[s](features * p, width, 1)
        if op == "cat":
            w = self.cat_merge_slice(s, width)
            return F.conv2d(torch.cat([features, p], dim=1), w, self.merge_cat_bias[s][:width])
        raise ValueError(f"unknown fusion op {op!r}")


class PoseSuperNet(nn.Module):
    """Weight-sharing super-network; any sub-network is selected per forward by
    a genome. One trainer owns the weights; after training, concurrent
    read-only forwards are safe."""

    def __init__(self, space: SearchSpace, joints: int, temporal: bool = False):
        super().__init__()
        if space.expansion != 1:
            raise ValueError("elastic super-network expects the expansion-1 template")
        self.space = space
        self.joints = joints
        self.temporal = temporal

        stem_max = max(space.stem_width_values())
        self.stem_conv = ElasticConv2d(3, stem_max, 7, stride=2)
        self.stem_bn = SlicedBatchNorm2d(stem_max)
        self.pool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)

        stages = []
        max_in = stem_max
        for srange, stride in zip(space.stages, space.stage_strides):
            w_max = max(srange.width_values())
            k_max = max(srange.kernel_choices)
            attn_kind = space.attention_kind if srange.attention_allowed else None
            blocks = [
                ElasticBottleneck(
                    max_in if i == 0 else w_max * space.expansion,
                    w_max,
                    k_max,
                    stride if i == 0 else 1,
                    space.expansion,
                    attn_kind,
                )
                for i in range(max(srange.depth_values()))
            ]
            stages.append(nn.ModuleList(blocks))
            max_in = w_max * space.expansion
        self.stages = nn.ModuleList(stages)

        head = []
        for hrange in space.head:
            h_max = max(hrange.width_values())
            head.append(
                nn.ModuleDict(
                    {
                        "deconv": ElasticConv2d(
                            max_in, h_max, max(hrange.kernel_choices), stride=2, deconv=True
                        ),
                        "bn": SlicedBatchNorm2d(h_max),
                    }
                )
            )
            max_in = h_max
        self.head = nn.ModuleList(head)
        self.final_conv = ElasticConv2d(max_in, joints, 1, bias=True)
        nn.init.normal_(self.final_conv.weight, std=0.001)

        if temporal:
            stage_out = [max(r.width_values()) * space.expansion for r in space.stages]
            self.fusion = FusionModule(stage_out, joints)
        else:
            self.fusion = None

    # ------------------------------------------------------------------
    def _check(self, genome):
        violations = validate(genome, self.space)
        if violations:
            raise ValueError("invalid genome: " + "; ".join(map(str, violations)))

    def _stem(self, x, genome):
        x = F.relu(self.stem_bn(self.stem_conv(x, genome.stem_width, 7)), inplace=True)
        return self.pool(x)

    def _run_stage(self, x, stage_index, choice):
        blocks = self.stages[stage_index]
        return elastic_depth_forward(
            blocks, choice.depth, x, choice.width, choice.kernel, choice.group, choice.attention
        )

    def _head(self, x, genome, out_size):
        for unit, choice in zip(self.head, genome.head):
            x = unit["deconv"](x, choice.width, choice.kernel, choice.group)
            x = F.relu(unit["bn"](x), inplace=True)
        x = self.final_conv(x, self.joints, 1)
        if x.shape[-2:] != out_size:
            x = F.interpolate(x, size=out_size, mode="bilinear", align_corners=False)
        return x

    @staticmethod
    def _out_size(images):
        h, w = images.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"input extent must be divisible by 4, got {h}x{w}")
        return (h // 4, w // 4)

    def forward_key(self, images, genome: SpatialGenome):
        """Image -> (B, J, H/4, W/4) heatmaps for the bound spatial genome."""
        if genome is None:
            raise ValueError("no genome bound; pass a SpatialGenome")
        self._check(genome)
        out_size = self._out_size(images)
        x = self._stem(images, genome)
        for s, choice in enumerate(genome.stages):
            x = self._run_stage(x, s, choice)
        return self._head(x, genome, out_size)

    def fuse(self, features, heatmaps, op, stage, width):
        if self.fusion is None:
            raise ValueError("fusion is only available on the temporal super-network")
        return self.fusion(features, heatmaps, op, stage, width)

    def forward_temporal(self, images, prev_heatmaps, genome: TemporalGenome):
        """(image, previous heatmaps) -> heatmaps, fusing after the selected stage."""
        if self.fusion is None:
            raise ValueError("fusion is only available on the temporal super-network")
        self._check(genome)
        out_size = self._out_size(images)
        x = self._stem(images, genome.spatial)
        for s, choice in enumerate(genome.spatial.stages):
            x = self._run_stage(x, s, choice)
            if s + 1 == genome.fusion_stage:
                x = self.fusion(
                    x, prev_heatmaps, genome.fusion_op, genome.fusion_stage,
                    choice.width * self.space.expansion,
                )
        return self._head(x, genome.spatial, out_size)

    def forward(self, images, genome, prev_heatmaps=None):
        if isinstance(genome, TemporalGenome) and prev_heatmaps is not None:
            return self.forward_temporal(images, prev_heatmaps, genome)
        if isinstance(genome, TemporalGenome):
            raise ValueError("temporal genome requires prev_heatmaps")
        return self.forward_key(images, genome)

    # ------------------------------------------------------------------
    def materialize(self, genome) -> "StandaloneNet":
        """Copy the sliced weights into a compact standalone network with no
        elastic machinery; forwards match the sliced super-network forward."""
        self._check(genome)
        if isinstance(genome, TemporalGenome) and self.fusion is None:
            raise ValueError("temporal genome requires a temporal super-network")
        net = StandaloneNet(self.space, genome, self.joints)
        net.load_from_supernet(self)
        net.eval()
        return net


def active_parameter_masks(net: PoseSuperNet, genome) -> dict:
    """Boolean mask per named parameter marking the entries a forward with
    `genome` touches. Entries outside the masks must receive exactly zero
    gradient (the gradient-locality contract of weight sharing)."""
    spatial = genome.spatial if isinstance(genome, TemporalGenome) else genome
    masks = {name: torch.zeros_like(p, dtype=torch.bool) for name, p in net.named_parameters()}

    def conv(name, out_ch, in_slots, kernel):
        w = masks[f"{name}.weight"]
        k_max = w.shape[-1]
        c = (k_max - kernel) // 2
        w[:out_ch, :in_slots, c : c + kernel, c : c + kernel] = True
        if f"{name}.bias" in masks:
            masks[f"{name}.bias"][:out_ch] = True

    def bn(name, width):
        masks[f"{name}.weight"][:width] = True
        masks[f"{name}.bias"][:width] = True

    def attention(name, width):
        kind = net.space.attention_kind
        if kind == "gc":
            masks[f"{name}.context.weight"][:, :width] = True
            masks[f"{name}.t1.weight"][:, :width] = True
            masks[f"{name}.t1.bias"][:] = True
            masks[f"{name}.norm.weight"][:] = True
            masks[f"{name}.norm.bias"][:] = True
            masks[f"{name}.t2.weight"][:width] = True
            masks[f"{name}.t2.bias"][:width] = True
        else:
            masks[f"{name}.fc1.weight"][:, :width] = True
            masks[f"{name}.fc1.bias"][:] = True
            masks[f"{name}.fc2.weight"][:width] = True
            masks[f"{name}.fc2.bias"][:width] = True

    conv("stem_conv", spatial.stem_width, 3, 7)
    bn("stem_bn", spatial.stem_width)

    exp = net.space.expansion
    c_in = spatial.stem_width
    for s, choice in enumerate(spatial.stages):
        c_out = choice.width * exp
        for i in range(choice.depth):
            block_in = c_in if i == 0 else c_out
            name = f"stages.{s}.{i}"
            conv(f"{name}.conv1", choice.width, block_in, 1)
            bn(f"{name}.bn1", choice.width)
            conv(f"{name}.conv2", choice.width, choice.width // choice.group, choice.kernel)
            bn(f"{name}.bn2", choice.width)
            conv(f"{name}.conv3", c_out, choice.width, 1)
            bn(f"{name}.bn3", c_out)
            if net.stages[s][i].has_proj:
                conv(f"{name}.proj", c_out, block_in, 1)
                bn(f"{name}.proj_bn", c_out)
            if choice.attention:
                attention(f"{name}.attn", c_out)
        c_in = c_out

    for j, hc in enumerate(spatial.head):
        conv(f"head.{j}.deconv", hc.width, c_in // hc.group, hc.kernel)
        bn(f"head.{j}.bn", hc.width)
        c_in = hc.width
    conv("final_conv", net.joints, c_in, 1)

    if isinstance(genome, TemporalGenome):
        s = genome.fusion_stage - 1
        c_s = spatial.stages[s].width * exp
        conv(f"fusion.proj.{s}", c_s, net.joints, 1)
        if genome.fusion_op == "cat":
            w = masks[f"fusion.merge_cat_weight.{s}"]
            c_max = net.fusion.stage_max_channels[s]
            w[:c_s, :c_s] = True
            w[:c_s, c_max : c_max + c_s] = True
            masks[f"fusion.merge_cat_bias.{s}"][:c_s] = True
        else:
            conv(f"fusion.merge_addmul.{s}", c_s, c_s, 1)
    return masks


def _copy_bn(dst: nn.BatchNorm2d, src: SlicedBatchNorm2d, width: int):
    dst.weight.data.copy_(src.weight.data[:width])
    dst.bias.data.copy_(src.bias.data[:width])
    dst.running_mean.data.copy_(src.running_mean.data[:width])
    dst.running_var.data.copy_(src.running_var.data[:width])


def _copy_attention(dst, src, width):
    dst.context.weight.data.copy_(src.context.weight.data[:, :width])
    dst.t1.weight.data.copy_(src.t1.weight.data[:, :width])
    dst.t1.bias.data.copy_(src.t1.bias.data)
    dst.norm.weight.data.copy_(src.norm.weight.data)
    dst.norm.bias.data.copy_(src.norm.bias.data)
    dst.t2.weight.data.copy_(src.t2.weight.data[:width])
    dst.t2.bias.data.copy_(src.t2.bias.data[:width])


def _copy_se(dst, src, width):
    dst.fc1.weight.data.copy_(src.fc1.weight.data[:, :width])
    dst.fc1.bias.data.copy_(src.fc1.bias.data)
    dst.fc2.weight.data.copy_(src.fc2.weight.data[:width])
    dst.fc2.bias.data.copy_(src.fc2.bias.data[:width])


class StandaloneBottleneck(nn.Module):
    def __init__(self, c_in, width, kernel, group, stride, expansion, attn_module):
        super().__init__()
        c_out = width * expansion
        self.conv1 = nn.Conv2d(c_in, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(
            width, width, kernel, stride=stride, padding=(kernel - 1) // 2,
            groups=group, bias=False,
        )
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, c_out, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(c_out)
        self.has_proj = stride != 1 or c_in != c_out
        if self.has_proj:
            self.proj = nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False)
            self.proj_bn = nn.BatchNorm2d(c_out)
        self.attn = attn_module

    def forward(self, x):
        identity = self.proj_bn(self.proj(x)) if self.has_proj else x
        y = F.relu(self.bn1(self.conv1(x)), inplace=True)
        y = F.relu(self.bn2(self.conv2(y)), inplace=True)
        y = self.bn3(self.conv3(y))
        y = F.relu(y + identity, inplace=True)
        if self.attn is not None:
            y = self.attn(y)
        return y


class StandaloneNet(nn.Module):
    """Materialized sub-network: ordinary conv/bn modules sized exactly to one
    genome. Carries its own fusion convs when built from a temporal genome."""

    def __init__(self, space: SearchSpace, genome, joints: int):
        super().__init__()
        spatial = genome.spatial if isinstance(genome, TemporalGenome) else genome
        self.space = space
        self.genome = genome
        self.spatial = spatial
        self.joints = joints
        self.fusion_op = genome.fusion_op if isinstance(genome, TemporalGenome) else None
        self.fusion_stage = genome.fusion_stage if isinstance(genome, TemporalGenome) else None

        self.stem_conv = nn.Conv2d(3, spatial.stem_width, 7, stride=2, padding=3, bias=False)
        self.stem_bn = nn.BatchNorm2d(spatial.stem_width)
        self.pool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)

        stages = []
        c_in = spatial.stem_width
        for choice, srange, stride in zip(spatial.stages, space.stages, space.stage_strides):
            hidden = attention_hidden(max(srange.width_values()) * space.expansion)
            blocks = []
            for i in range(choice.depth):
                attn = None
                if choice.attention:
                    attn = make_attention(
                        space.attention_kind, choice.width * space.expansion, hidden
                    )
                blocks.append(
                    StandaloneBottleneck(
                        c_in if i == 0 else choice.width * space.expansion,
                        choice.width,
                        choice.kernel,
                        choice.group,
                        stride if i == 0 else 1,
                        space.expansion,
                        attn,
                    )
                )
            stages.append(nn.ModuleList(blocks))
            c_in = choice.width * space.expansion
        self.stages = nn.ModuleList(stages)

        head = []
        for hc in spatial.head:
            head.append(
                nn.ModuleDict(
                    {
                        "deconv": nn.ConvTranspose2d(
                            c_in, hc.width, hc.kernel, stride=2,
                            padding=(hc.kernel - 2) // 2, groups=hc.group, bias=False,
                        ),
                        "bn": nn.BatchNorm2d(hc.width),
                    }
                )
            )
            c_in = hc.width
        self.head = nn.ModuleList(head)
        self.final_conv = nn.Conv2d(c_in, joints, 1)

        if self.fusion_op is not None:
            s = self.fusion_stage - 1
            c_s = spatial.stages[s].width * space.expansion
            self.fuse_proj = nn.Conv2d(joints, c_s, 1)
            in_c = 2 * c_s if self.fusion_op == "cat" else c_s
            self.fuse_merge = nn.Conv2d(in_c, c_s, 1)

    def load_from_supernet(self, sup: PoseSuperNet):
        g = self.spatial
        self.stem_conv.weight.data.copy_(
            conv_slice(sup.stem_conv.weight, g.stem_width, 3, 7, 1)
        )
        _copy_bn(self.stem_bn, sup.stem_bn, g.stem_width)

        c_in = g.stem_width
        for s, choice in enumerate(g.stages):
            c_out = choice.width * self.space.expansion
            for i in range(choice.depth):
                src, dst = sup.stages[s][i], self.stages[s][i]
                block_in = c_in if i == 0 else c_out
                dst.conv1.weight.data.copy_(
                    conv_slice(src.conv1.weight, choice.width, block_in, 1, 1)
                )
                _copy_bn(dst.bn1, src.bn1, choice.width)
                dst.conv2.weight.data.copy_(
                    conv_slice(
                        src.conv2.weight, choice.width, choice.width, choice.kernel, choice.group
                    )
                )
                _copy_bn(dst.bn2, src.bn2, choice.width)
                dst.conv3.weight.data.copy_(
                    conv_slice(src.conv3.weight, c_out, choice.width, 1, 1)
                )
                _copy_bn(dst.bn3, src.bn3, c_out)
                if dst.has_proj:
                    dst.proj.weight.data.copy_(
                        conv_slice(src.proj.weight, c_out, block_in, 1, 1)
                    )
                    _copy_bn(dst.proj_bn, src.proj_bn, c_out)
                if choice.attention:
                    if self.space.attention_kind == "gc":
                        _copy_attention(dst.attn, src.attn, c_out)
                    else:
                        _copy_se(dst.attn, src.attn, c_out)
            c_in = c_out

        for unit, src_unit, hc in zip(self.head, sup.head, g.head):
            unit["deconv"].weight.data.copy_(
                deconv_slice(src_unit["deconv"].weight, hc.width, c_in, hc.kernel, hc.group)
            )
            _copy_bn(unit["bn"], src_unit["bn"], hc.width)
            c_in = hc.width
        self.final_conv.weight.data.copy_(
            conv_slice(sup.final_conv.weight, self.joints, c_in, 1, 1)
        )
        self.final_conv.bias.data.copy_(sup.final_conv.bias.data[: self.joints])

        if self.fusion_op is not None:
            s = self.fusion_stage - 1
            c_s = self.spatial.stages[s].width * self.space.expansion
            fus = sup.fusion
            self.fuse_proj.weight.data.copy_(fus.proj[s].weight.data[:c_s, : self.joints])
            self.fuse_proj.bias.data.copy_(fus.proj[s].bias.data[:c_s])
            if self.fusion_op == "cat":
                self.fuse_merge.weight.data.copy_(fus.cat_merge_slice(s, c_s).data)
                self.fuse_merge.bias.data.copy_(fus.merge_cat_bias[s].data[:c_s])
            else:
                self.fuse_merge.weight.data.copy_(
                    conv_slice(fus.merge_addmul[s].weight, c_s, c_s, 1, 1)
                )
                self.fuse_merge.bias.data.copy_(fus.merge_addmul[s].bias.data[:c_s])

    def _fuse(self, x, prev_heatmaps):
        p = self.fuse_proj(prev_heatmaps)
        p = F.interpolate(p, size=x.shape[-2:], mode="bilinear", align_corners=False)
        if self.fusion_op == "add":
            return self.fuse_merge(x + p)
        if self.fusion_op == "mul":
            return self.fuse_merge(x * p)
        return self.fuse_merge(torch.cat([x, p], dim=1))

    def forward(self, images, prev_heatmaps=None):
        if self.fusion_op is not None and prev_heatmaps is None:
            raise ValueError("temporal standalone net requires prev_heatmaps")
        h, w = images.shape[-2:]
        out_size = (h // 4, w // 4)
        x = F.relu(self.stem_bn(self.stem_conv(images)), inplace=True)
        x = self.pool(x)
        for s, blocks in enumerate(self.stages):
            for block in blocks:
                x = block(x)
            if self.fusion_op is not None and s + 1 == self.fusion_stage:
                x = self._fuse(x, prev_heatmaps)
        for unit in self.head:
            x = F.relu(unit["bn"](unit["deconv"](x)), inplace=True)
        x = self.final_conv(x)
        if x.shape[-2:] != out_size:
            x = F.interpolate(x, size=out_size, mode="bilinear", align_corners=False)
        return x
