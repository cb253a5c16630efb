"""Elastic operators: the index calculus mapping a genome choice onto a slice
of shared super-network weights.

Conventions (shared by the elastic forward and by materialization, so the two
paths are bit-compatible):

* width: keep the first W output channels and the first W_prev input channels;
* kernel: keep the center K x K window of the stored K_max x K_max filter
  (K and K_max must share parity so the center slice is integral);
* group: tailor the sliced (W, W_prev, K, K) filter to (W, W_prev/G, K, K) by
  keeping the first W_prev/G input-channel slots, then run it as a standard
  G-grouped convolution (group g reads input channels [g*W_prev/G, ...) and
  writes output channels [g*W/G, ...));
* depth: run only the first D blocks of a stage;
* attention: apply the block's attention module, or the identity.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


def slice_kernel(weight: torch.Tensor, kernel: int) -> torch.Tensor:
    """Center K x K view of a filter stored at K_max x K_max."""
    k_max = weight.shape[-1]
    if kernel > k_max:
        raise ValueError(f"kernel {kernel} exceeds stored size {k_max}")
    if (k_max - kernel) % 2 != 0:
        raise ValueError(f"kernel {kernel} and stored size {k_max} differ in parity")
    c = (k_max - kernel) // 2
    return weight[..., c : c + kernel, c : c + kernel]


def slice_width(weight: torch.Tensor, out_channels: int, in_channels: int) -> torch.Tensor:
    """First `out_channels` filters and first `in_channels` input slots."""
    o_max, i_max = weight.shape[0], weight.shape[1]
    if out_channels > o_max or in_channels > i_max:
        raise ValueError(
            f"slice ({out_channels}, {in_channels}) exceeds stored ({o_max}, {i_max})"
        )
    return weight[:out_channels, :in_channels]


def conv_slice(
    weight: torch.Tensor, out_channels: int, in_channels: int, kernel: int, groups: int
) -> torch.Tensor:
    """Sliced, group-tailored filter of shape (W, W_prev/G, K, K)."""
    if in_channels % groups or out_channels % groups:
        raise ValueError(f"groups {groups} must divide channels ({in_channels}, {out_channels})")
    w = slice_kernel(slice_width(weight, out_channels, in_channels), kernel)
    return w[:, : in_channels // groups]


def deconv_slice(
    weight: torch.Tensor, out_channels: int, in_channels: int, kernel: int, groups: int
) -> torch.Tensor:
    """Same tailoring as `conv_slice`, rearranged into the transposed-conv
    layout (W_prev, W/G, K, K) expected by `conv_transpose2d`."""
    w = conv_slice(weight, out_channels, in_channels, kernel, groups)
    opg, ipg = out_channels // groups, in_channels // groups
    w = w.reshape(groups, opg, ipg, kernel, kernel)
    return w.permute(0, 2, 1, 3, 4).reshape(in_channels, opg, kernel, kernel)


class ElasticConv2d(nn.Module):
    """Convolution (or stride-2 transposed convolution) over a shared maximal
    filter; each forward selects (out width, kernel, groups) and the input
    width follows the incoming tensor."""

    def __init__(self, max_in, max_out, max_kernel, stride=1, deconv=False, bias=False):
        super().__init__()
        self.max_in = max_in
        self.max_out = max_out
        self.max_kernel = max_kernel
        self.stride = stride
        self.deconv = deconv
        self.weight = nn.Parameter(torch.empty(max_out, max_in, max_kernel, max_kernel))
        nn.init.kaiming_normal_(self.weight, mode="fan_out", nonlinearity="relu")
        self.bias = nn.Parameter(torch.zeros(max_out)) if bias else None

    def forward(self, x, out_channels, kernel, groups=1):
        in_channels = x.shape[1]
        b = self.bias[:out_channels] if self.bias is not None else None
        if self.deconv:
            w = deconv_slice(self.weight, out_channels, in_channels, kernel, groups)
            return F.conv_transpose2d(
                x, w, b, stride=self.stride, padding=(kernel - 2) // 2, groups=groups
            )
        w = conv_slice(self.weight, out_channels, in_channels, kernel, groups)
        return F.conv2d(x, w, b, stride=self.stride, padding=(kernel - 1) // 2, groups=groups)


class SlicedBatchNorm2d(nn.Module):
    """BatchNorm over full-width parameters sliced to the active channel count.

    Running statistics live in full-width buffers and are updated in place
    through the active slice. No per-choice statistics are stored; sampled
    sub-networks get their statistics recomputed by `begin_calibration` /
    `finish_calibration` (exact pooled batch statistics, idempotent for a
    fixed calibration set).
    """

    def __init__(self, max_features, eps=1e-5, momentum=0.1):
        super().__init__()
        self.max_features = max_features
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(max_features))
        self.bias = nn.Parameter(torch.zeros(max_features))
        self.register_buffer("running_mean", torch.zeros(max_features))
        self.register_buffer("running_var", torch.ones(max_features))
        self._calibrating = False
        self._cal_mean = None
        self._cal_var = None
        self._cal_batches = 0

    def begin_calibration(self):
        self._calibrating = True
        self._cal_mean = torch.zeros(self.max_features)
        self._cal_var = torch.zeros(self.max_features)
        self._cal_batches = 0
        self._cal_width = 0

    def finish_calibration(self):
        if self._cal_batches > 0:
            c = self._cal_width
            self.running_mean[:c] = self._cal_mean[:c] / self._cal_batches
            self.running_var[:c] = self._cal_var[:c] / self._cal_batches
        self._calibrating = False
        self._cal_mean = None
        self._cal_var = None

    def forward(self, x):
        c = x.shape[1]
        if self._calibrating:
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            n = x.numel() // c
            self._cal_mean[:c] += mean
            self._cal_var[:c] += var * (n / max(n - 1, 1))
            self._cal_batches += 1
            self._cal_width = c
            xn = (x - mean[None, :, None, None]) / torch.sqrt(
                var[None, :, None, None] + self.eps
            )
            return xn * self.weight[:c, None, None] + self.bias[:c, None, None]
        return F.batch_norm(
            x,
            self.running_mean[:c],
            self.running_var[:c],
            self.weight[:c],
            self.bias[:c],
            self.training,
            self.momentum,
            self.eps,
        )


ATTENTION_REDUCTION = 16


def attention_hidden(channels: int) -> int:
    """Fixed bottleneck width of the attention transforms (not elastic)."""
    return max(channels // ATTENTION_REDUCTION, 1)


class SqueezeExcite(nn.Module):
    """Channel squeeze-excitation gate; width-facing axes slice elastically,
    the hidden width stays fixed at construction."""

    def __init__(self, channels, hidden=None):
        super().__init__()
        self.channels = channels
        self.hidden = hidden if hidden is not None else attention_hidden(channels)
        self.fc1 = nn.Conv2d(channels, self.hidden, 1)
        self.fc2 = nn.Conv2d(self.hidden, channels, 1)

    def forward(self, x):
        c = x.shape[1]
        s = x.mean(dim=(2, 3), keepdim=True)
        if c == self.channels:
            s = F.relu(self.fc1(s), inplace=True)
            gate = torch.sigmoid(self.fc2(s))
        else:
            s = F.relu(F.conv2d(s, self.fc1.weight[:, :c], self.fc1.bias), inplace=True)
            gate = torch.sigmoid(F.conv2d(s, self.fc2.weight[:c], self.fc2.bias[:c]))
        return x * gate


class GlobalContext(nn.Module):
    """Global-context attention with addition fusion: softmax-pooled context,
    two 1x1 transform convs around a LayerNorm, added back to the input."""

    def __init__(self, channels, hidden=None):
        super().__init__()
        self.channels = channels
        self.hidden = hidden if hidden is not None else attention_hidden(channels)
        self.context = nn.Conv2d(channels, 1, 1, bias=False)
        self.t1 = nn.Conv2d(channels, self.hidden, 1)
        self.norm = nn.LayerNorm([self.hidden, 1, 1])
        self.t2 = nn.Conv2d(self.hidden, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        full = c == self.channels
        attn = self.context(x) if full else F.conv2d(x, self.context.weight[:, :c])
        attn = F.softmax(attn.reshape(b, 1, h * w), dim=2)
        ctx = torch.bmm(x.reshape(b, c, h * w), attn.transpose(1, 2)).reshape(b, c, 1, 1)
        t = self.t1(ctx) if full else F.conv2d(ctx, self.t1.weight[:, :c], self.t1.bias)
        t = F.relu(self.norm(t), inplace=True)
        t = self.t2(t) if full else F.conv2d(t, self.t2.weight[:c], self.t2.bias[:c])
        return x + t


def make_attention(kind, channels, hidden=None):
    if kind == "se":
        return SqueezeExcite(channels, hidden)
    if kind == "gc":
        return GlobalContext(channels, hidden)
    raise ValueError(f"unknown attention kind {kind!r}")


def elastic_depth_forward(blocks, depth, x, *args, **kwargs):
    """Compose exactly the first `depth` blocks; the rest contribute neither
    computation nor gradient. Depth 0 is rejected because the first block may
    change the spatial resolution."""
    if not 1 <= depth <= len(blocks):
        raise ValueError(f"depth {depth} outside [1, {len(blocks)}]")
    for block in list(blocks)[:depth]:
        x = block(x, *args, **kwargs)
    return x


def elastic_attention_forward(x, enabled, module):
    """Attention module when selected, identity mapping otherwise."""
    return module(x) if enabled else x
